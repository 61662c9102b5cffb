#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "calscale/harness.hpp"

namespace calscale::harness {

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ','))
    if (!part.empty()) parts.push_back(part);
  return parts;
}

std::vector<std::uint32_t> parse_u32_list(const std::string& text, const char* what) {
  std::vector<std::uint32_t> out;
  for (const auto& p : split_list(text)) {
    try {
      out.push_back(static_cast<std::uint32_t>(std::stoul(p)));
    } catch (const std::exception&) {
      throw ConfigError(std::string("cannot parse ") + what + " entry '" + p + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty list for ") + what);
  return out;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& text, const char* what) {
  std::vector<std::uint64_t> out;
  for (const auto& p : split_list(text)) {
    try {
      out.push_back(std::stoull(p));
    } catch (const std::exception&) {
      throw ConfigError(std::string("cannot parse ") + what + " entry '" + p + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty list for ") + what);
  return out;
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
  std::vector<double> out;
  for (const auto& p : split_list(text)) {
    try {
      out.push_back(std::stod(p));
    } catch (const std::exception&) {
      throw ConfigError(std::string("cannot parse ") + what + " entry '" + p + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty list for ") + what);
  return out;
}

FileFormat format_from_name(const std::string& name) {
  if (name == "binary") return FileFormat::Binary;
  if (name == "text") return FileFormat::Text;
  throw ConfigError("unknown format '" + name + "' (use binary or text)");
}

const char* format_extension(FileFormat f) {
  return f == FileFormat::Binary ? ".bin" : ".txt";
}

std::filesystem::path default_out_dir() {
  if (const char* env = std::getenv("CALSCALE_OUT_DIR")) return env;
  return ".";
}

struct GlobalOpts {
  std::uint64_t seed = 0;
  std::size_t bins = 15;
  std::string format = "binary";
  std::string out;

  FileFormat file_format() const { return format_from_name(format); }
  std::filesystem::path out_dir() const {
    return out.empty() ? default_out_dir() : std::filesystem::path(out);
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"calscale: post-hoc calibration of classifier logits with class-wise loss scaling"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--seed", g.seed, "RNG seed")->capture_default_str();
  app.add_option("--bins", g.bins, "reliability bin count")->capture_default_str();
  app.add_option("--format", g.format, "dataset file format: binary|text")
      ->capture_default_str();
  app.add_option("--out", g.out, "output directory (default: $CALSCALE_OUT_DIR or .)");

  // gen-synthetic ------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic logit dataset");
  struct {
    std::uint32_t classes = 10;
    std::string per_class = "1000";
    std::string margin = "4";
    double scale = 1.0;
    double noise = 1.0;
    std::string output;
  } gen_opt;
  gen->add_option("--classes", gen_opt.classes, "number of classes")->capture_default_str();
  gen->add_option("--per-class", gen_opt.per_class,
                  "samples per class: one value or a comma list")
      ->capture_default_str();
  gen->add_option("--margin", gen_opt.margin,
                  "true-class logit margin: one value or a comma list")
      ->capture_default_str();
  gen->add_option("--scale", gen_opt.scale, "overconfidence scale (> 0)")->capture_default_str();
  gen->add_option("--noise", gen_opt.noise, "logit noise std (>= 0)")->capture_default_str();
  gen->add_option("--output", gen_opt.output, "output file (default <out>/synthetic.<ext>)");
  gen->callback([&]() {
    SyntheticSpec spec;
    spec.class_count = gen_opt.classes;
    spec.samples_per_class = parse_u32_list(gen_opt.per_class, "--per-class");
    spec.class_mean_margin = parse_double_list(gen_opt.margin, "--margin");
    spec.overconfidence_scale = gen_opt.scale;
    spec.noise_std = gen_opt.noise;
    spec.seed = g.seed;
    const auto ds = generate_synthetic(spec);
    const std::filesystem::path out =
        gen_opt.output.empty()
            ? g.out_dir() / (std::string("synthetic") + format_extension(g.file_format()))
            : std::filesystem::path(gen_opt.output);
    save_dataset(ds, out, g.file_format());
    std::cout << "wrote " << out.string() << " (" << ds.sample_count() << " samples, "
              << ds.class_count << " classes)\n";
  });

  // make-lt-split -------------------------------------------------------------
  auto* lt = app.add_subcommand("make-lt-split", "long-tailed subsample of a dataset");
  struct {
    std::string input;
    std::uint32_t base_count = 0;
    double rho = 0.1;
    std::string rounding = "floor";
    std::string output;
  } lt_opt;
  lt->add_option("--input", lt_opt.input, "input dataset")->required();
  lt->add_option("--base-count", lt_opt.base_count, "samples kept for class 0")->required();
  lt->add_option("--rho", lt_opt.rho, "imbalance ratio in (0, 1]")->capture_default_str();
  lt->add_option("--rounding", lt_opt.rounding, "floor|round|ceil")->capture_default_str();
  lt->add_option("--output", lt_opt.output, "output file (default <out>/lt.<ext>)");
  lt->callback([&]() {
    const auto ds = load_dataset(lt_opt.input, g.file_format());
    LTSpec spec;
    spec.base_count = lt_opt.base_count;
    spec.rho = lt_opt.rho;
    spec.class_count = ds.class_count;
    spec.seed = g.seed;
    if (lt_opt.rounding == "floor") spec.rounding = Rounding::Floor;
    else if (lt_opt.rounding == "round") spec.rounding = Rounding::Round;
    else if (lt_opt.rounding == "ceil") spec.rounding = Rounding::Ceil;
    else throw ConfigError("unknown rounding '" + lt_opt.rounding + "'");
    const auto out_ds = make_lt_split(ds, spec);
    const std::filesystem::path out =
        lt_opt.output.empty()
            ? g.out_dir() / (std::string("lt") + format_extension(g.file_format()))
            : std::filesystem::path(lt_opt.output);
    save_dataset(out_ds, out, g.file_format());
    std::cout << "wrote " << out.string() << " (" << out_ds.sample_count() << " samples)\n";
  });

  // split ----------------------------------------------------------------------
  auto* sp = app.add_subcommand("split", "stratified two-way split");
  struct {
    std::string input;
    double fraction = 0.5;
    std::string output_first, output_second;
  } sp_opt;
  sp->add_option("--input", sp_opt.input, "input dataset")->required();
  sp->add_option("--fraction", sp_opt.fraction, "fraction for the first part (0, 1)")
      ->capture_default_str();
  sp->add_option("--output-first", sp_opt.output_first, "default <out>/split_a.<ext>");
  sp->add_option("--output-second", sp_opt.output_second, "default <out>/split_b.<ext>");
  sp->callback([&]() {
    const auto ds = load_dataset(sp_opt.input, g.file_format());
    const auto result = split(ds, sp_opt.fraction, g.seed);
    if (!result.stratified)
      std::cerr << "warning: a class has a single sample; fell back to a global shuffle\n";
    const auto ext = format_extension(g.file_format());
    const std::filesystem::path a = sp_opt.output_first.empty()
                                        ? g.out_dir() / (std::string("split_a") + ext)
                                        : std::filesystem::path(sp_opt.output_first);
    const std::filesystem::path b = sp_opt.output_second.empty()
                                        ? g.out_dir() / (std::string("split_b") + ext)
                                        : std::filesystem::path(sp_opt.output_second);
    save_dataset(result.first, a, g.file_format());
    save_dataset(result.second, b, g.file_format());
    std::cout << "wrote " << a.string() << " (" << result.first.sample_count() << ") and "
              << b.string() << " (" << result.second.sample_count() << ")\n";
  });

  // shared calibration options ------------------------------------------------
  struct CalOpts {
    std::string calibrator = "ts";
    std::string loss = "ce";
    double ls_alpha = 0.05;
    double fl_gamma = 3.0;
    bool per_class_mean = false;
    bool scaling = false;
    std::string normalization = "nd";
    double alpha_init = 1.0, beta_init = 1.5;
    double alpha_min = 1e-3, alpha_max = 1e3;
    double beta_min = 0.0, beta_max = 2.0;
    std::string refresh = "every-epoch";
    std::string optimizer = "auto";
    double lr = 0.02;
    std::size_t epochs = 1000;
    double weight_decay = -1.0;  // -1 = per-calibrator default
    std::string schedule;
    std::size_t pts_top_s = 10, pts_layers = 2, pts_width = 5;
    bool ets_sum_to_one = false;
  };
  auto add_cal_options = [](CLI::App* cmd, CalOpts& o) {
    cmd->add_option("--calibrator", o.calibrator, "ts|ets|pts|cts")->capture_default_str();
    cmd->add_option("--loss", o.loss, "ce|ls|fl")->capture_default_str();
    cmd->add_option("--ls-alpha", o.ls_alpha, "label smoothing mass")->capture_default_str();
    cmd->add_option("--fl-gamma", o.fl_gamma, "focal exponent")->capture_default_str();
    cmd->add_flag("--per-class-mean", o.per_class_mean,
                  "normalize class losses by class size");
    cmd->add_flag("--scaling", o.scaling, "enable class-wise loss scaling");
    cmd->add_option("--normalization", o.normalization, "nd|mm|cm")->capture_default_str();
    cmd->add_option("--alpha-init", o.alpha_init)->capture_default_str();
    cmd->add_option("--beta-init", o.beta_init)->capture_default_str();
    cmd->add_option("--alpha-min", o.alpha_min)->capture_default_str();
    cmd->add_option("--alpha-max", o.alpha_max)->capture_default_str();
    cmd->add_option("--beta-min", o.beta_min)->capture_default_str();
    cmd->add_option("--beta-max", o.beta_max)->capture_default_str();
    cmd->add_option("--refresh", o.refresh, "every-epoch|frozen-after-fit")
        ->capture_default_str();
    cmd->add_option("--optimizer", o.optimizer, "auto|first-order|quasi-newton")
        ->capture_default_str();
    cmd->add_option("--lr", o.lr, "learning rate")->capture_default_str();
    cmd->add_option("--epochs", o.epochs)->capture_default_str();
    cmd->add_option("--weight-decay", o.weight_decay, "default: 0 (0.002 for pts)");
    cmd->add_option("--schedule", o.schedule, "piecewise lr, e.g. 200:0.005,400:0.003,400:0.001");
    cmd->add_option("--pts-top-s", o.pts_top_s)->capture_default_str();
    cmd->add_option("--pts-hidden-layers", o.pts_layers)->capture_default_str();
    cmd->add_option("--pts-hidden-width", o.pts_width)->capture_default_str();
    cmd->add_flag("--ets-sum-to-one", o.ets_sum_to_one,
                  "constrain ETS ensemble weights to sum to 1");
  };
  auto settings_from = [](const CalOpts& o, const GlobalOpts& g, const CLI::App* cmd) {
    RunSettings s;
    s.calibrator = kind_from_name(o.calibrator);
    s.pts_arch = PtsArch{o.pts_top_s, o.pts_layers, o.pts_width};
    if (o.loss == "ce") s.loss.kind = losses::LossKind::CE;
    else if (o.loss == "ls") s.loss.kind = losses::LossKind::LS;
    else if (o.loss == "fl") s.loss.kind = losses::LossKind::FL;
    else throw ConfigError("unknown loss '" + o.loss + "'");
    s.loss.ls_alpha = o.ls_alpha;
    s.loss.fl_gamma = o.fl_gamma;
    s.loss.per_class_mean = o.per_class_mean;
    s.scaling_enabled = o.scaling;
    s.scaling.normalization = scaling::normalization_from_name(o.normalization);
    s.scaling.alpha_init = o.alpha_init;
    s.scaling.beta_init = o.beta_init;
    s.scaling.alpha_bounds = {o.alpha_min, o.alpha_max};
    s.scaling.beta_bounds = {o.beta_min, o.beta_max};
    if (o.refresh == "every-epoch")
      s.scaling.refresh = scaling::WeightRefresh::EveryEpoch;
    else if (o.refresh == "frozen-after-fit")
      s.scaling.refresh = scaling::WeightRefresh::FrozenAfterFit;
    else
      throw ConfigError("unknown refresh mode '" + o.refresh + "'");
    s.bins = g.bins;
    s.seed = g.seed;
    s.ets_sum_to_one = o.ets_sum_to_one;

    auto opt = default_optim(s.calibrator, s.loss.kind);
    opt.seed = g.seed;
    if (o.optimizer == "first-order") opt.method = optim::Method::FirstOrder;
    else if (o.optimizer == "quasi-newton") opt.method = optim::Method::QuasiNewton;
    else if (o.optimizer != "auto") throw ConfigError("unknown optimizer '" + o.optimizer + "'");
    if (cmd->count("--lr")) {
      opt.learning_rate = o.lr;
      opt.schedule.reset();
    }
    if (cmd->count("--schedule")) opt.schedule = optim::Schedule::parse(o.schedule);
    if (cmd->count("--epochs")) {
      opt.epochs = o.epochs;
      if (opt.schedule && opt.schedule->total_epochs() != opt.epochs) opt.schedule.reset();
    }
    if (o.weight_decay >= 0.0) opt.weight_decay = o.weight_decay;
    opt.validate();
    s.optim = opt;
    return s;
  };

  // calibrate ------------------------------------------------------------------
  auto* cab = app.add_subcommand("calibrate", "fit a calibrator on validation logits and "
                                              "evaluate on test logits");
  struct {
    std::string val, test;
    CalOpts cal;
  } cab_opt;
  cab->add_option("--val", cab_opt.val, "validation logit file")->required();
  cab->add_option("--test", cab_opt.test, "test logit file")->required();
  add_cal_options(cab, cab_opt.cal);
  cab->callback([&]() {
    RunConfig config;
    config.val_path = cab_opt.val;
    config.test_path = cab_opt.test;
    config.format = g.file_format();
    config.settings = settings_from(cab_opt.cal, g, cab);
    config.out_dir = g.out_dir();
    const auto outcome = run_calibrate(config);
    std::cout << "ece_before " << outcome.test_before.ece << "\n"
              << "ece_after " << outcome.test_after.ece << "\n"
              << "accuracy_before " << outcome.test_before.accuracy << "\n"
              << "accuracy_after " << outcome.test_after.accuracy << "\n"
              << "artifacts " << config.out_dir.string() << "\n";
  });

  // evaluate / report -----------------------------------------------------------
  struct EvalOpts {
    std::string data;
    std::string calibrator_file;
  };
  auto eval_report = [&](const EvalOpts& o) {
    const auto ds = load_dataset(o.data, g.file_format());
    Matrix logits = to_matrix(ds);
    if (!o.calibrator_file.empty()) {
      const auto cal = Calibrator::load(o.calibrator_file);
      logits = cal.apply(logits);
    }
    return metrics::evaluate(probabilities(logits), ds.labels, g.bins);
  };

  auto* ev = app.add_subcommand("evaluate", "print metrics for a logit file");
  EvalOpts ev_opt;
  ev->add_option("--data", ev_opt.data, "logit file")->required();
  ev->add_option("--calibrator-file", ev_opt.calibrator_file, "apply a saved calibrator first");
  ev->callback([&]() {
    const auto report = eval_report(ev_opt);
    metrics::write_report(report, std::cout);
  });

  auto* rep = app.add_subcommand("report", "write report.txt and bins.tsv for a logit file");
  EvalOpts rep_opt;
  rep->add_option("--data", rep_opt.data, "logit file")->required();
  rep->add_option("--calibrator-file", rep_opt.calibrator_file, "apply a saved calibrator first");
  rep->callback([&]() {
    const auto report = eval_report(rep_opt);
    std::error_code ec;
    std::filesystem::create_directories(g.out_dir(), ec);
    if (ec) throw IoError("cannot create output directory: " + g.out_dir().string());
    {
      std::ofstream os(g.out_dir() / "report.txt", std::ios::trunc);
      if (!os) throw IoError("cannot open for writing: " + (g.out_dir() / "report.txt").string());
      metrics::write_report(report, os);
      os.flush();
      if (!os) throw IoError("write failed: " + (g.out_dir() / "report.txt").string());
    }
    {
      std::ofstream os(g.out_dir() / "bins.tsv", std::ios::trunc);
      if (!os) throw IoError("cannot open for writing: " + (g.out_dir() / "bins.tsv").string());
      metrics::write_bins(report.bins, os);
      os.flush();
      if (!os) throw IoError("write failed: " + (g.out_dir() / "bins.tsv").string());
    }
    metrics::write_report(report, std::cout);
    std::cout << "artifacts " << g.out_dir().string() << "\n";
  });

  // sweep -----------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "method x calibrator x seed grid");
  struct {
    std::string val, test;
    std::string methods = "ce,ls,fl,ours";
    std::string calibrators = "ts,ets,pts,cts";
    std::string seeds = "0";
    std::size_t epochs = 0;
    std::size_t jobs = 1;
    std::size_t pts_top_s = 10, pts_layers = 2, pts_width = 5;
  } sw_opt;
  sw->add_option("--val", sw_opt.val, "validation logit file")->required();
  sw->add_option("--test", sw_opt.test, "test logit file")->required();
  sw->add_option("--methods", sw_opt.methods, "comma list of ce,ls,fl,ours")
      ->capture_default_str();
  sw->add_option("--calibrators", sw_opt.calibrators, "comma list of ts,ets,pts,cts")
      ->capture_default_str();
  sw->add_option("--seeds", sw_opt.seeds, "comma list of seeds")->capture_default_str();
  sw->add_option("--epochs", sw_opt.epochs, "override the 1000-epoch default");
  sw->add_option("--jobs", sw_opt.jobs, "parallel cells")->capture_default_str();
  sw->add_option("--pts-top-s", sw_opt.pts_top_s)->capture_default_str();
  sw->add_option("--pts-hidden-layers", sw_opt.pts_layers)->capture_default_str();
  sw->add_option("--pts-hidden-width", sw_opt.pts_width)->capture_default_str();
  sw->callback([&]() {
    SweepConfig config;
    config.val_path = sw_opt.val;
    config.test_path = sw_opt.test;
    config.format = g.file_format();
    config.methods.clear();
    for (const auto& m : split_list(sw_opt.methods)) config.methods.push_back(method_from_name(m));
    config.calibrators.clear();
    for (const auto& c : split_list(sw_opt.calibrators))
      config.calibrators.push_back(kind_from_name(c));
    config.seeds = parse_u64_list(sw_opt.seeds, "--seeds");
    if (sw_opt.epochs > 0) config.epochs_override = sw_opt.epochs;
    config.pts_arch = PtsArch{sw_opt.pts_top_s, sw_opt.pts_layers, sw_opt.pts_width};
    config.bins = g.bins;
    config.out_dir = g.out_dir();
    config.jobs = sw_opt.jobs;
    const auto result = run_sweep(config);
    write_sweep_table(result, config, std::cout);
    std::size_t failed = 0;
    for (const auto& c : result.cells) failed += !c.ok;
    if (failed > 0) std::cout << failed << " cell(s) failed; see sweep_cells.tsv\n";
  });

  // toy-analysis ------------------------------------------------------------------
  auto* toy = app.add_subcommand("toy-analysis",
                                 "train a single temperature on the k worst classes and trace "
                                 "loss spread vs calibration error");
  struct {
    std::string data;
    std::string eval_data;
    std::size_t k = 3;
    std::size_t epochs = 1000;
    double lr = 0.02;
    std::string optimizer = "quasi-newton";
  } toy_opt;
  toy->add_option("--data", toy_opt.data, "training logit file")->required();
  toy->add_option("--eval-data", toy_opt.eval_data, "dataset for the ECE column (default: --data)");
  toy->add_option("--k", toy_opt.k, "subset size")->capture_default_str();
  toy->add_option("--epochs", toy_opt.epochs)->capture_default_str();
  toy->add_option("--lr", toy_opt.lr)->capture_default_str();
  toy->add_option("--optimizer", toy_opt.optimizer, "first-order|quasi-newton")
      ->capture_default_str();
  toy->callback([&]() {
    const auto train = load_dataset(toy_opt.data, g.file_format());
    std::optional<LogitDataset> holdout;
    if (!toy_opt.eval_data.empty()) holdout = load_dataset(toy_opt.eval_data, g.file_format());
    optim::OptimSpec opt;
    opt.method = toy_opt.optimizer == "first-order" ? optim::Method::FirstOrder
                                                    : optim::Method::QuasiNewton;
    opt.learning_rate = toy_opt.lr;
    opt.epochs = toy_opt.epochs;
    opt.seed = g.seed;
    opt.validate();
    const auto result =
        run_toy_analysis(train, holdout ? &*holdout : nullptr, toy_opt.k, opt, g.bins);
    std::error_code ec;
    std::filesystem::create_directories(g.out_dir(), ec);
    if (ec) throw IoError("cannot create output directory: " + g.out_dir().string());
    const auto path = g.out_dir() / "toy_trace.tsv";
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write_toy_table(result, os);
    os.flush();
    if (!os) throw IoError("write failed: " + path.string());
    std::cout << "correlation_std_ece "
              << (result.correlation_defined ? std::to_string(result.correlation_std_ece)
                                             : std::string("undefined"))
              << "\nartifacts " << path.string() << "\n";
  });

  // global flags (--seed, --bins, --format, --out) may appear after the
  // subcommand name
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("calscale");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace calscale::harness
