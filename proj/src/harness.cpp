#include "calscale/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <thread>

namespace calscale::harness {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  return os;
}

void finish_out(std::ofstream& os, const std::filesystem::path& path) {
  os.flush();
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace

const char* method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::CE: return "ce";
    case TrainMethod::LS: return "ls";
    case TrainMethod::FL: return "fl";
    case TrainMethod::Ours: return "ours";
  }
  return "?";
}

TrainMethod method_from_name(const std::string& name) {
  if (name == "ce") return TrainMethod::CE;
  if (name == "ls") return TrainMethod::LS;
  if (name == "fl") return TrainMethod::FL;
  if (name == "ours") return TrainMethod::Ours;
  throw ConfigError("unknown method '" + name + "'");
}

losses::LossSpec loss_for_method(TrainMethod m) {
  losses::LossSpec spec;
  switch (m) {
    case TrainMethod::LS: spec.kind = losses::LossKind::LS; break;
    case TrainMethod::FL: spec.kind = losses::LossKind::FL; break;
    default: spec.kind = losses::LossKind::CE; break;
  }
  return spec;
}

optim::OptimSpec default_optim(CalibratorKind cal, losses::LossKind loss) {
  optim::OptimSpec opt;
  opt.epochs = 1000;
  if (cal == CalibratorKind::PTS) {
    opt.method = optim::Method::FirstOrder;
    opt.weight_decay = 0.002;
  } else {
    opt.method = optim::Method::QuasiNewton;
    opt.weight_decay = 0.0;
  }
  if (loss == losses::LossKind::LS || loss == losses::LossKind::FL) {
    optim::Schedule sched;
    sched.segments = {{200, 0.005}, {400, 0.003}, {400, 0.001}};
    opt.schedule = sched;
  } else {
    opt.learning_rate = 0.02;
  }
  return opt;
}

optim::OptimSpec RunSettings::effective_optim() const {
  if (optim) return *optim;
  auto o = default_optim(calibrator, loss.kind);
  o.seed = seed;
  return o;
}

CalibrateOutcome calibrate_run(const LogitDataset& val, const LogitDataset& test,
                               const RunSettings& settings) {
  val.validate();
  test.validate();
  if (val.class_count != test.class_count)
    throw ConfigError("validation and test sets disagree on class count");
  settings.loss.validate();
  auto opt = settings.effective_optim();
  opt.validate();
  if (settings.bins < 1) throw ConfigError("bin count must be >= 1");

  CalibrateOutcome outcome;
  outcome.calibrator =
      Calibrator::make(settings.calibrator, val.class_count, settings.pts_arch, settings.seed);

  const Matrix test_m = to_matrix(test);
  outcome.test_before = metrics::evaluate(probabilities(test_m), test.labels, settings.bins);

  FitSpec fs;
  fs.loss = settings.loss;
  fs.optim = opt;
  if (settings.scaling_enabled) fs.scaling = settings.scaling;
  fs.ets_sum_to_one = settings.ets_sum_to_one;

  auto fr = fit(outcome.calibrator, val, fs);
  outcome.trace = std::move(fr.trace);
  outcome.scaling_state = std::move(fr.scaling_state);

  outcome.test_after =
      metrics::evaluate(probabilities(outcome.calibrator.apply(test_m)), test.labels,
                        settings.bins);
  return outcome;
}

namespace {

void write_trace(const FitTrace& trace, std::ostream& os) {
  if (trace.epochs.empty()) return;
  const std::size_t c = trace.epochs.front().class_losses.size();
  const bool with_weights = !trace.epochs.front().weights.empty();
  os << "epoch\ttotal_loss\tclass_loss_std";
  for (std::size_t i = 0; i < c; ++i) os << "\tL_" << i;
  if (with_weights)
    for (std::size_t i = 0; i < c; ++i) os << "\tw_" << i;
  os << '\n';
  for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
    const auto& row = trace.epochs[e];
    os << e << '\t' << fmt(row.total_loss) << '\t' << fmt(row.class_loss_std);
    for (double v : row.class_losses) os << '\t' << fmt(v);
    if (with_weights)
      for (double v : row.weights) os << '\t' << fmt(v);
    os << '\n';
  }
  if (trace.diverged) os << "# diverged\n";
}

void write_values(std::ostream& os, const char* key, std::span<const double> v) {
  os << key;
  for (double x : v) os << ' ' << fmt(x);
  os << '\n';
}

void write_run_summary(const RunConfig& config, const CalibrateOutcome& outcome,
                       std::ostream& os) {
  const auto& s = config.settings;
  os << "val_path " << config.val_path.string() << '\n';
  os << "test_path " << config.test_path.string() << '\n';
  os << "format " << (config.format == FileFormat::Binary ? "binary" : "text") << '\n';
  os << "calibrator " << kind_name(s.calibrator) << '\n';
  if (s.calibrator == CalibratorKind::PTS) {
    os << "pts_top_s " << s.pts_arch.top_s << '\n';
    os << "pts_hidden_layers " << s.pts_arch.hidden_layers << '\n';
    os << "pts_hidden_width " << s.pts_arch.hidden_width << '\n';
  }
  os << "loss " << (s.loss.kind == losses::LossKind::CE   ? "ce"
                    : s.loss.kind == losses::LossKind::LS ? "ls"
                                                          : "fl")
     << '\n';
  os << "ls_alpha " << fmt(s.loss.ls_alpha) << '\n';
  os << "fl_gamma " << fmt(s.loss.fl_gamma) << '\n';
  const auto opt = s.effective_optim();
  os << "optimizer "
     << (opt.method == optim::Method::FirstOrder ? "first-order" : "quasi-newton") << '\n';
  if (opt.schedule) {
    os << "schedule";
    for (const auto& [count, lr] : opt.schedule->segments) os << ' ' << count << ':' << fmt(lr);
    os << '\n';
  } else {
    os << "learning_rate " << fmt(opt.learning_rate) << '\n';
  }
  os << "weight_decay " << fmt(opt.weight_decay) << '\n';
  os << "epochs " << opt.epochs << '\n';
  os << "seed " << s.seed << '\n';
  os << "bins " << s.bins << '\n';
  os << "scaling " << (s.scaling_enabled ? "on" : "off") << '\n';
  if (s.scaling_enabled) {
    os << "normalization " << scaling::normalization_name(s.scaling.normalization) << '\n';
    os << "refresh "
       << (s.scaling.refresh == scaling::WeightRefresh::EveryEpoch ? "every-epoch"
                                                                   : "frozen-after-fit")
       << '\n';
  }
  if (outcome.scaling_state) {
    const auto& st = *outcome.scaling_state;
    os << "scaling.alpha " << fmt(st.alpha) << '\n';
    os << "scaling.beta " << fmt(st.beta) << '\n';
    os << "scaling.objective_init " << fmt(st.objective_init) << '\n';
    os << "scaling.objective " << fmt(st.objective) << '\n';
    os << "scaling.optimizer_fallback " << (st.optimizer_fallback ? 1 : 0) << '\n';
    write_values(os, "scaling.weights", st.weights);
    write_values(os, "scaling.L0", st.l0.values);
    write_values(os, "scaling.L1", st.l1.values);
  }
  os << "ece_before " << fmt(outcome.test_before.ece) << '\n';
  os << "ece_after " << fmt(outcome.test_after.ece) << '\n';
  os << "accuracy_before " << fmt(outcome.test_before.accuracy) << '\n';
  os << "accuracy_after " << fmt(outcome.test_after.accuracy) << '\n';
}

void warn_empty_classes(const LogitDataset& ds, const std::string& name) {
  const auto counts = ds.class_counts();
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] == 0)
      std::cerr << "warning: " << name << " has no samples of class " << i << "\n";
}

}  // namespace

CalibrateOutcome run_calibrate(const RunConfig& config) {
  const auto val = load_dataset(config.val_path, config.format);
  const auto test = load_dataset(config.test_path, config.format);
  warn_empty_classes(val, "validation set");
  warn_empty_classes(test, "test set");

  auto outcome = calibrate_run(val, test, config.settings);

  if (!config.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(config.out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + config.out_dir.string());

    outcome.calibrator.save(config.out_dir / "calibrator.txt");
    {
      auto os = open_out(config.out_dir / "report_before.txt");
      metrics::write_report(outcome.test_before, os);
      finish_out(os, config.out_dir / "report_before.txt");
    }
    {
      auto os = open_out(config.out_dir / "report_after.txt");
      metrics::write_report(outcome.test_after, os);
      finish_out(os, config.out_dir / "report_after.txt");
    }
    {
      auto os = open_out(config.out_dir / "bins_before.tsv");
      metrics::write_bins(outcome.test_before.bins, os);
      finish_out(os, config.out_dir / "bins_before.tsv");
    }
    {
      auto os = open_out(config.out_dir / "bins_after.tsv");
      metrics::write_bins(outcome.test_after.bins, os);
      finish_out(os, config.out_dir / "bins_after.tsv");
    }
    {
      auto os = open_out(config.out_dir / "trace.tsv");
      write_trace(outcome.trace, os);
      finish_out(os, config.out_dir / "trace.tsv");
    }
    {
      auto os = open_out(config.out_dir / "run.txt");
      write_run_summary(config, outcome, os);
      finish_out(os, config.out_dir / "run.txt");
    }
  }
  return outcome;
}

SweepResult sweep_on(const LogitDataset& val, const LogitDataset& test,
                     const SweepConfig& config) {
  if (config.methods.empty() || config.calibrators.empty() || config.seeds.empty())
    throw ConfigError("sweep needs at least one method, calibrator and seed");

  SweepResult result;
  for (TrainMethod m : config.methods)
    for (CalibratorKind cal : config.calibrators)
      for (std::uint64_t seed : config.seeds) {
        SweepCell cell;
        cell.method = m;
        cell.calibrator = cal;
        cell.seed = seed;
        result.cells.push_back(cell);
      }

  auto run_cell = [&](SweepCell& cell) {
    try {
      RunSettings s;
      s.calibrator = cell.calibrator;
      s.pts_arch = config.pts_arch;
      s.loss = loss_for_method(cell.method);
      s.scaling_enabled = cell.method == TrainMethod::Ours;
      s.scaling = config.scaling;
      s.bins = config.bins;
      s.seed = cell.seed;
      s.ets_sum_to_one = config.ets_sum_to_one;
      auto opt = default_optim(s.calibrator, s.loss.kind);
      opt.seed = cell.seed;
      if (config.epochs_override) {
        opt.epochs = *config.epochs_override;
        if (opt.schedule) {
          // rescale the 200/400/400 shape onto the overridden budget
          optim::Schedule sched;
          const std::size_t e = *config.epochs_override;
          const std::size_t a = std::max<std::size_t>(1, e / 5);
          const std::size_t b = std::max<std::size_t>(1, 2 * e / 5);
          if (a + 2 * b <= e && e >= 3) {
            sched.segments = {{a, 0.005}, {b, 0.003}, {e - a - b, 0.001}};
          } else {
            sched.segments = {{e, 0.005}};
          }
          opt.schedule = sched;
        }
      }
      s.optim = opt;
      auto outcome = calibrate_run(val, test, s);
      cell.ece_before = outcome.test_before.ece;
      cell.acc_before = outcome.test_before.accuracy;
      cell.ece_after = outcome.test_after.ece;
      cell.acc_after = outcome.test_after.accuracy;
      cell.final_class_loss_std = outcome.trace.epochs.back().class_loss_std;
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, config.jobs);
  if (jobs == 1 || result.cells.size() <= 1) {
    for (auto& cell : result.cells) run_cell(cell);
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= result.cells.size()) return;
        run_cell(result.cells[i]);
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < std::min(jobs, result.cells.size()); ++i)
      pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Aggregate over seeds in the fixed grid order.
  for (TrainMethod m : config.methods)
    for (CalibratorKind cal : config.calibrators) {
      SweepAggregate agg;
      agg.method = m;
      agg.calibrator = cal;
      std::vector<double> eces, accs;
      for (const auto& cell : result.cells)
        if (cell.method == m && cell.calibrator == cal && cell.ok) {
          eces.push_back(cell.ece_after);
          accs.push_back(cell.acc_after);
        }
      agg.ok_count = eces.size();
      if (!eces.empty()) {
        for (double v : eces) agg.mean_ece += v;
        agg.mean_ece /= static_cast<double>(eces.size());
        for (double v : accs) agg.mean_acc += v;
        agg.mean_acc /= static_cast<double>(accs.size());
        agg.std_ece = metrics::population_std(eces);
        agg.std_acc = metrics::population_std(accs);
      }
      result.aggregates.push_back(agg);
    }

  for (auto& agg : result.aggregates) {
    const SweepAggregate* base = nullptr;
    for (const auto& other : result.aggregates)
      if (other.method == TrainMethod::CE && other.calibrator == agg.calibrator &&
          other.ok_count > 0)
        base = &other;
    if (base) {
      agg.delta_ece = agg.mean_ece - base->mean_ece;
      agg.delta_acc = agg.mean_acc - base->mean_acc;
    } else {
      agg.delta_ece = std::numeric_limits<double>::quiet_NaN();
      agg.delta_acc = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return result;
}

SweepResult run_sweep(const SweepConfig& config) {
  const auto val = load_dataset(config.val_path, config.format);
  const auto test = load_dataset(config.test_path, config.format);
  auto result = sweep_on(val, test, config);

  if (!config.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(config.out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + config.out_dir.string());
    {
      auto os = open_out(config.out_dir / "sweep_cells.tsv");
      write_sweep_cells(result, os);
      finish_out(os, config.out_dir / "sweep_cells.tsv");
    }
    {
      auto os = open_out(config.out_dir / "sweep_table.txt");
      write_sweep_table(result, config, os);
      finish_out(os, config.out_dir / "sweep_table.txt");
    }
  }
  return result;
}

void write_sweep_cells(const SweepResult& r, std::ostream& os) {
  os << "method\tcalibrator\tseed\tstatus\tece_before\tacc_before\tece_after\tacc_after"
     << "\tfinal_class_loss_std\terror\n";
  for (const auto& c : r.cells) {
    os << method_name(c.method) << '\t' << kind_name(c.calibrator) << '\t' << c.seed << '\t'
       << (c.ok ? "ok" : "failed") << '\t' << fmt(c.ece_before) << '\t' << fmt(c.acc_before)
       << '\t' << fmt(c.ece_after) << '\t' << fmt(c.acc_after) << '\t'
       << fmt(c.final_class_loss_std) << '\t' << c.error << '\n';
  }
}

void write_sweep_table(const SweepResult& r, const SweepConfig& config, std::ostream& os) {
  auto cell_text = [](double ece, double acc) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f (%.4f)", ece, acc);
    return std::string(buf);
  };
  auto delta_text = [](double de, double da) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%+.6f (%+.4f)", de, da);
    return std::string(buf);
  };

  os << "test ECE (accuracy), mean over " << config.seeds.size()
     << " seed(s); second line: delta vs the ce baseline of the same calibrator\n\n";
  os << "method";
  for (auto cal : config.calibrators) os << '\t' << kind_name(cal);
  os << '\n';
  for (auto m : config.methods) {
    os << method_name(m);
    for (auto cal : config.calibrators) {
      const SweepAggregate* agg = nullptr;
      for (const auto& a : r.aggregates)
        if (a.method == m && a.calibrator == cal) agg = &a;
      os << '\t' << (agg && agg->ok_count > 0 ? cell_text(agg->mean_ece, agg->mean_acc)
                                              : std::string("failed"));
    }
    os << '\n';
    os << ' ';
    for (auto cal : config.calibrators) {
      const SweepAggregate* agg = nullptr;
      for (const auto& a : r.aggregates)
        if (a.method == m && a.calibrator == cal) agg = &a;
      os << '\t' << (agg && agg->ok_count > 0 && std::isfinite(agg->delta_ece)
                         ? delta_text(agg->delta_ece, agg->delta_acc)
                         : std::string("-"));
    }
    os << '\n';
  }
}

ToyResult run_toy_analysis(const LogitDataset& train, const LogitDataset* eval_ds,
                           std::size_t k, const optim::OptimSpec& opt, std::size_t bins) {
  train.validate();
  opt.validate();
  const LogitDataset& holdout = eval_ds ? *eval_ds : train;
  holdout.validate();
  if (holdout.class_count != train.class_count)
    throw ConfigError("toy analysis: class counts disagree");
  if (k < 1 || k > train.class_count)
    throw ConfigError("toy analysis: k must be in [1, C]");

  auto cal = Calibrator::make(CalibratorKind::TS, train.class_count);
  const Matrix holdout_m = to_matrix(holdout);
  const losses::LossSpec ce;

  ToyResult result;
  {
    auto ev = evaluate_loss(cal, train, ce, {}, false);
    result.subset = losses::select_top_k_classes(ev.class_losses.values, k);
  }
  // Classes outside the subset get weight -1: their (1 + w) coefficient is 0
  // and they drop out of the objective while the trace still reports them.
  std::vector<double> weights(train.class_count, -1.0);
  for (std::size_t i : result.subset) weights[i] = 0.0;
  const bool full_set = result.subset.size() == train.class_count;
  std::span<const double> wspan =
      full_set ? std::span<const double>{} : std::span<const double>(weights);

  optim::Minimizer minimizer(opt, cal.param_count());
  const optim::Objective closure = [&](std::span<const double> p, std::span<double> g) {
    Calibrator probe = cal;
    probe.set_params(p);
    auto ev = evaluate_loss(probe, train, ce, wspan, !g.empty());
    if (!g.empty()) std::copy(ev.gradient.begin(), ev.gradient.end(), g.begin());
    return ev.total;
  };

  auto push_row = [&]() {
    auto ev = evaluate_loss(cal, train, ce, wspan, false);
    ToyResult::Row row;
    row.total_loss = scaling::total_loss(ev.class_losses.values, wspan);
    row.class_losses = ev.class_losses.values;
    row.class_loss_std = metrics::population_std(ev.class_losses.values);
    row.ece = metrics::evaluate(probabilities(cal.apply(holdout_m)), holdout.labels, bins).ece;
    result.rows.push_back(std::move(row));
  };

  push_row();
  std::vector<double> params(cal.params().begin(), cal.params().end());
  std::vector<double> grad(params.size());
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    const double f = closure(params, grad);
    if (!std::isfinite(f)) break;
    minimizer.step(params, f, grad, closure);
    cal.set_params(params);
    push_row();
    if (minimizer.diverged()) break;
  }

  std::vector<double> stds, eces;
  for (const auto& row : result.rows) {
    stds.push_back(row.class_loss_std);
    eces.push_back(row.ece);
  }
  try {
    result.correlation_std_ece = metrics::correlation(stds, eces);
    result.correlation_defined = true;
  } catch (const NumericError&) {
    result.correlation_defined = false;
  }
  return result;
}

void write_toy_table(const ToyResult& r, std::ostream& os) {
  if (r.rows.empty()) return;
  const std::size_t c = r.rows.front().class_losses.size();
  os << "# subset";
  for (std::size_t i : r.subset) os << ' ' << i;
  os << '\n';
  os << "epoch\ttotal_loss\tclass_loss_std\tece";
  for (std::size_t i = 0; i < c; ++i) os << "\tL_" << i;
  os << '\n';
  for (std::size_t e = 0; e < r.rows.size(); ++e) {
    const auto& row = r.rows[e];
    os << e << '\t' << fmt(row.total_loss) << '\t' << fmt(row.class_loss_std) << '\t'
       << fmt(row.ece);
    for (double v : row.class_losses) os << '\t' << fmt(v);
    os << '\n';
  }
  os << "# correlation_std_ece "
     << (r.correlation_defined ? fmt(r.correlation_std_ece) : std::string("undefined")) << '\n';
}

}  // namespace calscale::harness
