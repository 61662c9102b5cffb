#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "calscale/harness.hpp"
#include "oracles.hpp"

using namespace calscale;
using namespace calscale::harness;
namespace fs = std::filesystem;

namespace {

LogitDataset synth(std::uint64_t seed, std::uint32_t classes = 8, std::uint32_t per_class = 120,
                   double scale = 2.5) {
  SyntheticSpec spec;
  spec.class_count = classes;
  spec.samples_per_class = {per_class};
  spec.class_mean_margin = {4.0};
  spec.overconfidence_scale = scale;
  spec.noise_std = 1.0;
  spec.seed = seed;
  return generate_synthetic(spec);
}

RunSettings quick_settings(CalibratorKind kind, std::size_t epochs = 60) {
  RunSettings s;
  s.calibrator = kind;
  auto opt = default_optim(kind, losses::LossKind::CE);
  opt.epochs = epochs;
  s.optim = opt;
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("calscale_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("calibration lowers the test ECE and keeps accuracy") {
  const auto val = oracles::overconfident_synthetic(70, 8, 120);
  const auto test = oracles::overconfident_synthetic(71, 8, 120);
  for (auto kind : {CalibratorKind::TS, CalibratorKind::ETS, CalibratorKind::PTS}) {
    const auto outcome = calibrate_run(val, test, quick_settings(kind, 80));
    CHECK(outcome.test_after.ece < outcome.test_before.ece);
    CHECK(outcome.test_after.accuracy == outcome.test_before.accuracy);
  }
}

TEST_CASE("scaling with a zero beta equals scaling off") {
  const auto val = synth(72);
  const auto test = synth(73);

  auto off = quick_settings(CalibratorKind::TS);
  const auto r_off = calibrate_run(val, test, off);

  auto zero = off;
  zero.scaling_enabled = true;
  zero.scaling.beta_init = 0.0;
  zero.scaling.beta_bounds = {0.0, 0.0};
  const auto r_zero = calibrate_run(val, test, zero);

  CHECK(r_off.test_after.ece == r_zero.test_after.ece);
  CHECK(r_off.test_after.accuracy == r_zero.test_after.accuracy);
  CHECK(r_off.calibrator.params()[0] == r_zero.calibrator.params()[0]);
}

TEST_CASE("run_calibrate writes the full artifact set") {
  const auto dir = fresh_dir("artifacts");
  const auto val_path = dir / "val.bin";
  const auto test_path = dir / "test.bin";
  fs::create_directories(dir);
  save_dataset(synth(74), val_path, FileFormat::Binary);
  save_dataset(synth(75), test_path, FileFormat::Binary);

  RunConfig config;
  config.val_path = val_path;
  config.test_path = test_path;
  config.settings = quick_settings(CalibratorKind::TS, 40);
  config.settings.scaling_enabled = true;
  config.out_dir = dir / "run";
  run_calibrate(config);

  for (const char* name : {"calibrator.txt", "report_before.txt", "report_after.txt",
                           "bins_before.tsv", "bins_after.tsv", "trace.tsv", "run.txt"})
    CHECK(fs::exists(config.out_dir / name));

  const auto run_txt = slurp(config.out_dir / "run.txt");
  CHECK(run_txt.find("scaling.alpha") != std::string::npos);
  CHECK(run_txt.find("scaling.weights") != std::string::npos);

  const auto loaded = Calibrator::load(config.out_dir / "calibrator.txt");
  CHECK(loaded.kind() == CalibratorKind::TS);
  CHECK(loaded.fitted());
  fs::remove_all(dir);
}

TEST_CASE("sweep covers the grid and aggregates exactly") {
  const auto val = synth(76, 5, 60);
  const auto test = synth(77, 5, 60);

  SweepConfig config;
  config.methods = {TrainMethod::CE, TrainMethod::Ours};
  config.calibrators = {CalibratorKind::TS, CalibratorKind::CTS};
  config.seeds = {0, 1, 2};
  config.epochs_override = 30;
  const auto result = sweep_on(val, test, config);

  CHECK(result.cells.size() == 12);
  for (const auto& cell : result.cells) CHECK(cell.ok);
  CHECK(result.aggregates.size() == 4);

  for (const auto& agg : result.aggregates) {
    // recompute the mean from the per-seed cells
    double mean = 0.0;
    std::size_t k = 0;
    for (const auto& cell : result.cells)
      if (cell.method == agg.method && cell.calibrator == agg.calibrator && cell.ok) {
        mean += cell.ece_after;
        ++k;
      }
    mean /= static_cast<double>(k);
    CHECK(std::abs(agg.mean_ece - mean) < 1e-12);
    if (agg.method == TrainMethod::CE) {
      CHECK(agg.delta_ece == 0.0);
      CHECK(agg.delta_acc == 0.0);
    }
  }
}

TEST_CASE("sweep records per-cell failures and continues") {
  const auto val = synth(78, 5, 40);
  const auto test = synth(79, 5, 40);
  SweepConfig config;
  config.methods = {TrainMethod::CE};
  config.calibrators = {CalibratorKind::TS, CalibratorKind::PTS};
  config.seeds = {0};
  config.epochs_override = 10;
  config.pts_arch.hidden_layers = 0;  // invalid on purpose
  const auto result = sweep_on(val, test, config);
  REQUIRE(result.cells.size() == 2);
  CHECK(result.cells[0].ok);
  CHECK_FALSE(result.cells[1].ok);
  CHECK(result.cells[1].error.find(">= 1") != std::string::npos);
}

TEST_CASE("parallel sweep equals the sequential one") {
  const auto val = synth(80, 4, 50);
  const auto test = synth(81, 4, 50);
  SweepConfig config;
  config.methods = {TrainMethod::CE, TrainMethod::Ours};
  config.calibrators = {CalibratorKind::TS, CalibratorKind::CTS};
  config.seeds = {0, 1};
  config.epochs_override = 20;
  const auto seq = sweep_on(val, test, config);
  config.jobs = 4;
  const auto par = sweep_on(val, test, config);
  REQUIRE(seq.cells.size() == par.cells.size());
  for (std::size_t i = 0; i < seq.cells.size(); ++i) {
    CHECK(seq.cells[i].ece_after == par.cells[i].ece_after);
    CHECK(seq.cells[i].acc_after == par.cells[i].acc_after);
  }
}

TEST_CASE("toy analysis over the full class set matches plain training") {
  const auto ds = synth(82, 5, 60);
  optim::OptimSpec opt;
  opt.epochs = 30;

  const auto toy = run_toy_analysis(ds, nullptr, ds.class_count, opt, 15);
  CHECK(toy.subset.size() == ds.class_count);

  auto cal = Calibrator::make(CalibratorKind::TS, ds.class_count);
  FitSpec fs;
  fs.optim = opt;
  const auto r = fit(cal, ds, fs);
  REQUIRE(toy.rows.size() == r.trace.epochs.size());
  for (std::size_t e = 0; e < toy.rows.size(); ++e)
    CHECK(toy.rows[e].total_loss == r.trace.epochs[e].total_loss);
}

TEST_CASE("toy analysis on a strict subset reports the chosen classes") {
  const auto ds = synth(83, 6, 50);
  optim::OptimSpec opt;
  opt.epochs = 25;
  const auto toy = run_toy_analysis(ds, nullptr, 3, opt, 15);
  CHECK(toy.subset.size() == 3);
  CHECK(toy.rows.size() == 26);
  const auto again = run_toy_analysis(ds, nullptr, 3, opt, 15);
  for (std::size_t e = 0; e < toy.rows.size(); ++e) {
    CHECK(toy.rows[e].total_loss == again.rows[e].total_loss);
    CHECK(toy.rows[e].ece == again.rows[e].ece);
  }
}

TEST_CASE("command line flows") {
  const auto dir = fresh_dir("cli");
  fs::create_directories(dir);
  const auto data = (dir / "data.bin").string();

  SUBCASE("gen-synthetic, split, lt, evaluate, calibrate, report, toy") {
    CHECK(run_cli({"gen-synthetic", "--classes", "5", "--per-class", "80", "--margin", "4",
                   "--scale", "2.5", "--noise", "1", "--seed", "9", "--output", data}) == 0);
    const auto ds = load_dataset(data, FileFormat::Binary);
    CHECK(ds.class_count == 5);
    CHECK(ds.sample_count() == 400);

    const auto a = (dir / "a.bin").string(), b = (dir / "b.bin").string();
    CHECK(run_cli({"split", "--input", data, "--fraction", "0.5", "--seed", "3",
                   "--output-first", a, "--output-second", b}) == 0);
    CHECK(load_dataset(a, FileFormat::Binary).sample_count() == 200);

    const auto lt = (dir / "lt.bin").string();
    CHECK(run_cli({"make-lt-split", "--input", data, "--base-count", "40", "--rho", "0.5",
                   "--seed", "4", "--output", lt}) == 0);
    const auto lt_ds = load_dataset(lt, FileFormat::Binary);
    CHECK(lt_ds.class_counts() == std::vector<std::uint32_t>{40, 33, 28, 23, 20});

    CHECK(run_cli({"evaluate", "--data", data, "--bins", "10"}) == 0);

    const auto run_dir = (dir / "run").string();
    CHECK(run_cli({"calibrate", "--val", a, "--test", b, "--calibrator", "ts", "--loss", "ce",
                   "--epochs", "40", "--scaling", "--out", run_dir, "--seed", "1"}) == 0);
    CHECK(fs::exists(fs::path(run_dir) / "calibrator.txt"));

    CHECK(run_cli({"report", "--data", b, "--calibrator-file",
                   (fs::path(run_dir) / "calibrator.txt").string(), "--out",
                   (dir / "rep").string()}) == 0);
    CHECK(fs::exists(dir / "rep" / "report.txt"));
    CHECK(fs::exists(dir / "rep" / "bins.tsv"));

    CHECK(run_cli({"toy-analysis", "--data", a, "--k", "2", "--epochs", "15", "--out",
                   (dir / "toy").string()}) == 0);
    CHECK(fs::exists(dir / "toy" / "toy_trace.tsv"));

    const auto sweep_dir = (dir / "sweep").string();
    CHECK(run_cli({"sweep", "--val", a, "--test", b, "--methods", "ce,ours", "--calibrators",
                   "ts", "--seeds", "0,1", "--epochs", "15", "--out", sweep_dir}) == 0);
    CHECK(fs::exists(fs::path(sweep_dir) / "sweep_table.txt"));
    CHECK(fs::exists(fs::path(sweep_dir) / "sweep_cells.tsv"));
  }

  SUBCASE("exit codes") {
    CHECK(run_cli({"no-such-command"}) == 2);
    CHECK(run_cli({"evaluate", "--data", (dir / "missing.bin").string()}) == 2);
    CHECK(run_cli({"gen-synthetic", "--classes", "1", "--output", data}) == 2);
    CHECK(run_cli({"gen-synthetic", "--classes", "4", "--output",
                   "/nonexistent_dir_calscale/x.bin"}) == 4);
    CHECK(run_cli({"--help"}) == 0);
  }

  fs::remove_all(dir);
}
