#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calscale/calibrators.hpp"
#include "calscale/dataset.hpp"
#include "calscale/fit.hpp"
#include "calscale/metrics.hpp"

namespace calscale::harness {

// Training method axis of a sweep: the three baseline losses plus the
// class-wise loss scaling on top of cross-entropy.
enum class TrainMethod { CE, LS, FL, Ours };

const char* method_name(TrainMethod m);
TrainMethod method_from_name(const std::string& name);

// Paper-default optimizer for a calibrator/loss pair: quasi-Newton for
// TS/ETS/CTS, first-order with 0.002 weight decay for PTS; LS and FL swap the
// flat rate for the 200/400/400 step schedule.
optim::OptimSpec default_optim(CalibratorKind cal, losses::LossKind loss);

losses::LossSpec loss_for_method(TrainMethod m);

struct RunSettings {
  CalibratorKind calibrator = CalibratorKind::TS;
  PtsArch pts_arch;
  losses::LossSpec loss;
  bool scaling_enabled = false;
  scaling::ScalingConfig scaling;
  std::optional<optim::OptimSpec> optim;  // nullopt = default_optim
  std::size_t bins = 15;
  std::uint64_t seed = 0;
  bool ets_sum_to_one = false;

  optim::OptimSpec effective_optim() const;
};

struct CalibrateOutcome {
  metrics::EvalReport test_before;
  metrics::EvalReport test_after;
  FitTrace trace;
  std::optional<scaling::ScalingState> scaling_state;
  Calibrator calibrator;
};

// Fits on validation logits, evaluates on test logits.
CalibrateOutcome calibrate_run(const LogitDataset& val, const LogitDataset& test,
                               const RunSettings& settings);

struct RunConfig {
  std::filesystem::path val_path;
  std::filesystem::path test_path;
  FileFormat format = FileFormat::Binary;
  RunSettings settings;
  std::filesystem::path out_dir;
};

// File-level wrapper: loads the datasets, runs, and writes calibrator.txt,
// report_before/after.txt, bins_before/after.tsv, trace.tsv and run.txt into
// out_dir. Outputs are bit-reproducible for a fixed config and seed.
CalibrateOutcome run_calibrate(const RunConfig& config);

struct SweepConfig {
  std::filesystem::path val_path;
  std::filesystem::path test_path;
  FileFormat format = FileFormat::Binary;
  std::vector<TrainMethod> methods{TrainMethod::CE, TrainMethod::LS, TrainMethod::FL,
                                   TrainMethod::Ours};
  std::vector<CalibratorKind> calibrators{CalibratorKind::TS, CalibratorKind::ETS,
                                          CalibratorKind::PTS, CalibratorKind::CTS};
  std::vector<std::uint64_t> seeds{0};
  std::optional<std::size_t> epochs_override;
  PtsArch pts_arch;
  scaling::ScalingConfig scaling;
  bool ets_sum_to_one = false;
  std::size_t bins = 15;
  std::filesystem::path out_dir;  // empty = no files written
  std::size_t jobs = 1;
};

struct SweepCell {
  TrainMethod method = TrainMethod::CE;
  CalibratorKind calibrator = CalibratorKind::TS;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double ece_before = 0.0, acc_before = 0.0;
  double ece_after = 0.0, acc_after = 0.0;
  double final_class_loss_std = 0.0;
};

struct SweepAggregate {
  TrainMethod method = TrainMethod::CE;
  CalibratorKind calibrator = CalibratorKind::TS;
  std::size_t ok_count = 0;
  double mean_ece = 0.0, std_ece = 0.0;
  double mean_acc = 0.0, std_acc = 0.0;
  // vs the CE row of the same calibrator; zero for the baseline itself
  double delta_ece = 0.0, delta_acc = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepAggregate> aggregates;
};

// Runs the full grid; failed cells carry their error and the sweep
// continues. Cells are independent and may run on `jobs` threads; the
// aggregation order is fixed regardless.
SweepResult run_sweep(const SweepConfig& config);
SweepResult sweep_on(const LogitDataset& val, const LogitDataset& test,
                     const SweepConfig& config);

void write_sweep_cells(const SweepResult& r, std::ostream& os);
void write_sweep_table(const SweepResult& r, const SweepConfig& config, std::ostream& os);

// Single-temperature training driven only by the k worst classes (chosen by
// initial class loss); the per-epoch table plus the correlation between the
// class-loss spread and the calibration error.
struct ToyResult {
  std::vector<std::size_t> subset;
  struct Row {
    double total_loss = 0.0;  // subset objective
    std::vector<double> class_losses;
    double class_loss_std = 0.0;
    double ece = 0.0;
  };
  std::vector<Row> rows;
  double correlation_std_ece = 0.0;
  bool correlation_defined = false;
};

ToyResult run_toy_analysis(const LogitDataset& train, const LogitDataset* eval_ds,
                           std::size_t k, const optim::OptimSpec& opt, std::size_t bins);
void write_toy_table(const ToyResult& r, std::ostream& os);

// The CLI entry point; returns the process exit code (0 ok, 2 config,
// 3 numeric, 4 I/O).
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace calscale::harness
