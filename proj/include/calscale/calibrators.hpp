#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "calscale/common.hpp"
#include "calscale/dataset.hpp"
#include "calscale/losses.hpp"

namespace calscale {

enum class CalibratorKind { TS, ETS, PTS, CTS };

const char* kind_name(CalibratorKind kind);
CalibratorKind kind_from_name(const std::string& name);

// Per-sample temperature network: the top_s largest logits of a row feed a
// small rectifier MLP whose softplus-mapped scalar output is that row's
// temperature.
struct PtsArch {
  std::size_t top_s = 10;  // clamped to C when the calibrator is built
  std::size_t hidden_layers = 2;
  std::size_t hidden_width = 5;
};

// A parametric map from logits to calibrated logits. Temperatures are
// represented by unconstrained parameters passed through softplus, so every
// optimizer works on a free vector while reported temperatures stay positive.
class Calibrator {
 public:
  Calibrator() = default;

  static Calibrator make(CalibratorKind kind, std::size_t classes,
                         const PtsArch& arch = {}, std::uint64_t seed = 0);

  CalibratorKind kind() const { return kind_; }
  std::size_t classes() const { return classes_; }
  const PtsArch& arch() const { return arch_; }

  std::size_t param_count() const { return params_.size(); }
  std::span<const double> params() const { return params_; }
  void set_params(std::span<const double> p);

  bool fitted() const { return fitted_; }
  void mark_fitted() { fitted_ = true; }

  Matrix apply(const Matrix& logits) const;
  void apply_row(std::span<const double> z, std::span<double> out) const;

  // Accumulates d(loss)/d(params) into grad given d(loss)/d(calibrated row).
  void backprop_row(std::span<const double> z, std::span<const double> dout,
                    std::span<double> grad) const;

  // Reported (positive) values.
  double temperature() const;                      // TS, ETS
  std::vector<double> class_temperatures() const;  // CTS
  std::array<double, 3> ensemble_weights() const;  // ETS
  double sample_temperature(std::span<const double> z) const;  // PTS

  void set_temperature(double t);  // TS, ETS, CTS (all classes)

  // ETS stage-2 projection: clamps ensemble weights to >= 0, optionally
  // rescaling them to sum to one.
  void project_ets_weights(bool sum_to_one);

  void save(const std::filesystem::path& path) const;
  static Calibrator load(const std::filesystem::path& path);

 private:
  std::vector<std::size_t> mlp_dims() const;  // PTS layer sizes
  double pts_forward(std::span<const double> z, std::vector<double>* activations,
                     std::vector<double>* sorted) const;

  CalibratorKind kind_ = CalibratorKind::TS;
  std::size_t classes_ = 0;
  PtsArch arch_;
  std::vector<double> params_;
  bool fitted_ = false;
};

// Row-wise stable softmax.
Matrix probabilities(const Matrix& logits);

struct LossEvaluation {
  double total = 0.0;                    // sum_i (1 + w_i) * L_i
  losses::ClassLossVector class_losses;  // unweighted per-class values
  std::vector<double> gradient;          // d total / d params; empty unless requested
};

// Evaluates the training loss of a calibrator over a dataset. class_weights
// holds the per-class w_i (empty means all zero); the total and gradient are
// weighted, the per-class values are not.
LossEvaluation evaluate_loss(const Calibrator& cal, const LogitDataset& ds,
                             const losses::LossSpec& spec,
                             std::span<const double> class_weights = {},
                             bool with_gradient = false);

std::vector<double> loss_gradient(const Calibrator& cal, const LogitDataset& ds,
                                  const losses::LossSpec& spec,
                                  std::span<const double> class_weights = {});

}  // namespace calscale
