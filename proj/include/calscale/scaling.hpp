#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "calscale/calibrators.hpp"
#include "calscale/common.hpp"
#include "calscale/losses.hpp"
#include "calscale/optim.hpp"

namespace calscale::scaling {

enum class Normalization { ND, MM, CM };

const char* normalization_name(Normalization n);
Normalization normalization_from_name(const std::string& name);

enum class WeightRefresh { EveryEpoch, FrozenAfterFit };

struct ScalingConfig {
  Normalization normalization = Normalization::ND;
  double alpha_init = 1.0;
  double beta_init = 1.5;
  std::array<double, 2> alpha_bounds{1e-3, 1e3};
  std::array<double, 2> beta_bounds{0.0, 2.0};
  WeightRefresh refresh = WeightRefresh::EveryEpoch;

  void validate() const;
};

struct NormalizedLosses {
  std::vector<double> values;
  bool degenerate = false;  // zero spread; values are all zero
};

// ND: (x-mean)/popstd, MM: (x-min)/(max-min), CM: (x-mean)/(max-min).
// Entries with count 0 are excluded from the statistics and normalize to 0.
// Needs at least 2 included classes.
NormalizedLosses normalize(std::span<const double> values, Normalization method,
                           std::span<const std::uint32_t> counts = {});

// w = beta/(1+exp(-x/alpha)) - beta/2: odd, increasing, bounded by beta/2.
double sigmoid_weight(double normalized_loss, double alpha, double beta);

// sqrt( sum_i (L0_i - sigmoid(norm(L1)_i; a, b) * (L1_i - L0_i) - mean(L1))^2 ),
// the first-order proxy for the class-loss spread after one more iteration.
double std_objective(std::span<const double> l0, std::span<const double> l1,
                     double alpha, double beta, Normalization method,
                     std::span<const std::uint32_t> counts = {});

struct AlphaBetaFit {
  double alpha = 1.0;
  double beta = 1.5;
  double objective_init = 0.0;
  double objective = 0.0;
  bool fallback = false;  // optimizer hit non-finite values; best point kept
};

// Bound-constrained minimization of std_objective starting at the configured
// init; returns the init point exactly when nothing strictly better exists.
AlphaBetaFit fit_alpha_beta(std::span<const double> l0, std::span<const double> l1,
                            const ScalingConfig& config,
                            std::span<const std::uint32_t> counts = {});

// sum_i (1 + w_i) * L_i
double total_loss(std::span<const double> class_losses, std::span<const double> weights);

// w_i from the normalized class losses at fixed (alpha, beta).
std::vector<double> scale_weights(std::span<const double> class_losses,
                                  double alpha, double beta, Normalization method,
                                  std::span<const std::uint32_t> counts = {});

struct ScalingState {
  double alpha = 1.0;
  double beta = 1.5;
  double objective_init = 0.0;
  double objective = 0.0;
  bool optimizer_fallback = false;
  losses::ClassLossVector l0;  // class losses before the first iteration
  losses::ClassLossVector l1;  // class losses after it
  std::vector<double> weights;
};

// Records L0, runs exactly one unweighted training iteration on the
// calibrator (advancing it in place), records L1, fits (alpha, beta) against
// the spread objective and freezes them, and derives the initial weights.
// When `minimizer` is given its state carries over to subsequent training.
ScalingState prepare_scaling(Calibrator& cal, const LogitDataset& ds,
                             const losses::LossSpec& loss, const ScalingConfig& config,
                             const optim::OptimSpec& opt,
                             optim::Minimizer* minimizer = nullptr);

}  // namespace calscale::scaling
