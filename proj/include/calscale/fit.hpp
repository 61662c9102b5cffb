#pragma once

#include <optional>
#include <vector>

#include "calscale/calibrators.hpp"
#include "calscale/dataset.hpp"
#include "calscale/losses.hpp"
#include "calscale/optim.hpp"
#include "calscale/scaling.hpp"

namespace calscale {

struct FitSpec {
  losses::LossSpec loss;
  optim::OptimSpec optim;
  std::optional<scaling::ScalingConfig> scaling;  // nullopt = plain loss
  bool ets_sum_to_one = false;  // normalize ETS ensemble weights during stage 2
};

// Row k describes the state after k optimizer steps: the unweighted
// per-class losses, their population std, the training objective at that
// point, and the class weights in effect for the next step.
struct FitTrace {
  struct Epoch {
    double total_loss = 0.0;
    std::vector<double> class_losses;
    double class_loss_std = 0.0;
    std::vector<double> weights;  // empty when scaling is off
  };
  std::vector<Epoch> epochs;
  bool diverged = false;
  std::size_t clamp_events = 0;
};

struct FitResult {
  FitTrace trace;
  std::optional<scaling::ScalingState> scaling_state;
};

// Full-batch training of a calibrator on held-out logits. ETS trains in two
// stages (temperature, then projected ensemble weights), each over the full
// epoch budget. With scaling enabled the first iteration runs unweighted,
// (alpha, beta) are fitted and frozen, and class weights apply from the
// second step on, refreshed per the config.
FitResult fit(Calibrator& cal, const LogitDataset& train, const FitSpec& spec);

}  // namespace calscale
