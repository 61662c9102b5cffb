#include "calscale/fit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calscale/metrics.hpp"

namespace calscale {

namespace {

FitTrace::Epoch make_row(const losses::ClassLossVector& cl, std::span<const double> weights,
                         bool scaling_active) {
  FitTrace::Epoch row;
  row.class_losses = cl.values;
  row.class_loss_std = metrics::population_std(cl.values);
  row.total_loss = scaling::total_loss(cl.values, weights);
  if (scaling_active)
    row.weights = weights.empty() ? std::vector<double>(cl.values.size(), 0.0)
                                  : std::vector<double>(weights.begin(), weights.end());
  return row;
}

scaling::ScalingState bootstrap_scaling(const losses::ClassLossVector& l0,
                                        const losses::ClassLossVector& l1,
                                        const scaling::ScalingConfig& config) {
  scaling::ScalingState state;
  state.l0 = l0;
  state.l1 = l1;
  const auto ab = scaling::fit_alpha_beta(l0.values, l1.values, config, l1.counts);
  state.alpha = ab.alpha;
  state.beta = ab.beta;
  state.objective_init = ab.objective_init;
  state.objective = ab.objective;
  state.optimizer_fallback = ab.fallback;
  state.weights = scaling::scale_weights(l1.values, ab.alpha, ab.beta, config.normalization,
                                         l1.counts);
  return state;
}

}  // namespace

FitResult fit(Calibrator& cal, const LogitDataset& train, const FitSpec& spec) {
  train.validate();
  spec.loss.validate();
  if (spec.scaling) spec.scaling->validate();
  if (cal.fitted()) throw ConfigError("fit: calibrator is already fitted");
  if (train.class_count != cal.classes())
    throw ConfigError("fit: dataset has " + std::to_string(train.class_count) +
                      " classes, calibrator expects " + std::to_string(cal.classes()));

  FitResult result;
  auto& rows = result.trace.epochs;
  const bool use_scaling = spec.scaling.has_value();

  // ETS trains its temperature first, then the projected ensemble weights.
  std::vector<std::vector<std::size_t>> stages;
  if (cal.kind() == CalibratorKind::ETS) {
    stages.push_back({0});
    stages.push_back({1, 2, 3});
  } else {
    std::vector<std::size_t> all(cal.param_count());
    std::iota(all.begin(), all.end(), 0);
    stages.push_back(std::move(all));
  }

  std::vector<double> weights;  // class weights in effect; empty = plain loss
  losses::ClassLossVector l_current;
  losses::ClassLossVector l_initial;
  {
    auto ev = evaluate_loss(cal, train, spec.loss, weights, false);
    l_current = std::move(ev.class_losses);
  }

  std::size_t global_step = 0;
  std::size_t last_recorded_step = static_cast<std::size_t>(-1);
  bool aborted = false;

  for (std::size_t stage_idx = 0; stage_idx < stages.size() && !aborted; ++stage_idx) {
    const auto& active = stages[stage_idx];
    const bool project = cal.kind() == CalibratorKind::ETS && stage_idx == 1;
    optim::Minimizer minimizer(spec.optim, active.size());

    const optim::Objective closure = [&](std::span<const double> sub,
                                         std::span<double> sub_grad) -> double {
      std::vector<double> full(cal.params().begin(), cal.params().end());
      for (std::size_t i = 0; i < active.size(); ++i) full[active[i]] = sub[i];
      Calibrator probe = cal;
      probe.set_params(full);
      auto ev = evaluate_loss(probe, train, spec.loss, weights, !sub_grad.empty());
      if (!sub_grad.empty())
        for (std::size_t i = 0; i < active.size(); ++i) sub_grad[i] = ev.gradient[active[i]];
      return ev.total;
    };

    for (std::size_t e = 0; e < spec.optim.epochs; ++e) {
      if (use_scaling) {
        if (global_step == 0) {
          l_initial = l_current;  // first iteration runs unweighted
        } else if (global_step == 1) {
          result.scaling_state = bootstrap_scaling(l_initial, l_current, *spec.scaling);
          weights = result.scaling_state->weights;
        } else if (spec.scaling->refresh == scaling::WeightRefresh::EveryEpoch) {
          weights = scaling::scale_weights(l_current.values, result.scaling_state->alpha,
                                           result.scaling_state->beta,
                                           spec.scaling->normalization, l_current.counts);
        }
      }

      rows.push_back(make_row(l_current, weights, use_scaling));
      last_recorded_step = global_step;

      auto ev = evaluate_loss(cal, train, spec.loss, weights, true);
      result.trace.clamp_events += ev.class_losses.clamp_events;
      if (!std::isfinite(ev.total)) {
        result.trace.diverged = true;
        aborted = true;
        break;
      }

      std::vector<double> sub(active.size()), sub_grad(active.size());
      for (std::size_t i = 0; i < active.size(); ++i) {
        sub[i] = cal.params()[active[i]];
        sub_grad[i] = ev.gradient[active[i]];
      }
      minimizer.step(sub, ev.total, sub_grad, closure);
      std::vector<double> full(cal.params().begin(), cal.params().end());
      for (std::size_t i = 0; i < active.size(); ++i) full[active[i]] = sub[i];
      cal.set_params(full);
      if (project) cal.project_ets_weights(spec.ets_sum_to_one);
      ++global_step;

      if (minimizer.diverged()) {
        result.trace.diverged = true;
        aborted = true;
        break;
      }

      auto post = evaluate_loss(cal, train, spec.loss, weights, false);
      l_current = std::move(post.class_losses);
    }
  }

  // A one-epoch budget ends before the bootstrap step would have run.
  if (use_scaling && !result.scaling_state && global_step >= 1 && !result.trace.diverged)
    result.scaling_state = bootstrap_scaling(l_initial, l_current, *spec.scaling);

  if (last_recorded_step != global_step)
    rows.push_back(make_row(l_current, weights, use_scaling));
  cal.mark_fitted();
  return result;
}

}  // namespace calscale
