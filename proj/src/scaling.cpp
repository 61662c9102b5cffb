#include "calscale/scaling.hpp"

#include <algorithm>
#include <cmath>

namespace calscale::scaling {

const char* normalization_name(Normalization n) {
  switch (n) {
    case Normalization::ND: return "nd";
    case Normalization::MM: return "mm";
    case Normalization::CM: return "cm";
  }
  return "?";
}

Normalization normalization_from_name(const std::string& name) {
  if (name == "nd") return Normalization::ND;
  if (name == "mm") return Normalization::MM;
  if (name == "cm") return Normalization::CM;
  throw ConfigError("unknown normalization '" + name + "'");
}

void ScalingConfig::validate() const {
  if (!(alpha_bounds[0] > 0.0)) throw ConfigError("scaling: alpha lower bound must be > 0");
  if (alpha_bounds[0] > alpha_bounds[1] || beta_bounds[0] > beta_bounds[1])
    throw ConfigError("scaling: inverted bounds");
  if (beta_bounds[0] < 0.0) throw ConfigError("scaling: beta must be >= 0");
  if (alpha_init < alpha_bounds[0] || alpha_init > alpha_bounds[1])
    throw ConfigError("scaling: alpha_init outside its bounds");
  if (beta_init < beta_bounds[0] || beta_init > beta_bounds[1])
    throw ConfigError("scaling: beta_init outside its bounds");
}

namespace {

// Indices taking part in the statistics: all of them, or those with samples.
std::vector<std::size_t> included_indices(std::size_t n, std::span<const std::uint32_t> counts) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i)
    if (counts.empty() || counts[i] > 0) idx.push_back(i);
  return idx;
}

}  // namespace

NormalizedLosses normalize(std::span<const double> values, Normalization method,
                           std::span<const std::uint32_t> counts) {
  if (!counts.empty() && counts.size() != values.size())
    throw ConfigError("normalize: counts length mismatch");
  const auto idx = included_indices(values.size(), counts);
  if (idx.size() < 2)
    throw ConfigError("normalize: needs at least 2 classes with samples");

  double mean = 0.0, lo = values[idx[0]], hi = values[idx[0]];
  for (std::size_t i : idx) {
    mean += values[i];
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  mean /= static_cast<double>(idx.size());

  NormalizedLosses out;
  out.values.assign(values.size(), 0.0);

  double denom = 0.0;
  double center = 0.0;
  switch (method) {
    case Normalization::ND: {
      double ss = 0.0;
      for (std::size_t i : idx) ss += (values[i] - mean) * (values[i] - mean);
      denom = std::sqrt(ss / static_cast<double>(idx.size()));
      center = mean;
      break;
    }
    case Normalization::MM:
      denom = hi - lo;
      center = lo;
      break;
    case Normalization::CM:
      denom = hi - lo;
      center = mean;
      break;
  }
  if (denom == 0.0) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i : idx) out.values[i] = (values[i] - center) / denom;
  return out;
}

double sigmoid_weight(double normalized_loss, double alpha, double beta) {
  if (!(alpha > 0.0)) throw ConfigError("sigmoid_weight: alpha must be > 0");
  return beta * (logistic(normalized_loss / alpha) - 0.5);
}

double std_objective(std::span<const double> l0, std::span<const double> l1,
                     double alpha, double beta, Normalization method,
                     std::span<const std::uint32_t> counts) {
  if (l0.size() != l1.size()) throw ConfigError("std_objective: length mismatch");
  const auto norm = normalize(l1, method, counts);
  const auto idx = included_indices(l1.size(), counts);
  double mean1 = 0.0;
  for (std::size_t i : idx) mean1 += l1[i];
  mean1 /= static_cast<double>(idx.size());

  double ss = 0.0;
  for (std::size_t i : idx) {
    const double w = sigmoid_weight(norm.values[i], alpha, beta);
    const double term = l0[i] - w * (l1[i] - l0[i]) - mean1;
    ss += term * term;
  }
  return std::sqrt(ss);
}

AlphaBetaFit fit_alpha_beta(std::span<const double> l0, std::span<const double> l1,
                            const ScalingConfig& config,
                            std::span<const std::uint32_t> counts) {
  config.validate();
  AlphaBetaFit fit;
  fit.alpha = config.alpha_init;
  fit.beta = config.beta_init;
  fit.objective_init =
      std_objective(l0, l1, config.alpha_init, config.beta_init, config.normalization, counts);
  fit.objective = fit.objective_init;

  try {
    const auto res = optim::minimize_bounded_2d(
        [&](double a, double b) {
          return std_objective(l0, l1, a, b, config.normalization, counts);
        },
        {config.alpha_init, config.beta_init},
        {config.alpha_bounds[0], config.beta_bounds[0]},
        {config.alpha_bounds[1], config.beta_bounds[1]});
    if (res.value < fit.objective) {
      fit.alpha = res.point[0];
      fit.beta = res.point[1];
      fit.objective = res.value;
    }
    fit.fallback = res.nonfinite_seen;
  } catch (const NumericError&) {
    fit.fallback = true;  // keep the initial point
  }
  return fit;
}

double total_loss(std::span<const double> class_losses, std::span<const double> weights) {
  if (!weights.empty() && weights.size() != class_losses.size())
    throw ConfigError("total_loss: weight length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < class_losses.size(); ++i)
    sum += (weights.empty() ? 1.0 : 1.0 + weights[i]) * class_losses[i];
  return sum;
}

std::vector<double> scale_weights(std::span<const double> class_losses,
                                  double alpha, double beta, Normalization method,
                                  std::span<const std::uint32_t> counts) {
  const auto norm = normalize(class_losses, method, counts);
  std::vector<double> w(class_losses.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = sigmoid_weight(norm.values[i], alpha, beta);
  return w;
}

ScalingState prepare_scaling(Calibrator& cal, const LogitDataset& ds,
                             const losses::LossSpec& loss, const ScalingConfig& config,
                             const optim::OptimSpec& opt, optim::Minimizer* minimizer) {
  config.validate();
  if (cal.fitted())
    throw ConfigError("prepare_scaling needs an unfitted (freshly initialized) calibrator");

  optim::Minimizer local(opt, cal.param_count());
  optim::Minimizer& m = minimizer ? *minimizer : local;

  auto ev0 = evaluate_loss(cal, ds, loss, {}, true);
  if (!std::isfinite(ev0.total))
    throw NumericError("prepare_scaling: initial loss is non-finite");

  const optim::Objective closure = [&](std::span<const double> p, std::span<double> g) {
    Calibrator probe = cal;
    probe.set_params(p);
    auto ev = evaluate_loss(probe, ds, loss, {}, !g.empty());
    if (!g.empty()) std::copy(ev.gradient.begin(), ev.gradient.end(), g.begin());
    return ev.total;
  };

  std::vector<double> params(cal.params().begin(), cal.params().end());
  m.step(params, ev0.total, ev0.gradient, closure);
  cal.set_params(params);

  auto ev1 = evaluate_loss(cal, ds, loss, {}, false);

  ScalingState state;
  state.l0 = std::move(ev0.class_losses);
  state.l1 = std::move(ev1.class_losses);
  const auto ab = fit_alpha_beta(state.l0.values, state.l1.values, config, state.l1.counts);
  state.alpha = ab.alpha;
  state.beta = ab.beta;
  state.objective_init = ab.objective_init;
  state.objective = ab.objective;
  state.optimizer_fallback = ab.fallback;
  state.weights =
      scale_weights(state.l1.values, state.alpha, state.beta, config.normalization,
                    state.l1.counts);
  return state;
}

}  // namespace calscale::scaling
