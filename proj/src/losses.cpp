#include "calscale/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace calscale::losses {

void LossSpec::validate() const {
  if (ls_alpha < 0.0 || ls_alpha >= 1.0)
    throw ConfigError("loss spec: ls_alpha must be in [0, 1)");
  if (fl_gamma < 0.0) throw ConfigError("loss spec: fl_gamma must be >= 0");
}

double ClassLossVector::total() const {
  return std::accumulate(values.begin(), values.end(), 0.0);
}

namespace {

// Softmax outputs are strictly positive unless exp underflowed to exactly
// zero; only that case is floored, so the loss stays smooth everywhere else.
inline double floored(double p, std::size_t* clamp_counter) {
  if (p == 0.0) {
    if (clamp_counter) ++*clamp_counter;
    return kProbFloor;
  }
  return p;
}

}  // namespace

double sample_loss(std::span<const double> probs, std::uint32_t label,
                   const LossSpec& spec, std::size_t* clamp_counter) {
  switch (spec.kind) {
    case LossKind::CE:
      return -std::log(floored(probs[label], clamp_counter));
    case LossKind::LS: {
      const double c = static_cast<double>(probs.size());
      const double off = spec.ls_alpha / c;
      double loss = 0.0;
      for (std::size_t k = 0; k < probs.size(); ++k) {
        const double q = off + (k == label ? 1.0 - spec.ls_alpha : 0.0);
        if (q != 0.0) loss -= q * std::log(floored(probs[k], clamp_counter));
      }
      return loss;
    }
    case LossKind::FL: {
      const double u = floored(probs[label], clamp_counter);
      return -std::pow(1.0 - u, spec.fl_gamma) * std::log(u);
    }
  }
  throw ConfigError("loss spec: unknown kind");
}

void sample_loss_grad(std::span<const double> probs, std::uint32_t label,
                      const LossSpec& spec, std::span<double> dl_dlogits) {
  const std::size_t c = probs.size();
  // Terms whose probability underflowed to exactly zero sit on the clamping
  // floor, where the computed loss is locally constant, so they contribute
  // no gradient.
  switch (spec.kind) {
    case LossKind::CE:
      if (probs[label] == 0.0) {
        std::fill(dl_dlogits.begin(), dl_dlogits.end(), 0.0);
        return;
      }
      for (std::size_t k = 0; k < c; ++k) dl_dlogits[k] = probs[k];
      dl_dlogits[label] -= 1.0;
      return;
    case LossKind::LS: {
      const double off = spec.ls_alpha / static_cast<double>(c);
      double live_mass = 0.0;  // soft-target mass of the non-clamped terms
      for (std::size_t k = 0; k < c; ++k)
        if (probs[k] != 0.0) live_mass += off + (k == label ? 1.0 - spec.ls_alpha : 0.0);
      for (std::size_t k = 0; k < c; ++k) {
        const double q = off + (k == label ? 1.0 - spec.ls_alpha : 0.0);
        dl_dlogits[k] = probs[k] * live_mass - (probs[k] != 0.0 ? q : 0.0);
      }
      return;
    }
    case LossKind::FL: {
      if (probs[label] == 0.0) {
        std::fill(dl_dlogits.begin(), dl_dlogits.end(), 0.0);
        return;
      }
      const double u = probs[label];
      const double omu = 1.0 - u;
      const double g = spec.fl_gamma;
      // dL/du for L = -(1-u)^g * log(u); the first term vanishes at u = 1.
      const double first = (g > 0.0 && omu > 0.0) ? g * std::pow(omu, g - 1.0) * std::log(u) : 0.0;
      const double dl_du = first - std::pow(omu, g) / u;
      for (std::size_t k = 0; k < c; ++k) {
        const double dp = u * ((k == label ? 1.0 : 0.0) - probs[k]);
        dl_dlogits[k] = dl_du * dp;
      }
      return;
    }
  }
  throw ConfigError("loss spec: unknown kind");
}

ClassLossVector class_losses(const Matrix& probs, std::span<const std::uint32_t> labels,
                             const LossSpec& spec) {
  spec.validate();
  if (probs.rows() != labels.size())
    throw ConfigError("class_losses: probs rows do not match label count");
  const std::size_t c = probs.cols();

  ClassLossVector out;
  out.values.assign(c, 0.0);
  out.counts.assign(c, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::uint32_t y = labels[i];
    if (y >= c) throw ConfigError("class_losses: label out of range at row " + std::to_string(i));
    out.values[y] += sample_loss(probs.row(i), y, spec, &out.clamp_events);
    ++out.counts[y];
  }
  if (spec.per_class_mean)
    for (std::size_t i = 0; i < c; ++i)
      if (out.counts[i] > 0) out.values[i] /= out.counts[i];
  return out;
}

double subset_loss(const Matrix& probs, std::span<const std::uint32_t> labels,
                   std::span<const std::size_t> class_indices, const LossSpec& spec) {
  if (class_indices.empty()) throw ConfigError("subset_loss: empty class subset");
  const auto cl = class_losses(probs, labels, spec);
  std::vector<bool> seen(cl.values.size(), false);
  double sum = 0.0;
  for (std::size_t i : class_indices) {
    if (i >= cl.values.size())
      throw ConfigError("subset_loss: class index " + std::to_string(i) + " out of range");
    if (seen[i]) throw ConfigError("subset_loss: duplicate class index " + std::to_string(i));
    seen[i] = true;
    sum += cl.values[i];
  }
  return sum;
}

std::vector<std::size_t> select_top_k_classes(std::span<const double> values, std::size_t k) {
  if (k < 1 || k > values.size())
    throw ConfigError("select_top_k_classes: k must be in [1, C]");
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace calscale::losses
