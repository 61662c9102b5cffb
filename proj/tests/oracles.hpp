// Independent reference implementations used to cross-check the library.
// Everything here is deliberately written as straight-line code that does not
// call into the implementation paths it verifies.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "calscale/common.hpp"
#include "calscale/dataset.hpp"

namespace oracles {

// Central finite differences with step h.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(1e-8, std::sqrt(ref));
}

// Per-sample grouping ECE with the (lo, hi] bin convention and confidence 0
// assigned to the first bin.
inline double ece_brute_force(const calscale::Matrix& probs,
                              const std::vector<std::uint32_t>& labels, std::size_t bins) {
  const std::size_t n = probs.rows();
  double ece = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / static_cast<double>(bins);
    const double hi = static_cast<double>(b + 1) / static_cast<double>(bins);
    std::size_t count = 0, correct = 0;
    double conf_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t pred = 0;
      for (std::size_t j = 1; j < probs.cols(); ++j)
        if (probs(i, j) > probs(i, pred)) pred = j;
      const double conf = probs(i, pred);
      const bool member = (b == 0 && conf <= 0.0) || (conf > lo && conf <= hi);
      if (!member) continue;
      ++count;
      conf_sum += conf;
      correct += pred == labels[i];
    }
    if (count == 0) continue;
    const double acc = static_cast<double>(correct) / count;
    const double mean_conf = conf_sum / count;
    ece += (static_cast<double>(count) / static_cast<double>(n)) * std::abs(acc - mean_conf);
  }
  return ece;
}

// The spread objective written out longhand. method: 0 = ND, 1 = MM, 2 = CM.
inline double spread_objective_longhand(const std::vector<double>& l0,
                                        const std::vector<double>& l1, double alpha,
                                        double beta, int method) {
  const std::size_t c = l1.size();
  double mean = 0.0, lo = l1[0], hi = l1[0];
  for (double v : l1) {
    mean += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  mean /= static_cast<double>(c);

  std::vector<double> norm(c, 0.0);
  if (method == 0) {
    double ss = 0.0;
    for (double v : l1) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(c));
    if (sd > 0.0)
      for (std::size_t i = 0; i < c; ++i) norm[i] = (l1[i] - mean) / sd;
  } else {
    const double range = hi - lo;
    const double center = method == 1 ? lo : mean;
    if (range > 0.0)
      for (std::size_t i = 0; i < c; ++i) norm[i] = (l1[i] - center) / range;
  }

  double ss = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const double w = beta / (1.0 + std::exp(-norm[i] / alpha)) - beta / 2.0;
    const double term = l0[i] - w * (l1[i] - l0[i]) - mean;
    ss += term * term;
  }
  return std::sqrt(ss);
}

// 200x200 grid over the box (alpha log-spaced, beta linear), refined by
// coordinate descent with shrinking steps.
struct GridRefined {
  double alpha = 0.0, beta = 0.0, value = 0.0;
};

inline GridRefined grid_refined_minimum(const std::function<double(double, double)>& fn,
                                        double a_lo, double a_hi, double b_lo, double b_hi) {
  GridRefined best;
  best.value = std::numeric_limits<double>::infinity();
  constexpr std::size_t kN = 200;
  for (std::size_t i = 0; i < kN; ++i) {
    const double t = static_cast<double>(i) / (kN - 1);
    const double a = a_lo > 0.0 ? a_lo * std::pow(a_hi / a_lo, t) : a_lo + t * (a_hi - a_lo);
    for (std::size_t j = 0; j < kN; ++j) {
      const double u = static_cast<double>(j) / (kN - 1);
      const double b = b_lo + u * (b_hi - b_lo);
      const double f = fn(a, b);
      if (f < best.value) best = {a, b, f};
    }
  }
  double ha = (a_hi - a_lo) / kN, hb = (b_hi - b_lo) / kN;
  for (int round = 0; round < 200; ++round) {
    bool moved = false;
    for (int axis = 0; axis < 2; ++axis) {
      const double h = axis == 0 ? ha : hb;
      if (h == 0.0) continue;
      for (double dir : {+1.0, -1.0}) {
        double a = best.alpha + (axis == 0 ? dir * h : 0.0);
        double b = best.beta + (axis == 1 ? dir * h : 0.0);
        a = std::clamp(a, a_lo, a_hi);
        b = std::clamp(b, b_lo, b_hi);
        const double f = fn(a, b);
        if (f < best.value) {
          best = {a, b, f};
          moved = true;
        }
      }
    }
    if (!moved) {
      ha *= 0.5;
      hb *= 0.5;
      if (std::max(ha, hb) < 1e-10) break;
    }
  }
  return best;
}

// Random logits with uniform labels.
inline calscale::LogitDataset random_dataset(std::mt19937_64& rng, std::size_t n, std::size_t c,
                                             double spread = 2.5) {
  std::normal_distribution<double> logit(0.0, spread);
  std::uniform_int_distribution<std::uint32_t> label(0, static_cast<std::uint32_t>(c - 1));
  calscale::LogitDataset ds;
  ds.class_count = static_cast<std::uint32_t>(c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) ds.logits.push_back(static_cast<float>(logit(rng)));
    ds.labels.push_back(label(rng));
  }
  return ds;
}

// Resamples the labels of a dataset from the softmax of its own logits, so
// the identity calibrator is (near) optimal.
inline void sample_labels_from_softmax(calscale::LogitDataset& ds, std::mt19937_64& rng) {
  const std::size_t c = ds.class_count;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> p(c);
  for (std::size_t i = 0; i < ds.sample_count(); ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(ds.logit(i, j)));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(static_cast<double>(ds.logit(i, j)) - mx);
      sum += p[j];
    }
    double u = unif(rng) * sum;
    std::uint32_t pick = static_cast<std::uint32_t>(c - 1);
    for (std::size_t j = 0; j < c; ++j) {
      u -= p[j];
      if (u <= 0.0) {
        pick = static_cast<std::uint32_t>(j);
        break;
      }
    }
    ds.labels[i] = pick;
  }
}

// A genuinely miscalibrated dataset: margin/noise logits whose labels are
// resampled from their own softmax (so the identity calibrator is optimal),
// then sharpened by `scale`. The NLL-optimal temperature is ~scale.
inline calscale::LogitDataset overconfident_synthetic(std::uint64_t seed, std::uint32_t classes,
                                                      std::uint32_t per_class,
                                                      double scale = 2.5,
                                                      double margin = 3.0) {
  calscale::SyntheticSpec spec;
  spec.class_count = classes;
  spec.samples_per_class = {per_class};
  spec.class_mean_margin = {margin};
  spec.overconfidence_scale = 1.0;
  spec.noise_std = 1.0;
  spec.seed = seed;
  auto ds = calscale::generate_synthetic(spec);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  sample_labels_from_softmax(ds, rng);
  for (auto& v : ds.logits) v = static_cast<float>(v * scale);
  return ds;
}

// Multiplies each sample's whole logit row by a factor chosen by its label.
inline void scale_rows_by_class(calscale::LogitDataset& ds, const std::vector<double>& factors) {
  for (std::size_t i = 0; i < ds.sample_count(); ++i) {
    const double f = factors[ds.labels[i]];
    for (std::size_t j = 0; j < ds.class_count; ++j)
      ds.logits[i * ds.class_count + j] = static_cast<float>(ds.logits[i * ds.class_count + j] * f);
  }
}

}  // namespace oracles
