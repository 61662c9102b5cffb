#include "calscale/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace calscale::optim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::size_t Schedule::total_epochs() const {
  std::size_t total = 0;
  for (const auto& [count, lr] : segments) total += count;
  return total;
}

double Schedule::lr_at(std::size_t epoch) const {
  std::size_t start = 0;
  for (const auto& [count, lr] : segments) {
    if (epoch < start + count) return lr;
    start += count;
  }
  throw ConfigError("schedule does not cover epoch " + std::to_string(epoch));
}

Schedule Schedule::parse(const std::string& text) {
  Schedule s;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ',')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos)
      throw ConfigError("schedule segment '" + part + "' is not epochs:lr");
    try {
      const std::size_t count = std::stoull(part.substr(0, colon));
      const double lr = std::stod(part.substr(colon + 1));
      s.segments.emplace_back(count, lr);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse schedule segment '" + part + "'");
    }
  }
  if (s.segments.empty()) throw ConfigError("empty schedule");
  return s;
}

double OptimSpec::lr_for_epoch(std::size_t epoch) const {
  return schedule ? schedule->lr_at(epoch) : learning_rate;
}

void OptimSpec::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("optim spec: learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("optim spec: epochs must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("optim spec: weight_decay must be >= 0");
  if (schedule) {
    if (schedule->total_epochs() != epochs)
      throw ConfigError("schedule covers " + std::to_string(schedule->total_epochs()) +
                        " epochs but the run has " + std::to_string(epochs));
    for (const auto& [count, lr] : schedule->segments)
      if (count < 1 || !(lr > 0.0))
        throw ConfigError("schedule segments need count >= 1 and lr > 0");
  }
}

Minimizer::Minimizer(const OptimSpec& spec, std::size_t dim)
    : spec_(spec), dim_(dim), best_value_(kInf), m_(dim, 0.0), v_(dim, 0.0) {}

void Minimizer::step(std::vector<double>& x, double fx, std::span<const double> gx,
                     const Objective& fn) {
  if (diverged_) return;
  if (!std::isfinite(fx)) {
    diverged_ = true;
    if (!best_x_.empty()) x = best_x_;
    return;
  }
  if (fx < best_value_) {
    best_value_ = fx;
    best_x_ = x;
  }
  if (spec_.method == Method::FirstOrder)
    step_first_order(x, gx);
  else
    step_quasi_newton(x, fx, gx, fn);
  ++epoch_;
}

void Minimizer::step_first_order(std::vector<double>& x, std::span<const double> gx) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double lr = spec_.lr_for_epoch(epoch_);
  const double t = static_cast<double>(epoch_ + 1);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);
  for (std::size_t i = 0; i < dim_; ++i) {
    m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * gx[i];
    v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * gx[i] * gx[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    x[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + spec_.weight_decay * x[i]);
  }
}

void Minimizer::step_quasi_newton(std::vector<double>& x, double fx, std::span<const double> gx,
                                  const Objective& fn) {
  constexpr std::size_t kHistory = 10;
  constexpr double kArmijo = 1e-4;

  // Weight decay as an explicit L2 term so value and gradient stay paired.
  std::vector<double> g(gx.begin(), gx.end());
  double f0 = fx;
  if (spec_.weight_decay > 0.0) {
    for (std::size_t i = 0; i < dim_; ++i) {
      f0 += 0.5 * spec_.weight_decay * x[i] * x[i];
      g[i] += spec_.weight_decay * x[i];
    }
  }
  auto value_at = [&](std::span<const double> p) {
    double f = fn(p, {});
    if (spec_.weight_decay > 0.0)
      for (std::size_t i = 0; i < dim_; ++i) f += 0.5 * spec_.weight_decay * p[i] * p[i];
    return f;
  };

  if (have_prev_) {
    std::vector<double> s(dim_), y(dim_);
    double sn = 0.0, yn = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      s[i] = x[i] - prev_x_[i];
      y[i] = g[i] - prev_g_[i];
      sn += s[i] * s[i];
      yn += y[i] * y[i];
    }
    const double sy = dot(s, y);
    if (sy > 1e-10 * std::sqrt(sn) * std::sqrt(yn) && sn > 0.0) {
      history_.emplace_back(std::move(s), std::move(y));
      if (history_.size() > kHistory) history_.pop_front();
    }
  }
  prev_x_ = x;
  prev_g_ = g;
  have_prev_ = true;

  // Two-loop recursion.
  std::vector<double> d(g.begin(), g.end());
  std::vector<double> alpha(history_.size());
  for (std::size_t k = history_.size(); k-- > 0;) {
    const auto& [s, y] = history_[k];
    const double rho = 1.0 / dot(s, y);
    alpha[k] = rho * dot(s, d);
    for (std::size_t i = 0; i < dim_; ++i) d[i] -= alpha[k] * y[i];
  }
  if (!history_.empty()) {
    const auto& [s, y] = history_.back();
    const double gamma = dot(s, y) / dot(y, y);
    for (double& di : d) di *= gamma;
  }
  for (std::size_t k = 0; k < history_.size(); ++k) {
    const auto& [s, y] = history_[k];
    const double rho = 1.0 / dot(s, y);
    const double beta = rho * dot(y, d);
    for (std::size_t i = 0; i < dim_; ++i) d[i] += (alpha[k] - beta) * s[i];
  }
  for (double& di : d) di = -di;

  double m = dot(g, d);
  if (!(m < 0.0)) {  // not a descent direction; fall back to steepest descent
    for (std::size_t i = 0; i < dim_; ++i) d[i] = -g[i];
    m = -dot(g, g);
    if (m == 0.0) return;  // stationary
  }

  const double lr = spec_.lr_for_epoch(epoch_);
  std::vector<double> trial(dim_);

  if (history_.empty()) {
    // No curvature yet: sweep the backtracking ray lr * steepest descent and
    // take its best point, a crude exact line search. Sum-scale gradients
    // make the raw first trial enormous; picking the sweep minimum instead
    // of the first acceptable decrease keeps the first iteration near the
    // one-dimensional optimum.
    double best_f = f0, best_t = 0.0;
    double t = lr;
    for (int tries = 0; tries < 60 && t > 0.0; ++tries) {
      if (t * (-m) < 1e-16 * std::max(1.0, std::abs(f0))) break;
      for (std::size_t i = 0; i < dim_; ++i) trial[i] = x[i] + t * d[i];
      const double ft = value_at(trial);
      if (std::isfinite(ft) && ft <= f0 + kArmijo * t * m && ft < best_f) {
        best_f = ft;
        best_t = t;
      }
      t *= 0.5;
    }
    if (best_t > 0.0)
      for (std::size_t i = 0; i < dim_; ++i) x[i] += best_t * d[i];
    return;
  }

  double t = 1.0;
  for (int tries = 0; tries < 40; ++tries) {
    // converged: the largest possible decrease is below rounding noise
    if (t * (-m) < 1e-16 * std::max(1.0, std::abs(f0))) break;
    for (std::size_t i = 0; i < dim_; ++i) trial[i] = x[i] + t * d[i];
    const double ft = value_at(trial);
    if (std::isfinite(ft) && ft <= f0 + kArmijo * t * m) {
      x = trial;
      return;
    }
    t *= 0.5;
    if (t == 0.0) break;
  }
  // No acceptable step; stay put.
}

MinimizeResult minimize(const Objective& fn, std::vector<double> init, const OptimSpec& spec) {
  MinimizeResult result;
  Minimizer opt(spec, init.size());
  std::vector<double> x = std::move(init);
  std::vector<double> g(x.size());
  std::vector<double> best_x = x;
  double best_f = kInf;
  double prev_f = kInf;

  for (std::size_t e = 0; e < spec.epochs; ++e) {
    const double f = fn(x, g);
    result.trace.push_back(f);
    if (!std::isfinite(f)) {
      result.diverged = true;
      break;
    }
    if (f < best_f) {
      best_f = f;
      best_x = x;
    }
    if (spec.early_stop && e > 0 && std::abs(prev_f - f) < spec.early_stop_tol) break;
    prev_f = f;
    opt.step(x, f, g, fn);
    if (opt.diverged()) {
      result.diverged = true;
      break;
    }
  }
  const double f_final = fn(x, {});
  if (std::isfinite(f_final)) {
    result.trace.push_back(f_final);
    if (f_final < best_f) {
      best_f = f_final;
      best_x = x;
    }
  }
  result.params = best_x;
  result.value = best_f;
  return result;
}

namespace {

struct BestTracker {
  std::array<double, 2> point{};
  double value = kInf;
  bool nonfinite_seen = false;
  bool any_finite = false;

  void offer(double a, double b, double f) {
    if (!std::isfinite(f)) {
      nonfinite_seen = true;
      return;
    }
    any_finite = true;
    if (f < value) {
      value = f;
      point = {a, b};
    }
  }
};

}  // namespace

Bounded2DResult minimize_bounded_2d(const std::function<double(double, double)>& fn,
                                    std::array<double, 2> init,
                                    std::array<double, 2> lower,
                                    std::array<double, 2> upper) {
  for (int i = 0; i < 2; ++i) {
    if (!(lower[i] <= upper[i])) throw ConfigError("minimize_bounded_2d: inverted bounds");
    init[i] = std::clamp(init[i], lower[i], upper[i]);
  }
  auto clamp = [&](std::array<double, 2> p) {
    p[0] = std::clamp(p[0], lower[0], upper[0]);
    p[1] = std::clamp(p[1], lower[1], upper[1]);
    return p;
  };

  BestTracker best;
  auto eval = [&](std::array<double, 2> p) {
    const double f = fn(p[0], p[1]);
    best.offer(p[0], p[1], f);
    return std::isfinite(f) ? f : kInf;
  };

  eval(init);

  // Coarse scan; log spacing for a positive axis spanning decades.
  constexpr std::size_t kGrid = 48;
  auto axis_points = [&](int i) {
    std::vector<double> pts;
    if (lower[i] == upper[i]) {
      pts.push_back(lower[i]);
      return pts;
    }
    const bool log_axis = lower[i] > 0.0 && upper[i] / lower[i] > 100.0;
    for (std::size_t k = 0; k < kGrid; ++k) {
      const double t = static_cast<double>(k) / (kGrid - 1);
      pts.push_back(log_axis ? lower[i] * std::pow(upper[i] / lower[i], t)
                             : lower[i] + t * (upper[i] - lower[i]));
    }
    pts.back() = upper[i];
    return pts;
  };
  for (double a : axis_points(0))
    for (double b : axis_points(1)) eval({a, b});

  // Nelder-Mead refinement around the scan winner.
  if (best.any_finite) {
    std::array<std::array<double, 2>, 3> simplex;
    std::array<double, 3> fv;
    const double ha = (upper[0] - lower[0]) * 0.05;
    const double hb = (upper[1] - lower[1]) * 0.05;
    simplex[0] = best.point;
    simplex[1] = clamp({best.point[0] + (ha > 0 ? ha : 0.05), best.point[1]});
    simplex[2] = clamp({best.point[0], best.point[1] + (hb > 0 ? hb : 0.05)});
    if (simplex[1][0] == simplex[0][0]) simplex[1][0] = std::max(lower[0], simplex[0][0] - ha);
    if (simplex[2][1] == simplex[0][1]) simplex[2][1] = std::max(lower[1], simplex[0][1] - hb);
    for (int i = 0; i < 3; ++i) fv[i] = eval(simplex[i]);

    for (int iter = 0; iter < 300; ++iter) {
      std::array<int, 3> order{0, 1, 2};
      std::sort(order.begin(), order.end(), [&](int a, int b) { return fv[a] < fv[b]; });
      const auto &pb = simplex[order[0]], &pw = simplex[order[2]];
      const double fb = fv[order[0]], fs = fv[order[1]], fw = fv[order[2]];
      if (std::abs(fw - fb) < 1e-14 * (1.0 + std::abs(fb))) break;

      std::array<double, 2> centroid{(pb[0] + simplex[order[1]][0]) / 2.0,
                                     (pb[1] + simplex[order[1]][1]) / 2.0};
      auto refl = clamp({centroid[0] + (centroid[0] - pw[0]), centroid[1] + (centroid[1] - pw[1])});
      const double fr = eval(refl);
      if (fr < fb) {
        auto expd = clamp({centroid[0] + 2.0 * (centroid[0] - pw[0]),
                           centroid[1] + 2.0 * (centroid[1] - pw[1])});
        const double fe = eval(expd);
        simplex[order[2]] = fe < fr ? expd : refl;
        fv[order[2]] = std::min(fe, fr);
      } else if (fr < fs) {
        simplex[order[2]] = refl;
        fv[order[2]] = fr;
      } else {
        auto contr = clamp({centroid[0] + 0.5 * (pw[0] - centroid[0]),
                            centroid[1] + 0.5 * (pw[1] - centroid[1])});
        const double fc = eval(contr);
        if (fc < fw) {
          simplex[order[2]] = contr;
          fv[order[2]] = fc;
        } else {
          for (int i : {order[1], order[2]}) {
            simplex[i] = clamp({pb[0] + 0.5 * (simplex[i][0] - pb[0]),
                                pb[1] + 0.5 * (simplex[i][1] - pb[1])});
            fv[i] = eval(simplex[i]);
          }
        }
      }
    }
  }

  // Compass polish from the global best.
  if (best.any_finite) {
    std::array<double, 2> p = best.point;
    double fp = best.value;
    std::array<double, 2> h{(upper[0] - lower[0]) / 64.0, (upper[1] - lower[1]) / 64.0};
    for (int i = 0; i < 2; ++i)
      if (h[i] == 0.0) h[i] = 0.0;
    for (int round = 0; round < 60; ++round) {
      bool moved = false;
      for (int axis = 0; axis < 2; ++axis) {
        if (h[axis] == 0.0) continue;
        for (double dir : {+1.0, -1.0}) {
          auto q = p;
          q[axis] = std::clamp(q[axis] + dir * h[axis], lower[axis], upper[axis]);
          if (q[axis] == p[axis]) continue;
          const double fq = eval(q);
          if (fq < fp) {
            p = q;
            fp = fq;
            moved = true;
          }
        }
      }
      if (!moved) {
        h[0] *= 0.5;
        h[1] *= 0.5;
        if (std::max(h[0], h[1]) < 1e-9) break;
      }
    }
  }

  if (!best.any_finite)
    throw NumericError("minimize_bounded_2d: objective non-finite everywhere");
  return {best.point, best.value, best.nonfinite_seen};
}

}  // namespace calscale::optim
