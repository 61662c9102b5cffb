#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calscale/common.hpp"

namespace calscale::optim {

// Full-batch objective. Fills `grad` when non-empty; always returns the value.
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

enum class Method { FirstOrder, QuasiNewton };

struct Schedule {
  std::vector<std::pair<std::size_t, double>> segments;  // (epoch_count, lr)

  std::size_t total_epochs() const;
  double lr_at(std::size_t epoch) const;  // 0-based
  // Parses "200:0.005,400:0.003,400:0.001".
  static Schedule parse(const std::string& text);
};

struct OptimSpec {
  Method method = Method::QuasiNewton;
  double learning_rate = 0.02;
  double weight_decay = 0.0;  // decoupled for FirstOrder, L2 term for QuasiNewton
  std::size_t epochs = 1000;
  std::optional<Schedule> schedule;  // overrides learning_rate per epoch
  std::uint64_t seed = 0;
  bool early_stop = false;
  double early_stop_tol = 1e-12;

  double lr_for_epoch(std::size_t epoch) const;
  void validate() const;
};

// One optimizer instance drives one parameter vector through repeated
// full-batch steps. Adam with decoupled weight decay, or a limited-memory
// quasi-Newton update with Armijo backtracking (monotone by construction).
class Minimizer {
 public:
  Minimizer(const OptimSpec& spec, std::size_t dim);

  // Advances x by one step. fx/gx are the objective value and gradient at x
  // (already computed by the caller); fn serves extra line-search
  // evaluations. Non-finite fx flags divergence and reverts x to the best
  // point seen.
  void step(std::vector<double>& x, double fx, std::span<const double> gx, const Objective& fn);

  bool diverged() const { return diverged_; }
  std::size_t steps_taken() const { return epoch_; }

 private:
  void step_first_order(std::vector<double>& x, std::span<const double> gx);
  void step_quasi_newton(std::vector<double>& x, double fx, std::span<const double> gx,
                         const Objective& fn);

  OptimSpec spec_;
  std::size_t dim_ = 0;
  std::size_t epoch_ = 0;
  bool diverged_ = false;

  // best-so-far for divergence recovery
  double best_value_;
  std::vector<double> best_x_;

  // Adam state
  std::vector<double> m_, v_;

  // quasi-Newton state
  std::deque<std::pair<std::vector<double>, std::vector<double>>> history_;  // (s, y)
  std::vector<double> prev_x_, prev_g_;
  bool have_prev_ = false;
};

struct MinimizeResult {
  std::vector<double> params;  // best point seen
  double value = 0.0;          // objective at params
  std::vector<double> trace;   // per-epoch objective values
  bool diverged = false;
};

MinimizeResult minimize(const Objective& fn, std::vector<double> init, const OptimSpec& spec);

// Derivative-free bound-constrained minimization in two variables: coarse
// scan, Nelder-Mead refinement, compass polish. Returns the best point
// evaluated; never worse than the initial point. Throws NumericError if no
// evaluation was finite.
struct Bounded2DResult {
  std::array<double, 2> point{};
  double value = 0.0;
  bool nonfinite_seen = false;
};

Bounded2DResult minimize_bounded_2d(const std::function<double(double, double)>& fn,
                                    std::array<double, 2> init,
                                    std::array<double, 2> lower,
                                    std::array<double, 2> upper);

}  // namespace calscale::optim
