#include <doctest.h>

#include <cmath>

#include "calscale/optim.hpp"

using namespace calscale;
using namespace calscale::optim;

namespace {

// f(x) = (x - 3)^2
double quadratic(std::span<const double> x, std::span<double> g) {
  const double d = x[0] - 3.0;
  if (!g.empty()) g[0] = 2.0 * d;
  return d * d;
}

}  // namespace

TEST_CASE("both methods minimize a scalar quadratic") {
  SUBCASE("quasi-newton") {
    OptimSpec spec;
    spec.method = Method::QuasiNewton;
    const auto r = minimize(quadratic, {0.0}, spec);
    CHECK(std::abs(r.params[0] - 3.0) < 1e-6);
    CHECK_FALSE(r.diverged);
  }
  SUBCASE("first-order") {
    OptimSpec spec;
    spec.method = Method::FirstOrder;
    spec.learning_rate = 0.05;
    spec.epochs = 4000;
    const auto r = minimize(quadratic, {0.0}, spec);
    CHECK(std::abs(r.params[0] - 3.0) < 1e-6);
  }
}

TEST_CASE("decoupled weight decay pulls the fixed point toward the origin") {
  OptimSpec plain;
  plain.method = Method::FirstOrder;
  plain.learning_rate = 0.05;
  plain.epochs = 4000;
  OptimSpec decayed = plain;
  decayed.weight_decay = 0.002;
  const auto a = minimize(quadratic, {0.0}, plain);
  const auto b = minimize(quadratic, {0.0}, decayed);
  CHECK(b.params[0] < a.params[0]);
  CHECK(a.params[0] == doctest::Approx(3.0).epsilon(1e-4));
}

TEST_CASE("identical specs give identical trajectories") {
  OptimSpec spec;
  spec.method = Method::QuasiNewton;
  spec.epochs = 200;
  const auto a = minimize(quadratic, {0.0}, spec);
  const auto b = minimize(quadratic, {0.0}, spec);
  CHECK(a.params == b.params);
  CHECK(a.trace == b.trace);
}

TEST_CASE("the returned value never exceeds a trace entry") {
  OptimSpec spec;
  spec.method = Method::FirstOrder;
  spec.learning_rate = 0.5;  // deliberately oscillatory
  spec.epochs = 300;
  const auto r = minimize(quadratic, {0.0}, spec);
  for (double f : r.trace) CHECK(r.value <= f);
}

TEST_CASE("schedule lookup is exact per segment") {
  Schedule s;
  s.segments = {{200, 0.005}, {400, 0.003}, {400, 0.001}};
  CHECK(s.total_epochs() == 1000);
  CHECK(s.lr_at(0) == 0.005);
  CHECK(s.lr_at(199) == 0.005);
  CHECK(s.lr_at(200) == 0.003);
  CHECK(s.lr_at(599) == 0.003);
  CHECK(s.lr_at(600) == 0.001);
  CHECK(s.lr_at(999) == 0.001);
  CHECK_THROWS_AS(s.lr_at(1000), ConfigError);

  const auto parsed = Schedule::parse("200:0.005,400:0.003,400:0.001");
  CHECK(parsed.segments == s.segments);
  CHECK_THROWS_AS(Schedule::parse("abc"), ConfigError);

  OptimSpec spec;
  spec.schedule = s;
  spec.epochs = 999;  // does not cover
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.epochs = 1000;
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("early stop flag halts on a flat objective") {
  OptimSpec spec;
  spec.method = Method::QuasiNewton;
  spec.epochs = 1000;
  spec.early_stop = true;
  spec.early_stop_tol = 1e-14;
  const auto r = minimize(quadratic, {0.0}, spec);
  CHECK(r.trace.size() < 1000);
  CHECK(std::abs(r.params[0] - 3.0) < 1e-5);
}

TEST_CASE("bounded 2-d minimization") {
  SUBCASE("interior optimum") {
    const auto r = minimize_bounded_2d(
        [](double a, double b) { return (a - 1.0) * (a - 1.0) + (b - 1.0) * (b - 1.0); },
        {0.3, 1.7}, {0.0, 0.0}, {2.0, 2.0});
    CHECK(std::abs(r.point[0] - 1.0) < 1e-4);
    CHECK(std::abs(r.point[1] - 1.0) < 1e-4);
  }
  SUBCASE("boundary optimum") {
    const auto r = minimize_bounded_2d([](double a, double) { return -a; }, {0.5, 0.5},
                                       {1e-3, 0.0}, {10.0, 1.0});
    CHECK(std::abs(r.point[0] - 10.0) < 1e-4);
  }
  SUBCASE("a flat objective returns the initial point") {
    const auto r = minimize_bounded_2d([](double, double) { return 42.0; }, {1.0, 1.5},
                                       {1e-3, 0.0}, {1e3, 2.0});
    CHECK(r.point[0] == 1.0);
    CHECK(r.point[1] == 1.5);
    CHECK(r.value == 42.0);
  }
  SUBCASE("result stays inside the box and never exceeds the init value") {
    const auto fn = [](double a, double b) { return std::sin(5 * a) * std::cos(3 * b) + a * b; };
    const auto r = minimize_bounded_2d(fn, {0.7, 1.1}, {0.1, 0.0}, {2.0, 2.0});
    CHECK(r.point[0] >= 0.1);
    CHECK(r.point[0] <= 2.0);
    CHECK(r.point[1] >= 0.0);
    CHECK(r.point[1] <= 2.0);
    CHECK(r.value <= fn(0.7, 1.1));
  }
  SUBCASE("an everywhere non-finite objective is an error") {
    CHECK_THROWS_AS(minimize_bounded_2d(
                        [](double, double) { return std::numeric_limits<double>::quiet_NaN(); },
                        {1.0, 1.0}, {0.0, 0.0}, {2.0, 2.0}),
                    NumericError);
  }
}
