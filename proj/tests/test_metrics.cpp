#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "calscale/calibrators.hpp"
#include "calscale/metrics.hpp"
#include "oracles.hpp"

using namespace calscale;
using namespace calscale::metrics;

TEST_CASE("perfect confident predictions have zero calibration error") {
  Matrix probs(4, 3, 0.0);
  std::vector<std::uint32_t> labels{0, 1, 2, 1};
  for (std::size_t i = 0; i < 4; ++i) probs(i, labels[i]) = 1.0;
  const auto r = evaluate(probs, labels, 15);
  CHECK(r.accuracy == 1.0);
  CHECK(r.ece == 0.0);
  CHECK(r.sample_count == 4);
}

TEST_CASE("two samples at confidence 0.8 with one hit") {
  Matrix probs(2, 2);
  probs(0, 0) = 0.8;
  probs(0, 1) = 0.2;
  probs(1, 0) = 0.8;
  probs(1, 1) = 0.2;
  const std::vector<std::uint32_t> labels{0, 1};  // second prediction misses
  for (std::size_t bins = 1; bins <= 5; ++bins) {
    const auto r = evaluate(probs, labels, bins);
    CHECK(r.accuracy == 0.5);
    CHECK(std::abs(r.ece - 0.3) < 1e-15);
  }
}

TEST_CASE("evaluate matches the per-sample grouping reference") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> nd(1, 300), cd(2, 10), bd(1, 20);
  for (int it = 0; it < 60; ++it) {
    const std::size_t n = nd(rng), c = cd(rng), bins = bd(rng);
    const auto ds = oracles::random_dataset(rng, n, c);
    const auto probs = probabilities(to_matrix(ds));
    const auto r = evaluate(probs, ds.labels, bins);
    const double reference = oracles::ece_brute_force(probs, ds.labels, bins);
    CHECK(std::abs(r.ece - reference) < 1e-12);
    CHECK(std::accumulate(r.bins.count.begin(), r.bins.count.end(), 0u) == n);
  }
}

TEST_CASE("ECE is invariant under class relabeling") {
  std::mt19937_64 rng(13);
  const auto ds = oracles::random_dataset(rng, 120, 5);
  const auto probs = probabilities(to_matrix(ds));
  const auto base = evaluate(probs, ds.labels, 15);

  std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  Matrix permuted(probs.rows(), probs.cols());
  std::vector<std::uint32_t> plabels(ds.labels.size());
  for (std::size_t i = 0; i < probs.rows(); ++i)
    for (std::size_t j = 0; j < probs.cols(); ++j) permuted(i, perm[j]) = probs(i, j);
  for (std::size_t i = 0; i < plabels.size(); ++i)
    plabels[i] = static_cast<std::uint32_t>(perm[ds.labels[i]]);

  const auto moved = evaluate(permuted, plabels, 15);
  CHECK(moved.ece == doctest::Approx(base.ece).epsilon(1e-12));
  CHECK(moved.accuracy == base.accuracy);
}

TEST_CASE("a single occupied bin reduces ECE to one absolute gap") {
  // all confidences inside (2/3, 1] with 3 bins -> single bin
  Matrix probs(3, 2);
  const double confs[3] = {0.70, 0.72, 0.75};
  for (int i = 0; i < 3; ++i) {
    probs(i, 0) = confs[i];
    probs(i, 1) = 1.0 - confs[i];
  }
  const std::vector<std::uint32_t> labels{0, 1, 0};
  const auto r = evaluate(probs, labels, 3);
  const double mean_conf = (0.70 + 0.72 + 0.75) / 3.0;
  CHECK(r.ece == doctest::Approx(std::abs(2.0 / 3.0 - mean_conf)).epsilon(1e-12));
}

TEST_CASE("population standard deviation of class losses") {
  losses::ClassLossVector cl;
  cl.values = {2, 2, 2};
  CHECK(class_loss_std(cl) == 0.0);
  cl.values = {1, 2, 3};
  CHECK(class_loss_std(cl) == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-12));
  cl.values = {7};
  CHECK(class_loss_std(cl) == 0.0);
}

TEST_CASE("pearson correlation") {
  std::vector<double> a{1, 2, 3, 5};
  std::vector<double> b{2, 4, 6, 10};
  CHECK(correlation(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> neg(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
  CHECK(correlation(a, neg) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(correlation(a, b) == doctest::Approx(1.0).epsilon(1e-12));

  std::mt19937_64 rng(14);
  std::normal_distribution<double> v(0.0, 1.0);
  for (int it = 0; it < 30; ++it) {
    const std::size_t n = 2 + it;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = v(rng);
      y[i] = v(rng);
    }
    // reference through the raw-moment identity
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sx += x[i];
      sy += y[i];
      sxx += x[i] * x[i];
      syy += y[i] * y[i];
      sxy += x[i] * y[i];
    }
    const double num = n * sxy - sx * sy;
    const double den = std::sqrt(n * sxx - sx * sx) * std::sqrt(n * syy - sy * sy);
    if (den == 0.0) continue;
    CHECK(correlation(x, y) == doctest::Approx(num / den).epsilon(1e-9));
  }

  const std::vector<double> flat{1, 1, 1, 1};
  CHECK_THROWS_AS(correlation(flat, a), NumericError);
  CHECK_THROWS_AS(correlation(std::vector<double>{1}, std::vector<double>{2}), ConfigError);
  CHECK_THROWS_AS(correlation(std::vector<double>{1, 2}, std::vector<double>{2}), ConfigError);
}

TEST_CASE("report and bins serialization") {
  std::mt19937_64 rng(15);
  const auto ds = oracles::random_dataset(rng, 50, 4);
  const auto r = evaluate(probabilities(to_matrix(ds)), ds.labels, 10);

  std::ostringstream report;
  write_report(r, report);
  CHECK(report.str().find("accuracy ") != std::string::npos);
  CHECK(report.str().find("ece ") != std::string::npos);
  CHECK(report.str().find("class_losses") != std::string::npos);

  std::ostringstream bins;
  write_bins(r.bins, bins);
  std::istringstream lines(bins.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) ++count;
  CHECK(count == 11);  // header + 10 bins
}
