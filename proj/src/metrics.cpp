#include "calscale/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace calscale::metrics {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Bin of a confidence under the (b/B, (b+1)/B] convention, 0 -> bin 0. The
// scan after the closed-form guess keeps the result consistent with direct
// comparisons against the rounded bin edges.
std::size_t bin_of(double conf, std::size_t bins) {
  if (conf <= 0.0) return 0;
  double scaled = conf * static_cast<double>(bins);
  auto b = static_cast<std::size_t>(std::max(0.0, std::ceil(scaled) - 1.0));
  if (b >= bins) b = bins - 1;
  while (b > 0 && conf <= static_cast<double>(b) / static_cast<double>(bins)) --b;
  while (b + 1 < bins && conf > static_cast<double>(b + 1) / static_cast<double>(bins)) ++b;
  return b;
}

}  // namespace

EvalReport evaluate(const Matrix& probs, std::span<const std::uint32_t> labels,
                    std::size_t bin_count) {
  if (probs.rows() != labels.size())
    throw ConfigError("evaluate: probs rows do not match label count");
  if (probs.rows() == 0) throw ConfigError("evaluate: empty input");
  if (bin_count < 1) throw ConfigError("evaluate: bin_count must be >= 1");

  const std::size_t n = probs.rows();
  EvalReport report;
  report.sample_count = n;

  auto& bins = report.bins;
  bins.bin_count = bin_count;
  bins.lower.resize(bin_count);
  bins.upper.resize(bin_count);
  bins.mean_conf.assign(bin_count, 0.0);
  bins.accuracy.assign(bin_count, 0.0);
  bins.count.assign(bin_count, 0);
  for (std::size_t b = 0; b < bin_count; ++b) {
    bins.lower[b] = static_cast<double>(b) / static_cast<double>(bin_count);
    bins.upper[b] = static_cast<double>(b + 1) / static_cast<double>(bin_count);
  }

  std::vector<double> conf_sum(bin_count, 0.0);
  std::vector<std::uint32_t> correct_in_bin(bin_count, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = probs.row(i);
    const std::size_t pred = argmax(row);
    const double conf = row[pred];
    const bool hit = pred == labels[i];
    correct += hit;
    const std::size_t b = bin_of(conf, bin_count);
    ++bins.count[b];
    conf_sum[b] += conf;
    correct_in_bin[b] += hit;
  }

  report.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  double ece = 0.0;
  for (std::size_t b = 0; b < bin_count; ++b) {
    if (bins.count[b] == 0) continue;
    bins.mean_conf[b] = conf_sum[b] / bins.count[b];
    bins.accuracy[b] = static_cast<double>(correct_in_bin[b]) / bins.count[b];
    ece += (static_cast<double>(bins.count[b]) / static_cast<double>(n)) *
           std::abs(bins.accuracy[b] - bins.mean_conf[b]);
  }
  report.ece = ece;

  report.class_losses = losses::class_losses(probs, labels, losses::LossSpec{});
  report.nll = report.class_losses.total() / static_cast<double>(n);
  report.class_loss_std = class_loss_std(report.class_losses);
  return report;
}

double population_std(std::span<const double> values) {
  if (values.empty()) throw ConfigError("population_std: empty input");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

double class_loss_std(const losses::ClassLossVector& cl) {
  return population_std(cl.values);
}

double correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("correlation: length mismatch");
  if (a.size() < 2) throw ConfigError("correlation: need at least 2 points");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0)
    throw NumericError("correlation undefined: a series has zero variance");
  return sab / std::sqrt(saa * sbb);
}

void write_report(const EvalReport& report, std::ostream& os) {
  os << "accuracy " << fmt(report.accuracy) << '\n';
  os << "ece " << fmt(report.ece) << '\n';
  os << "nll " << fmt(report.nll) << '\n';
  os << "class_loss_std " << fmt(report.class_loss_std) << '\n';
  os << "sample_count " << report.sample_count << '\n';
  os << "class_count " << report.class_losses.values.size() << '\n';
  os << "bin_count " << report.bins.bin_count << '\n';
  os << "class_losses";
  for (double v : report.class_losses.values) os << ' ' << fmt(v);
  os << '\n';
  os << "class_counts";
  for (auto c : report.class_losses.counts) os << ' ' << c;
  os << '\n';
}

void write_bins(const ReliabilityBins& bins, std::ostream& os) {
  os << "bin_low\tbin_high\tmean_conf\taccuracy\tcount\n";
  for (std::size_t b = 0; b < bins.bin_count; ++b) {
    os << fmt(bins.lower[b]) << '\t' << fmt(bins.upper[b]) << '\t' << fmt(bins.mean_conf[b])
       << '\t' << fmt(bins.accuracy[b]) << '\t' << bins.count[b] << '\n';
  }
}

}  // namespace calscale::metrics
