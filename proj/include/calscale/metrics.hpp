#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>

#include "calscale/common.hpp"
#include "calscale/losses.hpp"

namespace calscale::metrics {

// Equal-width confidence bins over (0, 1]; bin b covers (b/B, (b+1)/B] and
// a confidence of exactly 0 lands in bin 0.
struct ReliabilityBins {
  std::size_t bin_count = 0;
  std::vector<double> lower;      // inclusive-exclusive bounds as stated above
  std::vector<double> upper;
  std::vector<double> mean_conf;  // 0 for empty bins
  std::vector<double> accuracy;   // 0 for empty bins
  std::vector<std::uint32_t> count;
};

struct EvalReport {
  double accuracy = 0.0;
  double ece = 0.0;
  double nll = 0.0;  // mean per-sample negative log likelihood
  losses::ClassLossVector class_losses;  // cross-entropy sums per class
  double class_loss_std = 0.0;
  ReliabilityBins bins;
  std::size_t sample_count = 0;
};

EvalReport evaluate(const Matrix& probs, std::span<const std::uint32_t> labels,
                    std::size_t bin_count = 15);

// Population standard deviation of the per-class loss values.
double class_loss_std(const losses::ClassLossVector& cl);
double population_std(std::span<const double> values);

// Pearson correlation; throws NumericError when either series has zero
// variance.
double correlation(std::span<const double> a, std::span<const double> b);

// Key/value document, one "key value..." line each.
void write_report(const EvalReport& report, std::ostream& os);
// Tab-separated: bin_low bin_high mean_conf accuracy count.
void write_bins(const ReliabilityBins& bins, std::ostream& os);

}  // namespace calscale::metrics
