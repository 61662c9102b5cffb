#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "calscale/common.hpp"

namespace calscale {

// Raw classifier scores for N samples over C classes, plus ground-truth
// labels. Logits are kept as float32 to match the on-disk format, so a
// save/load cycle is lossless; math happens in double after widening.
struct LogitDataset {
  std::vector<float> logits;          // row-major, N * C
  std::vector<std::uint32_t> labels;  // length N, each in [0, C)
  std::uint32_t class_count = 0;

  std::size_t sample_count() const { return labels.size(); }
  float logit(std::size_t row, std::size_t col) const {
    return logits[row * class_count + col];
  }

  // Throws ConfigError naming the first offending row/column. Empty classes
  // are legal (callers may warn).
  void validate() const;

  std::vector<std::uint32_t> class_counts() const;
};

enum class FileFormat { Binary, Text };

enum class Rounding { Floor, Round, Ceil };

// Long-tailed subsampling: class i keeps base_count * rho^(i/(c-1)) samples.
// Floor rounding reproduces the 20431/19573 reference totals at rho=0.1
// (see tests); Round and Ceil are selectable for comparison.
struct LTSpec {
  std::uint32_t base_count = 0;
  double rho = 0.1;
  std::uint32_t class_count = 0;
  Rounding rounding = Rounding::Floor;
  std::uint64_t seed = 0;

  void validate() const;
};

// Per-class target counts t_i. Throws ConfigError if any t_i < 1.
std::vector<std::uint32_t> lt_target_counts(const LTSpec& spec);

// Desk-scale synthetic logits: a sample of class i gets margin[i] added to
// coordinate i, gaussian noise everywhere, and the whole row multiplied by
// overconfidence_scale.
struct SyntheticSpec {
  std::uint32_t class_count = 0;
  std::vector<std::uint32_t> samples_per_class;  // size 1 broadcasts
  std::vector<double> class_mean_margin;         // size 1 broadcasts
  double overconfidence_scale = 1.0;
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

LogitDataset load_dataset(const std::filesystem::path& path, FileFormat format);
void save_dataset(const LogitDataset& ds, const std::filesystem::path& path, FileFormat format);

LogitDataset generate_synthetic(const SyntheticSpec& spec);

// Draws exactly t_i samples per class without replacement, deterministic for
// a given seed. Throws ConfigError naming the class and deficit if the
// dataset is too small.
LogitDataset make_lt_split(const LogitDataset& ds, const LTSpec& spec);

struct SplitResult {
  LogitDataset first;
  LogitDataset second;
  bool stratified = true;  // false = fell back to a global shuffle
};

// Disjoint, exhaustive split, stratified per class when every class has at
// least 2 samples; otherwise a global shuffle with stratified=false.
SplitResult split(const LogitDataset& ds, double fraction, std::uint64_t seed);

// Widens the float logits into a double matrix for computation.
Matrix to_matrix(const LogitDataset& ds);

}  // namespace calscale
