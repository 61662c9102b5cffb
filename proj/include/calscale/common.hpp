#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace calscale {

// Invalid user input: bad flags, malformed or inconsistent input files,
// violated preconditions. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values, diverging optimization, undefined statistics. Exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operating-system level read/write failures. Exit code 4.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Row-major dense matrix of doubles. Calibration sets are a few MB at most,
// so no view/striding machinery.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// softplus(x) = log(1 + e^x), evaluated without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Inverse of softplus on (0, inf).
inline double softplus_inv(double y) {
  if (!(y > 0)) throw NumericError("softplus_inv requires a positive argument");
  return y > 40 ? y : std::log(std::expm1(y));
}

// 1 / (1 + e^-x) without overflow on either tail.
inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Index of the largest element; ties resolve to the smallest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace calscale
