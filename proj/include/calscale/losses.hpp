#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "calscale/common.hpp"

namespace calscale::losses {

enum class LossKind { CE, LS, FL };

struct LossSpec {
  LossKind kind = LossKind::CE;
  double ls_alpha = 0.05;  // label-smoothing mass
  double fl_gamma = 3.0;   // focal focusing exponent
  bool per_class_mean = false;  // divide class sums by class counts

  void validate() const;
};

// Probabilities below this floor are clamped before taking logs.
inline constexpr double kProbFloor = 1e-12;

struct ClassLossVector {
  std::vector<double> values;          // per-class loss sums (or means)
  std::vector<std::uint32_t> counts;   // samples per class
  std::size_t clamp_events = 0;        // times the probability floor kicked in

  double total() const;
};

// Per-sample loss of one probability row. `clamp_counter` may be null.
double sample_loss(std::span<const double> probs, std::uint32_t label,
                   const LossSpec& spec, std::size_t* clamp_counter);

// d(sample loss)/d(logits) through the softmax, written into dl_dlogits.
void sample_loss_grad(std::span<const double> probs, std::uint32_t label,
                      const LossSpec& spec, std::span<double> dl_dlogits);

// Sums per-sample losses by ground-truth class. Empty classes get value 0.
ClassLossVector class_losses(const Matrix& probs, std::span<const std::uint32_t> labels,
                             const LossSpec& spec = {});

// Sum of class losses over an index subset.
double subset_loss(const Matrix& probs, std::span<const std::uint32_t> labels,
                   std::span<const std::size_t> class_indices, const LossSpec& spec = {});

// Indices of the k largest values, ties broken toward the smaller index.
// Returned ascending.
std::vector<std::size_t> select_top_k_classes(std::span<const double> values, std::size_t k);

}  // namespace calscale::losses
