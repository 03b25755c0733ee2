#include "pva/loss.hpp"

#include <vector>

namespace pva {

Tensor ssc_loss(Tape& tape, const Tensor& logits, std::span<const uint8_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int64_t>(labels.size()))
    throw DimensionError("ssc_loss: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  const int64_t n = logits.dim(0);
  if (n == 0) throw ValueError("ssc_loss on an empty point set");
  std::vector<int> targets(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) targets[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)];
  const std::vector<double> weights(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
  return softmax_cross_entropy(tape, logits, targets, weights).loss;
}

SpLossResult sp_loss(Tape& tape, const Tensor& weights, std::span<const double> same_class) {
  SpLossResult res;
  const int64_t n = weights.defined() ? weights.numel() : 0;
  if (n == 0) {
    res.value = Tensor::scalar(0.0);
    res.empty_pairs = true;
    return res;
  }
  if (n != static_cast<int64_t>(same_class.size()))
    throw DimensionError("sp_loss: " + std::to_string(same_class.size()) +
                         " indicators for " + std::to_string(n) + " weights");
  res.value = binary_cross_entropy(tape, weights, same_class, 1.0 / static_cast<double>(n));
  return res;
}

Tensor total_loss(Tape& tape, const Tensor& ssc, const SpLossResult& sp, double lambda) {
  if (sp.empty_pairs) return ssc;
  return add(tape, ssc, scale(tape, sp.value, lambda));
}

}  // namespace pva
