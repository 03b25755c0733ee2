#pragma once

#include <span>

#include "pva/tensor.hpp"

namespace pva {

// Mean cross-entropy over the n valid points. The voxel-space validity mask
// is structural here: point generation already dropped every visible-empty
// voxel, so all rows count.
Tensor ssc_loss(Tape& tape, const Tensor& logits, std::span<const uint8_t> labels);

struct SpLossResult {
  Tensor value;
  bool empty_pairs = false;  // warning flag: no propagation pairs were cached
};

// Mean binary cross-entropy between cached pair weights and the same-class
// indicators. weights is [P] or [P,1]; same_class holds 0/1 per pair.
SpLossResult sp_loss(Tape& tape, const Tensor& weights, std::span<const double> same_class);

// ssc + lambda * sp. An empty sp term leaves ssc unchanged.
Tensor total_loss(Tape& tape, const Tensor& ssc, const SpLossResult& sp, double lambda);

}  // namespace pva
