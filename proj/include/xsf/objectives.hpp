#pragma once

#include <span>

#include "xsf/tensor.hpp"

namespace xsf {

struct LossConfig {
  float margin = 0.0f;
  float lambda = 0.75f;

  void validate() const;
};

// y=1: 1 - cos(e_s, e_t); y=0: max(0, cos(e_s, e_t) - margin). Scalar.
Tensor contrastive_loss(const Tensor& e_s, const Tensor& e_t, int y, float margin);
// Row-wise over [N,D] embeddings, averaged over the batch.
Tensor contrastive_loss_batch(const Tensor& e_s, const Tensor& e_t, std::span<const int> y, float margin);

// 1 - cos(teacher, student). The teacher embedding is detached.
Tensor self_distillation_loss(const Tensor& e_teacher, const Tensor& e_student);
Tensor self_distillation_loss_batch(const Tensor& e_teacher, const Tensor& e_student);

// (1 - lambda) * contrastive + lambda * distillation.
Tensor total_loss(const Tensor& contrastive, const Tensor& distillation, float lambda);

}  // namespace xsf
