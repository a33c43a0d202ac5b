#include "xsf/objectives.hpp"

#include <string>
#include <vector>

#include "xsf/error.hpp"
#include "xsf/ops.hpp"

namespace xsf {

namespace {

void check_unit_range(const char* key, float v) {
  if (!(v >= 0.0f && v <= 1.0f)) {
    throw Error(ErrorKind::InvalidConfig, std::string(key) + " must lie in [0,1], got " + std::to_string(v));
  }
}

Tensor as_rows(const Tensor& e) { return e.rank() == 1 ? reshape(e, {1, e.dim(0)}) : e; }

}  // namespace

void LossConfig::validate() const {
  check_unit_range("margin", margin);
  check_unit_range("lambda", lambda);
}

Tensor contrastive_loss(const Tensor& e_s, const Tensor& e_t, int y, float margin) {
  if (e_s.rank() != 1) throw Error(ErrorKind::InvalidShape, "contrastive_loss: expected [D], got " + shape_str(e_s.dims()));
  const int labels[] = {y};
  return contrastive_loss_batch(as_rows(e_s), as_rows(e_t), labels, margin);
}

Tensor contrastive_loss_batch(const Tensor& e_s, const Tensor& e_t, std::span<const int> y, float margin) {
  check_unit_range("margin", margin);
  if (e_s.rank() != 2 || y.size() != e_s.dim(0)) {
    throw Error(ErrorKind::InvalidShape, "contrastive_loss_batch: embeddings " + shape_str(e_s.dims()) + " with " +
                                             std::to_string(y.size()) + " labels");
  }
  const std::size_t n = y.size();
  std::vector<float> genuine(n), impostor(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 0 && y[i] != 1) throw Error(ErrorKind::InvalidCall, "contrastive label must be 0 or 1");
    genuine[i] = static_cast<float>(y[i]);
    impostor[i] = 1.0f - genuine[i];
  }
  const Tensor cos = cosine_similarity_rows(e_s, e_t);
  const Tensor pull = mul(add_scalar(scale(cos, -1.0f), 1.0f), Tensor({n}, genuine));
  const Tensor push = mul(relu(add_scalar(cos, -margin)), Tensor({n}, impostor));
  return mean(add(pull, push));
}

Tensor self_distillation_loss(const Tensor& e_teacher, const Tensor& e_student) {
  if (e_student.rank() != 1) {
    throw Error(ErrorKind::InvalidShape, "self_distillation_loss: expected [D], got " + shape_str(e_student.dims()));
  }
  return self_distillation_loss_batch(as_rows(e_teacher), as_rows(e_student));
}

Tensor self_distillation_loss_batch(const Tensor& e_teacher, const Tensor& e_student) {
  const Tensor teacher = e_teacher.requires_grad() ? e_teacher.detach() : e_teacher;
  return mean(add_scalar(scale(cosine_similarity_rows(teacher, e_student), -1.0f), 1.0f));
}

Tensor total_loss(const Tensor& contrastive, const Tensor& distillation, float lambda) {
  check_unit_range("lambda", lambda);
  return weighted_sum(contrastive, 1.0f - lambda, distillation, lambda);
}

}  // namespace xsf
