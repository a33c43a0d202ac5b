#pragma once

#include <cstddef>
#include <span>

#include "xsf/tensor.hpp"

namespace xsf {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// input [N,C_in,H,W] (or unbatched [C_in,H,W]), weight [C_out,C_in/groups,kH,kW],
// optional bias [C_out]. Pass an undefined Tensor for no bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});

// input [...,D_in], weight [D_out,D_in], optional bias [D_out] -> [...,D_out].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias = {});

// Normalizes over the last axis with biased variance; eps sits inside the sqrt.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;
Tensor gelu(const Tensor& x);

// x [N,T,D]; projections are right-multiplied (q = x * w_q), each [D,D].
Tensor multihead_attention(const Tensor& x, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v,
                           const Tensor& w_o, std::size_t heads);

// a [D], b [D] -> scalar.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// a [N,D], b [N,D] -> [N], row-wise cosine.
Tensor cosine_similarity_rows(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
// x [N,...] + b [...], b repeated over the leading axis.
Tensor add_leading(const Tensor& x, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float alpha);
Tensor add_scalar(const Tensor& x, float c);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// wa * a + wb * b; a zero weight cuts the gradient path to its operand entirely.
Tensor weighted_sum(const Tensor& a, float wa, const Tensor& b, float wb);

Tensor reshape(const Tensor& x, Shape dims);
Tensor nchw_to_nhwc(const Tensor& x);
Tensor nhwc_to_nchw(const Tensor& x);
// [N,T,D] -> [N,D]
Tensor mean_tokens(const Tensor& x);
// Gathers rows of the leading axis.
Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows);
// [N,D] -> [N,D], each row scaled to unit L2 norm.
Tensor l2_normalize_rows(const Tensor& x);
// logits [N,K], labels in [0,K) -> mean softmax cross-entropy.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace xsf
