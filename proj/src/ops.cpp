#include "xsf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xsf/error.hpp"

namespace xsf {

namespace {

using NodePtr = std::shared_ptr<Node>;

[[noreturn]] void shape_error(const std::string& what) { throw Error(ErrorKind::InvalidShape, what); }

void require_same_dims(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dims() != b.dims()) {
    shape_error(std::string(op) + ": dims " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  }
}

bool wants_grad(const NodePtr& n) { return n && n->requires_grad; }

// Range of output columns whose input column (o*stride - pad + k) lands inside [0, size).
std::pair<long, long> valid_range(long k, long stride, long pad, long size, long out_size) {
  long lo = 0;
  if (pad - k > 0) lo = (pad - k + stride - 1) / stride;
  long hi = (size - 1 + pad - k);
  hi = hi < 0 ? -1 : hi / stride;
  hi = std::min(hi + 1, out_size);
  return {lo, std::max(lo, hi)};
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  const bool unbatched = input.rank() == 3;
  if (input.rank() != 3 && input.rank() != 4) shape_error("conv2d: input must be [N,C,H,W], got " + shape_str(input.dims()));
  if (weight.rank() != 4) shape_error("conv2d: weight must be [C_out,C_in/groups,kH,kW], got " + shape_str(weight.dims()));
  if (opts.groups == 0 || opts.stride == 0) throw Error(ErrorKind::InvalidConfig, "conv2d: stride and groups must be positive");
  const std::size_t off = unbatched ? 0 : 1;
  const long N = unbatched ? 1 : static_cast<long>(input.dim(0));
  const long C = input.dim(off), H = input.dim(off + 1), W = input.dim(off + 2);
  const long Co = weight.dim(0), Cig = weight.dim(1), kH = weight.dim(2), kW = weight.dim(3);
  const long G = opts.groups, S = opts.stride, P = opts.padding;
  if (C % G != 0 || Co % G != 0) {
    shape_error("conv2d: channels in=" + std::to_string(C) + " out=" + std::to_string(Co) +
                " not divisible by groups=" + std::to_string(G));
  }
  if (Cig != C / G) {
    shape_error("conv2d: weight " + shape_str(weight.dims()) + " expects " + std::to_string(Cig * G) +
                " input channels, input " + shape_str(input.dims()) + " has " + std::to_string(C));
  }
  if (H + 2 * P < kH || W + 2 * P < kW) {
    shape_error("conv2d: kernel " + std::to_string(kH) + "x" + std::to_string(kW) + " exceeds padded input " +
                shape_str(input.dims()));
  }
  if (bias.defined() && (bias.rank() != 1 || static_cast<long>(bias.dim(0)) != Co)) {
    shape_error("conv2d: bias " + shape_str(bias.dims()) + " does not match C_out=" + std::to_string(Co));
  }
  const long Ho = (H + 2 * P - kH) / S + 1, Wo = (W + 2 * P - kW) / S + 1;
  const long Cog = Co / G;

  // Visits every (output, input, weight) triple of the convolution.
  auto for_each_tap = [=](auto&& fn) {
    for (long n = 0; n < N; ++n)
      for (long oc = 0; oc < Co; ++oc) {
        const long g = oc / Cog;
        const long out_base = ((n * Co + oc) * Ho) * Wo;
        for (long icl = 0; icl < Cig; ++icl) {
          const long ic = g * Cig + icl;
          const long in_base = ((n * C + ic) * H) * W;
          const long w_base = ((oc * Cig + icl) * kH) * kW;
          for (long kh = 0; kh < kH; ++kh) {
            const auto [oh_lo, oh_hi] = valid_range(kh, S, P, H, Ho);
            for (long kw = 0; kw < kW; ++kw) {
              const auto [ow_lo, ow_hi] = valid_range(kw, S, P, W, Wo);
              if (ow_lo >= ow_hi) continue;
              for (long oh = oh_lo; oh < oh_hi; ++oh) {
                const long ih = oh * S - P + kh;
                fn(out_base + oh * Wo, in_base + ih * W - P + kw, w_base + kh * kW + kw, ow_lo, ow_hi);
              }
            }
          }
        }
      }
  };

  std::vector<float> out(static_cast<std::size_t>(N * Co * Ho * Wo), 0.0f);
  const float* x = input.data().data();
  const float* w = weight.data().data();
  if (bias.defined()) {
    for (long n = 0; n < N; ++n)
      for (long oc = 0; oc < Co; ++oc)
        std::fill_n(out.begin() + ((n * Co + oc) * Ho) * Wo, Ho * Wo, bias.data()[oc]);
  }
  float* y = out.data();
  for_each_tap([&](long o, long i, long k, long lo, long hi) {
    const float wv = w[k];
    for (long ow = lo; ow < hi; ++ow) y[o + ow] += wv * x[i + ow * S];
  });

  Shape dims = unbatched ? Shape{std::size_t(Co), std::size_t(Ho), std::size_t(Wo)}
                         : Shape{std::size_t(N), std::size_t(Co), std::size_t(Ho), std::size_t(Wo)};
  NodePtr xn = input.shared_node(), wn = weight.shared_node(), bn = bias.defined() ? bias.shared_node() : nullptr;
  return detail::make_result(
      std::move(dims), std::move(out), {input, weight, bias},
      [=](Node& self) {
        const float* go = self.grad.data();
        const float* xv = xn->data.data();
        const float* wv = wn->data.data();
        float* gx = wants_grad(xn) ? xn->grad_buffer().data() : nullptr;
        float* gw = wants_grad(wn) ? wn->grad_buffer().data() : nullptr;
        if (gx || gw) {
          for_each_tap([&](long o, long i, long k, long lo, long hi) {
            if (gx) {
              const float wk = wv[k];
              for (long ow = lo; ow < hi; ++ow) gx[i + ow * S] += wk * go[o + ow];
            }
            if (gw) {
              float acc = 0.0f;
              for (long ow = lo; ow < hi; ++ow) acc += go[o + ow] * xv[i + ow * S];
              gw[k] += acc;
            }
          });
        }
        if (wants_grad(bn)) {
          auto& gb = bn->grad_buffer();
          for (long n = 0; n < N; ++n)
            for (long oc = 0; oc < Co; ++oc) {
              const float* p = go + ((n * Co + oc) * Ho) * Wo;
              float acc = 0.0f;
              for (long j = 0; j < Ho * Wo; ++j) acc += p[j];
              gb[oc] += acc;
            }
        }
      },
      "conv2d");
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() < 1 || weight.rank() != 2) {
    shape_error("linear: input " + shape_str(input.dims()) + ", weight " + shape_str(weight.dims()));
  }
  const std::size_t Din = input.dims().back();
  const std::size_t Dout = weight.dim(0);
  if (weight.dim(1) != Din) {
    shape_error("linear: input inner dim " + std::to_string(Din) + " vs weight " + shape_str(weight.dims()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Dout)) {
    shape_error("linear: bias " + shape_str(bias.dims()) + " vs D_out=" + std::to_string(Dout));
  }
  const std::size_t rows = input.numel() / Din;
  const float* x = input.data().data();
  const float* w = weight.data().data();

  // out[r,:] = sum_i x[r,i] * wT[i,:] keeps the inner loop contiguous.
  std::vector<float> wt(Din * Dout);
  for (std::size_t j = 0; j < Dout; ++j)
    for (std::size_t i = 0; i < Din; ++i) wt[i * Dout + j] = w[j * Din + i];
  std::vector<float> out(rows * Dout, 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    float* o = out.data() + r * Dout;
    if (bias.defined()) std::copy_n(bias.data().data(), Dout, o);
    for (std::size_t i = 0; i < Din; ++i) {
      const float xv = x[r * Din + i];
      const float* wr = wt.data() + i * Dout;
      for (std::size_t j = 0; j < Dout; ++j) o[j] += xv * wr[j];
    }
  }
  Shape dims = input.dims();
  dims.back() = Dout;
  NodePtr xn = input.shared_node(), wn = weight.shared_node(), bn = bias.defined() ? bias.shared_node() : nullptr;
  return detail::make_result(
      std::move(dims), std::move(out), {input, weight, bias},
      [=](Node& self) {
        const float* go = self.grad.data();
        if (wants_grad(xn)) {
          float* gx = xn->grad_buffer().data();
          const float* wv = wn->data.data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < Dout; ++j) {
              const float g = go[r * Dout + j];
              const float* wr = wv + j * Din;
              float* gr = gx + r * Din;
              for (std::size_t i = 0; i < Din; ++i) gr[i] += g * wr[i];
            }
        }
        if (wants_grad(wn)) {
          float* gw = wn->grad_buffer().data();
          const float* xv = xn->data.data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < Dout; ++j) {
              const float g = go[r * Dout + j];
              const float* xr = xv + r * Din;
              float* gr = gw + j * Din;
              for (std::size_t i = 0; i < Din; ++i) gr[i] += g * xr[i];
            }
        }
        if (wants_grad(bn)) {
          auto& gb = bn->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < Dout; ++j) gb[j] += go[r * Dout + j];
        }
      },
      "linear");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() < 1) shape_error("layer_norm: input must have at least one axis");
  const std::size_t D = x.dims().back();
  if (gamma.dims() != Shape{D} || beta.dims() != Shape{D}) {
    shape_error("layer_norm: gamma " + shape_str(gamma.dims()) + " / beta " + shape_str(beta.dims()) +
                " vs feature dim " + std::to_string(D));
  }
  if (!(eps > 0.0f)) throw Error(ErrorKind::InvalidConfig, "layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / D;
  const float* xv = x.data().data();
  const float* g = gamma.data().data();
  const float* b = beta.data().data();
  std::vector<float> out(x.numel());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto rstd = std::make_shared<std::vector<float>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv + r * D;
    double mu = 0.0;
    for (std::size_t i = 0; i < D; ++i) mu += row[i];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(D);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < D; ++i) {
      const float h = static_cast<float>(row[i] - mu) * rs;
      (*xhat)[r * D + i] = h;
      out[r * D + i] = h * g[i] + b[i];
    }
  }
  NodePtr xn = x.shared_node(), gn = gamma.shared_node(), bn = beta.shared_node();
  return detail::make_result(
      x.dims(), std::move(out), {x, gamma, beta},
      [=](Node& self) {
        const float* go = self.grad.data();
        const float* gv = gn->data.data();
        float* gx = wants_grad(xn) ? xn->grad_buffer().data() : nullptr;
        float* gg = wants_grad(gn) ? gn->grad_buffer().data() : nullptr;
        float* gb = wants_grad(bn) ? bn->grad_buffer().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const float* gr = go + r * D;
          const float* hr = xhat->data() + r * D;
          if (gg)
            for (std::size_t i = 0; i < D; ++i) gg[i] += gr[i] * hr[i];
          if (gb)
            for (std::size_t i = 0; i < D; ++i) gb[i] += gr[i];
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
              const double dh = static_cast<double>(gr[i]) * gv[i];
              m1 += dh;
              m2 += dh * hr[i];
            }
            m1 /= static_cast<double>(D);
            m2 /= static_cast<double>(D);
            const float rs = (*rstd)[r];
            for (std::size_t i = 0; i < D; ++i) {
              const double dh = static_cast<double>(gr[i]) * gv[i];
              gx[r * D + i] += static_cast<float>(rs * (dh - m1 - hr[i] * m2));
            }
          }
        }
      },
      "layer_norm");
}

Tensor gelu(const Tensor& x) {
  const float* xv = x.data().data();
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    const double u = kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v);
    out[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(u)));
  }
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.dims(), std::move(out), {x},
      [=](Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const double v = xn->data[i];
          const double u = kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v);
          const double t = std::tanh(u);
          const double du = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
          const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
          gx[i] += static_cast<float>(self.grad[i] * d);
        }
      },
      "gelu");
}

namespace {

// rows x [rows,D] times w [D,D] (right-multiplied), accumulated into out.
void matmul_right(const float* x, const float* w, float* out, std::size_t rows, std::size_t D) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < D; ++i) {
      const float xv = x[r * D + i];
      const float* wr = w + i * D;
      float* o = out + r * D;
      for (std::size_t j = 0; j < D; ++j) o[j] += xv * wr[j];
    }
}

// gx += g * w^T
void matmul_right_grad_input(const float* g, const float* w, float* gx, std::size_t rows, std::size_t D) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < D; ++i) {
      const float* wr = w + i * D;
      const float* gr = g + r * D;
      float acc = 0.0f;
      for (std::size_t j = 0; j < D; ++j) acc += gr[j] * wr[j];
      gx[r * D + i] += acc;
    }
}

// gw += x^T * g
void matmul_right_grad_weight(const float* x, const float* g, float* gw, std::size_t rows, std::size_t D) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < D; ++i) {
      const float xv = x[r * D + i];
      const float* gr = g + r * D;
      float* o = gw + i * D;
      for (std::size_t j = 0; j < D; ++j) o[j] += xv * gr[j];
    }
}

}  // namespace

Tensor multihead_attention(const Tensor& x, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v,
                           const Tensor& w_o, std::size_t heads) {
  if (x.rank() != 3) shape_error("multihead_attention: input must be [N,T,D], got " + shape_str(x.dims()));
  const std::size_t N = x.dim(0), T = x.dim(1), D = x.dim(2);
  for (const Tensor* w : {&w_q, &w_k, &w_v, &w_o}) {
    if (w->dims() != Shape{D, D}) {
      shape_error("multihead_attention: projection " + shape_str(w->dims()) + " must be [" + std::to_string(D) +
                  "," + std::to_string(D) + "]");
    }
  }
  if (heads == 0 || D % heads != 0) {
    throw Error(ErrorKind::InvalidConfig, "multihead_attention: D=" + std::to_string(D) +
                                              " not divisible by heads=" + std::to_string(heads));
  }
  const std::size_t dh = D / heads;
  const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::size_t rows = N * T;
  const float* xv = x.data().data();

  auto q = std::make_shared<std::vector<float>>(rows * D, 0.0f);
  auto k = std::make_shared<std::vector<float>>(rows * D, 0.0f);
  auto v = std::make_shared<std::vector<float>>(rows * D, 0.0f);
  auto probs = std::make_shared<std::vector<float>>(N * heads * T * T, 0.0f);
  auto ctx = std::make_shared<std::vector<float>>(rows * D, 0.0f);
  matmul_right(xv, w_q.data().data(), q->data(), rows, D);
  matmul_right(xv, w_k.data().data(), k->data(), rows, D);
  matmul_right(xv, w_v.data().data(), v->data(), rows, D);

  std::vector<float> logits(T);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        const float* qr = q->data() + (n * T + t) * D + h * dh;
        float mx = -INFINITY;
        for (std::size_t s = 0; s < T; ++s) {
          const float* kr = k->data() + (n * T + s) * D + h * dh;
          float acc = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
          logits[s] = acc * inv_sqrt;
          mx = std::max(mx, logits[s]);
        }
        float* p = probs->data() + ((n * heads + h) * T + t) * T;
        double z = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          p[s] = std::exp(logits[s] - mx);
          z += p[s];
        }
        float* cr = ctx->data() + (n * T + t) * D + h * dh;
        for (std::size_t s = 0; s < T; ++s) {
          p[s] = static_cast<float>(p[s] / z);
          const float* vr = v->data() + (n * T + s) * D + h * dh;
          for (std::size_t c = 0; c < dh; ++c) cr[c] += p[s] * vr[c];
        }
      }
  std::vector<float> out(rows * D, 0.0f);
  matmul_right(ctx->data(), w_o.data().data(), out.data(), rows, D);

  NodePtr xn = x.shared_node(), qn = w_q.shared_node(), kn = w_k.shared_node(), vn = w_v.shared_node(),
          on = w_o.shared_node();
  return detail::make_result(
      x.dims(), std::move(out), {x, w_q, w_k, w_v, w_o},
      [=](Node& self) {
        const float* go = self.grad.data();
        std::vector<float> dctx(rows * D, 0.0f);
        matmul_right_grad_input(go, on->data.data(), dctx.data(), rows, D);
        if (wants_grad(on)) matmul_right_grad_weight(ctx->data(), go, on->grad_buffer().data(), rows, D);

        std::vector<float> dq(rows * D, 0.0f), dk(rows * D, 0.0f), dv(rows * D, 0.0f), dp(T);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < T; ++t) {
              const float* p = probs->data() + ((n * heads + h) * T + t) * T;
              const float* dc = dctx.data() + (n * T + t) * D + h * dh;
              double dot = 0.0;
              for (std::size_t s = 0; s < T; ++s) {
                const float* vr = v->data() + (n * T + s) * D + h * dh;
                float* dvr = dv.data() + (n * T + s) * D + h * dh;
                float acc = 0.0f;
                for (std::size_t c = 0; c < dh; ++c) {
                  acc += dc[c] * vr[c];
                  dvr[c] += p[s] * dc[c];
                }
                dp[s] = acc;
                dot += static_cast<double>(acc) * p[s];
              }
              const float* qr = q->data() + (n * T + t) * D + h * dh;
              float* dqr = dq.data() + (n * T + t) * D + h * dh;
              for (std::size_t s = 0; s < T; ++s) {
                const float ds = p[s] * static_cast<float>(dp[s] - dot) * inv_sqrt;
                const float* kr = k->data() + (n * T + s) * D + h * dh;
                float* dkr = dk.data() + (n * T + s) * D + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqr[c] += ds * kr[c];
                  dkr[c] += ds * qr[c];
                }
              }
            }
        const float* xv2 = xn->data.data();
        if (wants_grad(qn)) matmul_right_grad_weight(xv2, dq.data(), qn->grad_buffer().data(), rows, D);
        if (wants_grad(kn)) matmul_right_grad_weight(xv2, dk.data(), kn->grad_buffer().data(), rows, D);
        if (wants_grad(vn)) matmul_right_grad_weight(xv2, dv.data(), vn->grad_buffer().data(), rows, D);
        if (wants_grad(xn)) {
          float* gx = xn->grad_buffer().data();
          matmul_right_grad_input(dq.data(), qn->data.data(), gx, rows, D);
          matmul_right_grad_input(dk.data(), kn->data.data(), gx, rows, D);
          matmul_right_grad_input(dv.data(), vn->data.data(), gx, rows, D);
        }
      },
      "multihead_attention");
}

namespace {

Tensor cosine_rows_impl(const Tensor& a, const Tensor& b, std::size_t rows, std::size_t D, Shape out_dims) {
  const float* av = a.data().data();
  const float* bv = b.data().data();
  auto na = std::make_shared<std::vector<double>>(rows);
  auto nb = std::make_shared<std::vector<double>>(rows);
  auto cs = std::make_shared<std::vector<double>>(rows);
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double x = av[r * D + i], y = bv[r * D + i];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    if (!(sa > 0.0) || !(sb > 0.0)) {
      throw Error(ErrorKind::DegenerateInput, "cosine_similarity: zero-norm " + std::string(sa > 0.0 ? "second" : "first") +
                                                  " operand at row " + std::to_string(r));
    }
    (*na)[r] = std::sqrt(sa);
    (*nb)[r] = std::sqrt(sb);
    (*cs)[r] = dot / ((*na)[r] * (*nb)[r]);
    out[r] = static_cast<float>((*cs)[r]);
  }
  NodePtr an = a.shared_node(), bn = b.shared_node();
  return detail::make_result(
      std::move(out_dims), std::move(out), {a, b},
      [=](Node& self) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double g = self.grad[r];
          const double c = (*cs)[r], la = (*na)[r], lb = (*nb)[r];
          const float* ar = an->data.data() + r * D;
          const float* br = bn->data.data() + r * D;
          if (wants_grad(an)) {
            float* ga = an->grad_buffer().data() + r * D;
            for (std::size_t i = 0; i < D; ++i) ga[i] += static_cast<float>(g * (br[i] / (la * lb) - c * ar[i] / (la * la)));
          }
          if (wants_grad(bn)) {
            float* gb = bn->grad_buffer().data() + r * D;
            for (std::size_t i = 0; i < D; ++i) gb[i] += static_cast<float>(g * (ar[i] / (la * lb) - c * br[i] / (lb * lb)));
          }
        }
      },
      "cosine_similarity");
}

}  // namespace

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1) shape_error("cosine_similarity: expected [D], got " + shape_str(a.dims()));
  require_same_dims(a, b, "cosine_similarity");
  return cosine_rows_impl(a, b, 1, a.dim(0), {});
}

Tensor cosine_similarity_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) shape_error("cosine_similarity_rows: expected [N,D], got " + shape_str(a.dims()));
  require_same_dims(a, b, "cosine_similarity_rows");
  return cosine_rows_impl(a, b, a.dim(0), a.dim(1), {a.dim(0)});
}

Tensor add(const Tensor& a, const Tensor& b) { return weighted_sum(a, 1.0f, b, 1.0f); }

Tensor weighted_sum(const Tensor& a, float wa, const Tensor& b, float wb) {
  require_same_dims(a, b, "weighted_sum");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * a.data()[i] + wb * b.data()[i];
  NodePtr an = a.shared_node(), bn = b.shared_node();
  return detail::make_result(
      a.dims(), std::move(out), {a, b},
      [=](Node& self) {
        if (wa != 0.0f && wants_grad(an)) {
          auto& g = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += wa * self.grad[i];
        }
        if (wb != 0.0f && wants_grad(bn)) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += wb * self.grad[i];
        }
      },
      "weighted_sum");
}

Tensor add_leading(const Tensor& x, const Tensor& b) {
  const auto& xd = x.dims();
  const auto& bd = b.dims();
  if (xd.size() != bd.size() + 1 || !std::equal(bd.begin(), bd.end(), xd.begin() + 1)) {
    throw Error(ErrorKind::InvalidShape, "add_leading: cannot broadcast " + shape_str(bd) + " over " + shape_str(xd));
  }
  const std::size_t inner = b.numel(), outer = xd[0];
  std::vector<float> out(x.numel());
  for (std::size_t n = 0; n < outer; ++n)
    for (std::size_t i = 0; i < inner; ++i) out[n * inner + i] = x.data()[n * inner + i] + b.data()[i];
  NodePtr xn = x.shared_node(), bn = b.shared_node();
  return detail::make_result(
      xd, std::move(out), {x, b},
      [=](Node& self) {
        if (wants_grad(xn)) {
          auto& g = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad(bn)) {
          auto& g = bn->grad_buffer();
          for (std::size_t n = 0; n < outer; ++n)
            for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[n * inner + i];
        }
      },
      "add_leading");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dims(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  NodePtr an = a.shared_node(), bn = b.shared_node();
  return detail::make_result(
      a.dims(), std::move(out), {a, b},
      [=](Node& self) {
        if (wants_grad(an)) {
          auto& g = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        }
        if (wants_grad(bn)) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& x, float alpha) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * x.data()[i];
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.dims(), std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * self.grad[i];
      },
      "scale");
}

Tensor add_scalar(const Tensor& x, float c) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.dims(), std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "add_scalar");
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0f, x.data()[i]);
  NodePtr xn = x.shared_node();
  return detail::make_result(
      x.dims(), std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xn->data[i] > 0.0f) g[i] += self.grad[i];
      },
      "relu");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  NodePtr xn = x.shared_node();
  return detail::make_result(
      {}, {static_cast<float>(acc)}, {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (auto& v : g) v += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const float inv = 1.0f / static_cast<float>(x.numel());
  NodePtr xn = x.shared_node();
  return detail::make_result(
      {}, {static_cast<float>(acc / static_cast<double>(x.numel()))}, {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (auto& v : g) v += self.grad[0] * inv;
      },
      "mean");
}

Tensor reshape(const Tensor& x, Shape dims) {
  if (shape_numel(dims) != x.numel()) {
    shape_error("reshape: " + shape_str(x.dims()) + " -> " + shape_str(dims));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(dims), std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

namespace {

// Swaps the channel axis between positions 1 and 3 of a rank-4 tensor.
Tensor channel_permute(const Tensor& x, bool to_last, const char* op) {
  if (x.rank() != 4) shape_error(std::string(op) + ": expected rank 4, got " + shape_str(x.dims()));
  const std::size_t N = x.dim(0);
  // Source layout is [N,A,B,C]; for NCHW->NHWC A=C_ch, B*C = H*W.
  const std::size_t C = to_last ? x.dim(1) : x.dim(3);
  const std::size_t HW = to_last ? x.dim(2) * x.dim(3) : x.dim(1) * x.dim(2);
  std::vector<float> out(x.numel());
  const float* xv = x.data().data();
  auto src_index = [=](std::size_t n, std::size_t c, std::size_t p) {
    return to_last ? (n * C + c) * HW + p : (n * HW + p) * C + c;
  };
  auto dst_index = [=](std::size_t n, std::size_t c, std::size_t p) {
    return to_last ? (n * HW + p) * C + c : (n * C + c) * HW + p;
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) out[dst_index(n, c, p)] = xv[src_index(n, c, p)];
  Shape dims = to_last ? Shape{N, x.dim(2), x.dim(3), C} : Shape{N, C, x.dim(1), x.dim(2)};
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(dims), std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) g[src_index(n, c, p)] += self.grad[dst_index(n, c, p)];
      },
      op);
}

}  // namespace

Tensor nchw_to_nhwc(const Tensor& x) { return channel_permute(x, true, "nchw_to_nhwc"); }
Tensor nhwc_to_nchw(const Tensor& x) { return channel_permute(x, false, "nhwc_to_nchw"); }

Tensor mean_tokens(const Tensor& x) {
  if (x.rank() != 3) shape_error("mean_tokens: expected [N,T,D], got " + shape_str(x.dims()));
  const std::size_t N = x.dim(0), T = x.dim(1), D = x.dim(2);
  std::vector<float> out(N * D, 0.0f);
  const float inv = 1.0f / static_cast<float>(T);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) out[n * D + d] += x.data()[(n * T + t) * D + d];
  for (auto& v : out) v *= inv;
  NodePtr xn = x.shared_node();
  return detail::make_result(
      {N, D}, std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < D; ++d) g[(n * T + t) * D + d] += self.grad[n * D + d] * inv;
      },
      "mean_tokens");
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1 || rows.empty()) shape_error("index_rows: need a non-scalar input and at least one row");
  const std::size_t R = x.dim(0);
  const std::size_t stride = x.numel() / R;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<float> out(idx.size() * stride);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= R) shape_error("index_rows: row " + std::to_string(idx[i]) + " out of range for " + shape_str(x.dims()));
    std::copy_n(x.data().data() + idx[i] * stride, stride, out.data() + i * stride);
  }
  Shape dims = x.dims();
  dims[0] = idx.size();
  NodePtr xn = x.shared_node();
  return detail::make_result(
      std::move(dims), std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < stride; ++j) g[idx[i] * stride + j] += self.grad[i * stride + j];
      },
      "index_rows");
}

Tensor l2_normalize_rows(const Tensor& x) {
  if (x.rank() != 2) shape_error("l2_normalize_rows: expected [N,D], got " + shape_str(x.dims()));
  const std::size_t N = x.dim(0), D = x.dim(1);
  auto norms = std::make_shared<std::vector<double>>(N);
  std::vector<float> out(N * D);
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(x.data()[n * D + d]) * x.data()[n * D + d];
    if (!(s > 0.0)) throw Error(ErrorKind::DegenerateInput, "l2_normalize_rows: zero-norm row " + std::to_string(n));
    (*norms)[n] = std::sqrt(s);
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = static_cast<float>(x.data()[n * D + d] / (*norms)[n]);
  }
  NodePtr xn = x.shared_node();
  auto y = std::make_shared<std::vector<float>>(out);
  return detail::make_result(
      {N, D}, std::move(out), {x},
      [=](Node& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t n = 0; n < N; ++n) {
          double dot = 0.0;
          for (std::size_t d = 0; d < D; ++d) dot += static_cast<double>(self.grad[n * D + d]) * (*y)[n * D + d];
          for (std::size_t d = 0; d < D; ++d)
            g[n * D + d] += static_cast<float>((self.grad[n * D + d] - (*y)[n * D + d] * dot) / (*norms)[n]);
        }
      },
      "l2_normalize_rows");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) shape_error("cross_entropy: expected [N,K], got " + shape_str(logits.dims()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    shape_error("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
  }
  auto probs = std::make_shared<std::vector<float>>(N * K);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (lab[n] >= K) shape_error("cross_entropy: label " + std::to_string(lab[n]) + " >= K=" + std::to_string(K));
    const float* row = logits.data().data() + n * K;
    const float mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - mx);
    for (std::size_t k = 0; k < K; ++k) (*probs)[n * K + k] = static_cast<float>(std::exp(static_cast<double>(row[k]) - mx) / z);
    total += std::log(z) + mx - row[lab[n]];
  }
  NodePtr ln = logits.shared_node();
  return detail::make_result(
      {}, {static_cast<float>(total / static_cast<double>(N))}, {logits},
      [=](Node& self) {
        auto& g = ln->grad_buffer();
        const float s = self.grad[0] / static_cast<float>(N);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k) {
            const float onehot = k == lab[n] ? 1.0f : 0.0f;
            g[n * K + k] += s * ((*probs)[n * K + k] - onehot);
          }
      },
      "cross_entropy");
}

}  // namespace xsf
