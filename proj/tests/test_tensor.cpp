#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <unordered_map>

#include "support/gradcheck.hpp"
#include "xsf/error.hpp"
#include "xsf/ops.hpp"

using namespace xsf;
using xsf::testing::random_floats;
using xsf::testing::Vec;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected xsf::Error";
  return ErrorKind::Io;
}

}  // namespace

TEST(Tensor, DataLengthMustMatchDims) {
  EXPECT_EQ(kind_of([] { Tensor({2, 3}, std::vector<float>(5)); }), ErrorKind::InvalidShape);
  Tensor t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Conv2d, IdentityKernel) {
  const auto vals = random_floats(9, 1);
  Tensor x({1, 1, 3, 3}, vals);
  Tensor w({1, 1, 1, 1}, {1.0f});
  Tensor y = conv2d(x, w, Tensor{});
  ASSERT_EQ(y.dims(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.data()[i], vals[i]);
}

TEST(Conv2d, SumKernel) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w = Tensor::full({1, 1, 2, 2}, 1.0f);
  Tensor y = conv2d(x, w, Tensor{});
  ASSERT_EQ(y.dims(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.item(), 10.0f);
}

TEST(Conv2d, MatchesNestedLoopReference) {
  const auto xv = random_floats(2 * 4 * 4, 11), wv = random_floats(3 * 2 * 3 * 3, 12);
  Tensor y = conv2d(Tensor({1, 2, 4, 4}, xv), Tensor({3, 2, 3, 3}, wv), Tensor{}, {1, 1, 1});
  const Vec ref = xsf::testing::ref_conv2d(Vec(xv.begin(), xv.end()), 1, 2, 4, 4, Vec(wv.begin(), wv.end()), 3, 3, 3,
                                           nullptr, 1, 1, 1);
  ASSERT_EQ(y.numel(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-6);
}

TEST(Conv2d, OutputSizeFormula) {
  Tensor x = Tensor::full({2, 3, 7, 5}, 0.5f);
  Tensor w = Tensor::full({4, 3, 3, 3}, 0.1f);
  Tensor y = conv2d(x, w, Tensor{}, {2, 1, 1});
  EXPECT_EQ(y.dims(), (Shape{2, 4, 4, 3}));
  Tensor unbatched = conv2d(Tensor::full({3, 7, 5}, 0.5f), w, Tensor{}, {2, 1, 1});
  EXPECT_EQ(unbatched.dims(), (Shape{4, 4, 3}));
}

TEST(Conv2d, ShapeErrorsNameTheDims) {
  try {
    conv2d(Tensor::full({1, 3, 4, 4}, 1.0f), Tensor::full({2, 2, 3, 3}, 1.0f), Tensor{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidShape);
    EXPECT_NE(std::string(e.what()).find("[2,2,3,3]"), std::string::npos);
  }
  EXPECT_EQ(kind_of([] { conv2d(Tensor::full({1, 3, 4, 4}, 1.0f), Tensor::full({3, 1, 3, 3}, 1.0f), Tensor{}, {1, 0, 2}); }),
            ErrorKind::InvalidShape);
  EXPECT_EQ(kind_of([] { conv2d(Tensor::full({1, 1, 2, 2}, 1.0f), Tensor::full({1, 1, 3, 3}, 1.0f), Tensor{}); }),
            ErrorKind::InvalidShape);
}

TEST(Linear, Examples) {
  Tensor x({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor y = linear(x, eye, Tensor::zeros({2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);

  Tensor z = linear(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {3, 4}), Tensor({1}, {5}));
  EXPECT_FLOAT_EQ(z.item(), 16.0f);

  const auto xv = random_floats(32, 3), wv = random_floats(24, 4);
  Tensor r = linear(Tensor({4, 8}, xv), Tensor({3, 8}, wv));
  const Vec ref = xsf::testing::ref_linear(Vec(xv.begin(), xv.end()), 4, 8, Vec(wv.begin(), wv.end()), 3, nullptr);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.data()[i], ref[i], 1e-6);

  EXPECT_EQ(kind_of([] { linear(Tensor::full({2, 3}, 1.0f), Tensor::full({2, 4}, 1.0f)); }), ErrorKind::InvalidShape);
}

TEST(LayerNorm, Examples) {
  Tensor ones = Tensor::full({4}, 1.0f), zeros = Tensor::zeros({4});
  Tensor c = layer_norm(Tensor({1, 4}, {5, 5, 5, 5}), ones, zeros, 1e-5f);
  for (float v : c.data()) EXPECT_LE(std::abs(v), 1e-3f);

  Tensor s = layer_norm(Tensor({1, 2}, {1, 3}), Tensor::full({2}, 1.0f), Tensor::zeros({2}), 1e-12f);
  EXPECT_NEAR(s.data()[0], -1.0f, 1e-6);
  EXPECT_NEAR(s.data()[1], 1.0f, 1e-6);

  const auto xv = random_floats(12, 21), gv = random_floats(6, 22), bv = random_floats(6, 23);
  Tensor r = layer_norm(Tensor({2, 6}, xv), Tensor({6}, gv), Tensor({6}, bv), 1e-5f);
  const Vec ref = xsf::testing::ref_layer_norm(Vec(xv.begin(), xv.end()), 6, Vec(gv.begin(), gv.end()),
                                               Vec(bv.begin(), bv.end()), 1e-5);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.data()[i], ref[i], 1e-5);

  EXPECT_EQ(kind_of([] { layer_norm(Tensor::full({2, 3}, 1.0f), Tensor::full({4}, 1.0f), Tensor::zeros({4})); }),
            ErrorKind::InvalidShape);
}

TEST(Gelu, Examples) {
  Tensor y = gelu(Tensor({3}, {0.0f, 10.0f, 1.0f}));
  EXPECT_EQ(y.data()[0], 0.0f);
  EXPECT_NEAR(y.data()[1], 10.0f, 1e-3);
  // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated in long double.
  const long double u = std::sqrt(2.0L / 3.14159265358979323846L) * 1.044715L;
  const long double expected = 0.5L * (1.0L + std::tanh(u));
  EXPECT_NEAR(y.data()[2], static_cast<double>(expected), 1e-6);
  EXPECT_NEAR(static_cast<double>(expected), 0.8411919906082768, 1e-12);
}

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  const auto xv = random_floats(4, 31), wq = random_floats(16, 32), wk = random_floats(16, 33), wv = random_floats(16, 34),
             wo = random_floats(16, 35);
  Tensor y = multihead_attention(Tensor({1, 1, 4}, xv), Tensor({4, 4}, wq), Tensor({4, 4}, wk), Tensor({4, 4}, wv),
                                 Tensor({4, 4}, wo), 2);
  for (std::size_t j = 0; j < 4; ++j) {
    double acc = 0.0;
    for (std::size_t m = 0; m < 4; ++m) {
      double xw = 0.0;
      for (std::size_t i = 0; i < 4; ++i) xw += xv[i] * wv[i * 4 + m];
      acc += xw * wo[m * 4 + j];
    }
    EXPECT_NEAR(y.data()[j], acc, 1e-5);
  }
}

TEST(Attention, ZeroQueryKeyGivesUniformMean) {
  const auto xv = random_floats(12, 41), wv = random_floats(16, 42);
  Tensor eye({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tensor y = multihead_attention(Tensor({1, 3, 4}, xv), Tensor::zeros({4, 4}), Tensor::zeros({4, 4}), Tensor({4, 4}, wv),
                                 eye, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean_v = 0.0;
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t i = 0; i < 4; ++i) mean_v += xv[t * 4 + i] * wv[i * 4 + j] / 3.0;
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(y.data()[t * 4 + j], mean_v, 1e-5);
  }
}

TEST(Attention, MatchesScalarLoopReference) {
  const auto xv = random_floats(12, 51);
  std::vector<std::vector<float>> w;
  for (int i = 0; i < 4; ++i) w.push_back(random_floats(16, 52 + i));
  Tensor y = multihead_attention(Tensor({1, 3, 4}, xv), Tensor({4, 4}, w[0]), Tensor({4, 4}, w[1]), Tensor({4, 4}, w[2]),
                                 Tensor({4, 4}, w[3]), 2);
  auto d = [](const std::vector<float>& v) { return Vec(v.begin(), v.end()); };
  const Vec ref = xsf::testing::ref_attention(d(xv), 1, 3, 4, d(w[0]), d(w[1]), d(w[2]), d(w[3]), 2);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5);
  EXPECT_EQ(kind_of([&] { multihead_attention(Tensor({1, 3, 4}, xv), Tensor({4, 4}, w[0]), Tensor({4, 4}, w[1]),
                                              Tensor({4, 4}, w[2]), Tensor({4, 4}, w[3]), 3); }),
            ErrorKind::InvalidConfig);
}

TEST(Cosine, Examples) {
  EXPECT_NEAR(cosine_similarity(Tensor({3}, {1, 2, 3}), Tensor({3}, {1, 2, 3})).item(), 1.0f, 1e-7);
  EXPECT_EQ(cosine_similarity(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})).item(), 0.0f);
  EXPECT_NEAR(cosine_similarity(Tensor({2}, {1, 2}), Tensor({2}, {2, 1})).item(), 0.8f, 1e-7);
  EXPECT_EQ(kind_of([] { cosine_similarity(Tensor({2}, {0, 0}), Tensor({2}, {0, 1})); }), ErrorKind::DegenerateInput);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3}, random_floats(6, 61), true);
  backward(sum(x));
  ASSERT_TRUE(x.has_grad());
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, DetachedInputGetsNoGradient) {
  Tensor x({3}, {1, 2, 3}, true);
  Tensor y({3}, {4, 5, 6}, true);
  backward(sum(mul(x.detach(), y)));
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(y.has_grad());
}

TEST(Backward, NonScalarIsInvalidCall) {
  Tensor x({3}, {1, 2, 3}, true);
  EXPECT_EQ(kind_of([&] { backward(scale(x, 2.0f)); }), ErrorKind::InvalidCall);
}

TEST(Backward, NoGradTensorsNeverAccumulate) {
  Tensor frozen({2, 4}, random_floats(8, 71), false);
  Tensor live({3, 4}, random_floats(12, 72), true);
  Tensor x({5, 4}, random_floats(20, 73), false);
  backward(sum(linear(linear(x, frozen), Tensor({3, 2}, random_floats(6, 74), true))));
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_FALSE(x.has_grad());
  (void)live;
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor x({3}, {1, 2, 3}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(scale(x, 2.0f));
  }
  EXPECT_FALSE(y.requires_grad());
  backward(y);
  EXPECT_FALSE(x.has_grad());
}

TEST(ComputeGraph, TopologicalOrderVisitsEachOpOnce) {
  Tensor x({4}, random_floats(4, 81), true);
  Tensor a = scale(x, 2.0f);
  Tensor b = mul(a, a);  // fan-out of a
  Tensor loss = sum(add(b, a));
  const auto graph = record_graph(loss);
  std::unordered_map<Node*, std::size_t> pos;
  for (std::size_t i = 0; i < graph.order.size(); ++i) {
    EXPECT_TRUE(pos.emplace(graph.order[i], i).second) << "node visited twice";
  }
  for (Node* n : graph.order)
    for (const auto& in : n->inputs)
      if (in->requires_grad) EXPECT_LT(pos.at(in.get()), pos.at(n));
  EXPECT_EQ(graph.order.size(), 5u);  // x, a, b, add, sum; a is shared
  backward(loss);
  // d/dx sum(4x^2 + 2x) = 8x + 2
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], 8.0f * x.data()[i] + 2.0f, 1e-5);
}

TEST(Backward, LinearityOfCombinedLosses) {
  const auto xv = random_floats(12, 91), wv = random_floats(8, 92);
  auto grads_for = [&](float alpha, float beta, int which) {
    Tensor x({3, 4}, xv, true);
    Tensor w({2, 4}, wv, true);
    Tensor l1 = sum(gelu(linear(x, w)));
    Tensor l2 = mean(mul(x, x));
    Tensor loss = which == 0 ? weighted_sum(l1, alpha, l2, beta) : (which == 1 ? l1 : l2);
    backward(loss);
    return std::vector<float>(x.grad().begin(), x.grad().end());
  };
  const float alpha = 0.3f, beta = -1.7f;
  const auto combined = grads_for(alpha, beta, 0);
  const auto g1 = grads_for(1, 0, 1), g2 = grads_for(0, 1, 2);
  for (std::size_t i = 0; i < combined.size(); ++i) EXPECT_NEAR(combined[i], alpha * g1[i] + beta * g2[i], 1e-6);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Tensor x({1, 2, 5, 5}, random_floats(50, 101), true);
    Tensor w({3, 2, 3, 3}, random_floats(54, 102), true);
    Tensor y = conv2d(x, w, Tensor{}, {1, 1, 1});
    backward(sum(gelu(y)));
    std::vector<float> out(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(float)));
}

class GradientCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientCheck, MatchesFiniteDifferences) {
  const auto cases = xsf::testing::all_gradient_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = xsf::testing::run_grad_check(c, seed);
    EXPECT_EQ(r.failures, 0u) << c.name << " seed " << seed << ": " << r.first_failure;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradientCheck,
                         ::testing::Range<std::size_t>(0, xsf::testing::all_gradient_cases().size()),
                         [](const auto& info) { return xsf::testing::all_gradient_cases()[info.param].name; });
