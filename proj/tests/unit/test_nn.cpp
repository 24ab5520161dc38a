#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_support.hpp"
#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/ops.hpp"
#include "tokenrank/nn/optim.hpp"
#include "tokenrank/nn/parallel.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank {
namespace {

using nn::Parameter;
using nn::SeededRng;
using nn::Tensor;
using nn::Var;
using testing::gradient_relative_error;

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
      c.at(i, j) = static_cast<float>(s);
    }
  }
  return c;
}

Tensor transposed(const Tensor& a) {
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

TEST(Tensor, ShapeAndAccess) {
  Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.rows(), 2U);
  EXPECT_EQ(t.cols(), 3U);
  EXPECT_EQ(t.at(1, 2), 6.0F);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).at(2, 1), 6.0F);
}

TEST(Matmul, MatchesNaiveForAllTransposes) {
  SeededRng rng(3);
  const Tensor a = rng.normal_tensor({5, 7}, 1.0F);
  const Tensor b = rng.normal_tensor({7, 4}, 1.0F);
  const Tensor ref = naive_matmul(a, b);
  EXPECT_LT(nn::max_abs_diff(nn::matmul(a, b), ref), 1e-5F);
  EXPECT_LT(nn::max_abs_diff(nn::matmul(transposed(a), b, true, false), ref), 1e-5F);
  EXPECT_LT(nn::max_abs_diff(nn::matmul(a, transposed(b), false, true), ref), 1e-5F);
  EXPECT_LT(nn::max_abs_diff(nn::matmul(transposed(a), transposed(b), true, true), ref), 1e-5F);
  EXPECT_THROW(nn::matmul(a, a), ShapeError);
}

TEST(Matmul, CountsMacs) {
  const Tensor a({3, 4}, 1.0F);
  const Tensor b({4, 5}, 1.0F);
  nn::ScopedMacCount count;
  nn::matmul(a, b);
  EXPECT_EQ(count.elapsed(), 3U * 4U * 5U);
}

TEST(Kernels, SoftmaxRowsSumToOne) {
  SeededRng rng(1);
  const Tensor x = rng.normal_tensor({4, 6}, 3.0F);
  const Tensor s = nn::softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 6; ++c) sum += s.at(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Kernels, LayerNormMatchesReference) {
  SeededRng rng(2);
  const Tensor x = rng.normal_tensor({3, 8}, 2.0F);
  const Tensor g = rng.normal_tensor({8}, 1.0F);
  const Tensor b = rng.normal_tensor({8}, 1.0F);
  const Tensor y = nn::layer_norm(x, g, b);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(x.row(r).begin(), x.row(r).end());
    const auto ref = testing::ref_layer_norm(row, g, b);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y.at(r, c), ref[c], 1e-5);
  }
}

TEST(Kernels, GeluValues) {
  EXPECT_EQ(nn::gelu_scalar(0.0F), 0.0F);
  EXPECT_NEAR(nn::gelu_scalar(1.0F), testing::ref_gelu(1.0), 1e-6);
  EXPECT_NEAR(nn::gelu_scalar(-3.0F), testing::ref_gelu(-3.0), 1e-6);
  const float h = 1e-3F;
  for (float x : {-2.0F, -0.5F, 0.3F, 1.7F}) {
    const double fd = (testing::ref_gelu(x + h) - testing::ref_gelu(x - h)) / (2.0 * h);
    EXPECT_NEAR(nn::gelu_grad_scalar(x), fd, 1e-4);
  }
}

TEST(Rng, DeterministicAndForkIndependentOfDraws) {
  SeededRng a(42);
  SeededRng b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  SeededRng c(42);
  const auto before = c.fork(7).next();
  for (int i = 0; i < 5; ++i) c.next();
  EXPECT_EQ(c.fork(7).next(), before);
  EXPECT_NE(SeededRng(42).fork(7).next(), SeededRng(42).fork(8).next());
}

TEST(Rng, UniformRangeAndPermutation) {
  SeededRng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7U);
  }
  auto p = r.permutation(20);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(p[i], i);
}

TEST(Autograd, SumGivesOnes) {
  Parameter p("p", Tensor::matrix({{1, 2}, {3, 4}}));
  nn::backward(nn::sum(Var::param(p)));
  for (float g : p.grad.values()) EXPECT_EQ(g, 1.0F);
}

TEST(Autograd, ZeroScaleGivesZeros) {
  Parameter p("p", Tensor::matrix({{1, 2}, {3, 4}}));
  nn::backward(nn::sum(nn::scale(Var::param(p), 0.0F)));
  for (float g : p.grad.values()) EXPECT_EQ(g, 0.0F);
}

TEST(Autograd, GradientsAccumulateUntilZeroed) {
  Parameter p("p", Tensor::vector({1, 2}));
  nn::backward(nn::sum(Var::param(p)));
  nn::backward(nn::sum(Var::param(p)));
  EXPECT_EQ(p.grad[0], 2.0F);
  p.zero_grad();
  EXPECT_EQ(p.grad[0], 0.0F);
}

TEST(Autograd, FrozenAndNoGradLeavesUntouched) {
  Parameter frozen("f", Tensor::vector({1, 2}), false);
  Parameter live("l", Tensor::vector({3, 4}));
  nn::backward(nn::sum(nn::mul(Var::param(frozen), Var::param(live))));
  EXPECT_TRUE(frozen.grad.empty() || frozen.grad[0] == 0.0F);
  EXPECT_EQ(live.grad[0], 1.0F);
  EXPECT_EQ(live.grad[1], 2.0F);
  {
    nn::NoGradGuard guard;
    EXPECT_FALSE(nn::grad_enabled());
    EXPECT_FALSE(Var::param(live).requires_grad());
  }
  EXPECT_TRUE(nn::grad_enabled());
}

TEST(Autograd, UnconnectedParameterKeepsZeroGrad) {
  Parameter a("a", Tensor::vector({1}));
  Parameter b("b", Tensor::vector({2}));
  b.zero_grad();
  nn::backward(nn::sum(Var::param(a)));
  EXPECT_EQ(b.grad[0], 0.0F);
}

struct OpCase {
  const char* name;
  std::function<Var(const Var&, const Var&)> fn;
  nn::Shape a;
  nn::Shape b;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto& c = GetParam();
  SeededRng rng(11);
  Parameter a("a", rng.normal_tensor(c.a, 0.8F));
  Parameter b("b", rng.normal_tensor(c.b, 0.8F));
  const Tensor w = rng.normal_tensor({1}, 1.0F);
  auto loss = [&] {
    Var out = c.fn(Var::param(a), Var::param(b));
    // random projection so every output element matters
    SeededRng r(99);
    Tensor proj = r.normal_tensor(out.value().shape(), 1.0F);
    return nn::sum(nn::mul(out, Var::constant(proj)));
  };
  EXPECT_LT(gradient_relative_error({&a, &b}, loss), 1e-3) << c.name;
}

std::vector<OpCase> op_cases() {
  return {
      {"matmul", [](const Var& a, const Var& b) { return nn::matmul(a, b); }, {3, 4}, {4, 5}},
      {"linear", [](const Var& a, const Var& b) { return nn::linear(a, b, nn::slice_rows(b, 0, 1)); }, {3, 4}, {4, 4}},
      {"add_sub_mul", [](const Var& a, const Var& b) { return nn::mul(nn::add(a, b), nn::sub(a, b)); }, {3, 3}, {3, 3}},
      {"add_row", [](const Var& a, const Var& b) { return nn::add_row(a, b); }, {3, 4}, {4}},
      {"mul_scalar", [](const Var& a, const Var& b) { return nn::mul_scalar(a, b); }, {3, 4}, {1}},
      {"exp", [](const Var& a, const Var&) { return nn::exp(nn::scale(a, 0.5F)); }, {3, 4}, {1}},
      {"layer_norm",
       [](const Var& a, const Var& b) { return nn::layer_norm(a, nn::slice_rows(b, 0, 1), nn::slice_rows(b, 1, 1)); },
       {3, 5}, {2, 5}},
      {"gelu", [](const Var& a, const Var&) { return nn::gelu(a); }, {3, 4}, {1}},
      {"softmax_rows", [](const Var& a, const Var&) { return nn::softmax_rows(a); }, {3, 5}, {1}},
      {"log_softmax_rows", [](const Var& a, const Var&) { return nn::log_softmax_rows(a); }, {3, 5}, {1}},
      {"log_sigmoid", [](const Var& a, const Var&) { return nn::log_sigmoid(a); }, {3, 5}, {1}},
      {"transpose", [](const Var& a, const Var& b) { return nn::matmul(nn::transpose(a), b); }, {4, 3}, {4, 2}},
      {"gather_rows", [](const Var& a, const Var&) { return nn::gather_rows(a, {2, 0, 2}); }, {3, 4}, {1}},
      {"submatrix", [](const Var& a, const Var&) { return nn::submatrix(a, {0, 2}, {1, 3}); }, {3, 4}, {1}},
      {"concat_slice",
       [](const Var& a, const Var& b) { return nn::slice_rows(nn::concat_rows({a, b, a}), 2, 4); }, {3, 4}, {2, 4}},
      {"mean_cols", [](const Var& a, const Var&) { return nn::mean_cols(a); }, {3, 4}, {1}},
      {"l2_normalize_rows", [](const Var& a, const Var&) { return nn::l2_normalize_rows(a); }, {3, 4}, {1}},
      {"pick", [](const Var& a, const Var&) { return nn::pick(a, {1, 0, 3}); }, {3, 4}, {1}},
      {"reshape", [](const Var& a, const Var&) { return nn::reshape(a, {4, 3}); }, {3, 4}, {1}},
      {"attention", [](const Var& a, const Var&) { return nn::attention(a, 2, 3, 2, false); }, {6, 12}, {1}},
      {"attention_causal", [](const Var& a, const Var&) { return nn::attention(a, 2, 3, 2, true); }, {6, 12}, {1}},
  };
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(Attention, MatchesReferenceAndCountsMacs) {
  SeededRng rng(5);
  const std::size_t batch = 2;
  const std::size_t len = 4;
  const std::size_t d = 6;
  const Tensor qkv = rng.normal_tensor({batch * len, 3 * d}, 1.0F);
  Tensor cls;
  std::uint64_t macs = 0;
  Var out;
  {
    nn::ScopedMacCount count;
    out = nn::attention(Var::constant(qkv), batch, len, 2, false, &cls);
    macs = count.elapsed();
  }
  EXPECT_EQ(macs, 2U * batch * len * len * d);
  const std::size_t dh = 3;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> s(len);
        double mx = -1e300;
        for (std::size_t j = 0; j < len; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qkv.at(b * len + i, h * dh + c) * qkv.at(b * len + j, d + h * dh + c);
          s[j] = dot / std::sqrt(3.0);
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (double v : s) z += std::exp(v - mx);
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < len; ++j) acc += std::exp(s[j] - mx) / z * qkv.at(b * len + j, 2 * d + h * dh + c);
          EXPECT_NEAR(out.value().at(b * len + i, h * dh + c), acc, 1e-5);
        }
      }
    }
    double row = 0;
    for (std::size_t j = 0; j < len; ++j) row += cls.at(b, j);
    EXPECT_NEAR(row, 1.0, 1e-5);
  }
}

TEST(Optimizer, SgdStep) {
  Parameter p("p", Tensor::vector({1.0F, -2.0F}));
  nn::Optimizer opt({&p}, {nn::OptimizerKind::kSgd, 0.5F});
  nn::backward(nn::sum(nn::mul(Var::param(p), Var::param(p))));
  opt.step();
  EXPECT_FLOAT_EQ(p.value[0], 1.0F - 0.5F * 2.0F);
  EXPECT_FLOAT_EQ(p.value[1], -2.0F - 0.5F * -4.0F);
}

TEST(Optimizer, AdamFirstStepIsLrTimesSign) {
  Parameter p("p", Tensor::vector({1.0F, -2.0F}));
  nn::Optimizer opt({&p}, {nn::OptimizerKind::kAdam, 0.1F});
  nn::backward(nn::sum(nn::mul(Var::param(p), Var::param(p))));
  opt.step();
  EXPECT_NEAR(p.value[0], 0.9F, 1e-6);
  EXPECT_NEAR(p.value[1], -1.9F, 1e-6);
  EXPECT_EQ(opt.steps_taken(), 1U);
}

TEST(Optimizer, FrozenSkippedAndNonFiniteRejected) {
  Parameter frozen("f", Tensor::vector({1.0F}), false);
  Parameter p("p", Tensor::vector({1.0F}));
  nn::Optimizer opt({&frozen, &p}, {nn::OptimizerKind::kSgd, 1.0F});
  frozen.grad = Tensor::vector({5.0F});
  p.grad = Tensor::vector({NAN});
  EXPECT_THROW(opt.step(), NumericError);
  EXPECT_EQ(p.value[0], 1.0F);
  p.grad = Tensor::vector({1.0F});
  opt.step();
  EXPECT_EQ(frozen.value[0], 1.0F);
  EXPECT_EQ(p.value[0], 0.0F);
  EXPECT_THROW(nn::parse_optimizer_kind("rmsprop"), ConfigError);
}

TEST(TensorIo, RoundtripBitwise) {
  testing::TempDir dir("io");
  const Tensor t = SeededRng(4).normal_tensor({3, 5}, 1.0F);
  nn::write_tensor(dir.path() / "t", t);
  EXPECT_EQ(nn::read_tensor(dir.path() / "t"), t);
}

TEST(TensorIo, TruncatedRawFileIsAnError) {
  testing::TempDir dir("io-trunc");
  nn::write_tensor(dir.path() / "t", Tensor({4, 4}, 1.0F));
  std::filesystem::resize_file(dir.path() / "t.bin", 10);
  EXPECT_THROW(nn::read_tensor(dir.path() / "t"), IoError);
  std::ofstream(dir.path() / "t.json") << "{\"dtype\":\"f64\"}";
  EXPECT_THROW(nn::read_tensor(dir.path() / "t"), ParseError);
}

TEST(TensorIo, CheckpointRoundtripAndShapeMismatch) {
  testing::TempDir dir("ckpt");
  Parameter a("a", SeededRng(1).normal_tensor({2, 3}, 1.0F));
  Parameter b("b", SeededRng(2).normal_tensor({4}, 1.0F));
  nn::save_checkpoint(dir.path(), {&a, &b}, {{"kind", "test"}});
  Parameter a2("a", Tensor({2, 3}));
  Parameter b2("b", Tensor({4}));
  const auto tags = nn::load_checkpoint(dir.path(), {&a2, &b2});
  EXPECT_EQ(tags.at("kind"), "test");
  EXPECT_EQ(a2.value, a.value);
  EXPECT_EQ(b2.value, b.value);
  Parameter bad("b", Tensor({5}));
  EXPECT_THROW(nn::load_checkpoint(dir.path(), {&a2, &bad}), Error);
}

TEST(Parallel, EveryIndexOnceAndErrorsPropagate) {
  std::vector<int> hits(100, 0);
  nn::parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(nn::parallel_for(10, 3,
                                [](std::size_t i) {
                                  if (i == 5) throw NumericError("boom");
                                }),
               NumericError);
}

}  // namespace
}  // namespace tokenrank
