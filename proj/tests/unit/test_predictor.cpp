#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "tokenrank/nn/errors.hpp"
#include "tokenrank/predictor.hpp"

namespace tokenrank {
namespace {

using nn::SeededRng;
using nn::Tensor;
using nn::Var;
using predictor::ArchKind;
using predictor::LossKind;
using predictor::Predictor;

Predictor random_predictor(ArchKind arch, std::size_t n, std::size_t d, std::uint64_t seed) {
  auto p = Predictor::init(arch, n, d, 2, SeededRng(seed), 8, 2);
  testing::randomize(p.parameters(), SeededRng(seed + 1), 0.4F);
  return p;
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

Tensor gather(const Tensor& v, const std::vector<std::size_t>& ids) {
  Tensor out({ids.size()});
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = v[ids[i]];
  return out;
}

// token mixing with the restricted square block of W_t, channel mean
std::vector<double> ref_mixmlp(Predictor& p, const Tensor& z, const std::vector<std::size_t>& ids) {
  using testing::ref_affine;
  using testing::ref_gelu;
  using testing::ref_layer_norm;
  const std::size_t n = z.rows();
  const std::size_t d = z.cols();
  auto c = testing::to_mat(z);
  for (std::size_t i = 0; i < n; ++i) {
    auto h = ref_layer_norm(ref_affine(c[i], p.parameter("mix.channel.w").value, p.parameter("mix.channel.b").value),
                            p.parameter("mix.channel.ln.gamma").value, p.parameter("mix.channel.ln.beta").value);
    for (std::size_t j = 0; j < d; ++j) c[i][j] += ref_gelu(h[j]);
  }
  const Tensor& w = p.parameter("mix.token.w").value;
  Tensor wsub({n, n});
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) wsub.at(a, b) = w.at(ids[a], ids[b]);
  }
  const Tensor bt = gather(p.parameter("mix.token.b").value, ids);
  const Tensor gt = gather(p.parameter("mix.token.ln.gamma").value, ids);
  const Tensor et = gather(p.parameter("mix.token.ln.beta").value, ids);
  std::vector<double> score(n, 0.0);
  for (std::size_t ch = 0; ch < d; ++ch) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = c[i][ch];
    auto u = ref_layer_norm(ref_affine(col, wsub, bt), gt, et);
    for (std::size_t i = 0; i < n; ++i) score[i] += (col[i] + ref_gelu(u[i])) / static_cast<double>(d);
  }
  return score;
}

std::vector<double> ref_mlp(Predictor& p, const Tensor& z) {
  using namespace testing;
  std::vector<double> out;
  for (const auto& row : to_mat(z)) {
    auto h = ref_layer_norm(ref_affine(row, p.parameter("mlp.fc1.w").value, p.parameter("mlp.fc1.b").value),
                            p.parameter("mlp.ln.gamma").value, p.parameter("mlp.ln.beta").value);
    for (auto& v : h) v = ref_gelu(v);
    const auto y = ref_affine(h, p.parameter("mlp.fc2.w").value, p.parameter("mlp.fc2.b").value);
    double s = 0.0;
    for (double v : y) s += v;
    out.push_back(s / static_cast<double>(y.size()));
  }
  return out;
}

TEST(PredictorForward, MixMlpMatchesReferenceFullAndRestricted) {
  auto p = random_predictor(ArchKind::kMixMlp, 9, 6, 3);
  const Tensor zfull = SeededRng(4).normal_tensor({9, 6}, 1.0F);
  const auto full = p.score(zfull, iota_ids(9));
  const auto ref = ref_mixmlp(p, zfull, iota_ids(9));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(full[i], ref[i], 1e-5);

  const std::vector<std::size_t> ids{0, 2, 3, 7};
  const Tensor z = SeededRng(5).normal_tensor({4, 6}, 1.0F);
  const auto sub = p.score(z, ids);
  const auto rs = ref_mixmlp(p, z, ids);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(sub[i], rs[i], 1e-5);
}

TEST(PredictorForward, MlpMatchesReference) {
  auto p = random_predictor(ArchKind::kMlp, 9, 6, 6);
  const Tensor z = SeededRng(7).normal_tensor({5, 6}, 1.0F);
  const auto s = p.score(z, {0, 1, 4, 5, 8});
  const auto ref = ref_mlp(p, z);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(s[i], ref[i], 1e-5);
}

TEST(PredictorForward, TransBlockMatchesReferenceBlock) {
  auto p = random_predictor(ArchKind::kTransBlock, 9, 6, 8);
  const Tensor z = SeededRng(9).normal_tensor({7, 6}, 1.0F);
  const auto s = p.score(z, {0, 1, 2, 4, 5, 6, 8});
  clip::BlockWeights w;
  w.ln1_gamma = p.parameter("block.ln1.gamma");
  w.ln1_beta = p.parameter("block.ln1.beta");
  w.qkv_w = p.parameter("block.qkv.w");
  w.qkv_b = p.parameter("block.qkv.b");
  w.proj_w = p.parameter("block.proj.w");
  w.proj_b = p.parameter("block.proj.b");
  w.ln2_gamma = p.parameter("block.ln2.gamma");
  w.ln2_beta = p.parameter("block.ln2.beta");
  w.fc1_w = p.parameter("block.fc1.w");
  w.fc1_b = p.parameter("block.fc1.b");
  w.fc2_w = p.parameter("block.fc2.w");
  w.fc2_b = p.parameter("block.fc2.b");
  const auto y = testing::ref_block(testing::to_mat(z), w, 2);
  for (std::size_t i = 0; i < 7; ++i) {
    double m = 0.0;
    for (double v : y[i]) m += v / 6.0;
    EXPECT_NEAR(s[i], m, 1e-5);
  }
}

TEST(PredictorForward, InputValidation) {
  auto p = random_predictor(ArchKind::kMixMlp, 6, 4, 1);
  const Tensor z({3, 4});
  EXPECT_THROW(p.score(z, {0, 1}), ShapeError);
  EXPECT_THROW(p.score(z, {0, 2, 1}), LogicError);
  EXPECT_THROW(p.score(z, {0, 1, 6}), LogicError);
  EXPECT_THROW(p.score(Tensor({7, 4}), iota_ids(7)), ShapeError);
  EXPECT_THROW(p.score(Tensor({3, 5}), {0, 1, 2}), ShapeError);
  EXPECT_THROW(Predictor::init(ArchKind::kTransBlock, 6, 5, 2, SeededRng(1), 8, 2), ConfigError);
  EXPECT_THROW(Predictor::init(ArchKind::kMixMlp, 6, 4, 0, SeededRng(1)), ConfigError);
}

TEST(PredictorLoss, PointValue) {
  const float v = predictor::predictor_loss_value(Tensor::vector({0.0F}), Tensor::vector({0.0F}));
  EXPECT_NEAR(v, -0.5 * std::log(0.5), 1e-6);
}

TEST(PredictorLoss, MatchesClosedForm) {
  const Tensor s = Tensor::vector({-1.2F, 0.3F, 2.0F});
  const Tensor h = Tensor::vector({0.5F, -0.7F, 1.1F});
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  double lit = 0.0;
  double bce = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    lit -= sig(s[i]) * std::log(sig(h[i]));
    bce -= sig(s[i]) * std::log(sig(h[i])) + (1.0 - sig(s[i])) * std::log(1.0 - sig(h[i]));
  }
  EXPECT_NEAR(predictor::predictor_loss_value(s, h), lit, 1e-5);
  EXPECT_NEAR(predictor::predictor_bce_loss(s, Var::constant(h)).value()[0], bce, 1e-5);
  EXPECT_NEAR(predictor::training_loss(LossKind::kLiteral, s, Var::constant(h)).value()[0], lit, 1e-5);
  EXPECT_THROW(predictor::predictor_loss_value(s, Tensor::vector({1.0F})), ShapeError);
}

struct GradCase {
  ArchKind arch;
  LossKind loss;
  bool restricted;
};

void PrintTo(const GradCase& c, std::ostream* os) {
  *os << predictor::to_string(c.arch) << "/" << predictor::to_string(c.loss) << (c.restricted ? "/restricted" : "/full");
}

class PredictorGrad : public ::testing::TestWithParam<GradCase> {};

TEST_P(PredictorGrad, MatchesFiniteDifferences) {
  const auto c = GetParam();
  auto p = random_predictor(c.arch, 6, 4, 40);
  const std::vector<std::size_t> ids = c.restricted ? std::vector<std::size_t>{0, 2, 3, 5} : iota_ids(6);
  const Tensor z = SeededRng(41).normal_tensor({ids.size(), 4}, 1.0F);
  const Tensor target = SeededRng(42).normal_tensor({ids.size()}, 1.0F);
  const double err = testing::gradient_relative_error(p.parameters(), [&] {
    return predictor::training_loss(c.loss, target, p.forward(Var::constant(z), ids));
  }, 1e-2F);
  EXPECT_LT(err, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(AllArchs, PredictorGrad,
                         ::testing::Values(GradCase{ArchKind::kMixMlp, LossKind::kLiteral, false},
                                           GradCase{ArchKind::kMixMlp, LossKind::kLiteral, true},
                                           GradCase{ArchKind::kMixMlp, LossKind::kBinaryCrossEntropy, true},
                                           GradCase{ArchKind::kMlp, LossKind::kLiteral, false},
                                           GradCase{ArchKind::kMlp, LossKind::kBinaryCrossEntropy, true},
                                           GradCase{ArchKind::kTransBlock, LossKind::kLiteral, false},
                                           GradCase{ArchKind::kTransBlock, LossKind::kBinaryCrossEntropy, true}),
                         [](const auto& info) {
                           return predictor::to_string(info.param.arch) + "_" + predictor::to_string(info.param.loss) +
                                  (info.param.restricted ? "_restricted" : "_full");
                         });

TEST(PredictorGrad, RestrictedTokenWeightsUntouched) {
  auto p = random_predictor(ArchKind::kMixMlp, 6, 4, 50);
  const std::vector<std::size_t> ids{1, 4};
  const Tensor z = SeededRng(51).normal_tensor({2, 4}, 1.0F);
  nn::zero_grads(p.parameters());
  nn::backward(predictor::predictor_loss(Tensor::vector({0.5F, -0.5F}), p.forward(Var::constant(z), ids)));
  const Tensor& g = p.parameter("mix.token.w").grad;
  for (std::size_t a = 0; a < 6; ++a) {
    for (std::size_t b = 0; b < 6; ++b) {
      const bool inside = (a == 1 || a == 4) && (b == 1 || b == 4);
      if (!inside) EXPECT_EQ(g.empty() ? 0.0F : g.at(a, b), 0.0F) << a << "," << b;
    }
  }
}

golden::Ranking rank(const std::vector<float>& v) { return golden::ranking_from_scores(Tensor::vector(v)); }

TEST(MatchingRate, IdenticalAndDisjoint) {
  const auto a = rank({0.9F, 0.8F, 0.1F, 0.2F});
  EXPECT_FLOAT_EQ(predictor::matching_rate(a, a, 2).rate, 100.0F);
  const auto b = rank({0.1F, 0.2F, 0.9F, 0.8F});
  EXPECT_FLOAT_EQ(predictor::matching_rate(a, b, 2).rate, 0.0F);
  EXPECT_FLOAT_EQ(predictor::matching_rate(a, b, 4).rate, 100.0F);
  EXPECT_THROW(predictor::matching_rate(a, b, 0), UsageError);
  EXPECT_THROW(predictor::matching_rate(a, b, 5), UsageError);
  EXPECT_THROW(predictor::matching_rate(a, rank({1.0F}), 1), ShapeError);
}

TEST(MatchingRate, RandomAgainstFixedIsHypergeometric) {
  const std::size_t n = 196;
  const std::size_t k = n / 4;
  std::vector<float> fixed(n);
  for (std::size_t i = 0; i < n; ++i) fixed[i] = static_cast<float>(n - i);
  const auto gold = rank(fixed);
  SeededRng rng(1234);
  double total = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Tensor s = rng.fork(t).normal_tensor({n}, 1.0F);
    total += predictor::matching_rate(golden::ranking_from_scores(s), gold, k).rate;
  }
  EXPECT_NEAR(total / 1000.0, 100.0 * static_cast<double>(k) / static_cast<double>(n), 5.0);
}

TEST(PredictorTraining, LossDecreasesAndSaveLoad) {
  testing::TempDir dir("pred");
  auto dc = testing::tiny_data_config();
  const auto ds = data::generate_synthetic(dc, SeededRng(2));
  const auto model = testing::random_model(testing::tiny_model_config(dc.grid, dc.patch, dc.num_classes), 3);
  golden::GoldenConfig gc;
  gc.r = 2;
  const golden::GoldenCache cache(dir.path() / "cache", "v0", gc);
  EXPECT_THROW(predictor::build_training_set(model, ds.predictor_train, cache, 2), MissingArtifactError);
  cache.build(model, ds.predictor_train, 1);
  const auto set = predictor::build_training_set(model, ds.predictor_train, cache, 2, 2);
  ASSERT_EQ(set.size(), ds.predictor_train.examples.size());
  EXPECT_EQ(set[0].z, predictor::patch_intermediates(model, data::patchify(ds.predictor_train.examples[0], dc.patch), 2));
  EXPECT_EQ(set[0].target, golden::importance(cache.load(set[0].image_id)));

  auto p = Predictor::init(ArchKind::kMixMlp, 16, 16, 2, SeededRng(4), 32, 2);
  predictor::PredictorConfig pc;
  pc.epochs = 15;
  pc.optim.lr = 3e-3F;
  const auto rep = predictor::train_predictor(p, set, pc, SeededRng(5));
  ASSERT_EQ(rep.epoch_loss.size(), 15U);
  EXPECT_LT(predictor::mean_loss(p, set), rep.initial_loss);
  const float mr = predictor::mean_matching_rate(p, set, 4);
  EXPECT_GE(mr, 0.0F);
  EXPECT_LE(mr, 100.0F);

  predictor::save_predictor(dir.path() / "p", p, "preservation", dc.grid);
  auto back = predictor::load_predictor(dir.path() / "p");
  EXPECT_EQ(back.arch(), p.arch());
  EXPECT_EQ(back.attach_layer(), 2U);
  EXPECT_EQ(back.score(set[1].z, iota_ids(16)), p.score(set[1].z, iota_ids(16)));
  EXPECT_THROW(predictor::load_predictor(dir.path() / "nope"), MissingArtifactError);
}

TEST(PredictorTraining, DeterministicPerSeed) {
  std::vector<predictor::TrainingExample> set;
  for (int i = 0; i < 4; ++i) {
    set.push_back({SeededRng(10 + i).normal_tensor({6, 4}, 1.0F), SeededRng(20 + i).normal_tensor({6}, 1.0F),
                   static_cast<std::uint64_t>(i)});
  }
  predictor::PredictorConfig pc;
  pc.epochs = 3;
  auto a = Predictor::init(ArchKind::kMlp, 6, 4, 2, SeededRng(1), 8);
  auto b = Predictor::init(ArchKind::kMlp, 6, 4, 2, SeededRng(1), 8);
  predictor::train_predictor(a, set, pc, SeededRng(9));
  predictor::train_predictor(b, set, pc, SeededRng(9));
  EXPECT_EQ(a.parameter("mlp.fc2.w").value, b.parameter("mlp.fc2.w").value);
}

TEST(PredictorNames, RoundTrip) {
  for (auto a : {ArchKind::kMixMlp, ArchKind::kMlp, ArchKind::kTransBlock}) {
    EXPECT_EQ(predictor::parse_arch(predictor::to_string(a)), a);
  }
  for (auto l : {LossKind::kLiteral, LossKind::kBinaryCrossEntropy}) {
    EXPECT_EQ(predictor::parse_loss_kind(predictor::to_string(l)), l);
  }
  EXPECT_THROW(predictor::parse_arch("cnn"), ConfigError);
  EXPECT_THROW(predictor::parse_loss_kind("hinge"), ConfigError);
}

}  // namespace
}  // namespace tokenrank
