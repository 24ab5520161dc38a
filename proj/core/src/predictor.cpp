#include "tokenrank/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/ops.hpp"
#include "tokenrank/nn/parallel.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank::predictor {

namespace fs = std::filesystem;

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::kMixMlp: return "mixmlp";
    case ArchKind::kMlp: return "mlp";
    case ArchKind::kTransBlock: return "transblock";
  }
  return "?";
}

ArchKind parse_arch(const std::string& name) {
  if (name == "mixmlp") return ArchKind::kMixMlp;
  if (name == "mlp") return ArchKind::kMlp;
  if (name == "transblock") return ArchKind::kTransBlock;
  throw ConfigError("unknown predictor arch '" + name + "' (mixmlp, mlp, transblock)");
}

std::string to_string(LossKind kind) { return kind == LossKind::kLiteral ? "literal" : "bce"; }

LossKind parse_loss_kind(const std::string& name) {
  if (name == "literal") return LossKind::kLiteral;
  if (name == "bce") return LossKind::kBinaryCrossEntropy;
  throw ConfigError("unknown predictor loss '" + name + "' (literal, bce)");
}

namespace {

Parameter weight(const std::string& name, std::size_t fan_in, std::size_t fan_out, SeededRng& rng) {
  return Parameter(name, rng.normal_tensor({fan_in, fan_out}, 1.0F / std::sqrt(static_cast<float>(fan_in))));
}

float sigmoid(float x) {
  if (x >= 0.0F) return 1.0F / (1.0F + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0F + e);
}

}  // namespace

Predictor Predictor::init(ArchKind arch, std::size_t n_max, std::size_t dim, std::size_t attach_layer,
                          const SeededRng& rng, std::size_t mlp_hidden, std::size_t heads) {
  if (n_max == 0 || dim == 0) throw ConfigError("predictor needs positive token count and width");
  if (attach_layer == 0) throw ConfigError("attach layer is 1-based");
  Predictor pr;
  pr.arch_ = arch;
  pr.n_max_ = n_max;
  pr.dim_ = dim;
  pr.attach_layer_ = attach_layer;
  pr.heads_ = heads;
  pr.mlp_hidden_ = mlp_hidden;
  SeededRng r = rng.fork(7);
  auto& ps = pr.params_;
  switch (arch) {
    case ArchKind::kMixMlp:
      ps.push_back(weight("mix.channel.w", dim, dim, r));
      ps.emplace_back("mix.channel.b", Tensor({dim}));
      ps.emplace_back("mix.channel.ln.gamma", Tensor({dim}, 1.0F));
      ps.emplace_back("mix.channel.ln.beta", Tensor({dim}));
      ps.push_back(weight("mix.token.w", n_max, n_max, r));
      ps.emplace_back("mix.token.b", Tensor({n_max}));
      ps.emplace_back("mix.token.ln.gamma", Tensor({n_max}, 1.0F));
      ps.emplace_back("mix.token.ln.beta", Tensor({n_max}));
      break;
    case ArchKind::kMlp:
      if (mlp_hidden == 0) throw ConfigError("MLP predictor needs a hidden width");
      ps.push_back(weight("mlp.fc1.w", dim, mlp_hidden, r));
      ps.emplace_back("mlp.fc1.b", Tensor({mlp_hidden}));
      ps.emplace_back("mlp.ln.gamma", Tensor({mlp_hidden}, 1.0F));
      ps.emplace_back("mlp.ln.beta", Tensor({mlp_hidden}));
      ps.push_back(weight("mlp.fc2.w", mlp_hidden, n_max, r));
      ps.emplace_back("mlp.fc2.b", Tensor({n_max}));
      break;
    case ArchKind::kTransBlock:
      if (heads == 0 || dim % heads != 0) throw ConfigError("TransBlock predictor width must divide by heads");
      ps.emplace_back("block.ln1.gamma", Tensor({dim}, 1.0F));
      ps.emplace_back("block.ln1.beta", Tensor({dim}));
      ps.push_back(weight("block.qkv.w", dim, 3 * dim, r));
      ps.emplace_back("block.qkv.b", Tensor({3 * dim}));
      ps.push_back(weight("block.proj.w", dim, dim, r));
      ps.emplace_back("block.proj.b", Tensor({dim}));
      ps.emplace_back("block.ln2.gamma", Tensor({dim}, 1.0F));
      ps.emplace_back("block.ln2.beta", Tensor({dim}));
      ps.push_back(weight("block.fc1.w", dim, 4 * dim, r));
      ps.emplace_back("block.fc1.b", Tensor({4 * dim}));
      ps.push_back(weight("block.fc2.w", 4 * dim, dim, r));
      ps.emplace_back("block.fc2.b", Tensor({dim}));
      break;
  }
  return pr;
}

Parameter& Predictor::parameter(const std::string& name) {
  for (auto& q : params_) {
    if (q.name == name) return q;
  }
  throw LogicError("predictor has no parameter " + name);
}

Var Predictor::p(const std::string& name) { return Var::param(parameter(name)); }

ParameterRefs Predictor::parameters() {
  ParameterRefs out;
  for (auto& q : params_) out.push_back(&q);
  return out;
}

std::vector<const Parameter*> Predictor::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& q : params_) out.push_back(&q);
  return out;
}

Var Predictor::forward(const Var& z, const std::vector<std::size_t>& ids) {
  const Tensor& zv = z.value();
  if (zv.rank() != 2 || zv.dim(1) != dim_) {
    throw ShapeError("predictor input " + nn::shape_str(zv.shape()) + " must be [n, " + std::to_string(dim_) + "]");
  }
  const std::size_t n = zv.dim(0);
  if (n > n_max_) throw ShapeError("predictor sized for " + std::to_string(n_max_) + " tokens got " + std::to_string(n));
  if (ids.size() != n) throw ShapeError("predictor needs one id per token row");
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] >= n_max_ || (i > 0 && ids[i] <= ids[i - 1])) throw LogicError("predictor ids must be ascending and < N_max");
  }

  switch (arch_) {
    case ArchKind::kMixMlp: {
      Var h = nn::linear(z, p("mix.channel.w"), p("mix.channel.b"));
      h = nn::gelu(nn::layer_norm(h, p("mix.channel.ln.gamma"), p("mix.channel.ln.beta")));
      Var c = nn::add(z, h);
      Var t = nn::transpose(c);  // [d, n]
      Var w = n == n_max_ ? p("mix.token.w") : nn::submatrix(p("mix.token.w"), ids, ids);
      Var b = n == n_max_ ? p("mix.token.b") : nn::gather_rows(p("mix.token.b"), ids);
      Var g = n == n_max_ ? p("mix.token.ln.gamma") : nn::gather_rows(p("mix.token.ln.gamma"), ids);
      Var be = n == n_max_ ? p("mix.token.ln.beta") : nn::gather_rows(p("mix.token.ln.beta"), ids);
      Var u = nn::gelu(nn::layer_norm(nn::linear(t, w, b), g, be));
      return nn::mean_cols(nn::transpose(nn::add(t, u)));
    }
    case ArchKind::kMlp: {
      Var h = nn::linear(z, p("mlp.fc1.w"), p("mlp.fc1.b"));
      h = nn::gelu(nn::layer_norm(h, p("mlp.ln.gamma"), p("mlp.ln.beta")));
      return nn::mean_cols(nn::linear(h, p("mlp.fc2.w"), p("mlp.fc2.b")));
    }
    case ArchKind::kTransBlock: {
      Var h = nn::layer_norm(z, p("block.ln1.gamma"), p("block.ln1.beta"));
      Var a = nn::attention(nn::linear(h, p("block.qkv.w"), p("block.qkv.b")), 1, n, heads_, false);
      Var y = nn::add(z, nn::linear(a, p("block.proj.w"), p("block.proj.b")));
      Var h2 = nn::layer_norm(y, p("block.ln2.gamma"), p("block.ln2.beta"));
      Var m = nn::linear(nn::gelu(nn::linear(h2, p("block.fc1.w"), p("block.fc1.b"))), p("block.fc2.w"), p("block.fc2.b"));
      return nn::mean_cols(nn::add(y, m));
    }
  }
  throw LogicError("unknown predictor arch");
}

Tensor Predictor::score(const Tensor& z, const std::vector<std::size_t>& ids) const {
  nn::NoGradGuard no_grad;
  return const_cast<Predictor*>(this)->forward(Var::constant(z), ids).value();
}

Var predictor_loss(const Tensor& s_norm, const Var& s_hat) {
  if (s_norm.numel() != s_hat.value().numel()) {
    throw ShapeError("predictor_loss: target " + nn::shape_str(s_norm.shape()) + " vs prediction " +
                     nn::shape_str(s_hat.value().shape()));
  }
  Tensor w(s_hat.value().shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = sigmoid(s_norm[i]);
  return nn::scale(nn::sum(nn::mul(Var::constant(std::move(w)), nn::log_sigmoid(s_hat))), -1.0F);
}

Var predictor_bce_loss(const Tensor& s_norm, const Var& s_hat) {
  if (s_norm.numel() != s_hat.value().numel()) {
    throw ShapeError("predictor_bce_loss: target " + nn::shape_str(s_norm.shape()) + " vs prediction " +
                     nn::shape_str(s_hat.value().shape()));
  }
  Tensor w(s_hat.value().shape());
  Tensor wc(s_hat.value().shape());
  for (std::size_t i = 0; i < w.numel(); ++i) {
    w[i] = sigmoid(s_norm[i]);
    wc[i] = sigmoid(-s_norm[i]);
  }
  Var pos = nn::mul(Var::constant(std::move(w)), nn::log_sigmoid(s_hat));
  Var neg = nn::mul(Var::constant(std::move(wc)), nn::log_sigmoid(nn::scale(s_hat, -1.0F)));
  return nn::scale(nn::sum(nn::add(pos, neg)), -1.0F);
}

Var training_loss(LossKind kind, const Tensor& s_norm, const Var& s_hat) {
  return kind == LossKind::kLiteral ? predictor_loss(s_norm, s_hat) : predictor_bce_loss(s_norm, s_hat);
}

float predictor_loss_value(const Tensor& s_norm, const Tensor& s_hat) {
  nn::NoGradGuard no_grad;
  return predictor_loss(s_norm, Var::constant(s_hat)).value()[0];
}

MatchRateReport matching_rate(const golden::Ranking& pred, const golden::Ranking& gold, std::size_t k) {
  if (k == 0) throw UsageError("matching rate needs K >= 1");
  if (pred.order.size() != gold.order.size()) throw ShapeError("rankings over different token counts");
  if (k > pred.order.size()) throw UsageError("K exceeds the token count");
  std::unordered_set<std::size_t> top(gold.order.begin(), gold.order.begin() + static_cast<std::ptrdiff_t>(k));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += top.count(pred.order[i]);
  return {k, 100.0F * static_cast<float>(hits) / static_cast<float>(k)};
}

Tensor patch_intermediates(const clip::ClipModel& model, const data::TokenGrid& tokens, std::size_t layer) {
  clip::Hooks hooks{{layer}};
  auto r = clip::encode_image(model, tokens, {}, nullptr, hooks);
  auto it = r.intermediates.find(layer);
  if (it == r.intermediates.end()) throw ConfigError("no vision layer " + std::to_string(layer));
  const Tensor& full = it->second;
  const std::size_t n = full.rows() - 1;
  Tensor out({n, full.cols()});
  std::copy_n(full.data() + full.cols(), n * full.cols(), out.data());
  return out;
}

std::vector<TrainingExample> build_training_set(const clip::ClipModel& model, const data::DatasetSplit& split,
                                                const golden::GoldenCache& cache, std::size_t attach_layer,
                                                std::size_t jobs) {
  for (const auto& ex : split.examples) {
    if (!cache.contains(ex.id)) cache.load(ex.id);  // throws naming the image
  }
  std::vector<TrainingExample> out(split.examples.size());
  nn::parallel_for(out.size(), jobs, [&](std::size_t i) {
    const auto& ex = split.examples[i];
    out[i].z = patch_intermediates(model, data::patchify(ex, split.patch), attach_layer);
    out[i].target = golden::importance(cache.load(ex.id));
    out[i].image_id = ex.id;
  });
  return out;
}

namespace {

std::vector<std::size_t> all_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace

float mean_loss(const Predictor& predictor, const std::vector<TrainingExample>& examples, LossKind kind) {
  if (examples.empty()) return 0.0F;
  double total = 0.0;
  for (const auto& ex : examples) {
    nn::NoGradGuard no_grad;
    total += training_loss(kind, ex.target, Var::constant(predictor.score(ex.z, all_ids(ex.z.rows())))).value()[0];
  }
  return static_cast<float>(total / static_cast<double>(examples.size()));
}

TrainReport train_predictor(Predictor& predictor, const std::vector<TrainingExample>& examples,
                            const PredictorConfig& config, const SeededRng& rng) {
  TrainReport report;
  report.initial_loss = mean_loss(predictor, examples, config.loss);
  if (config.epochs == 0 || examples.empty()) return report;
  auto params = predictor.parameters();
  nn::Optimizer opt(params, config.optim);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.fork(epoch).permutation(examples.size());
    double total = 0.0;
    for (auto i : order) {
      const auto& ex = examples[i];
      opt.zero_grad();
      Var loss = training_loss(config.loss, ex.target, predictor.forward(Var::constant(ex.z), all_ids(ex.z.rows())));
      const float v = loss.value()[0];
      if (!std::isfinite(v)) {
        throw NumericError("predictor training diverged in epoch " + std::to_string(epoch) + " on image " +
                           std::to_string(ex.image_id));
      }
      total += v;
      nn::backward(loss);
      opt.step();
    }
    report.epoch_loss.push_back(static_cast<float>(total / static_cast<double>(examples.size())));
  }
  return report;
}

float mean_matching_rate(const Predictor& predictor, const std::vector<TrainingExample>& examples, std::size_t k) {
  if (examples.empty()) return 0.0F;
  double total = 0.0;
  for (const auto& ex : examples) {
    const auto pred = golden::ranking_from_scores(predictor.score(ex.z, all_ids(ex.z.rows())));
    total += matching_rate(pred, golden::ranking_from_scores(ex.target), k).rate;
  }
  return static_cast<float>(total / static_cast<double>(examples.size()));
}

void save_predictor(const fs::path& dir, const Predictor& predictor, const std::string& score_kind, std::size_t grid) {
  nn::save_checkpoint(dir, predictor.parameters(),
                      {{"kind", "predictor"},
                       {"arch", to_string(predictor.arch())},
                       {"attach_layer", std::to_string(predictor.attach_layer())},
                       {"score_kind", score_kind},
                       {"grid", std::to_string(grid)},
                       {"n_max", std::to_string(predictor.n_max())},
                       {"dim", std::to_string(predictor.dim())},
                       {"heads", std::to_string(predictor.heads())},
                       {"mlp_hidden", std::to_string(predictor.mlp_hidden())}});
}

Predictor load_predictor(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifactError("predictor checkpoint not found: " + dir.string());
  const auto tags = nn::read_checkpoint_tags(dir);
  auto tag = [&](const std::string& key) -> const std::string& {
    auto it = tags.find(key);
    if (it == tags.end()) throw ParseError("predictor manifest lacks tag '" + key + "'");
    return it->second;
  };
  auto number = [&](const std::string& key) -> std::size_t {
    try {
      return static_cast<std::size_t>(std::stoull(tag(key)));
    } catch (const std::logic_error&) {
      throw ParseError("predictor manifest tag '" + key + "' is not a number");
    }
  };
  Predictor pr = Predictor::init(parse_arch(tag("arch")), number("n_max"), number("dim"), number("attach_layer"),
                                 SeededRng(0), number("mlp_hidden"), number("heads"));
  nn::load_checkpoint(dir, pr.parameters());
  return pr;
}

}  // namespace tokenrank::predictor
