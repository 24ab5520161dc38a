#include "tokenrank/golden.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/parallel.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank::golden {

namespace fs = std::filesystem;

std::string to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::kLabel: return "label";
    case ScoreKind::kConfidence: return "confidence";
    case ScoreKind::kPreservation: return "preservation";
  }
  return "?";
}

ScoreKind parse_score_kind(const std::string& name) {
  if (name == "label") return ScoreKind::kLabel;
  if (name == "confidence") return ScoreKind::kConfidence;
  if (name == "preservation") return ScoreKind::kPreservation;
  throw ConfigError("unknown score kind '" + name + "' (label, confidence, preservation)");
}

std::vector<PruneWindow> enumerate_windows(std::size_t grid, std::size_t r, std::size_t stride) {
  if (r == 0 || r > grid) throw ConfigError("window side " + std::to_string(r) + " outside 1.." + std::to_string(grid));
  if (stride == 0) throw ConfigError("window stride must be positive");
  std::vector<PruneWindow> out;
  for (std::size_t row = 0; row + r <= grid; row += stride) {
    for (std::size_t col = 0; col + r <= grid; col += stride) {
      PruneWindow w;
      w.row = row;
      w.col = col;
      w.r = r;
      for (std::size_t dy = 0; dy < r; ++dy) {
        for (std::size_t dx = 0; dx < r; ++dx) w.token_ids.push_back((row + dy) * grid + col + dx);
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

float cosine(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("cosine of " + nn::shape_str(a.shape()) + " and " + nn::shape_str(b.shape()));
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine of a zero-norm CLS embedding");
  // sqrt(x*x) == x exactly in binary floating point
  const double c = dot / std::sqrt(na * nb);
  return static_cast<float>(std::clamp(c, -1.0, 1.0));
}

ImageScorer::ImageScorer(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                         const data::TokenGrid& tokens)
    : model(model), classes(classes), tokens(tokens), full_cls(clip::encode_image(model, tokens).z_cls) {}

float ImageScorer::score_from_cls(const Tensor& z_cls, ScoreKind kind, std::optional<std::size_t> y_gt) const {
  if (kind == ScoreKind::kPreservation) return cosine(full_cls, z_cls);
  const Tensor probs = clip::zero_shot_probs(z_cls, classes, model.vision.proj.value);
  if (kind == ScoreKind::kLabel) {
    if (!y_gt) throw UsageError("label-driven score needs the ground-truth class");
    if (*y_gt >= probs.numel()) throw UsageError("ground-truth class " + std::to_string(*y_gt) + " out of range");
    return probs[*y_gt];
  }
  return *std::max_element(probs.values().begin(), probs.values().end());
}

float ImageScorer::score(const std::vector<std::size_t>& ids, ScoreKind kind, std::optional<std::size_t> y_gt,
                         std::size_t prune_layer) const {
  for (auto id : ids) {
    if (id >= tokens.tokens.rows()) throw LogicError("window token " + std::to_string(id) + " out of range");
  }
  clip::RemovalPlan plan;
  if (!ids.empty()) plan.push_back({prune_layer, ids});
  else if (prune_layer == 0 || prune_layer > model.config.vision.layers) {
    throw ConfigError("prune layer " + std::to_string(prune_layer) + " outside the vision depth");
  }
  const auto r = clip::encode_image(model, tokens, plan);
  return score_from_cls(r.z_cls, kind, y_gt);
}

std::vector<float> ImageScorer::score_batched(const std::vector<PruneWindow>& windows, ScoreKind kind,
                                              std::optional<std::size_t> y_gt, std::size_t prune_layer,
                                              std::size_t chunk) const {
  const std::size_t depth = model.config.vision.layers;
  if (prune_layer == 0 || prune_layer > depth) {
    throw ConfigError("prune layer " + std::to_string(prune_layer) + " outside 1.." + std::to_string(depth));
  }
  if (kind == ScoreKind::kLabel && !y_gt) throw UsageError("label-driven score needs the ground-truth class");
  nn::NoGradGuard no_grad;
  const Tensor* batch[] = {&tokens.tokens};
  clip::SequenceState prefix = clip::embed_patches(model, batch, nn::Var());
  for (std::size_t layer = 1; layer < prune_layer; ++layer) clip::run_block(model, layer, prefix);

  if (chunk == 0) chunk = windows.size();
  std::vector<float> out;
  out.reserve(windows.size());
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t end = std::min(windows.size(), start + chunk);
    std::vector<std::vector<std::size_t>> drops;
    for (std::size_t i = start; i < end; ++i) {
      for (auto id : windows[i].token_ids) {
        if (id >= tokens.tokens.rows()) throw LogicError("window token " + std::to_string(id) + " out of range");
      }
      drops.push_back(windows[i].token_ids);
    }
    clip::SequenceState state = clip::fork_with_drops(prefix, drops);
    for (std::size_t layer = prune_layer; layer <= depth; ++layer) clip::run_block(model, layer, state);
    const Tensor cls = clip::final_cls(model, state).value();
    const std::size_t d = cls.cols();
    for (std::size_t b = 0; b < drops.size(); ++b) {
      Tensor z({d});
      std::copy_n(cls.data() + b * d, d, z.data());
      out.push_back(score_from_cls(z, kind, y_gt));
    }
  }
  return out;
}

float score_window(const clip::ClipModel& model, const clip::ClassEmbeddings& classes, const data::TokenGrid& tokens,
                   const PruneWindow& window, ScoreKind kind, std::optional<std::size_t> y_gt,
                   std::size_t prune_layer) {
  return ImageScorer(model, classes, tokens).score(window.token_ids, kind, y_gt, prune_layer);
}

GoldenScores accumulate_window_scores(const std::vector<PruneWindow>& windows, const std::vector<float>& window_scores,
                                      std::size_t n, bool area_norm) {
  if (windows.size() != window_scores.size()) throw ShapeError("one score per window required");
  GoldenScores g;
  g.coverage.assign(n, 0);
  for (const auto& w : windows) {
    for (auto t : w.token_ids) {
      if (t >= n) throw LogicError("window token " + std::to_string(t) + " out of range");
      ++g.coverage[t];
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    if (g.coverage[t] == 0) throw ConfigError("window stride leaves token " + std::to_string(t) + " uncovered");
  }
  g.raw = Tensor({n});
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    const float denom = area_norm ? static_cast<float>(w.r * w.r) : 0.0F;
    for (auto t : w.token_ids) {
      g.raw[t] += window_scores[i] / (area_norm ? denom : static_cast<float>(g.coverage[t]));
    }
  }
  normalize_scores(g);
  return g;
}

GoldenScores golden_scores(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                           const data::TokenGrid& tokens, const GoldenConfig& config, std::optional<std::size_t> y_gt) {
  const auto windows = enumerate_windows(tokens.grid_side, config.r, config.stride);
  const ImageScorer scorer(model, classes, tokens);
  std::vector<float> scores;
  if (config.batched) {
    scores = scorer.score_batched(windows, config.kind, y_gt, config.prune_layer, config.batch_windows);
  } else {
    for (const auto& w : windows) scores.push_back(scorer.score(w.token_ids, config.kind, y_gt, config.prune_layer));
  }
  GoldenScores g = accumulate_window_scores(windows, scores, tokens.tokens.rows(), config.area_norm);
  g.kind = config.kind;
  g.source_layer = config.prune_layer;
  return g;
}

void normalize_scores(GoldenScores& g) {
  const std::size_t n = g.raw.numel();
  if (n < 2) throw UsageError("normalization needs at least two tokens");
  double mean = 0.0;
  for (float v : g.raw.values()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : g.raw.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  g.mu = static_cast<float>(mean);
  g.sigma = static_cast<float>(sd);
  g.normalized = Tensor({n});
  g.degenerate = sd < 1e-8;
  if (g.degenerate) return;
  for (std::size_t i = 0; i < n; ++i) g.normalized[i] = static_cast<float>((g.raw[i] - mean) / sd);
}

Ranking ranking_from_scores(const Tensor& scores) {
  if (scores.numel() == 0) throw UsageError("ranking needs at least one score");
  for (float v : scores.values()) {
    if (std::isnan(v)) throw NumericError("NaN in ranking scores");
  }
  Ranking r;
  r.scores = scores;
  r.order.resize(scores.numel());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return r;
}

Tensor importance(const GoldenScores& scores) {
  Tensor out = scores.normalized;
  for (auto& v : out.values()) v = v == 0.0F ? 0.0F : -v;
  return out;
}

// ---- cache -------------------------------------------------------------------

GoldenCache::GoldenCache(fs::path root, std::string dataset_key, GoldenConfig config)
    : root_(std::move(root)), dataset_key_(std::move(dataset_key)), config_(config) {}

fs::path GoldenCache::directory() const {
  std::string leaf = to_string(config_.kind) + "_r" + std::to_string(config_.r) + "_s" + std::to_string(config_.stride) +
                     "_l" + std::to_string(config_.prune_layer);
  if (config_.area_norm) leaf += "_area";
  return root_ / dataset_key_ / leaf;
}

fs::path GoldenCache::image_stem(std::uint64_t image_id) const { return directory() / ("img" + std::to_string(image_id)); }

bool GoldenCache::contains(std::uint64_t image_id) const {
  const auto stem = image_stem(image_id);
  return fs::exists(stem.string() + ".normalized.bin") && fs::exists(stem.string() + ".raw.bin") &&
         fs::exists(stem.string() + ".coverage.bin");
}

void GoldenCache::store(std::uint64_t image_id, const GoldenScores& g) const {
  fs::create_directories(directory());
  const std::string stem = image_stem(image_id).string();
  Tensor cov({g.coverage.size()});
  for (std::size_t i = 0; i < g.coverage.size(); ++i) cov[i] = static_cast<float>(g.coverage[i]);
  nn::write_tensor(stem + ".raw", g.raw);
  nn::write_tensor(stem + ".coverage", cov);
  // written last: its presence marks a complete entry
  nn::write_tensor(stem + ".normalized", g.normalized);
}

GoldenScores GoldenCache::load(std::uint64_t image_id) const {
  if (!contains(image_id)) {
    throw MissingArtifactError("golden scores for image " + std::to_string(image_id) + " not cached under " +
                               directory().string() + " (run the golden stage)");
  }
  const std::string stem = image_stem(image_id).string();
  GoldenScores g;
  g.raw = nn::read_tensor(stem + ".raw");
  g.normalized = nn::read_tensor(stem + ".normalized");
  const Tensor cov = nn::read_tensor(stem + ".coverage");
  for (float c : cov.values()) g.coverage.push_back(static_cast<std::size_t>(c));
  g.kind = config_.kind;
  g.source_layer = config_.prune_layer;
  GoldenScores check = g;
  normalize_scores(check);
  g.mu = check.mu;
  g.sigma = check.sigma;
  g.degenerate = check.degenerate;
  return g;
}

std::size_t GoldenCache::build(const clip::ClipModel& model, const data::DatasetSplit& split, std::size_t jobs,
                               bool rebuild) const {
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < split.examples.size(); ++i) {
    if (rebuild || !contains(split.examples[i].id)) todo.push_back(i);
  }
  if (todo.empty()) return 0;
  const clip::ClassEmbeddings classes = clip::encode_text(model);
  nn::parallel_for(todo.size(), jobs, [&](std::size_t k) {
    const auto& ex = split.examples[todo[k]];
    const auto tokens = data::patchify(ex, split.patch);
    store(ex.id, golden_scores(model, classes, tokens, config_, ex.label));
  });
  return todo.size();
}

}  // namespace tokenrank::golden
