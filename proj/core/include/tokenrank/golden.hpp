#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tokenrank/clip.hpp"
#include "tokenrank/data.hpp"

namespace tokenrank::golden {

using nn::Tensor;

enum class ScoreKind { kLabel, kConfidence, kPreservation };

std::string to_string(ScoreKind kind);
ScoreKind parse_score_kind(const std::string& name);

/// r x r block of patch ids at grid cell (row, col), ids ascending.
struct PruneWindow {
  std::vector<std::size_t> token_ids;
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t r = 0;
};

/// All (P-r)/stride+1 squared axis-aligned blocks, row-major.
std::vector<PruneWindow> enumerate_windows(std::size_t grid, std::size_t r, std::size_t stride = 1);

struct GoldenConfig {
  ScoreKind kind = ScoreKind::kPreservation;
  std::size_t r = 3;
  std::size_t stride = 1;
  std::size_t prune_layer = 2;
  bool area_norm = false;  ///< divide by r*r instead of the coverage count
  bool batched = true;
  std::size_t batch_windows = 0;  ///< windows per grouped forward; 0 = all
};

/// Raw scores follow the removal metric: high = the token's removal barely
/// moved the output, i.e. the token is redundant.
struct GoldenScores {
  Tensor raw;         ///< [N]
  Tensor normalized;  ///< [N]
  std::vector<std::size_t> coverage;
  float mu = 0.0F;
  float sigma = 0.0F;
  bool degenerate = false;  ///< sigma < 1e-8; normalized is all zeros
  ScoreKind kind = ScoreKind::kPreservation;
  std::size_t source_layer = 0;
};

/// Descending order with ties by ascending index.
struct Ranking {
  std::vector<std::size_t> order;
  Tensor scores;
};

/// Frozen model plus the per-image reference quantities every window score needs.
struct ImageScorer {
  const clip::ClipModel& model;
  const clip::ClassEmbeddings& classes;
  const data::TokenGrid& tokens;
  Tensor full_cls;  ///< unpruned Z_cls

  ImageScorer(const clip::ClipModel& model, const clip::ClassEmbeddings& classes, const data::TokenGrid& tokens);

  /// Score of one removal; y_gt is required for kLabel. Empty `ids` is the
  /// no-removal control.
  float score(const std::vector<std::size_t>& ids, ScoreKind kind, std::optional<std::size_t> y_gt,
              std::size_t prune_layer) const;
  /// Scores for every window from one grouped forward per chunk.
  std::vector<float> score_batched(const std::vector<PruneWindow>& windows, ScoreKind kind,
                                   std::optional<std::size_t> y_gt, std::size_t prune_layer,
                                   std::size_t chunk = 0) const;
  float score_from_cls(const Tensor& z_cls, ScoreKind kind, std::optional<std::size_t> y_gt) const;
};

/// cos(a, b) accumulated in double; identical inputs give exactly 1.
float cosine(const Tensor& a, const Tensor& b);

float score_window(const clip::ClipModel& model, const clip::ClassEmbeddings& classes, const data::TokenGrid& tokens,
                   const PruneWindow& window, ScoreKind kind, std::optional<std::size_t> y_gt,
                   std::size_t prune_layer);

/// Per-token average of window scores. Each window contributes score/cov[t]
/// (or score/r^2 with area_norm) to each member t, accumulated in
/// enumeration order.
GoldenScores golden_scores(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                           const data::TokenGrid& tokens, const GoldenConfig& config,
                           std::optional<std::size_t> y_gt = std::nullopt);

/// Accumulation step of golden_scores, exposed for callers that already hold window scores.
GoldenScores accumulate_window_scores(const std::vector<PruneWindow>& windows, const std::vector<float>& window_scores,
                                      std::size_t n, bool area_norm);

/// Fills normalized/mu/sigma (population std over all N tokens).
void normalize_scores(GoldenScores& scores);

Ranking ranking_from_scores(const Tensor& scores);

/// Importance used by every ranking consumer (predictor targets, oracle
/// pruning, matching rate): the negated normalized score, so that tokens
/// whose removal hurts most rank first.
Tensor importance(const GoldenScores& scores);

// ---- cache -------------------------------------------------------------------

/// Per-image score files under <root>/<dataset>/<kind>_r<r>_s<stride>_l<layer>[_area]/<image id>.*
class GoldenCache {
 public:
  GoldenCache(std::filesystem::path root, std::string dataset_key, GoldenConfig config);

  std::filesystem::path image_stem(std::uint64_t image_id) const;
  bool contains(std::uint64_t image_id) const;
  void store(std::uint64_t image_id, const GoldenScores& scores) const;
  /// MissingArtifactError naming the image when absent.
  GoldenScores load(std::uint64_t image_id) const;

  /// Scores every image of `split` that is not cached yet (all of them with
  /// `rebuild`). Returns the number computed.
  std::size_t build(const clip::ClipModel& model, const data::DatasetSplit& split, std::size_t jobs,
                    bool rebuild = false) const;

  const GoldenConfig& config() const noexcept { return config_; }
  std::filesystem::path directory() const;

 private:
  std::filesystem::path root_;
  std::string dataset_key_;
  GoldenConfig config_;
};

}  // namespace tokenrank::golden
