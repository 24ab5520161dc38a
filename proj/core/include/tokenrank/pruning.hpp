#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tokenrank/clip.hpp"
#include "tokenrank/predictor.hpp"

namespace tokenrank::pruning {

using nn::SeededRng;
using nn::Tensor;

enum class Strategy { kGoldenOracle, kPredictor, kClsAttention, kRandom };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);
const std::vector<Strategy>& all_strategies();

struct ScheduleEntry {
  std::size_t layer = 1;
  std::size_t drop = 0;

  bool operator==(const ScheduleEntry&) const = default;
};

struct PruneSchedule {
  std::vector<ScheduleEntry> entries;
  Strategy strategy = Strategy::kPredictor;

  std::size_t total_drop() const noexcept;
  /// ConfigError unless layers strictly increase within 1..depth, drops are
  /// positive and the total stays below `patches`.
  void validate(std::size_t patches, std::size_t depth) const;
};

/// drops = round((1 - keep) N), split evenly over `locations` with the
/// remainder going to the earliest ones. keep == 1 gives an empty schedule.
PruneSchedule make_schedule(double keep, const std::vector<std::size_t>& locations, std::size_t patches,
                            Strategy strategy = Strategy::kPredictor);

struct FlopsReport {
  std::uint64_t total_macs = 0;
  /// [embedding, block 1 .. block L, head]
  std::vector<std::uint64_t> per_layer;
  double relative_to_unpruned = 1.0;
};

/// Multiply-accumulates of one image forward:
///   embedding      N d_in d
///   block (len n)  4 n d^2 + 2 n^2 d + 2 n d d_mlp,  n = 1 + b_v + surviving
///   head           d d_e   (CLS projection)
/// Layer norms, softmax, GELU and the class-embedding dot products are not
/// counted. relative_to_unpruned compares against the same b_v with no drops.
FlopsReport count_flops(const clip::VisionConfig& vision, std::size_t embed_dim, const PruneSchedule& schedule,
                        std::size_t prompt_count = 0);

/// Per-image score sources. Only the one matching the schedule's strategy is read.
struct ScoreSources {
  const predictor::Predictor* predictor = nullptr;
  const Tensor* golden_importance = nullptr;  ///< [N], higher = keep
  const SeededRng* rng = nullptr;
};

/// Scores the strategy assigns to the surviving patches of sequence b (higher = keep).
clip::ScoreFn make_score_fn(Strategy strategy, const ScoreSources& sources);

/// Throws UsageError when the strategy's source is missing.
clip::RemovalPlan make_removal_plan(const PruneSchedule& schedule, const ScoreSources& sources);

struct StageTrace {
  std::size_t layer = 0;
  std::vector<std::size_t> dropped;
  std::vector<std::size_t> surviving;
};

struct PruneResult {
  Tensor probs;
  std::vector<std::size_t> surviving_ids;
  FlopsReport flops;
  std::vector<StageTrace> trace;
};

PruneResult prune_infer(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                        const data::TokenGrid& tokens, const PruneSchedule& schedule, const ScoreSources& sources,
                        const Tensor* prompts_v = nullptr);

/// Score sources for example i of a split.
using SourceProvider = std::function<ScoreSources(std::size_t example_index)>;

/// Percent of `split` classified correctly under `schedule`; images run on
/// up to `jobs` threads, results gathered in split order.
float pruned_accuracy(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                      const data::DatasetSplit& split, const PruneSchedule& schedule, const SourceProvider& sources,
                      const Tensor* prompts_v = nullptr, std::size_t jobs = 1);

/// Alias of clip::cls_attention_scores.
Tensor cls_attention_prune_scores(const clip::EncodeResult& result, std::size_t layer);

/// Line-delimited JSON record of one pruned inference.
std::string trace_line(std::uint64_t image_id, const PruneSchedule& schedule, const PruneResult& result);

}  // namespace tokenrank::pruning
