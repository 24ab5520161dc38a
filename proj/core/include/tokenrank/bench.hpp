#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tokenrank/clip.hpp"
#include "tokenrank/config.hpp"
#include "tokenrank/data.hpp"
#include "tokenrank/golden.hpp"
#include "tokenrank/predictor.hpp"
#include "tokenrank/prompt.hpp"
#include "tokenrank/pruning.hpp"

namespace tokenrank::bench {

namespace fs = std::filesystem;

/// Everything an experiment needs, resolvable from one JSON file. Model
/// geometry (patches, patch_dim, class names) is derived from `data`.
struct PipelineConfig {
  std::string name = "default";
  data::SyntheticConfig data;
  std::vector<std::uint32_t> variants{0, 1};  ///< variants[0] is the primary dataset
  clip::ModelConfig model;
  clip::PretrainConfig pretrain{6, 0, 2e-3F};
  golden::GoldenConfig golden;
  predictor::PredictorConfig predictor;
  prompt::TuneConfig tune;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> keep_rates{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
  std::vector<pruning::Strategy> strategies{pruning::Strategy::kGoldenOracle, pruning::Strategy::kPredictor,
                                            pruning::Strategy::kClsAttention, pruning::Strategy::kRandom};
  std::vector<std::size_t> locations{2, 3, 4, 5};
  std::vector<std::vector<std::size_t>> location_sets{{2, 3, 4, 5}, {3, 4, 5, 6}, {1, 3, 5, 6}, {2, 4, 5, 6}};
  std::vector<predictor::ArchKind> archs{predictor::ArchKind::kMlp, predictor::ArchKind::kTransBlock,
                                         predictor::ArchKind::kMixMlp};
  std::vector<double> arch_keep_rates{0.9, 0.8, 0.7, 0.6, 0.5};
  double ablation_keep = 0.6;  ///< location ablation and tuning grid
  double cross_keep = 0.5;
  std::size_t match_k = 0;  ///< 0 = N/4
  bool tune_unpruned = true;  ///< tuning-grid rows with prompts tuned on the unpruned model
  bool record_wall_time = false;

  /// Model config with geometry and class names filled in from `data`.
  clip::ModelConfig resolved_model() const;
  data::SyntheticConfig variant_config(std::uint32_t variant) const;
  std::size_t patches() const { return data.grid * data.grid; }
  std::size_t resolved_match_k() const { return match_k == 0 ? std::max<std::size_t>(1, patches() / 4) : match_k; }
  void validate() const;
};

config::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const config::json& j);
/// Defaults when `path` is empty.
PipelineConfig load_pipeline_config(const fs::path& path);

/// One CSV row. Not-applicable numeric cells hold -1.
struct ResultRow {
  std::string experiment;
  std::string grid_id;
  std::uint64_t seed = 0;
  std::string strategy;
  double keep_rate = 1.0;
  std::string locations;
  std::string arch;
  std::string tune_mode = "none";
  int pruned = 0;
  int train_variant = -1;
  int test_variant = -1;
  double accuracy = 0.0;
  double matching_rate = -1.0;
  std::uint64_t total_macs = 0;
  double relative_macs = 1.0;
  double wall_time_ms = 0.0;

  bool operator==(const ResultRow&) const = default;
};

const std::vector<std::string>& csv_columns();
std::string to_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_csv(const std::string& text);
void sort_rows(std::vector<ResultRow>& rows);

/// Writes <dir>/<stem>.csv, <stem>.summary.json and <stem>.plot.csv
/// (series, keep_rate, mean accuracy over seeds).
void emit_report(const std::vector<ResultRow>& rows, const fs::path& dir, const std::string& stem);
std::vector<ResultRow> read_report(const fs::path& csv_path);

/// Output tree of one pipeline:
///   <out>/seed-<s>/variant-<v>/data      dataset
///   <out>/seed-<s>/model                 pretrained dual encoder
///   <out>/seed-<s>/predictor/<arch>-v<v> predictor checkpoints
///   <out>/seed-<s>/prompts/<mode>-<pruned|full>
///   <out>/reports                        csv / json reports
///   <cache>/seed-<s>/variant-<v>/...     golden scores
class Workspace {
 public:
  Workspace(PipelineConfig config, fs::path out, fs::path cache = {}, std::size_t jobs = 1);

  const PipelineConfig& config() const noexcept { return config_; }
  std::size_t jobs() const noexcept { return jobs_; }
  const fs::path& out() const noexcept { return out_; }

  fs::path seed_dir(std::uint64_t seed) const;
  fs::path data_dir(std::uint64_t seed, std::uint32_t variant) const;
  fs::path model_dir(std::uint64_t seed) const;
  fs::path predictor_dir(std::uint64_t seed, predictor::ArchKind arch, std::uint32_t variant) const;
  fs::path prompts_dir(std::uint64_t seed, prompt::TuneMode mode, bool pruned) const;
  fs::path reports_dir() const;
  golden::GoldenCache golden_cache(std::uint64_t seed, std::uint32_t variant) const;

  /// MissingArtifactError naming the missing stage output.
  data::Dataset load_data(std::uint64_t seed, std::uint32_t variant) const;
  clip::ClipModel load_model(std::uint64_t seed) const;
  predictor::Predictor load_predictor(std::uint64_t seed, predictor::ArchKind arch, std::uint32_t variant) const;

 private:
  PipelineConfig config_;
  fs::path out_;
  fs::path cache_;
  std::size_t jobs_;
};

/// Seed streams; every stage derives its randomness from (seed, purpose).
nn::SeededRng stage_rng(std::uint64_t seed, std::uint64_t purpose);

// ---- stages ------------------------------------------------------------------

void stage_gen_data(const Workspace& ws, std::uint64_t seed);

struct PretrainSummary {
  clip::PretrainReport report;
  float test_accuracy = 0.0F;
};
PretrainSummary stage_pretrain(const Workspace& ws, std::uint64_t seed);

/// Caches golden scores for the predictor-train and test splits of every variant.
std::size_t stage_golden(const Workspace& ws, std::uint64_t seed, bool rebuild = false);

struct PredictorSummary {
  predictor::TrainReport report;
  float train_matching_rate = 0.0F;
  float test_matching_rate = 0.0F;
  float untrained_test_matching_rate = 0.0F;
  std::size_t k = 0;
};
PredictorSummary stage_train_predictor(const Workspace& ws, std::uint64_t seed, predictor::ArchKind arch,
                                       std::uint32_t variant);

/// Few-shot tuning on the primary variant; `pruned` selects the predictor
/// schedule at ablation_keep over `locations`, otherwise no pruning.
prompt::TuneResult stage_tune_prompts(const Workspace& ws, std::uint64_t seed, prompt::TuneMode mode, bool pruned);

// ---- experiments ---------------------------------------------------------------

std::vector<ResultRow> run_keep_rate_sweep(const Workspace& ws);
std::vector<ResultRow> run_location_ablation(const Workspace& ws);
std::vector<ResultRow> run_arch_ablation(const Workspace& ws);
std::vector<ResultRow> run_cross_dataset(const Workspace& ws);
std::vector<ResultRow> run_tuning_grid(const Workspace& ws);

/// Accuracy of one (strategy, schedule) on a split with per-image sources
/// built from the workspace artifacts.
double evaluate_split(const Workspace& ws, std::uint64_t seed, const clip::ClipModel& model,
                      const data::DatasetSplit& split, std::uint32_t variant, const pruning::PruneSchedule& schedule,
                      const predictor::Predictor* predictor, const prompt::PromptState* prompts = nullptr);

/// Re-emits every <out>/reports/*.csv and writes index.json listing them.
std::vector<fs::path> stage_report(const Workspace& ws);

}  // namespace tokenrank::bench
