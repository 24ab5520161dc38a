#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "tokenrank/clip.hpp"
#include "tokenrank/nn/tensor_io.hpp"
#include "tokenrank/pruning.hpp"

namespace tokenrank::prompt {

using nn::Parameter;
using nn::ParameterRefs;
using nn::SeededRng;
using nn::Tensor;
using nn::Var;

enum class TuneMode { kTextOnly, kTextAndVision };

std::string to_string(TuneMode mode);
TuneMode parse_tune_mode(const std::string& name);

struct TuneConfig {
  std::size_t shots = 16;
  std::size_t b = 16;
  std::size_t epochs = 25;
  float lr = 2e-3F;
  std::size_t batch_size = 16;
  TuneMode mode = TuneMode::kTextAndVision;
};

/// P_t [b, d_t] and M [d_v, d_t]; P_v = P_t M^T is always derived.
struct PromptState {
  Parameter p_t;
  Parameter m;
  TuneMode mode = TuneMode::kTextAndVision;

  std::size_t b() const { return p_t.value.empty() ? 0 : p_t.value.dim(0); }
  ParameterRefs parameters();
};

/// P_t ~ N(0, 0.02); M = identity in the top-left block, zeros elsewhere.
/// b == 0 gives an empty state.
PromptState init_prompts(std::size_t b, std::size_t d_t, std::size_t d_v, TuneMode mode, const SeededRng& rng);

/// Rows P_v[i] = M P_t[i]; [b, d_v].
Tensor project_visual_prompts(const PromptState& state);
Var project_visual_prompts(const Var& p_t, const Var& m);

struct InjectedPrompts {
  Var text;    ///< prepended to every class template; undefined when b == 0
  Var vision;  ///< inserted after CLS; undefined when b == 0 or T_only
  std::size_t text_length = 0;    ///< tokens the text encoder sees
  std::size_t vision_length = 0;  ///< tokens vision block 1 sees
};

/// ConfigError when the text sequence would exceed max_len.
InjectedPrompts inject_prompts(const clip::ClipModel& model, PromptState* state);

/// Mean cross-entropy of the pruned zero-shot posteriors over a batch.
Var tuning_loss(const clip::ClipModel& model, PromptState& state, const pruning::PruneSchedule& schedule,
                const predictor::Predictor* predictor, std::span<const data::TokenGrid* const> images,
                const std::vector<std::size_t>& labels);

/// Accuracy in percent of the pruned forward with (optional) prompts.
float prompted_accuracy(const clip::ClipModel& model, const data::DatasetSplit& split,
                        const pruning::PruneSchedule& schedule, const pruning::SourceProvider& sources,
                        const PromptState* prompts = nullptr, std::size_t jobs = 1);

struct TuneLog {
  float initial_test_accuracy = 0.0F;
  std::vector<float> epoch_loss;
  std::vector<float> epoch_test_accuracy;
};

struct TuneResult {
  PromptState state;
  TuneLog log;
};

/// Optimizes P_t (and M in T_and_V) on `train` with the backbone and
/// predictor frozen; pruning uses the predictor strategy of `schedule`.
/// `test` may be null, in which case no accuracy is logged.
TuneResult tune_prompts(const clip::ClipModel& model, const predictor::Predictor* predictor,
                        const pruning::PruneSchedule& schedule, const data::DatasetSplit& train,
                        const data::DatasetSplit* test, const TuneConfig& config, const SeededRng& rng,
                        std::size_t jobs = 1);

/// `extra` tags are stored alongside the fixed ones.
void save_prompts(const std::filesystem::path& dir, const PromptState& state, std::size_t shots,
                  const std::string& schedule_hash, const nn::CheckpointTags& extra = {});
PromptState load_prompts(const std::filesystem::path& dir);

/// Stable textual digest of a schedule, used to tag prompt checkpoints.
std::string schedule_hash(const pruning::PruneSchedule& schedule);

}  // namespace tokenrank::prompt
