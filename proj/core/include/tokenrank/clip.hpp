#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tokenrank/data.hpp"
#include "tokenrank/nn/autograd.hpp"
#include "tokenrank/nn/rng.hpp"

namespace tokenrank::clip {

using nn::Parameter;
using nn::ParameterRefs;
using nn::SeededRng;
using nn::Tensor;
using nn::Var;

/// Layer indices are 1-based everywhere: "layer k" is the point just before
/// transformer block k executes. Layer 1 is therefore the patch embedding
/// output, and a removal at layer k shortens the sequence block k sees.
struct VisionConfig {
  std::size_t layers = 6;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patches = 64;    ///< N
  std::size_t patch_dim = 48;  ///< 3 p^2

  std::size_t mlp_dim() const noexcept { return dim * mlp_ratio; }
  void validate() const;
};

/// The text side tokenizes "a photo of a [class]" over a fixed synthetic
/// vocabulary: four template words, an end token, then one id per class.
struct TextConfig {
  std::size_t layers = 2;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t max_len = 24;
  std::vector<std::string> class_names;

  std::size_t mlp_dim() const noexcept { return dim * mlp_ratio; }
  std::size_t vocab_size() const noexcept { return 4 + class_names.size(); }
  void validate() const;
};

inline constexpr std::size_t kTemplateLength = 6;  // a photo of a <class> <eot>

struct ModelConfig {
  VisionConfig vision;
  TextConfig text;
  std::size_t embed_dim = 32;  ///< d_e, the joint embedding width
  float init_log_logit_scale = 2.659F;  ///< ln(1/0.07)
  float max_logit_scale = 100.0F;

  void validate() const;
};

struct BlockWeights {
  Parameter ln1_gamma, ln1_beta;
  Parameter qkv_w, qkv_b;
  Parameter proj_w, proj_b;
  Parameter ln2_gamma, ln2_beta;
  Parameter fc1_w, fc1_b;
  Parameter fc2_w, fc2_b;

  static BlockWeights init(const std::string& prefix, std::size_t dim, std::size_t mlp_dim, SeededRng& rng);
  void collect(ParameterRefs& out);
};

struct VisionWeights {
  Parameter patch_w, patch_b;
  Parameter cls;  ///< [1, d_v]
  Parameter pos;  ///< [N + 1, d_v]; row 0 belongs to CLS, row 1 + t to patch t
  std::vector<BlockWeights> blocks;
  Parameter ln_post_gamma, ln_post_beta;
  Parameter proj;  ///< [d_v, d_e]

  void collect(ParameterRefs& out);
};

struct TextWeights {
  Parameter token_embedding;  ///< [vocab, d_t]
  Parameter pos;              ///< [kTemplateLength, d_t]; prompt tokens carry no position
  std::vector<BlockWeights> blocks;
  Parameter ln_final_gamma, ln_final_beta;
  Parameter proj;  ///< [d_t, d_e]

  void collect(ParameterRefs& out);
};

struct ClipModel {
  ModelConfig config;
  VisionWeights vision;
  TextWeights text;
  Parameter log_logit_scale;  ///< [1]

  static ClipModel init(const ModelConfig& config, const SeededRng& rng);

  ParameterRefs parameters();
  ParameterRefs vision_parameters();
  ParameterRefs text_parameters();
  float logit_scale() const;
};

void save_model(const std::filesystem::path& dir, ClipModel& model);
ClipModel load_model(const std::filesystem::path& dir);

// ---- vision encoding --------------------------------------------------------

/// Equal-length sequences stacked as [batch * len, d]. Each sequence is laid
/// out as [CLS; visual prompts; surviving patch tokens].
struct SequenceState {
  Var seq;
  std::size_t batch = 0;
  std::size_t len = 0;
  std::size_t prefix = 1;  ///< CLS plus visual prompt count; never prunable
  std::vector<std::vector<std::size_t>> surviving;  ///< original patch ids per sequence

  std::size_t patch_count() const noexcept { return len - prefix; }
};

struct LayerContext {
  const ClipModel& model;
  std::size_t layer;
  const SequenceState& state;
};

/// Scores for the surviving patches of sequence `b` (aligned with
/// state.surviving[b]); the lowest are dropped.
using ScoreFn = std::function<Tensor(const LayerContext& ctx, std::size_t b)>;

struct ScoredDrop {
  std::size_t count = 0;
  ScoreFn score;
};

/// One removal point. Explicit ids (original patch indices) apply to every
/// sequence of the batch; a ScoredDrop selects per sequence.
struct RemovalStep {
  std::size_t layer = 1;
  std::variant<std::vector<std::size_t>, ScoredDrop> what;
};

using RemovalPlan = std::vector<RemovalStep>;

/// Lowest-`count` selection with the pruning tie rule: among equal scores,
/// higher token ids go first. Returns original ids, ascending.
std::vector<std::size_t> select_drops(const Tensor& scores, const std::vector<std::size_t>& ids, std::size_t count);

struct Hooks {
  std::vector<std::size_t> layers;  ///< layers whose intermediates/CLS attention to capture
  bool contains(std::size_t layer) const;
};

struct RemovalRecord {
  std::size_t layer = 0;
  std::vector<std::size_t> dropped;  ///< original ids, ascending
};

struct BatchEncoding {
  Var z_cls;  ///< [batch, d_v], after the final layer norm
  SequenceState final_state;
  /// Per sequence: layer -> block input captured before any removal at that layer.
  std::vector<std::map<std::size_t, Tensor>> intermediates;
  /// Per sequence: layer -> head-averaged attention row of the CLS query in
  /// block `layer`, over the full sequence that block processed.
  std::vector<std::map<std::size_t, Tensor>> cls_attention;
  std::vector<std::map<std::size_t, std::size_t>> cls_attention_prefix;
  std::vector<std::vector<RemovalRecord>> removals;
};

SequenceState embed_patches(const ClipModel& model, std::span<const Tensor* const> tokens, const Var& prompts_v);
void run_block(const ClipModel& model, std::size_t layer, SequenceState& state, Tensor* cls_probs = nullptr);
SequenceState drop_tokens(const SequenceState& state, const std::vector<std::vector<std::size_t>>& drop_ids);
/// Replicates a single sequence into drop_ids.size() sequences, each with its own removal.
SequenceState fork_with_drops(const SequenceState& single, const std::vector<std::vector<std::size_t>>& drop_ids);
Var final_cls(const ClipModel& model, const SequenceState& state);

/// Validates a plan against the model depth and patch count. Throws LogicError
/// for unsorted layers and ConfigError for out-of-range layers or drop totals.
void validate_plan(const ClipModel& model, const RemovalPlan& plan, std::size_t patches);

BatchEncoding encode_batch(const ClipModel& model, std::span<const Tensor* const> tokens, const RemovalPlan& plan,
                           const Var& prompts_v = Var(), const Hooks& hooks = {});

struct EncodeResult {
  Tensor z;      ///< [N', d_v] final patch embeddings
  Tensor z_cls;  ///< [d_v]
  std::map<std::size_t, Tensor> intermediates;
  std::map<std::size_t, Tensor> cls_attention;  ///< full row [CLS; prompts; patches]
  std::map<std::size_t, std::size_t> cls_attention_prefix;
  std::vector<std::size_t> surviving_ids;
  std::vector<RemovalRecord> removals;
  std::size_t prefix = 1;
};

/// Gradient-free single-image forward.
EncodeResult encode_image(const ClipModel& model, const data::TokenGrid& tokens, const RemovalPlan& plan = {},
                          const Tensor* prompts_v = nullptr, const Hooks& hooks = {});

/// CLS-to-patch attention at a hooked layer, head-averaged and renormalized
/// over the surviving patch positions. UsageError if the layer was not hooked.
Tensor cls_attention_scores(const EncodeResult& result, std::size_t layer);

/// Attention block `layer` would pay from CLS to each patch of sequence `b`,
/// computed on the current (pre-removal) state; renormalized over patches.
Tensor probe_cls_attention(const ClipModel& model, std::size_t layer, const SequenceState& state, std::size_t b);

// ---- text encoding and zero-shot head ---------------------------------------

struct ClassEmbeddings {
  Tensor embeddings;  ///< [classes, d_e], unit rows
  float logit_scale = 1.0F;
};

std::vector<std::size_t> template_token_ids(const TextConfig& config, std::size_t class_index);

/// [classes, d_e] unit rows, differentiable with respect to the prompts and
/// any trainable text weights.
Var encode_text_var(const ClipModel& model, const Var& prompts_t = Var());
ClassEmbeddings encode_text(const ClipModel& model, const Tensor* prompts_t = nullptr);

/// Image embeddings projected to d_e: z_cls[batch, d_v] x proj.
Var project_image(const ClipModel& model, const Var& z_cls);
/// logit_scale * cos(image, class) as [batch, classes].
Var zero_shot_logits(const Var& image_embeddings, const Var& class_embeddings, const Var& logit_scale);

Tensor zero_shot_probs(const Tensor& z_cls, const ClassEmbeddings& classes, const Tensor& proj_v);

// ---- pretraining -------------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_classes = 0;  ///< images per step, one per class; 0 = all classes
  float lr = 2e-3F;
};

struct PretrainReport {
  float initial_loss = 0.0F;
  std::vector<float> epoch_loss;
};

/// Symmetric InfoNCE over batches holding one image per class, paired with
/// the class prompt embeddings. Throws NumericError on a non-finite loss,
/// reporting the last finite value.
PretrainReport pretrain_contrastive(ClipModel& model, const data::DatasetSplit& split, const PretrainConfig& config,
                                    const SeededRng& rng);

/// Mean symmetric InfoNCE of the current weights over one fixed batch order.
float contrastive_loss(ClipModel& model, const data::DatasetSplit& split, std::size_t batch_classes,
                       const SeededRng& rng);

/// Unpruned zero-shot accuracy in percent.
float zero_shot_accuracy(const ClipModel& model, const data::DatasetSplit& split);

}  // namespace tokenrank::clip
