#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "tokenrank/clip.hpp"
#include "tokenrank/golden.hpp"
#include "tokenrank/nn/autograd.hpp"
#include "tokenrank/nn/optim.hpp"

namespace tokenrank::predictor {

using nn::Parameter;
using nn::ParameterRefs;
using nn::SeededRng;
using nn::Tensor;
using nn::Var;

enum class ArchKind { kMixMlp, kMlp, kTransBlock };

std::string to_string(ArchKind kind);
ArchKind parse_arch(const std::string& name);

/// kLiteral: predictor_loss. kBinaryCrossEntropy adds the complementary
/// (1 - sigmoid(s)) log(1 - sigmoid(s_hat)) term.
enum class LossKind { kLiteral, kBinaryCrossEntropy };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct PredictorConfig {
  ArchKind arch = ArchKind::kMixMlp;
  std::size_t attach_layer = 2;
  std::size_t epochs = 50;
  nn::OptimizerConfig optim{nn::OptimizerKind::kAdam, 1e-3F};
  std::size_t mlp_hidden = 256;
  std::size_t heads = 4;  ///< TransBlock only
  LossKind loss = LossKind::kBinaryCrossEntropy;
};

/// Ranking predictor over patch representations Z[n', d] -> scores[n'].
///
/// MixMLP: C = Z + GELU(LN(Z Wc + bc)); T = C^T + GELU(LN(C^T Wt + bt)) with
/// Wt [N_max, N_max] restricted to the surviving ids; score = channel mean.
/// MLP: per token GELU(LN(Z W1 + b1)) W2 + b2 with widths d -> hidden -> N_max,
/// then channel mean. TransBlock: one pre-norm encoder block, then channel mean.
class Predictor {
 public:
  static Predictor init(ArchKind arch, std::size_t n_max, std::size_t dim, std::size_t attach_layer, const SeededRng& rng,
                        std::size_t mlp_hidden = 256, std::size_t heads = 4);

  /// `ids` are the original patch indices of the rows of z, ascending.
  Var forward(const Var& z, const std::vector<std::size_t>& ids);
  Tensor score(const Tensor& z, const std::vector<std::size_t>& ids) const;

  ParameterRefs parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter& parameter(const std::string& name);

  ArchKind arch() const noexcept { return arch_; }
  std::size_t n_max() const noexcept { return n_max_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t attach_layer() const noexcept { return attach_layer_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t mlp_hidden() const noexcept { return mlp_hidden_; }

 private:
  Var p(const std::string& name);

  ArchKind arch_ = ArchKind::kMixMlp;
  std::size_t n_max_ = 0;
  std::size_t dim_ = 0;
  std::size_t attach_layer_ = 1;
  std::size_t heads_ = 4;
  std::size_t mlp_hidden_ = 256;
  std::vector<Parameter> params_;
};

/// -sum_t sigmoid(s_t) log sigmoid(s_hat_t).
Var predictor_loss(const Tensor& s_norm, const Var& s_hat);
float predictor_loss_value(const Tensor& s_norm, const Tensor& s_hat);

/// -sum_t [sigmoid(s_t) log sigmoid(s_hat_t) + (1 - sigmoid(s_t)) log(1 - sigmoid(s_hat_t))].
Var predictor_bce_loss(const Tensor& s_norm, const Var& s_hat);
Var training_loss(LossKind kind, const Tensor& s_norm, const Var& s_hat);

struct MatchRateReport {
  std::size_t k = 0;
  float rate = 0.0F;
};

/// 100 |topK(pred) ∩ topK(golden)| / K.
MatchRateReport matching_rate(const golden::Ranking& pred, const golden::Ranking& golden, std::size_t k);

/// Patch rows of the block input at `layer` (CLS and prompts excluded), [N, d_v].
Tensor patch_intermediates(const clip::ClipModel& model, const data::TokenGrid& tokens, std::size_t layer);

struct TrainingExample {
  Tensor z;       ///< [N, d_v]
  Tensor target;  ///< [N] importance
  std::uint64_t image_id = 0;
};

/// Intermediates at the attach layer plus cached importance targets for every
/// image of the split. MissingArtifactError names the first uncached image.
std::vector<TrainingExample> build_training_set(const clip::ClipModel& model, const data::DatasetSplit& split,
                                                const golden::GoldenCache& cache, std::size_t attach_layer,
                                                std::size_t jobs = 1);

struct TrainReport {
  float initial_loss = 0.0F;
  std::vector<float> epoch_loss;  ///< mean per-image loss
};

/// One Adam step per image, shuffled per epoch.
TrainReport train_predictor(Predictor& predictor, const std::vector<TrainingExample>& examples,
                            const PredictorConfig& config, const SeededRng& rng);

float mean_loss(const Predictor& predictor, const std::vector<TrainingExample>& examples,
                LossKind kind = LossKind::kBinaryCrossEntropy);

/// Mean matching-rate@K of the predicted vs golden ranking over the examples.
float mean_matching_rate(const Predictor& predictor, const std::vector<TrainingExample>& examples, std::size_t k);

void save_predictor(const std::filesystem::path& dir, const Predictor& predictor, const std::string& score_kind,
                    std::size_t grid);
/// MissingArtifactError when absent.
Predictor load_predictor(const std::filesystem::path& dir);

}  // namespace tokenrank::predictor
