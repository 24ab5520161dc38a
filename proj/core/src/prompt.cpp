#include "tokenrank/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/ops.hpp"
#include "tokenrank/nn/optim.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank::prompt {

namespace fs = std::filesystem;

std::string to_string(TuneMode mode) { return mode == TuneMode::kTextOnly ? "T_only" : "T_and_V"; }

TuneMode parse_tune_mode(const std::string& name) {
  if (name == "T_only") return TuneMode::kTextOnly;
  if (name == "T_and_V") return TuneMode::kTextAndVision;
  throw ConfigError("unknown tuning mode '" + name + "' (T_only, T_and_V)");
}

ParameterRefs PromptState::parameters() {
  if (b() == 0) return {};
  return {&p_t, &m};
}

PromptState init_prompts(std::size_t b, std::size_t d_t, std::size_t d_v, TuneMode mode, const SeededRng& rng) {
  PromptState s;
  s.mode = mode;
  if (b == 0) return s;
  SeededRng r = rng.fork(31);
  s.p_t = Parameter("prompt.p_t", r.normal_tensor({b, d_t}, 0.02F));
  Tensor m({d_v, d_t});
  for (std::size_t i = 0; i < std::min(d_v, d_t); ++i) m.at(i, i) = 1.0F;
  s.m = Parameter("prompt.m", std::move(m), mode == TuneMode::kTextAndVision);
  return s;
}

Tensor project_visual_prompts(const PromptState& state) {
  if (state.b() == 0) throw UsageError("no prompts to project");
  if (state.m.value.rank() != 2 || state.m.value.dim(1) != state.p_t.value.dim(1)) {
    throw ShapeError("M " + nn::shape_str(state.m.value.shape()) + " does not accept prompts " +
                     nn::shape_str(state.p_t.value.shape()));
  }
  return nn::matmul(state.p_t.value, state.m.value, false, true);
}

Var project_visual_prompts(const Var& p_t, const Var& m) {
  if (m.value().rank() != 2 || p_t.value().rank() != 2 || m.value().dim(1) != p_t.value().dim(1)) {
    throw ShapeError("M " + nn::shape_str(m.value().shape()) + " does not accept prompts " +
                     nn::shape_str(p_t.value().shape()));
  }
  return nn::matmul(p_t, nn::transpose(m));
}

InjectedPrompts inject_prompts(const clip::ClipModel& model, PromptState* state) {
  InjectedPrompts out;
  out.text_length = clip::kTemplateLength;
  out.vision_length = 1 + model.config.vision.patches;
  if (state == nullptr || state->b() == 0) return out;
  const std::size_t b = state->b();
  if (state->p_t.value.dim(1) != model.config.text.dim) throw ShapeError("text prompts do not match the text width");
  out.text_length += b;
  if (out.text_length > model.config.text.max_len) {
    throw ConfigError(std::to_string(b) + " text prompts overflow max_len " + std::to_string(model.config.text.max_len));
  }
  out.text = Var::param(state->p_t);
  if (state->mode == TuneMode::kTextAndVision) {
    if (state->m.value.dim(0) != model.config.vision.dim) throw ShapeError("M does not map to the vision width");
    out.vision = project_visual_prompts(out.text, Var::param(state->m));
    out.vision_length += b;
  }
  return out;
}

Var tuning_loss(const clip::ClipModel& model, PromptState& state, const pruning::PruneSchedule& schedule,
                const predictor::Predictor* predictor, std::span<const data::TokenGrid* const> images,
                const std::vector<std::size_t>& labels) {
  if (images.size() != labels.size() || images.empty()) throw ShapeError("one label per image required");
  if (!schedule.entries.empty() && schedule.strategy != pruning::Strategy::kPredictor &&
      schedule.strategy != pruning::Strategy::kClsAttention) {
    throw UsageError("prompt tuning prunes with the predictor or CLS attention only");
  }
  const InjectedPrompts inj = inject_prompts(model, &state);
  Var classes = clip::encode_text_var(model, inj.text);
  pruning::ScoreSources sources;
  sources.predictor = predictor;
  const auto plan = pruning::make_removal_plan(schedule, sources);
  std::vector<const Tensor*> toks;
  for (const auto* g : images) toks.push_back(&g->tokens);
  const auto enc = clip::encode_batch(model, toks, plan, inj.vision);
  Var logits = clip::zero_shot_logits(clip::project_image(model, enc.z_cls), classes,
                                      Var::constant(Tensor::scalar(model.logit_scale())));
  Var ll = nn::sum(nn::pick(nn::log_softmax_rows(logits), labels));
  return nn::scale(ll, -1.0F / static_cast<float>(labels.size()));
}

float prompted_accuracy(const clip::ClipModel& model, const data::DatasetSplit& split,
                        const pruning::PruneSchedule& schedule, const pruning::SourceProvider& sources,
                        const PromptState* prompts, std::size_t jobs) {
  const bool has = prompts != nullptr && prompts->b() > 0;
  const auto classes = clip::encode_text(model, has ? &prompts->p_t.value : nullptr);
  Tensor pv;
  if (has && prompts->mode == TuneMode::kTextAndVision) pv = project_visual_prompts(*prompts);
  return pruning::pruned_accuracy(model, classes, split, schedule, sources, pv.empty() ? nullptr : &pv, jobs);
}

TuneResult tune_prompts(const clip::ClipModel& model, const predictor::Predictor* predictor,
                        const pruning::PruneSchedule& schedule, const data::DatasetSplit& train,
                        const data::DatasetSplit* test, const TuneConfig& config, const SeededRng& rng,
                        std::size_t jobs) {
  if (train.examples.empty()) throw UsageError("prompt tuning needs a non-empty few-shot split");
  if (config.batch_size == 0) throw ConfigError("tuning batch_size must be positive");
  clip::ClipModel frozen = model;
  nn::set_trainable(frozen.parameters(), false);

  TuneResult result;
  result.state = init_prompts(config.b, frozen.config.text.dim, frozen.config.vision.dim, config.mode, rng);
  PromptState& state = result.state;
  const pruning::SourceProvider sources = [predictor](std::size_t) {
    pruning::ScoreSources s;
    s.predictor = predictor;
    return s;
  };
  if (test != nullptr) result.log.initial_test_accuracy = prompted_accuracy(frozen, *test, schedule, sources, &state, jobs);
  if (state.b() == 0 || config.epochs == 0) return result;

  std::vector<data::TokenGrid> grids;
  for (const auto& ex : train.examples) grids.push_back(data::patchify(ex, train.patch));
  auto params = state.parameters();
  nn::Optimizer opt(params, {nn::OptimizerKind::kAdam, config.lr});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.fork(100 + epoch).permutation(grids.size());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const data::TokenGrid*> imgs;
      std::vector<std::size_t> labels;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
        imgs.push_back(&grids[order[k]]);
        labels.push_back(train.examples[order[k]].label);
      }
      opt.zero_grad();
      Var loss = tuning_loss(frozen, state, schedule, predictor, imgs, labels);
      const float v = loss.value()[0];
      if (!std::isfinite(v)) {
        throw NumericError("prompt tuning diverged in epoch " + std::to_string(epoch) + " after " +
                           std::to_string(result.log.epoch_loss.size()) + " finished epochs");
      }
      total += v;
      ++batches;
      nn::backward(loss);
      opt.step();
    }
    result.log.epoch_loss.push_back(static_cast<float>(total / static_cast<double>(batches)));
    if (test != nullptr) {
      result.log.epoch_test_accuracy.push_back(prompted_accuracy(frozen, *test, schedule, sources, &state, jobs));
    }
  }
  return result;
}

std::string schedule_hash(const pruning::PruneSchedule& schedule) {
  std::string s = pruning::to_string(schedule.strategy);
  for (const auto& e : schedule.entries) s += ":" + std::to_string(e.layer) + "x" + std::to_string(e.drop);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_prompts(const fs::path& dir, const PromptState& state, std::size_t shots, const std::string& hash,
                  const nn::CheckpointTags& extra) {
  std::vector<const Parameter*> params;
  if (state.b() > 0) params = {&state.p_t, &state.m};
  nn::CheckpointTags tags{{"kind", "prompts"},
                          {"mode", to_string(state.mode)},
                          {"b", std::to_string(state.b())},
                          {"shots", std::to_string(shots)},
                          {"schedule_hash", hash},
                          {"d_t", state.b() > 0 ? std::to_string(state.p_t.value.dim(1)) : "0"},
                          {"d_v", state.b() > 0 ? std::to_string(state.m.value.dim(0)) : "0"}};
  tags.insert(extra.begin(), extra.end());
  nn::save_checkpoint(dir, params, tags);
}

PromptState load_prompts(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifactError("prompt checkpoint not found: " + dir.string());
  const auto tags = nn::read_checkpoint_tags(dir);
  auto number = [&](const std::string& key) -> std::size_t {
    auto it = tags.find(key);
    if (it == tags.end()) throw ParseError("prompt manifest lacks tag '" + key + "'");
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::logic_error&) {
      throw ParseError("prompt manifest tag '" + key + "' is not a number");
    }
  };
  auto mode_it = tags.find("mode");
  if (mode_it == tags.end()) throw ParseError("prompt manifest lacks tag 'mode'");
  PromptState s = init_prompts(number("b"), number("d_t"), number("d_v"), parse_tune_mode(mode_it->second), SeededRng(0));
  nn::load_checkpoint(dir, s.parameters());
  return s;
}

}  // namespace tokenrank::prompt
