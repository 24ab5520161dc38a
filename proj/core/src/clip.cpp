#include "tokenrank/clip.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "tokenrank/config.hpp"
#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/ops.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank::clip {

namespace fs = std::filesystem;

namespace {

constexpr float kLayerNormEps = 1e-5F;

Parameter linear_weight(const std::string& name, std::size_t fan_in, std::size_t fan_out, SeededRng& rng,
                        float gain = 1.0F) {
  const float stddev = gain / std::sqrt(static_cast<float>(fan_in));
  return Parameter(name, rng.normal_tensor({fan_in, fan_out}, stddev));
}

Parameter zeros(const std::string& name, nn::Shape shape) { return Parameter(name, Tensor(std::move(shape))); }
Parameter ones(const std::string& name, std::size_t n) { return Parameter(name, Tensor({n}, 1.0F)); }

Var p(const Parameter& param) { return Var::param(const_cast<Parameter&>(param)); }

// Pre-norm transformer block over `batch` stacked sequences of length `len`.
Var transformer_block(const BlockWeights& w, const Var& x, std::size_t batch, std::size_t len, std::size_t heads,
                      bool causal, Tensor* cls_probs) {
  Var h = nn::layer_norm(x, p(w.ln1_gamma), p(w.ln1_beta), kLayerNormEps);
  Var qkv = nn::linear(h, p(w.qkv_w), p(w.qkv_b));
  Var attn = nn::attention(qkv, batch, len, heads, causal, cls_probs);
  Var y = nn::add(x, nn::linear(attn, p(w.proj_w), p(w.proj_b)));
  Var h2 = nn::layer_norm(y, p(w.ln2_gamma), p(w.ln2_beta), kLayerNormEps);
  Var mlp = nn::linear(nn::gelu(nn::linear(h2, p(w.fc1_w), p(w.fc1_b))), p(w.fc2_w), p(w.fc2_b));
  return nn::add(y, mlp);
}

std::vector<std::size_t> keep_rows(const SequenceState& state, std::size_t b, const std::vector<std::size_t>& drop) {
  const auto& surv = state.surviving[b];
  for (auto id : drop) {
    if (!std::binary_search(surv.begin(), surv.end(), id)) {
      throw LogicError("token " + std::to_string(id) + " is not among the surviving patches of sequence " +
                       std::to_string(b));
    }
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < state.prefix; ++i) rows.push_back(b * state.len + i);
  for (std::size_t j = 0; j < surv.size(); ++j) {
    if (!std::binary_search(drop.begin(), drop.end(), surv[j])) rows.push_back(b * state.len + state.prefix + j);
  }
  return rows;
}

std::vector<std::size_t> sorted_unique(std::vector<std::size_t> ids) {
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw LogicError("duplicate token id in drop set");
  return ids;
}

SequenceState gather_state(const SequenceState& src, const std::vector<std::size_t>& source_batch,
                           const std::vector<std::vector<std::size_t>>& drops) {
  if (drops.empty()) throw LogicError("removal needs at least one sequence");
  std::vector<std::vector<std::size_t>> sorted;
  for (const auto& d : drops) sorted.push_back(sorted_unique(d));
  const std::size_t count = sorted.front().size();
  for (const auto& d : sorted) {
    if (d.size() != count) throw LogicError("batched removal needs equal drop counts per sequence");
  }
  if (count >= src.patch_count()) {
    throw ConfigError("cannot drop " + std::to_string(count) + " of " + std::to_string(src.patch_count()) +
                      " surviving patches");
  }
  SequenceState out;
  out.batch = sorted.size();
  out.len = src.len - count;
  out.prefix = src.prefix;
  std::vector<std::size_t> rows;
  rows.reserve(out.batch * out.len);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const std::size_t from = source_batch[b];
    auto kept = keep_rows(src, from, sorted[b]);
    rows.insert(rows.end(), kept.begin(), kept.end());
    std::vector<std::size_t> surv;
    for (auto id : src.surviving[from]) {
      if (!std::binary_search(sorted[b].begin(), sorted[b].end(), id)) surv.push_back(id);
    }
    out.surviving.push_back(std::move(surv));
  }
  out.seq = count == 0 && out.batch == src.batch ? src.seq : nn::gather_rows(src.seq, rows);
  return out;
}

Tensor rows_of(const Tensor& t, std::size_t start, std::size_t count) {
  const std::size_t cols = t.cols();
  Tensor out({count, cols});
  std::copy_n(t.data() + start * cols, count * cols, out.data());
  return out;
}

}  // namespace

// ---- configuration -----------------------------------------------------------

void VisionConfig::validate() const {
  if (layers < 4) throw ConfigError("vision layers must be at least 4, got " + std::to_string(layers));
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError("vision dim " + std::to_string(dim) + " must be divisible by heads " + std::to_string(heads));
  }
  if (patches == 0 || patch_dim == 0 || mlp_ratio == 0) throw ConfigError("vision sizes must be positive");
}

void TextConfig::validate() const {
  if (layers == 0 || dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("text dim must be divisible by heads");
  if (class_names.empty()) throw ConfigError("text config needs class names");
  std::set<std::string> unique(class_names.begin(), class_names.end());
  if (unique.size() != class_names.size()) throw ConfigError("class names must be unique");
  if (max_len < kTemplateLength) throw ConfigError("text max_len shorter than the prompt template");
}

void ModelConfig::validate() const {
  vision.validate();
  text.validate();
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (!(max_logit_scale > 0.0F)) throw ConfigError("max_logit_scale must be positive");
}

BlockWeights BlockWeights::init(const std::string& prefix, std::size_t dim, std::size_t mlp_dim, SeededRng& rng) {
  BlockWeights w;
  w.ln1_gamma = ones(prefix + ".ln1.gamma", dim);
  w.ln1_beta = zeros(prefix + ".ln1.beta", {dim});
  w.qkv_w = linear_weight(prefix + ".attn.qkv.w", dim, 3 * dim, rng);
  w.qkv_b = zeros(prefix + ".attn.qkv.b", {3 * dim});
  w.proj_w = linear_weight(prefix + ".attn.proj.w", dim, dim, rng, 0.5F);
  w.proj_b = zeros(prefix + ".attn.proj.b", {dim});
  w.ln2_gamma = ones(prefix + ".ln2.gamma", dim);
  w.ln2_beta = zeros(prefix + ".ln2.beta", {dim});
  w.fc1_w = linear_weight(prefix + ".mlp.fc1.w", dim, mlp_dim, rng);
  w.fc1_b = zeros(prefix + ".mlp.fc1.b", {mlp_dim});
  w.fc2_w = linear_weight(prefix + ".mlp.fc2.w", mlp_dim, dim, rng, 0.5F);
  w.fc2_b = zeros(prefix + ".mlp.fc2.b", {dim});
  return w;
}

void BlockWeights::collect(ParameterRefs& out) {
  for (Parameter* q : {&ln1_gamma, &ln1_beta, &qkv_w, &qkv_b, &proj_w, &proj_b, &ln2_gamma, &ln2_beta, &fc1_w, &fc1_b,
                       &fc2_w, &fc2_b}) {
    out.push_back(q);
  }
}

void VisionWeights::collect(ParameterRefs& out) {
  out.push_back(&patch_w);
  out.push_back(&patch_b);
  out.push_back(&cls);
  out.push_back(&pos);
  for (auto& b : blocks) b.collect(out);
  out.push_back(&ln_post_gamma);
  out.push_back(&ln_post_beta);
  out.push_back(&proj);
}

void TextWeights::collect(ParameterRefs& out) {
  out.push_back(&token_embedding);
  out.push_back(&pos);
  for (auto& b : blocks) b.collect(out);
  out.push_back(&ln_final_gamma);
  out.push_back(&ln_final_beta);
  out.push_back(&proj);
}

ClipModel ClipModel::init(const ModelConfig& config, const SeededRng& rng) {
  config.validate();
  ClipModel m;
  m.config = config;
  const auto& vc = config.vision;
  const auto& tc = config.text;
  SeededRng vr = rng.fork(101);
  m.vision.patch_w = linear_weight("vision.patch.w", vc.patch_dim, vc.dim, vr);
  m.vision.patch_b = zeros("vision.patch.b", {vc.dim});
  m.vision.cls = Parameter("vision.cls", vr.normal_tensor({1, vc.dim}, 0.02F));
  m.vision.pos = Parameter("vision.pos", vr.normal_tensor({vc.patches + 1, vc.dim}, 0.02F));
  for (std::size_t l = 0; l < vc.layers; ++l) {
    m.vision.blocks.push_back(BlockWeights::init("vision.blocks." + std::to_string(l), vc.dim, vc.mlp_dim(), vr));
  }
  m.vision.ln_post_gamma = ones("vision.ln_post.gamma", vc.dim);
  m.vision.ln_post_beta = zeros("vision.ln_post.beta", {vc.dim});
  m.vision.proj = linear_weight("vision.proj", vc.dim, config.embed_dim, vr);

  SeededRng tr = rng.fork(202);
  m.text.token_embedding = Parameter("text.token_embedding", tr.normal_tensor({tc.vocab_size(), tc.dim}, 0.02F));
  m.text.pos = Parameter("text.pos", tr.normal_tensor({kTemplateLength, tc.dim}, 0.01F));
  for (std::size_t l = 0; l < tc.layers; ++l) {
    m.text.blocks.push_back(BlockWeights::init("text.blocks." + std::to_string(l), tc.dim, tc.mlp_dim(), tr));
  }
  m.text.ln_final_gamma = ones("text.ln_final.gamma", tc.dim);
  m.text.ln_final_beta = zeros("text.ln_final.beta", {tc.dim});
  m.text.proj = linear_weight("text.proj", tc.dim, config.embed_dim, tr);

  m.log_logit_scale = Parameter("logit_scale.log", Tensor::scalar(config.init_log_logit_scale));
  return m;
}

ParameterRefs ClipModel::parameters() {
  ParameterRefs out = vision_parameters();
  auto t = text_parameters();
  out.insert(out.end(), t.begin(), t.end());
  out.push_back(&log_logit_scale);
  return out;
}

ParameterRefs ClipModel::vision_parameters() {
  ParameterRefs out;
  vision.collect(out);
  return out;
}

ParameterRefs ClipModel::text_parameters() {
  ParameterRefs out;
  text.collect(out);
  return out;
}

float ClipModel::logit_scale() const {
  return std::min(std::exp(log_logit_scale.value[0]), config.max_logit_scale);
}

void save_model(const fs::path& dir, ClipModel& model) {
  nn::save_checkpoint(dir, nn::as_const(model.parameters()), {{"kind", "clip"}});
  std::ofstream out(dir / "config.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "config.json").string());
  out << config::to_json(model.config).dump(2) << "\n";
}

ClipModel load_model(const fs::path& dir) {
  const fs::path cfg_path = dir / "config.json";
  if (!fs::exists(cfg_path)) throw MissingArtifactError("model config not found: " + cfg_path.string());
  const ModelConfig cfg = config::model_config_from_json(config::read_json(cfg_path));
  ClipModel model = ClipModel::init(cfg, SeededRng(0));
  nn::load_checkpoint(dir, model.parameters());
  return model;
}

// ---- vision ------------------------------------------------------------------

bool Hooks::contains(std::size_t layer) const { return std::find(layers.begin(), layers.end(), layer) != layers.end(); }

std::vector<std::size_t> select_drops(const Tensor& scores, const std::vector<std::size_t>& ids, std::size_t count) {
  if (scores.numel() != ids.size()) {
    throw ShapeError("select_drops: " + std::to_string(scores.numel()) + " scores for " + std::to_string(ids.size()) + " tokens");
  }
  if (count > ids.size()) throw ConfigError("cannot drop more tokens than survive");
  for (float s : scores.values()) {
    if (std::isnan(s)) throw NumericError("NaN token score");
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return ids[a] > ids[b];
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(ids[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

SequenceState embed_patches(const ClipModel& model, std::span<const Tensor* const> tokens, const Var& prompts_v) {
  const auto& vc = model.config.vision;
  if (tokens.empty()) throw ShapeError("embed_patches: empty batch");
  const std::size_t batch = tokens.size();
  const std::size_t n = vc.patches;
  Tensor stacked({batch * n, vc.patch_dim});
  for (std::size_t b = 0; b < batch; ++b) {
    const Tensor& t = *tokens[b];
    if (t.rank() != 2 || t.dim(0) != n || t.dim(1) != vc.patch_dim) {
      throw ShapeError("image tokens " + nn::shape_str(t.shape()) + " do not match the vision config [" +
                       std::to_string(n) + "," + std::to_string(vc.patch_dim) + "]");
    }
    std::copy_n(t.data(), t.numel(), stacked.data() + b * t.numel());
  }
  std::size_t prompt_rows = 0;
  if (prompts_v.defined()) {
    const Tensor& pv = prompts_v.value();
    if (pv.rank() != 2 || pv.dim(1) != vc.dim) {
      throw ShapeError("visual prompts " + nn::shape_str(pv.shape()) + " must be [b, " + std::to_string(vc.dim) + "]");
    }
    prompt_rows = pv.dim(0);
  }

  std::vector<std::size_t> pos_ids;
  pos_ids.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) pos_ids.push_back(1 + t);
  }
  Var patches = nn::linear(Var::constant(std::move(stacked)), p(model.vision.patch_w),
                           p(model.vision.patch_b));
  patches = nn::add(patches, nn::gather_rows(p(model.vision.pos), pos_ids));
  Var cls = nn::add(p(model.vision.cls), nn::slice_rows(p(model.vision.pos), 0, 1));

  std::vector<Var> parts;
  for (std::size_t b = 0; b < batch; ++b) {
    parts.push_back(cls);
    if (prompt_rows > 0) parts.push_back(prompts_v);
    parts.push_back(batch == 1 ? patches : nn::slice_rows(patches, b * n, n));
  }
  SequenceState state;
  state.seq = nn::concat_rows(parts);
  state.batch = batch;
  state.prefix = 1 + prompt_rows;
  state.len = state.prefix + n;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  state.surviving.assign(batch, all);
  return state;
}

void run_block(const ClipModel& model, std::size_t layer, SequenceState& state, Tensor* cls_probs) {
  if (layer == 0 || layer > model.vision.blocks.size()) throw ConfigError("no vision block at layer " + std::to_string(layer));
  state.seq = transformer_block(model.vision.blocks[layer - 1], state.seq, state.batch, state.len,
                                model.config.vision.heads, false, cls_probs);
}

SequenceState drop_tokens(const SequenceState& state, const std::vector<std::vector<std::size_t>>& drop_ids) {
  if (drop_ids.size() != state.batch) throw LogicError("drop_tokens needs one drop set per sequence");
  std::vector<std::size_t> source(state.batch);
  std::iota(source.begin(), source.end(), 0);
  return gather_state(state, source, drop_ids);
}

SequenceState fork_with_drops(const SequenceState& single, const std::vector<std::vector<std::size_t>>& drop_ids) {
  if (single.batch != 1) throw LogicError("fork_with_drops expects a single sequence");
  return gather_state(single, std::vector<std::size_t>(drop_ids.size(), 0), drop_ids);
}

Var final_cls(const ClipModel& model, const SequenceState& state) {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < state.batch; ++b) rows.push_back(b * state.len);
  Var cls = state.batch == 1 ? nn::slice_rows(state.seq, 0, 1) : nn::gather_rows(state.seq, rows);
  return nn::layer_norm(cls, p(model.vision.ln_post_gamma), p(model.vision.ln_post_beta), kLayerNormEps);
}

void validate_plan(const ClipModel& model, const RemovalPlan& plan, std::size_t patches) {
  const std::size_t depth = model.config.vision.layers;
  std::size_t total = 0;
  std::size_t prev = 0;
  for (const auto& step : plan) {
    if (step.layer == 0 || step.layer > depth) {
      throw ConfigError("removal layer " + std::to_string(step.layer) + " outside 1.." + std::to_string(depth));
    }
    if (step.layer <= prev) throw LogicError("removal layers must be strictly increasing");
    prev = step.layer;
    if (const auto* ids = std::get_if<std::vector<std::size_t>>(&step.what)) {
      for (auto id : *ids) {
        if (id >= patches) throw LogicError("drop id " + std::to_string(id) + " outside 0.." + std::to_string(patches - 1));
      }
      total += ids->size();
    } else {
      const auto& sd = std::get<ScoredDrop>(step.what);
      if (!sd.score) throw ConfigError("scored removal at layer " + std::to_string(step.layer) + " has no score source");
      total += sd.count;
    }
  }
  if (total >= patches) {
    throw ConfigError("removal plan drops " + std::to_string(total) + " of " + std::to_string(patches) + " patches");
  }
}

BatchEncoding encode_batch(const ClipModel& model, std::span<const Tensor* const> tokens, const RemovalPlan& plan,
                           const Var& prompts_v, const Hooks& hooks) {
  validate_plan(model, plan, model.config.vision.patches);
  BatchEncoding out;
  SequenceState state = embed_patches(model, tokens, prompts_v);
  out.intermediates.resize(state.batch);
  out.cls_attention.resize(state.batch);
  out.cls_attention_prefix.resize(state.batch);
  out.removals.resize(state.batch);
  std::size_t next_step = 0;
  for (std::size_t layer = 1; layer <= model.config.vision.layers; ++layer) {
    if (hooks.contains(layer)) {
      for (std::size_t b = 0; b < state.batch; ++b) {
        out.intermediates[b][layer] = rows_of(state.seq.value(), b * state.len, state.len);
      }
    }
    if (next_step < plan.size() && plan[next_step].layer == layer) {
      const RemovalStep& step = plan[next_step++];
      std::vector<std::vector<std::size_t>> drops(state.batch);
      if (const auto* ids = std::get_if<std::vector<std::size_t>>(&step.what)) {
        drops.assign(state.batch, *ids);
      } else {
        const auto& sd = std::get<ScoredDrop>(step.what);
        const LayerContext ctx{model, layer, state};
        for (std::size_t b = 0; b < state.batch; ++b) {
          Tensor scores;
          {
            nn::NoGradGuard no_grad;
            scores = sd.score(ctx, b);
          }
          drops[b] = select_drops(scores, state.surviving[b], sd.count);
        }
      }
      if (!drops.front().empty()) {
        state = drop_tokens(state, drops);
        for (std::size_t b = 0; b < state.batch; ++b) {
          std::sort(drops[b].begin(), drops[b].end());
          out.removals[b].push_back({layer, drops[b]});
        }
      }
    }
    Tensor probs;
    run_block(model, layer, state, hooks.contains(layer) ? &probs : nullptr);
    if (hooks.contains(layer)) {
      for (std::size_t b = 0; b < state.batch; ++b) {
        out.cls_attention[b][layer] = Tensor::vector(std::vector<float>(probs.row(b).begin(), probs.row(b).end()));
        out.cls_attention_prefix[b][layer] = state.prefix;
      }
    }
  }
  out.z_cls = final_cls(model, state);
  out.final_state = std::move(state);
  return out;
}

EncodeResult encode_image(const ClipModel& model, const data::TokenGrid& tokens, const RemovalPlan& plan,
                          const Tensor* prompts_v, const Hooks& hooks) {
  nn::NoGradGuard no_grad;
  const Tensor* batch[] = {&tokens.tokens};
  Var prompts = prompts_v != nullptr ? Var::constant(*prompts_v) : Var();
  BatchEncoding enc = encode_batch(model, batch, plan, prompts, hooks);
  EncodeResult r;
  const auto& st = enc.final_state;
  r.prefix = st.prefix;
  r.z = rows_of(st.seq.value(), st.prefix, st.patch_count());
  r.z_cls = enc.z_cls.value().reshaped({model.config.vision.dim});
  r.intermediates = std::move(enc.intermediates.front());
  r.cls_attention = std::move(enc.cls_attention.front());
  r.cls_attention_prefix = std::move(enc.cls_attention_prefix.front());
  r.surviving_ids = st.surviving.front();
  r.removals = std::move(enc.removals.front());
  return r;
}

Tensor cls_attention_scores(const EncodeResult& result, std::size_t layer) {
  auto it = result.cls_attention.find(layer);
  if (it == result.cls_attention.end()) {
    throw UsageError("layer " + std::to_string(layer) + " was not hooked for CLS attention");
  }
  const std::size_t prefix = result.cls_attention_prefix.at(layer);
  const Tensor& row = it->second;
  const std::size_t n = row.numel() - prefix;
  Tensor out({n});
  float total = 0.0F;
  for (std::size_t j = 0; j < n; ++j) total += row[prefix + j];
  for (std::size_t j = 0; j < n; ++j) out[j] = total > 0.0F ? row[prefix + j] / total : 1.0F / static_cast<float>(n);
  return out;
}

Tensor probe_cls_attention(const ClipModel& model, std::size_t layer, const SequenceState& state, std::size_t b) {
  if (layer == 0 || layer > model.vision.blocks.size()) throw ConfigError("no vision block at layer " + std::to_string(layer));
  const BlockWeights& w = model.vision.blocks[layer - 1];
  const std::size_t d = model.config.vision.dim;
  const std::size_t heads = model.config.vision.heads;
  const std::size_t dh = d / heads;
  const Tensor x = rows_of(state.seq.value(), b * state.len, state.len);
  const Tensor h = nn::layer_norm(x, w.ln1_gamma.value, w.ln1_beta.value, kLayerNormEps);
  Tensor qkv = nn::matmul(h, w.qkv_w.value);
  for (std::size_t r = 0; r < state.len; ++r) {
    for (std::size_t j = 0; j < 3 * d; ++j) qkv.at(r, j) += w.qkv_b.value[j];
  }
  const std::size_t n = state.len;
  std::vector<float> avg(n, 0.0F);
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(dh));
  std::vector<float> logits(n);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0F;
      for (std::size_t k = 0; k < dh; ++k) acc += qkv.at(0, hd * dh + k) * qkv.at(j, d + hd * dh + k);
      logits[j] = acc * inv_sqrt;
      mx = std::max(mx, logits[j]);
    }
    float total = 0.0F;
    for (std::size_t j = 0; j < n; ++j) {
      logits[j] = std::exp(logits[j] - mx);
      total += logits[j];
    }
    for (std::size_t j = 0; j < n; ++j) avg[j] += logits[j] / total / static_cast<float>(heads);
  }
  const std::size_t patches = n - state.prefix;
  Tensor out({patches});
  float total = 0.0F;
  for (std::size_t j = 0; j < patches; ++j) total += avg[state.prefix + j];
  for (std::size_t j = 0; j < patches; ++j) out[j] = avg[state.prefix + j] / total;
  return out;
}

// ---- text --------------------------------------------------------------------

std::vector<std::size_t> template_token_ids(const TextConfig& config, std::size_t class_index) {
  if (class_index >= config.class_names.size()) throw ConfigError("class index out of range");
  // vocabulary: 0 "a", 1 "photo", 2 "of", 3 <eot>, 4 + c class c
  return {0, 1, 2, 0, 4 + class_index, 3};
}

Var encode_text_var(const ClipModel& model, const Var& prompts_t) {
  const auto& tc = model.config.text;
  const std::size_t classes = tc.class_names.size();
  std::size_t prompt_rows = 0;
  if (prompts_t.defined()) {
    const Tensor& pt = prompts_t.value();
    if (pt.rank() != 2 || pt.dim(1) != tc.dim) {
      throw ShapeError("text prompts " + nn::shape_str(pt.shape()) + " must be [b, " + std::to_string(tc.dim) + "]");
    }
    prompt_rows = pt.dim(0);
  }
  const std::size_t len = prompt_rows + kTemplateLength;
  if (len > tc.max_len) {
    throw ConfigError("text sequence of " + std::to_string(len) + " tokens exceeds max_len " + std::to_string(tc.max_len));
  }
  std::vector<std::size_t> ids;
  std::vector<std::size_t> pos_ids;
  for (std::size_t c = 0; c < classes; ++c) {
    auto t = template_token_ids(tc, c);
    ids.insert(ids.end(), t.begin(), t.end());
    for (std::size_t i = 0; i < kTemplateLength; ++i) pos_ids.push_back(i);
  }
  Var tok = nn::add(nn::gather_rows(p(model.text.token_embedding), ids), nn::gather_rows(p(model.text.pos), pos_ids));
  Var x = tok;
  if (prompt_rows > 0) {
    std::vector<Var> parts;
    for (std::size_t c = 0; c < classes; ++c) {
      parts.push_back(prompts_t);
      parts.push_back(nn::slice_rows(tok, c * kTemplateLength, kTemplateLength));
    }
    x = nn::concat_rows(parts);
  }
  for (const auto& block : model.text.blocks) x = transformer_block(block, x, classes, len, tc.heads, true, nullptr);
  std::vector<std::size_t> last;
  for (std::size_t c = 0; c < classes; ++c) last.push_back(c * len + len - 1);
  Var final = nn::layer_norm(nn::gather_rows(x, last), p(model.text.ln_final_gamma), p(model.text.ln_final_beta),
                             kLayerNormEps);
  return nn::l2_normalize_rows(nn::matmul(final, p(model.text.proj)));
}

ClassEmbeddings encode_text(const ClipModel& model, const Tensor* prompts_t) {
  nn::NoGradGuard no_grad;
  Var prompts = prompts_t != nullptr ? Var::constant(*prompts_t) : Var();
  return {encode_text_var(model, prompts).value(), model.logit_scale()};
}

Var project_image(const ClipModel& model, const Var& z_cls) { return nn::matmul(z_cls, p(model.vision.proj)); }

Var zero_shot_logits(const Var& image_embeddings, const Var& class_embeddings, const Var& logit_scale) {
  Var img = nn::l2_normalize_rows(image_embeddings);
  return nn::mul_scalar(nn::matmul(img, nn::transpose(class_embeddings)), logit_scale);
}

Tensor zero_shot_probs(const Tensor& z_cls, const ClassEmbeddings& classes, const Tensor& proj_v) {
  const std::size_t d = z_cls.numel();
  if (proj_v.rank() != 2 || proj_v.dim(0) != d) {
    throw ShapeError("projection " + nn::shape_str(proj_v.shape()) + " does not map a " + std::to_string(d) + "-dim CLS embedding");
  }
  if (classes.embeddings.cols() != proj_v.dim(1)) throw ShapeError("class embeddings width differs from projection output");
  const Tensor e = nn::matmul(z_cls.reshaped({1, d}), proj_v);
  float norm = 0.0F;
  for (float v : e.values()) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0F) || !std::isfinite(norm)) {
    throw NumericError("zero_shot_probs: projected image embedding has norm " + std::to_string(norm));
  }
  const std::size_t classes_n = classes.embeddings.rows();
  Tensor logits({classes_n});
  for (std::size_t c = 0; c < classes_n; ++c) {
    float dot = 0.0F;
    for (std::size_t j = 0; j < e.numel(); ++j) dot += e[j] * classes.embeddings.at(c, j);
    logits[c] = classes.logit_scale * dot / norm;
  }
  return nn::softmax(logits, 0);
}

// ---- pretraining -----------------------------------------------------------

namespace {

// Batches holding one image per class; the order is a pure function of rng.
std::vector<std::vector<std::size_t>> class_balanced_batches(const data::DatasetSplit& split, std::size_t batch_classes,
                                                             SeededRng rng) {
  const std::size_t classes = split.class_names.size();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < split.examples.size(); ++i) by_class[split.examples[i].label].push_back(i);
  std::size_t per_class = split.examples.size();
  for (auto& v : by_class) per_class = std::min(per_class, v.size());
  for (std::size_t c = 0; c < classes; ++c) {
    const auto perm = rng.permutation(by_class[c].size());
    std::vector<std::size_t> shuffled;
    for (auto i : perm) shuffled.push_back(by_class[c][i]);
    by_class[c] = std::move(shuffled);
  }
  const std::size_t width = batch_classes == 0 ? classes : std::min(batch_classes, classes);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t step = 0; step < per_class; ++step) {
    const auto order = rng.permutation(classes);
    for (std::size_t start = 0; start + width <= classes; start += width) {
      std::vector<std::size_t> batch;
      for (std::size_t k = start; k < start + width; ++k) batch.push_back(by_class[order[k]][step]);
      batches.push_back(std::move(batch));
    }
  }
  return batches;
}

Var batch_contrastive_loss(ClipModel& model, const data::DatasetSplit& split, const std::vector<std::size_t>& batch,
                           const std::vector<data::TokenGrid>& grids) {
  std::vector<const Tensor*> toks;
  std::vector<std::size_t> labels;
  for (auto i : batch) {
    toks.push_back(&grids[i].tokens);
    labels.push_back(split.examples[i].label);
  }
  BatchEncoding enc = encode_batch(model, toks, {});
  Var img = project_image(model, enc.z_cls);
  Var text = nn::gather_rows(encode_text_var(model), labels);
  Var scale = nn::exp(p(model.log_logit_scale));
  Var logits = zero_shot_logits(img, text, scale);
  std::vector<std::size_t> diag(batch.size());
  std::iota(diag.begin(), diag.end(), 0);
  const float inv = -0.5F / static_cast<float>(batch.size());
  Var row_loss = nn::sum(nn::pick(nn::log_softmax_rows(logits), diag));
  Var col_loss = nn::sum(nn::pick(nn::log_softmax_rows(nn::transpose(logits)), diag));
  return nn::scale(nn::add(row_loss, col_loss), inv);
}

std::vector<data::TokenGrid> patchify_all(const data::DatasetSplit& split) {
  std::vector<data::TokenGrid> grids;
  grids.reserve(split.examples.size());
  for (const auto& ex : split.examples) grids.push_back(data::patchify(ex, split.patch));
  return grids;
}

}  // namespace

float contrastive_loss(ClipModel& model, const data::DatasetSplit& split, std::size_t batch_classes, const SeededRng& rng) {
  nn::NoGradGuard no_grad;
  const auto grids = patchify_all(split);
  const auto batches = class_balanced_batches(split, batch_classes, rng);
  double total = 0.0;
  for (const auto& b : batches) total += batch_contrastive_loss(model, split, b, grids).value()[0];
  return batches.empty() ? 0.0F : static_cast<float>(total / static_cast<double>(batches.size()));
}

PretrainReport pretrain_contrastive(ClipModel& model, const data::DatasetSplit& split, const PretrainConfig& config,
                                    const SeededRng& rng) {
  if (split.examples.empty()) throw UsageError("pretraining split is empty");
  PretrainReport report;
  report.initial_loss = contrastive_loss(model, split, config.batch_classes, rng.fork(0));
  if (config.epochs == 0) return report;

  const auto grids = patchify_all(split);
  auto params = model.parameters();
  nn::Optimizer opt(params, {nn::OptimizerKind::kAdam, config.lr});
  const float max_log_scale = std::log(model.config.max_logit_scale);
  float last_finite = report.initial_loss;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = class_balanced_batches(split, config.batch_classes, rng.fork(epoch + 1));
    double total = 0.0;
    for (const auto& b : batches) {
      opt.zero_grad();
      Var loss = batch_contrastive_loss(model, split, b, grids);
      const float v = loss.value()[0];
      if (!std::isfinite(v)) {
        throw NumericError("contrastive pretraining diverged in epoch " + std::to_string(epoch) +
                           "; last finite loss " + std::to_string(last_finite));
      }
      last_finite = v;
      total += v;
      nn::backward(loss);
      opt.step();
      auto& ls = model.log_logit_scale.value[0];
      ls = std::min(ls, max_log_scale);
    }
    report.epoch_loss.push_back(static_cast<float>(total / static_cast<double>(batches.size())));
  }
  return report;
}

float zero_shot_accuracy(const ClipModel& model, const data::DatasetSplit& split) {
  if (split.examples.empty()) return 0.0F;
  const ClassEmbeddings classes = encode_text(model);
  std::size_t correct = 0;
  for (const auto& ex : split.examples) {
    const EncodeResult r = encode_image(model, data::patchify(ex, split.patch));
    const Tensor probs = zero_shot_probs(r.z_cls, classes, model.vision.proj.value);
    const auto best = static_cast<std::size_t>(std::max_element(probs.values().begin(), probs.values().end()) - probs.values().begin());
    if (best == ex.label) ++correct;
  }
  return 100.0F * static_cast<float>(correct) / static_cast<float>(split.examples.size());
}

}  // namespace tokenrank::clip
