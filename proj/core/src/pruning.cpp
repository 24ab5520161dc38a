#include "tokenrank/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/parallel.hpp"

namespace tokenrank::pruning {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kGoldenOracle: return "golden";
    case Strategy::kPredictor: return "predictor";
    case Strategy::kClsAttention: return "cls_attention";
    case Strategy::kRandom: return "random";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "golden") return Strategy::kGoldenOracle;
  if (name == "predictor") return Strategy::kPredictor;
  if (name == "cls_attention") return Strategy::kClsAttention;
  if (name == "random") return Strategy::kRandom;
  throw ConfigError("unknown strategy '" + name + "' (golden, predictor, cls_attention, random)");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all{Strategy::kGoldenOracle, Strategy::kPredictor, Strategy::kClsAttention,
                                         Strategy::kRandom};
  return all;
}

std::size_t PruneSchedule::total_drop() const noexcept {
  std::size_t total = 0;
  for (const auto& e : entries) total += e.drop;
  return total;
}

void PruneSchedule::validate(std::size_t patches, std::size_t depth) const {
  std::size_t prev = 0;
  for (const auto& e : entries) {
    if (e.layer == 0 || e.layer > depth) {
      throw ConfigError("schedule layer " + std::to_string(e.layer) + " outside 1.." + std::to_string(depth));
    }
    if (e.layer <= prev) throw ConfigError("schedule layers must be strictly increasing");
    if (e.drop == 0) throw ConfigError("schedule entry at layer " + std::to_string(e.layer) + " drops nothing");
    prev = e.layer;
  }
  if (total_drop() >= patches) {
    throw ConfigError("schedule drops " + std::to_string(total_drop()) + " of " + std::to_string(patches) + " patches");
  }
}

PruneSchedule make_schedule(double keep, const std::vector<std::size_t>& locations, std::size_t patches,
                            Strategy strategy) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("keep rate must lie in (0, 1]");
  if (std::llround(keep * static_cast<double>(patches)) < 1) throw ConfigError("keep rate leaves no patch");
  if (locations.empty()) throw ConfigError("pruning needs at least one location");
  for (std::size_t i = 1; i < locations.size(); ++i) {
    if (locations[i] <= locations[i - 1]) throw ConfigError("pruning locations must be strictly increasing");
  }
  const auto total = static_cast<std::size_t>(std::llround((1.0 - keep) * static_cast<double>(patches)));
  if (total >= patches) throw ConfigError("keep rate drops every patch");
  PruneSchedule s;
  s.strategy = strategy;
  const std::size_t base = total / locations.size();
  const std::size_t extra = total % locations.size();
  for (std::size_t i = 0; i < locations.size(); ++i) {
    const std::size_t drop = base + (i < extra ? 1 : 0);
    if (drop > 0) s.entries.push_back({locations[i], drop});
  }
  return s;
}

FlopsReport count_flops(const clip::VisionConfig& vision, std::size_t embed_dim, const PruneSchedule& schedule,
                        std::size_t prompt_count) {
  schedule.validate(vision.patches, vision.layers);
  const std::uint64_t d = vision.dim;
  const std::uint64_t d_mlp = vision.mlp_dim();
  auto block = [&](std::uint64_t n) { return 4 * n * d * d + 2 * n * n * d + 2 * n * d * d_mlp; };
  auto run = [&](const std::vector<ScheduleEntry>& entries) {
    std::vector<std::uint64_t> per;
    per.push_back(static_cast<std::uint64_t>(vision.patches) * vision.patch_dim * d);
    std::uint64_t survivors = vision.patches;
    std::size_t next = 0;
    for (std::size_t layer = 1; layer <= vision.layers; ++layer) {
      if (next < entries.size() && entries[next].layer == layer) survivors -= entries[next++].drop;
      per.push_back(block(1 + prompt_count + survivors));
    }
    per.push_back(d * embed_dim);
    return per;
  };
  FlopsReport r;
  r.per_layer = run(schedule.entries);
  for (auto v : r.per_layer) r.total_macs += v;
  std::uint64_t full = 0;
  for (auto v : run({})) full += v;
  r.relative_to_unpruned = static_cast<double>(r.total_macs) / static_cast<double>(full);
  return r;
}

clip::ScoreFn make_score_fn(Strategy strategy, const ScoreSources& sources) {
  switch (strategy) {
    case Strategy::kPredictor: {
      if (sources.predictor == nullptr) throw UsageError("predictor strategy needs a trained predictor");
      const predictor::Predictor* pred = sources.predictor;
      return [pred](const clip::LayerContext& ctx, std::size_t b) {
        const auto& st = ctx.state;
        const Tensor& seq = st.seq.value();
        const std::size_t n = st.patch_count();
        Tensor z({n, seq.cols()});
        std::copy_n(seq.data() + (b * st.len + st.prefix) * seq.cols(), n * seq.cols(), z.data());
        return pred->score(z, st.surviving[b]);
      };
    }
    case Strategy::kGoldenOracle: {
      if (sources.golden_importance == nullptr) throw UsageError("golden strategy needs precomputed golden scores");
      const Tensor* imp = sources.golden_importance;
      return [imp](const clip::LayerContext& ctx, std::size_t b) {
        const auto& ids = ctx.state.surviving[b];
        Tensor s({ids.size()});
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (ids[i] >= imp->numel()) throw ShapeError("golden scores shorter than the token grid");
          s[i] = (*imp)[ids[i]];
        }
        return s;
      };
    }
    case Strategy::kClsAttention:
      return [](const clip::LayerContext& ctx, std::size_t b) {
        return clip::probe_cls_attention(ctx.model, ctx.layer, ctx.state, b);
      };
    case Strategy::kRandom: {
      if (sources.rng == nullptr) throw UsageError("random strategy needs a seeded rng");
      const SeededRng base = *sources.rng;
      return [base](const clip::LayerContext& ctx, std::size_t b) {
        SeededRng r = base.fork(ctx.layer * 1000003ULL + b);
        Tensor s({ctx.state.surviving[b].size()});
        for (auto& v : s.values()) v = static_cast<float>(r.uniform());
        return s;
      };
    }
  }
  throw LogicError("unknown strategy");
}

clip::RemovalPlan make_removal_plan(const PruneSchedule& schedule, const ScoreSources& sources) {
  clip::RemovalPlan plan;
  if (schedule.entries.empty()) return plan;
  const clip::ScoreFn fn = make_score_fn(schedule.strategy, sources);
  for (const auto& e : schedule.entries) plan.push_back({e.layer, clip::ScoredDrop{e.drop, fn}});
  return plan;
}

PruneResult prune_infer(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                        const data::TokenGrid& tokens, const PruneSchedule& schedule, const ScoreSources& sources,
                        const Tensor* prompts_v) {
  schedule.validate(model.config.vision.patches, model.config.vision.layers);
  const auto plan = make_removal_plan(schedule, sources);
  const auto enc = clip::encode_image(model, tokens, plan, prompts_v);
  PruneResult r;
  r.probs = clip::zero_shot_probs(enc.z_cls, classes, model.vision.proj.value);
  r.surviving_ids = enc.surviving_ids;
  r.flops = count_flops(model.config.vision, model.config.embed_dim, schedule,
                        prompts_v != nullptr ? prompts_v->rows() : 0);
  std::vector<std::size_t> alive(model.config.vision.patches);
  for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;
  for (const auto& rec : enc.removals) {
    StageTrace t;
    t.layer = rec.layer;
    t.dropped = rec.dropped;
    std::erase_if(alive, [&](std::size_t id) { return std::binary_search(rec.dropped.begin(), rec.dropped.end(), id); });
    t.surviving = alive;
    r.trace.push_back(std::move(t));
  }
  return r;
}

float pruned_accuracy(const clip::ClipModel& model, const clip::ClassEmbeddings& classes,
                      const data::DatasetSplit& split, const PruneSchedule& schedule, const SourceProvider& sources,
                      const Tensor* prompts_v, std::size_t jobs) {
  if (split.examples.empty()) return 0.0F;
  std::vector<std::uint8_t> correct(split.examples.size(), 0);
  nn::parallel_for(split.examples.size(), jobs, [&](std::size_t i) {
    const auto& ex = split.examples[i];
    const auto r = prune_infer(model, classes, data::patchify(ex, split.patch), schedule, sources(i), prompts_v);
    const auto best = std::max_element(r.probs.values().begin(), r.probs.values().end()) - r.probs.values().begin();
    correct[i] = static_cast<std::size_t>(best) == ex.label ? 1 : 0;
  });
  std::size_t hits = 0;
  for (auto c : correct) hits += c;
  return 100.0F * static_cast<float>(hits) / static_cast<float>(split.examples.size());
}

Tensor cls_attention_prune_scores(const clip::EncodeResult& result, std::size_t layer) {
  return clip::cls_attention_scores(result, layer);
}

std::string trace_line(std::uint64_t image_id, const PruneSchedule& schedule, const PruneResult& result) {
  nlohmann::ordered_json j;
  j["image"] = image_id;
  j["strategy"] = to_string(schedule.strategy);
  auto& sched = j["schedule"] = nlohmann::ordered_json::array();
  for (const auto& e : schedule.entries) sched.push_back({e.layer, e.drop});
  auto& stages = j["stages"] = nlohmann::ordered_json::array();
  for (const auto& t : result.trace) stages.push_back({{"layer", t.layer}, {"surviving", t.surviving}});
  j["probs"] = std::vector<float>(result.probs.values().begin(), result.probs.values().end());
  j["macs"] = result.flops.total_macs;
  return j.dump();
}

}  // namespace tokenrank::pruning
