// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "test_support.hpp"
#include "tokenrank/bench.hpp"
#include "tokenrank/nn/errors.hpp"

namespace fs = std::filesystem;
using namespace tokenrank;
using nn::SeededRng;
using nn::Tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void report(int id, const std::string& what, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << what << "): " << o.detail << std::endl;
}

// default experiment geometry
bench::PipelineConfig default_pipeline() { return bench::load_pipeline_config({}); }

clip::ClipModel default_model(std::uint64_t seed) {
  auto m = clip::ClipModel::init(default_pipeline().resolved_model(), SeededRng(seed));
  testing::randomize(m.parameters(), SeededRng(seed + 1), 0.05F);
  return m;
}

std::vector<data::SyntheticImage> sample_images(std::size_t count, std::uint64_t seed) {
  auto dc = default_pipeline().data;
  dc.images_per_class = 2;
  dc.predictor_per_class = 2;
  dc.tune_per_class = 2;
  dc.test_per_class = (count + dc.num_classes - 1) / dc.num_classes;
  auto ds = data::generate_synthetic(dc, SeededRng(seed));
  ds.test.examples.resize(count);
  return ds.test.examples;
}

std::size_t patch_of(const bench::PipelineConfig& c) { return c.data.patch; }

// ---- 1 ---------------------------------------------------------------------------

Outcome golden_batched_equivalence() {
  const auto t0 = Clock::now();
  const auto model = default_model(101);
  const auto classes = clip::encode_text(model);
  const auto images = sample_images(10, 102);
  double worst = 0.0;
  for (auto kind : {golden::ScoreKind::kLabel, golden::ScoreKind::kConfidence, golden::ScoreKind::kPreservation}) {
    for (const auto& ex : images) {
      const auto tokens = data::patchify(ex, patch_of(default_pipeline()));
      golden::GoldenConfig seq;
      seq.kind = kind;
      seq.batched = false;
      golden::GoldenConfig bat = seq;
      bat.batched = true;
      const auto a = golden::golden_scores(model, classes, tokens, seq, ex.label);
      const auto b = golden::golden_scores(model, classes, tokens, bat, ex.label);
      for (std::size_t t = 0; t < a.raw.numel(); ++t) worst = std::max(worst, std::abs(double(a.raw[t]) - b.raw[t]));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-5 && secs < 60.0,
          "max |batched - sequential| = " + fmt("%.3g", worst) + " over 3 kinds x 10 images, " + fmt("%.1f", secs) + " s"};
}

// ---- 2 ---------------------------------------------------------------------------

Outcome golden_brute_force() {
  const auto model = default_model(201);
  const auto classes = clip::encode_text(model);
  const auto images = sample_images(2, 202);
  std::size_t mismatches = 0;
  std::size_t compared = 0;
  for (const auto& ex : images) {
    const auto tokens = data::patchify(ex, patch_of(default_pipeline()));
    const golden::ImageScorer scorer(model, classes, tokens);
    for (std::size_t r = 1; r <= 3; ++r) {
      std::vector<float> ws;
      for (const auto& w : golden::enumerate_windows(8, r)) {
        ws.push_back(scorer.score(w.token_ids, golden::ScoreKind::kPreservation, std::nullopt, 2));
      }
      for (bool area : {false, true}) {
        golden::GoldenConfig cfg;
        cfg.r = r;
        cfg.batched = false;
        cfg.area_norm = area;
        const auto g = golden::golden_scores(model, classes, tokens, cfg);
        const auto ref = testing::brute_force_window_average(8, r, ws, area);
        for (std::size_t t = 0; t < 64; ++t, ++compared) mismatches += g.raw[t] != static_cast<float>(ref[t]);
      }
    }
  }
  return {mismatches == 0, std::to_string(compared - mismatches) + "/" + std::to_string(compared) +
                               " token averages bit-identical (r = 1, 2, 3; 8x8 grid; coverage and r^2 divisors)"};
}

// ---- 3 ---------------------------------------------------------------------------

Outcome preservation_identity() {
  const auto model = default_model(301);
  const auto classes = clip::encode_text(model);
  std::size_t exact = 0;
  const auto images = sample_images(10, 302);
  for (const auto& ex : images) {
    const auto tokens = data::patchify(ex, patch_of(default_pipeline()));
    const golden::ImageScorer scorer(model, classes, tokens);
    exact += scorer.score({}, golden::ScoreKind::kPreservation, std::nullopt, 2) == 1.0F;
  }
  return {exact == images.size(), std::to_string(exact) + "/10 no-removal controls give cosine exactly 1.0"};
}

// ---- 4 ---------------------------------------------------------------------------

Outcome pruned_forward_equivalence() {
  const auto model = default_model(401);
  const std::size_t n = model.config.vision.patches;
  const std::size_t depth = model.config.vision.layers;
  const auto images = sample_images(20, 402);
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    SeededRng r = SeededRng(403).fork(trial);
    clip::RemovalPlan plan;
    std::vector<std::vector<std::size_t>> keep_before;
    std::vector<std::size_t> alive(n);
    for (std::size_t i = 0; i < n; ++i) alive[i] = i;
    for (std::size_t layer = 1; layer <= depth; ++layer) {
      if (alive.size() > 4 && r.uniform() < 0.6) {
        const std::size_t k = 1 + r.below(std::min<std::size_t>(alive.size() - 4, 12));
        const auto perm = r.permutation(alive.size());
        std::vector<std::size_t> drop;
        for (std::size_t i = 0; i < k; ++i) drop.push_back(alive[perm[i]]);
        std::sort(drop.begin(), drop.end());
        std::erase_if(alive, [&](std::size_t id) { return std::binary_search(drop.begin(), drop.end(), id); });
        plan.push_back({layer, drop});
      }
      keep_before.push_back(alive);
    }
    const auto tokens = data::patchify(images[trial], patch_of(default_pipeline()));
    const Tensor pv = r.normal_tensor({3, model.config.vision.dim}, 0.1F);
    const Tensor* prompts = trial % 4 == 3 ? &pv : nullptr;
    const auto enc = clip::encode_image(model, tokens, plan, prompts);
    const auto ref = testing::ref_vision_cls(model, tokens.tokens, keep_before, prompts);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(enc.z_cls[i] - ref[i]));
  }
  return {worst <= 1e-5, "max |pruned forward - shortened reference| = " + fmt("%.3g", worst) +
                             " over 20 random plans (5 with visual prompts)"};
}

// ---- 5 ---------------------------------------------------------------------------

Outcome keep_one_identity() {
  const auto model = default_model(501);
  const auto classes = clip::encode_text(model);
  auto pred = predictor::Predictor::init(predictor::ArchKind::kMixMlp, 64, 64, 2, SeededRng(502));
  const Tensor importance = SeededRng(503).normal_tensor({64}, 1.0F);
  const SeededRng rng(504);
  pruning::ScoreSources src;
  src.predictor = &pred;
  src.golden_importance = &importance;
  src.rng = &rng;
  std::size_t same = 0;
  std::size_t total = 0;
  for (const auto& ex : sample_images(5, 505)) {
    const auto tokens = data::patchify(ex, patch_of(default_pipeline()));
    const Tensor ref = clip::zero_shot_probs(clip::encode_image(model, tokens).z_cls, classes, model.vision.proj.value);
    for (auto s : pruning::all_strategies()) {
      const auto sched = pruning::make_schedule(1.0, {2, 3, 4, 5}, 64, s);
      const auto r = pruning::prune_infer(model, classes, tokens, sched, src);
      same += std::memcmp(r.probs.data(), ref.data(), ref.numel() * sizeof(float)) == 0;
      ++total;
    }
  }
  return {same == total, std::to_string(same) + "/" + std::to_string(total) +
                             " (image, strategy) pairs bitwise equal to unpruned probabilities"};
}

// ---- 6 ---------------------------------------------------------------------------

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  double worst_pred = 0.0;
  for (auto arch : {predictor::ArchKind::kMixMlp, predictor::ArchKind::kMlp, predictor::ArchKind::kTransBlock}) {
    for (bool restricted : {false, true}) {
      auto p = predictor::Predictor::init(arch, 8, 8, 2, SeededRng(601), 8, 2);
      testing::randomize(p.parameters(), SeededRng(602), 0.4F);
      std::vector<std::size_t> ids = restricted ? std::vector<std::size_t>{0, 1, 3, 4, 6} : std::vector<std::size_t>{};
      if (!restricted) {
        for (std::size_t i = 0; i < 8; ++i) ids.push_back(i);
      }
      const Tensor z = SeededRng(603).normal_tensor({ids.size(), 8}, 1.0F);
      const Tensor target = SeededRng(604).normal_tensor({ids.size()}, 1.0F);
      worst_pred = std::max(worst_pred, testing::gradient_relative_error(p.parameters(), [&] {
        return predictor::predictor_loss(target, p.forward(nn::Var::constant(z), ids));
      }, 1e-2F));
    }
  }

  // prompts on a briefly trained tiny model, wrong labels keep the loss away from zero
  auto dc = testing::tiny_data_config();
  dc.images_per_class = 8;
  const auto ds = data::generate_synthetic(dc, SeededRng(610));
  auto model = clip::ClipModel::init(testing::tiny_model_config(), SeededRng(611));
  clip::PretrainConfig pc;
  pc.epochs = 6;
  pc.lr = 3e-3F;
  clip::pretrain_contrastive(model, ds.pretrain, pc, SeededRng(612));
  nn::set_trainable(model.parameters(), false);
  std::vector<data::TokenGrid> grids;
  std::vector<const data::TokenGrid*> images;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < 4; ++i) {
    grids.push_back(data::patchify(ds.test.examples[i], dc.patch));
    labels.push_back((ds.test.examples[i].label + 1) % dc.num_classes);
  }
  for (auto& g : grids) images.push_back(&g);
  auto pred = predictor::Predictor::init(predictor::ArchKind::kMixMlp, 16, 16, 2, SeededRng(613), 16, 2);
  // well separated scores, so no drop set flips inside the stencil
  testing::randomize(pred.parameters(), SeededRng(616));
  double worst_prompt = 0.0;
  for (auto mode : {prompt::TuneMode::kTextOnly, prompt::TuneMode::kTextAndVision}) {
    for (bool pruned : {false, true}) {
      auto s = prompt::init_prompts(3, 8, 16, mode, SeededRng(614));
      testing::randomize(s.parameters(), SeededRng(615), 1.0F);
      const pruning::PruneSchedule sched =
          pruned ? pruning::PruneSchedule{{{2, 3}, {3, 2}}, pruning::Strategy::kPredictor} : pruning::PruneSchedule{};
      const double err = testing::gradient_relative_error(s.parameters(), [&] {
        return prompt::tuning_loss(model, s, sched, &pred, images, labels);
      }, 1e-2F);
      worst_prompt = std::max(worst_prompt, err);
    }
  }
  const double secs = seconds_since(t0);
  return {worst_pred < 1e-3 && worst_prompt < 1e-3 && secs < 120.0,
          "predictor max rel err " + fmt("%.3g", worst_pred) + " (3 archs, full and restricted ids), prompts {P_t, M} " +
              fmt("%.3g", worst_prompt) + " (T_only, T_and_V; pruned and not), " + fmt("%.1f", secs) + " s"};
}

// ---- 7 ---------------------------------------------------------------------------

Outcome loss_point_value() {
  const double v = predictor::predictor_loss_value(Tensor::vector({0.0F}), Tensor::vector({0.0F}));
  const double expect = -0.5 * std::log(0.5);
  return {std::abs(v - expect) <= 1e-6, "loss(0, 0) = " + fmt("%.9f", v) + ", expected " + fmt("%.9f", expect)};
}

// ---- 8 ---------------------------------------------------------------------------

Outcome matching_rate_contract() {
  const std::size_t n = 64;
  const std::size_t k = n / 4;
  std::vector<float> fixed(n);
  for (std::size_t i = 0; i < n; ++i) fixed[i] = static_cast<float>(n - i);
  const auto gold = golden::ranking_from_scores(Tensor::vector(fixed));
  const float same = predictor::matching_rate(gold, gold, k).rate;
  std::vector<float> flipped(n);
  for (std::size_t i = 0; i < n; ++i) flipped[i] = static_cast<float>(i);
  const float disjoint = predictor::matching_rate(golden::ranking_from_scores(Tensor::vector(flipped)), gold, k).rate;
  double total = 0.0;
  for (std::uint64_t t = 0; t < 1000; ++t) {
    const Tensor s = SeededRng(801).fork(t).normal_tensor({n}, 1.0F);
    total += predictor::matching_rate(golden::ranking_from_scores(s), gold, k).rate;
  }
  const double mean = total / 1000.0;
  const double expect = 100.0 * static_cast<double>(k) / static_cast<double>(n);
  return {same == 100.0F && disjoint == 0.0F && std::abs(mean - expect) <= 5.0,
          "identical " + fmt("%.0f", same) + ", disjoint " + fmt("%.0f", disjoint) + ", random mean " +
              fmt("%.2f", mean) + " vs " + fmt("%.0f", expect) + " +/- 5 (N = 64, K = 16, 1000 trials)"};
}

// ---- 9 ---------------------------------------------------------------------------

Outcome flops_exactness() {
  std::size_t exact = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    SeededRng r = SeededRng(901).fork(trial);
    const std::size_t grid = 4 + r.below(5);
    auto cfg = testing::tiny_model_config(grid, 2, 3);
    cfg.vision.layers = 4 + r.below(4);
    cfg.vision.heads = 1 + r.below(4);
    cfg.vision.dim = 8 * cfg.vision.heads;
    cfg.vision.mlp_ratio = 1 + r.below(4);
    cfg.embed_dim = 4 + r.below(12);
    const auto model = testing::random_model(cfg, 902 + trial);
    const std::size_t n = grid * grid;
    std::vector<std::size_t> locs;
    for (std::size_t l = 1; l <= cfg.vision.layers; ++l) {
      if (r.uniform() < 0.5) locs.push_back(l);
    }
    if (locs.empty()) locs.push_back(1);
    const auto schedule = pruning::make_schedule(0.2 + 0.8 * r.uniform(), locs, n, pruning::Strategy::kRandom);
    const std::size_t b = r.below(3);
    const Tensor pv = r.normal_tensor({std::max<std::size_t>(b, 1), cfg.vision.dim}, 0.3F);
    const SeededRng pick = r.fork(5);
    pruning::ScoreSources src;
    src.rng = &pick;
    const auto plan = pruning::make_removal_plan(schedule, src);
    const auto tokens = testing::random_tokens(n, cfg.vision.patch_dim, grid, r.fork(6));
    nn::NoGradGuard guard;
    nn::ScopedMacCount count;
    const auto enc = clip::encode_image(model, tokens, plan, b > 0 ? &pv : nullptr);
    const Tensor z({1, cfg.vision.dim}, std::vector<float>(enc.z_cls.values().begin(), enc.z_cls.values().end()));
    clip::project_image(model, nn::Var::constant(z));
    exact += count.elapsed() == pruning::count_flops(cfg.vision, cfg.embed_dim, schedule, b).total_macs;
  }
  clip::VisionConfig v = default_pipeline().resolved_model().vision;
  bool monotone = true;
  std::uint64_t last = pruning::count_flops(v, 32, {}).total_macs;
  for (std::size_t drops = 1; drops < v.patches; ++drops) {
    const std::uint64_t m = pruning::count_flops(v, 32, {{{2, drops}}, pruning::Strategy::kRandom}).total_macs;
    monotone = monotone && m < last;
    last = m;
  }
  return {exact == 20 && monotone, std::to_string(exact) +
                                       "/20 analytic counts equal the instrumented forward; strictly decreasing over "
                                       "1..63 drops: " + (monotone ? "yes" : "no")};
}

// ---- 10 --------------------------------------------------------------------------

Outcome schedule_arithmetic() {
  const auto s = pruning::make_schedule(0.6, {2, 3, 4, 5}, 196);
  std::string per;
  bool near20 = s.entries.size() == 4;
  for (const auto& e : s.entries) {
    per += (per.empty() ? "" : ",") + std::to_string(e.drop);
    near20 = near20 && (e.drop == 20 || e.drop == 19);
  }
  const bool rounding = s.total_drop() == 78 && s.total_drop() != 80;
  return {near20 && rounding, "drops per location {" + per + "}, total " + std::to_string(s.total_drop()) +
                                  " = round(0.4 x 196); the 20-per-location protocol would remove 80"};
}

// ---- 11 --------------------------------------------------------------------------

struct SeedResult {
  float zero_shot = 0.0F;
  double glyph_fraction = 0.0;
  float matching = 0.0F;
  std::map<std::string, double> acc;  ///< grid id -> accuracy
};

Outcome end_to_end(const fs::path& config_path, const fs::path& out) {
  const auto t0 = Clock::now();
  const auto cfg = bench::load_pipeline_config(config_path);
  fs::remove_all(out);
  const std::size_t jobs = std::max(1U, std::thread::hardware_concurrency());
  const bench::Workspace ws(cfg, out, {}, jobs);
  const auto v0 = cfg.variants.front();
  std::map<std::uint64_t, SeedResult> res;
  for (auto seed : cfg.seeds) {
    bench::stage_gen_data(ws, seed);
    res[seed].zero_shot = bench::stage_pretrain(ws, seed).test_accuracy;
    bench::stage_golden(ws, seed);
    res[seed].matching = bench::stage_train_predictor(ws, seed, cfg.predictor.arch, v0).test_matching_rate;

    // mask oracle on the first 100 test images
    const auto ds = ws.load_data(seed, v0);
    const auto cache = ws.golden_cache(seed, v0);
    std::size_t ok = 0;
    const std::size_t count = std::min<std::size_t>(100, ds.test.examples.size());
    for (std::size_t i = 0; i < count; ++i) {
      const auto& ex = ds.test.examples[i];
      const Tensor imp = golden::importance(cache.load(ex.id));
      double fg = 0.0, bg = 0.0;
      std::size_t nf = 0, nb = 0;
      for (std::size_t t = 0; t < imp.numel(); ++t) {
        if (ex.foreground_mask[t]) {
          fg += imp[t];
          ++nf;
        } else {
          bg += imp[t];
          ++nb;
        }
      }
      ok += nf > 0 && nb > 0 && fg / static_cast<double>(nf) > bg / static_cast<double>(nb);
    }
    res[seed].glyph_fraction = 100.0 * static_cast<double>(ok) / static_cast<double>(count);
  }
  const auto sweep = bench::run_keep_rate_sweep(ws);
  bench::emit_report(sweep, ws.reports_dir(), "sweep");
  const auto tuning = bench::run_tuning_grid(ws);
  bench::emit_report(tuning, ws.reports_dir(), "tuning-grid");
  for (const auto* rows : {&sweep, &tuning}) {
    for (const auto& r : *rows) res[r.seed].acc[r.grid_id] = r.accuracy;
  }
  const double secs = seconds_since(t0);

  bool a = true, b = true, c = true, d = true;
  std::ostringstream detail;
  const double chance = 100.0 * static_cast<double>(cfg.resolved_match_k()) / static_cast<double>(cfg.patches());
  double full = 0, none = 0, t_only = 0, t_v = 0;
  for (auto& [seed, r] : res) {
    a = a && r.zero_shot >= 90.0F;
    b = b && r.glyph_fraction >= 90.0;
    d = d && r.matching >= 2.0 * chance;
    for (const char* keep : {"0.50", "0.60"}) {
      const double g = r.acc.at(std::string("golden@") + keep);
      const double p = r.acc.at(std::string("predictor@") + keep);
      const double x = r.acc.at(std::string("random@") + keep);
      c = c && g >= p && p >= x;
      detail << "\n    seed " << seed << " keep " << keep << ": golden " << g << " predictor " << p << " random " << x;
    }
    full += r.acc.at("tune-none-full");
    none += r.acc.at("tune-none-pruned");
    t_only += r.acc.at("tune-T_only-pruned");
    t_v += r.acc.at("tune-T_and_V-pruned");
  }
  const double ns = static_cast<double>(res.size());
  full /= ns, none /= ns, t_only /= ns, t_v /= ns;
  const double drop = full - none;
  const bool e = (t_v - none) >= 0.5 * drop && t_v >= t_only && t_only >= none;
  const bool budget = secs < 15.0 * 60.0;

  std::ostringstream head;
  head << (budget ? "" : "[over budget] ") << fmt("%.0f", secs) << " s for " << res.size() << " seeds";
  for (auto& [seed, r] : res) {
    head << "\n    seed " << seed << ": zero-shot " << r.zero_shot << "%, glyph-above-background " << r.glyph_fraction
         << "%, mixmlp matching@" << cfg.resolved_match_k() << " " << r.matching << "% (chance " << chance << "%)";
  }
  head << "\n    (a) zero-shot >= 90 on every seed: " << (a ? "yes" : "no");
  head << "\n    (b) glyph ranked above background on >= 90 of 100 test images, every seed: " << (b ? "yes" : "no");
  head << "\n    (c) golden >= predictor >= random at keep 0.5 and 0.6, every seed: " << (c ? "yes" : "no")
       << detail.str();
  head << "\n    (d) matching rate >= 2x chance, every seed: " << (d ? "yes" : "no");
  head << "\n    (e) mean over seeds: unpruned " << full << ", pruned untuned " << none << ", T_only " << t_only
       << ", T_and_V " << t_v << "; drop " << drop << ", recovered " << (t_v - none) << ": " << (e ? "yes" : "no");
  return {a && b && c && d && e && budget, head.str()};
}

// ---- 12 --------------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TOKENRANK_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

Outcome cli_determinism(const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  const auto cfg = work / "tiny.json";
  std::ofstream(cfg) << bench::to_json(testing::tiny_pipeline()).dump(2);
  const std::vector<std::string> commands{"gen-data",     "pretrain",         "golden",     "train-predictor",
                                          "sweep",        "ablate-locations", "ablate-arch", "cross-dataset",
                                          "tune-prompts", "tuning-grid",      "report"};
  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const auto& run : {"a", "b"}) {
    const std::string jobs = std::string(run) == "a" ? "1" : "3";
    for (const auto& c : commands) {
      const int rc = run_cli(c + " --config " + cfg.string() + " --out " + (work / run).string() + " --jobs " + jobs);
      if (rc != 0) return {false, c + " exited with " + std::to_string(rc)};
    }
  }
  // same subcommands again in place
  const auto first = snapshot(work / "a" / "reports");
  for (const auto& c : commands) {
    run_cli(c + " --config " + cfg.string() + " --out " + (work / "a").string() + " --jobs 2");
    for (const auto& [name, bytes] : snapshot(work / "a" / "reports")) {
      ++compared;
      if (!first.count(name) || first.at(name) != bytes) differing.push_back(c + ":" + name);
    }
  }
  const auto other = snapshot(work / "b" / "reports");
  for (const auto& [name, bytes] : first) {
    ++compared;
    if (!other.count(name) || other.at(name) != bytes) differing.push_back("b:" + name);
  }
  std::string det = std::to_string(first.size()) + " report files, " + std::to_string(compared) +
                    " comparisons across reruns of all 11 subcommands and a second output tree (jobs 1/2/3)";
  if (!differing.empty()) det += "; differing: " + differing.front();
  return {differing.empty() && !first.empty(), det};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(TOKENRANK_SOURCE_DIR) / "configs" / "acceptance.json";
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::current_path() / "acceptance-run";
  std::cout << "acceptance config " << config.string() << ", artifacts under " << work.string() << std::endl;

  report(1, "golden batched vs sequential", golden_batched_equivalence);
  report(2, "window averaging vs brute force", golden_brute_force);
  report(3, "preservation control", preservation_identity);
  report(4, "pruned forward vs shortened sequence", pruned_forward_equivalence);
  report(5, "keep rate 1 identity", keep_one_identity);
  report(6, "gradient checks", gradient_checks);
  report(7, "predictor loss point value", loss_point_value);
  report(8, "matching rate contract", matching_rate_contract);
  report(9, "MAC model exactness", flops_exactness);
  report(10, "schedule arithmetic", schedule_arithmetic);
  report(11, "end-to-end directional reproduction", [&] { return end_to_end(config, work / "pipeline"); });
  report(12, "CLI determinism", [&] { return cli_determinism(work / "determinism"); });

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
