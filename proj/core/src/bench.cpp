#include "tokenrank/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/parallel.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank::bench {

namespace {

enum Purpose : std::uint64_t {
  kModelInit = 2,
  kPretrain = 3,
  kPredictorInit = 4,
  kPredictorTrain = 5,
  kFewShot = 6,
  kTune = 7,
  kRandomStrategy = 8,
  kData = 100,
};

std::string join_ids(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "-" : "") + std::to_string(v[i]);
  return s;
}

std::string fmt_keep(double keep) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", keep);
  return buf;
}

// shortest round-trip form
std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

void check_locations(const std::vector<std::size_t>& locs, std::size_t depth, const std::string& what) {
  if (locs.empty()) throw ConfigError(what + " is empty");
  for (std::size_t i = 0; i < locs.size(); ++i) {
    if (locs[i] == 0 || locs[i] > depth) {
      throw ConfigError(what + " location " + std::to_string(locs[i]) + " outside 1.." + std::to_string(depth));
    }
    if (i > 0 && locs[i] <= locs[i - 1]) throw ConfigError(what + " must be strictly increasing");
  }
}

void check_keep(double keep, const std::string& what) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError(what + " keep rate " + fmt_double(keep) + " outside (0, 1]");
}

}  // namespace

nn::SeededRng stage_rng(std::uint64_t seed, std::uint64_t purpose) { return nn::SeededRng(seed).fork(purpose); }

// ---- config ------------------------------------------------------------------

clip::ModelConfig PipelineConfig::resolved_model() const {
  clip::ModelConfig m = model;
  m.vision.patches = data.grid * data.grid;
  m.vision.patch_dim = 3 * data.patch * data.patch;
  m.text.class_names = data::default_class_names(data.num_classes);
  return m;
}

data::SyntheticConfig PipelineConfig::variant_config(std::uint32_t variant) const {
  data::SyntheticConfig c = data;
  c.variant = variant;
  return c;
}

void PipelineConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (variants.empty()) throw ConfigError("variants must not be empty");
  const clip::ModelConfig m = resolved_model();
  m.validate();
  const std::size_t depth = m.vision.layers;
  if (golden.prune_layer == 0 || golden.prune_layer > depth) throw ConfigError("golden.prune_layer outside the vision depth");
  if (predictor.attach_layer == 0 || predictor.attach_layer > depth) {
    throw ConfigError("predictor.attach_layer outside the vision depth");
  }
  for (double k : keep_rates) check_keep(k, "keep_rates");
  for (double k : arch_keep_rates) check_keep(k, "arch_keep_rates");
  check_keep(ablation_keep, "ablation_keep");
  check_keep(cross_keep, "cross_keep");
  check_locations(locations, depth, "locations");
  for (const auto& s : location_sets) check_locations(s, depth, "location_sets");
  if (match_k > patches()) throw ConfigError("match_k exceeds the token count");
  if (strategies.empty()) throw ConfigError("strategies must not be empty");
  if (archs.empty()) throw ConfigError("archs must not be empty");
}

config::json to_json(const PipelineConfig& c) {
  config::json strategies = config::json::array();
  for (auto s : c.strategies) strategies.push_back(pruning::to_string(s));
  config::json archs = config::json::array();
  for (auto a : c.archs) archs.push_back(predictor::to_string(a));
  return {{"name", c.name},
          {"data", config::to_json(c.data)},
          {"variants", c.variants},
          {"model", config::to_json(c.model)},
          {"pretrain", config::to_json(c.pretrain)},
          {"golden", config::to_json(c.golden)},
          {"predictor", config::to_json(c.predictor)},
          {"tune", config::to_json(c.tune)},
          {"seeds", c.seeds},
          {"keep_rates", c.keep_rates},
          {"strategies", strategies},
          {"locations", c.locations},
          {"location_sets", c.location_sets},
          {"archs", archs},
          {"arch_keep_rates", c.arch_keep_rates},
          {"ablation_keep", c.ablation_keep},
          {"cross_keep", c.cross_keep},
          {"match_k", c.match_k},
          {"tune_unpruned", c.tune_unpruned},
          {"record_wall_time", c.record_wall_time}};
}

PipelineConfig pipeline_config_from_json(const config::json& j) {
  PipelineConfig c;
  config::ObjectReader r(j, "config");
  r.get("name", c.name);
  if (const auto* v = r.child("data")) c.data = config::synthetic_config_from_json(*v, "config.data");
  r.get("variants", c.variants);
  if (const auto* v = r.child("model")) c.model = config::model_config_from_json(*v, "config.model");
  if (const auto* v = r.child("pretrain")) c.pretrain = config::pretrain_config_from_json(*v, "config.pretrain");
  if (const auto* v = r.child("golden")) c.golden = config::golden_config_from_json(*v, "config.golden");
  if (const auto* v = r.child("predictor")) c.predictor = config::predictor_config_from_json(*v, "config.predictor");
  if (const auto* v = r.child("tune")) c.tune = config::tune_config_from_json(*v, "config.tune");
  r.get("seeds", c.seeds);
  r.get("keep_rates", c.keep_rates);
  std::vector<std::string> strategies;
  r.get("strategies", strategies);
  if (!strategies.empty()) {
    c.strategies.clear();
    for (const auto& s : strategies) c.strategies.push_back(pruning::parse_strategy(s));
  }
  r.get("locations", c.locations);
  r.get("location_sets", c.location_sets);
  std::vector<std::string> archs;
  r.get("archs", archs);
  if (!archs.empty()) {
    c.archs.clear();
    for (const auto& a : archs) c.archs.push_back(predictor::parse_arch(a));
  }
  r.get("arch_keep_rates", c.arch_keep_rates);
  r.get("ablation_keep", c.ablation_keep);
  r.get("cross_keep", c.cross_keep);
  r.get("match_k", c.match_k);
  r.get("tune_unpruned", c.tune_unpruned);
  r.get("record_wall_time", c.record_wall_time);
  r.finish();
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  if (path.empty()) {
    PipelineConfig c;
    c.validate();
    return c;
  }
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return pipeline_config_from_json(config::read_json(path));
}

// ---- rows and reports ----------------------------------------------------------

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "experiment",  "grid_id",    "seed",          "strategy",      "keep_rate",  "locations",
      "arch",        "tune_mode",  "pruned",        "train_variant", "test_variant", "accuracy",
      "matching_rate", "total_macs", "relative_macs", "wall_time_ms"};
  return cols;
}

std::string to_csv(const std::vector<ResultRow>& rows) {
  std::string out;
  for (std::size_t i = 0; i < csv_columns().size(); ++i) out += (i ? "," : "") + csv_columns()[i];
  out += "\n";
  for (const auto& r : rows) {
    for (const std::string* s : {&r.experiment, &r.grid_id, &r.strategy, &r.locations, &r.arch, &r.tune_mode}) {
      if (s->find_first_of(",\n\"") != std::string::npos) throw UsageError("CSV field contains a separator: " + *s);
    }
    out += r.experiment + "," + r.grid_id + "," + std::to_string(r.seed) + "," + r.strategy + "," +
           fmt_double(r.keep_rate) + "," + r.locations + "," + r.arch + "," + r.tune_mode + "," +
           std::to_string(r.pruned) + "," + std::to_string(r.train_variant) + "," + std::to_string(r.test_variant) +
           "," + fmt_double(r.accuracy) + "," + fmt_double(r.matching_rate) + "," + std::to_string(r.total_macs) +
           "," + fmt_double(r.relative_macs) + "," + fmt_double(r.wall_time_ms) + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty CSV");
  std::string expected;
  for (std::size_t i = 0; i < csv_columns().size(); ++i) expected += (i ? "," : "") + csv_columns()[i];
  if (line != expected) throw ParseError("unexpected CSV header: " + line);
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != csv_columns().size()) throw ParseError("CSV line " + std::to_string(lineno) + ": wrong field count");
    try {
      ResultRow r;
      r.experiment = f[0];
      r.grid_id = f[1];
      r.seed = std::stoull(f[2]);
      r.strategy = f[3];
      r.keep_rate = std::stod(f[4]);
      r.locations = f[5];
      r.arch = f[6];
      r.tune_mode = f[7];
      r.pruned = std::stoi(f[8]);
      r.train_variant = std::stoi(f[9]);
      r.test_variant = std::stoi(f[10]);
      r.accuracy = std::stod(f[11]);
      r.matching_rate = std::stod(f[12]);
      r.total_macs = std::stoull(f[13]);
      r.relative_macs = std::stod(f[14]);
      r.wall_time_ms = std::stod(f[15]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError("CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

void sort_rows(std::vector<ResultRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    if (a.grid_id != b.grid_id) return a.grid_id < b.grid_id;
    return a.seed < b.seed;
  });
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string series_of(const ResultRow& r) {
  const auto at = r.grid_id.find('@');
  return at == std::string::npos ? r.grid_id : r.grid_id.substr(0, at);
}

}  // namespace

void emit_report(const std::vector<ResultRow>& rows_in, const fs::path& dir, const std::string& stem) {
  std::vector<ResultRow> rows = rows_in;
  sort_rows(rows);
  write_text(dir / (stem + ".csv"), to_csv(rows));

  struct Agg {
    double acc = 0, match = 0, rel = 0, keep = 0;
    std::uint64_t macs = 0;
    std::size_t n = 0;
    std::string series;
  };
  std::vector<std::string> order;
  std::map<std::string, Agg> agg;
  for (const auto& r : rows) {
    auto [it, fresh] = agg.try_emplace(r.grid_id);
    if (fresh) order.push_back(r.grid_id);
    auto& a = it->second;
    a.acc += r.accuracy;
    a.match += r.matching_rate;
    a.rel = r.relative_macs;
    a.macs = r.total_macs;
    a.keep = r.keep_rate;
    a.series = series_of(r);
    ++a.n;
  }
  config::json summary = config::json::object();
  summary["experiment"] = rows.empty() ? stem : rows.front().experiment;
  summary["rows"] = rows.size();
  auto& points = summary["grid"] = config::json::array();
  std::string plot = "series,keep_rate,accuracy\n";
  for (const auto& id : order) {
    const auto& a = agg.at(id);
    const double n = static_cast<double>(a.n);
    points.push_back({{"grid_id", id},
                      {"seeds", a.n},
                      {"mean_accuracy", a.acc / n},
                      {"mean_matching_rate", a.match / n},
                      {"total_macs", a.macs},
                      {"relative_macs", a.rel}});
    plot += a.series + "," + fmt_double(a.keep) + "," + fmt_double(a.acc / n) + "\n";
  }
  write_text(dir / (stem + ".summary.json"), summary.dump(2) + "\n");
  write_text(dir / (stem + ".plot.csv"), plot);
}

std::vector<ResultRow> read_report(const fs::path& csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw MissingArtifactError("report not found: " + csv_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

// ---- workspace ---------------------------------------------------------------

Workspace::Workspace(PipelineConfig config, fs::path out, fs::path cache, std::size_t jobs)
    : config_(std::move(config)), out_(std::move(out)), cache_(cache.empty() ? out_ / "cache" : std::move(cache)),
      jobs_(std::max<std::size_t>(1, jobs)) {
  config_.validate();
}

fs::path Workspace::seed_dir(std::uint64_t seed) const { return out_ / ("seed-" + std::to_string(seed)); }
fs::path Workspace::data_dir(std::uint64_t seed, std::uint32_t variant) const {
  return seed_dir(seed) / ("variant-" + std::to_string(variant)) / "data";
}
fs::path Workspace::model_dir(std::uint64_t seed) const { return seed_dir(seed) / "model"; }
fs::path Workspace::predictor_dir(std::uint64_t seed, predictor::ArchKind arch, std::uint32_t variant) const {
  return seed_dir(seed) / "predictor" / (predictor::to_string(arch) + "-v" + std::to_string(variant));
}
fs::path Workspace::prompts_dir(std::uint64_t seed, prompt::TuneMode mode, bool pruned) const {
  return seed_dir(seed) / "prompts" / (prompt::to_string(mode) + (pruned ? "-pruned" : "-full"));
}
fs::path Workspace::reports_dir() const { return out_ / "reports"; }

golden::GoldenCache Workspace::golden_cache(std::uint64_t seed, std::uint32_t variant) const {
  return {cache_, "seed-" + std::to_string(seed) + "/variant-" + std::to_string(variant), config_.golden};
}

data::Dataset Workspace::load_data(std::uint64_t seed, std::uint32_t variant) const {
  const auto dir = data_dir(seed, variant);
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingArtifactError("dataset not found at " + dir.string() + " (run gen-data)");
  }
  return data::load_dataset(dir);
}

clip::ClipModel Workspace::load_model(std::uint64_t seed) const {
  const auto dir = model_dir(seed);
  if (!fs::exists(dir / "manifest.json") || !fs::exists(dir / "config.json")) {
    throw MissingArtifactError("model checkpoint not found at " + dir.string() + " (run pretrain)");
  }
  return clip::load_model(dir);
}

predictor::Predictor Workspace::load_predictor(std::uint64_t seed, predictor::ArchKind arch,
                                               std::uint32_t variant) const {
  const auto dir = predictor_dir(seed, arch, variant);
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingArtifactError("predictor checkpoint not found at " + dir.string() + " (run train-predictor)");
  }
  return predictor::load_predictor(dir);
}

// ---- stages ------------------------------------------------------------------

void stage_gen_data(const Workspace& ws, std::uint64_t seed) {
  for (auto v : ws.config().variants) {
    const auto ds = data::generate_synthetic(ws.config().variant_config(v), stage_rng(seed, kData + v));
    data::save_dataset(ws.data_dir(seed, v), ds);
  }
}

PretrainSummary stage_pretrain(const Workspace& ws, std::uint64_t seed) {
  const auto& cfg = ws.config();
  std::vector<data::Dataset> sets;
  for (auto v : cfg.variants) sets.push_back(ws.load_data(seed, v));
  data::DatasetSplit pool = sets.front().pretrain;
  for (std::size_t i = 1; i < sets.size(); ++i) {
    const auto& ex = sets[i].pretrain.examples;
    pool.examples.insert(pool.examples.end(), ex.begin(), ex.end());
  }
  clip::ClipModel model = clip::ClipModel::init(cfg.resolved_model(), stage_rng(seed, kModelInit));
  PretrainSummary s;
  s.report = clip::pretrain_contrastive(model, pool, cfg.pretrain, stage_rng(seed, kPretrain));
  clip::save_model(ws.model_dir(seed), model);
  s.test_accuracy = clip::zero_shot_accuracy(model, sets.front().test);

  config::json j;
  j["seed"] = seed;
  j["initial_loss"] = s.report.initial_loss;
  j["epoch_loss"] = s.report.epoch_loss;
  j["logit_scale"] = model.logit_scale();
  auto& acc = j["zero_shot_test_accuracy"] = config::json::object();
  for (std::size_t i = 0; i < sets.size(); ++i) {
    acc["variant-" + std::to_string(cfg.variants[i])] =
        i == 0 ? s.test_accuracy : clip::zero_shot_accuracy(model, sets[i].test);
  }
  config::write_json(ws.reports_dir() / ("pretrain-seed" + std::to_string(seed) + ".json"), j);
  return s;
}

std::size_t stage_golden(const Workspace& ws, std::uint64_t seed, bool rebuild) {
  const auto model = ws.load_model(seed);
  std::size_t computed = 0;
  for (auto v : ws.config().variants) {
    const auto ds = ws.load_data(seed, v);
    const auto cache = ws.golden_cache(seed, v);
    computed += cache.build(model, ds.predictor_train, ws.jobs(), rebuild);
    computed += cache.build(model, ds.test, ws.jobs(), rebuild);
  }
  return computed;
}

PredictorSummary stage_train_predictor(const Workspace& ws, std::uint64_t seed, predictor::ArchKind arch,
                                       std::uint32_t variant) {
  const auto& cfg = ws.config();
  const auto model = ws.load_model(seed);
  const auto ds = ws.load_data(seed, variant);
  const auto cache = ws.golden_cache(seed, variant);
  const std::size_t layer = cfg.predictor.attach_layer;
  const auto train = predictor::build_training_set(model, ds.predictor_train, cache, layer, ws.jobs());
  const auto test = predictor::build_training_set(model, ds.test, cache, layer, ws.jobs());
  auto pcfg = cfg.predictor;
  pcfg.arch = arch;
  auto pred = predictor::Predictor::init(arch, cfg.patches(), model.config.vision.dim, layer,
                                         stage_rng(seed, kPredictorInit), pcfg.mlp_hidden, pcfg.heads);
  PredictorSummary s;
  s.k = cfg.resolved_match_k();
  s.untrained_test_matching_rate = predictor::mean_matching_rate(pred, test, s.k);
  s.report = predictor::train_predictor(pred, train, pcfg, stage_rng(seed, kPredictorTrain));
  s.train_matching_rate = predictor::mean_matching_rate(pred, train, s.k);
  s.test_matching_rate = predictor::mean_matching_rate(pred, test, s.k);
  predictor::save_predictor(ws.predictor_dir(seed, arch, variant), pred, golden::to_string(cfg.golden.kind),
                            cfg.data.grid);

  config::json j;
  j["seed"] = seed;
  j["arch"] = predictor::to_string(arch);
  j["variant"] = variant;
  j["k"] = s.k;
  j["initial_loss"] = s.report.initial_loss;
  j["epoch_loss"] = s.report.epoch_loss;
  j["untrained_test_matching_rate"] = s.untrained_test_matching_rate;
  j["train_matching_rate"] = s.train_matching_rate;
  j["test_matching_rate"] = s.test_matching_rate;
  config::write_json(ws.reports_dir() / ("predictor-" + predictor::to_string(arch) + "-v" + std::to_string(variant) +
                                         "-seed" + std::to_string(seed) + ".json"),
                     j);
  return s;
}

namespace {

pruning::PruneSchedule tuning_schedule(const Workspace& ws, bool pruned) {
  const auto& cfg = ws.config();
  if (!pruned) return {{}, pruning::Strategy::kPredictor};
  return pruning::make_schedule(cfg.ablation_keep, cfg.locations, cfg.patches(), pruning::Strategy::kPredictor);
}

// mode is excluded, it is part of the prompt directory
std::string tune_tag(const prompt::TuneConfig& t) {
  auto j = config::to_json(t);
  j.erase("mode");
  return j.dump();
}

}  // namespace

prompt::TuneResult stage_tune_prompts(const Workspace& ws, std::uint64_t seed, prompt::TuneMode mode, bool pruned) {
  const auto& cfg = ws.config();
  const auto model = ws.load_model(seed);
  const auto pred = ws.load_predictor(seed, cfg.predictor.arch, cfg.variants.front());
  const auto ds = ws.load_data(seed, cfg.variants.front());
  const auto shots = data::few_shot_sample(ds.tune_train, cfg.tune.shots, stage_rng(seed, kFewShot));
  const auto schedule = tuning_schedule(ws, pruned);
  auto tcfg = cfg.tune;
  tcfg.mode = mode;
  auto result = prompt::tune_prompts(model, &pred, schedule, shots, &ds.test, tcfg, stage_rng(seed, kTune), ws.jobs());
  prompt::save_prompts(ws.prompts_dir(seed, mode, pruned), result.state, cfg.tune.shots,
                       prompt::schedule_hash(schedule), {{"tune", tune_tag(cfg.tune)}});

  config::json j;
  j["seed"] = seed;
  j["mode"] = prompt::to_string(mode);
  j["pruned"] = pruned;
  j["b"] = result.state.b();
  j["shots"] = cfg.tune.shots;
  j["initial_test_accuracy"] = result.log.initial_test_accuracy;
  j["epoch_loss"] = result.log.epoch_loss;
  j["epoch_test_accuracy"] = result.log.epoch_test_accuracy;
  config::write_json(ws.reports_dir() / ("tune-" + prompt::to_string(mode) + (pruned ? "-pruned" : "-full") + "-seed" +
                                         std::to_string(seed) + ".json"),
                     j);
  return result;
}

// ---- experiments ---------------------------------------------------------------

double evaluate_split(const Workspace& ws, std::uint64_t seed, const clip::ClipModel& model,
                      const data::DatasetSplit& split, std::uint32_t variant, const pruning::PruneSchedule& schedule,
                      const predictor::Predictor* pred, const prompt::PromptState* prompts) {
  std::vector<nn::Tensor> importance;
  if (schedule.strategy == pruning::Strategy::kGoldenOracle && !schedule.entries.empty()) {
    const auto cache = ws.golden_cache(seed, variant);
    for (const auto& ex : split.examples) importance.push_back(golden::importance(cache.load(ex.id)));
  }
  std::vector<nn::SeededRng> rngs;
  const auto base = stage_rng(seed, kRandomStrategy);
  for (const auto& ex : split.examples) rngs.push_back(base.fork(ex.id));
  const pruning::SourceProvider sources = [&](std::size_t i) {
    pruning::ScoreSources s;
    s.predictor = pred;
    s.golden_importance = importance.empty() ? nullptr : &importance[i];
    s.rng = &rngs[i];
    return s;
  };
  return prompt::prompted_accuracy(model, split, schedule, sources, prompts, ws.jobs());
}

namespace {

struct Timer {
  bool on;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    if (!on) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
};

ResultRow base_row(const std::string& experiment, std::uint64_t seed, const pruning::PruneSchedule& schedule,
                   double keep, const std::vector<std::size_t>& locations, const clip::ClipModel& model,
                   std::size_t prompt_count) {
  ResultRow r;
  r.experiment = experiment;
  r.seed = seed;
  r.strategy = pruning::to_string(schedule.strategy);
  r.keep_rate = keep;
  r.locations = join_ids(locations);
  r.pruned = schedule.entries.empty() ? 0 : 1;
  const auto flops = pruning::count_flops(model.config.vision, model.config.embed_dim, schedule, prompt_count);
  r.total_macs = flops.total_macs;
  r.relative_macs = flops.relative_to_unpruned;
  return r;
}

}  // namespace

std::vector<ResultRow> run_keep_rate_sweep(const Workspace& ws) {
  const auto& cfg = ws.config();
  const auto v0 = cfg.variants.front();
  std::vector<ResultRow> rows;
  for (auto seed : cfg.seeds) {
    const auto model = ws.load_model(seed);
    const auto ds = ws.load_data(seed, v0);
    std::optional<predictor::Predictor> pred;
    for (auto s : cfg.strategies) {
      if (s == pruning::Strategy::kPredictor) pred = ws.load_predictor(seed, cfg.predictor.arch, v0);
    }
    for (double keep : cfg.keep_rates) {
      for (auto strategy : cfg.strategies) {
        const auto schedule = pruning::make_schedule(keep, cfg.locations, cfg.patches(), strategy);
        Timer t{cfg.record_wall_time};
        const double acc = evaluate_split(ws, seed, model, ds.test, v0, schedule, pred ? &*pred : nullptr);
        ResultRow r = base_row("sweep", seed, schedule, keep, cfg.locations, model, 0);
        r.grid_id = pruning::to_string(strategy) + "@" + fmt_keep(keep);
        r.arch = strategy == pruning::Strategy::kPredictor ? predictor::to_string(cfg.predictor.arch) : "";
        r.train_variant = static_cast<int>(v0);
        r.test_variant = static_cast<int>(v0);
        r.accuracy = acc;
        r.wall_time_ms = t.ms();
        rows.push_back(std::move(r));
      }
    }
  }
  sort_rows(rows);
  return rows;
}

std::vector<ResultRow> run_location_ablation(const Workspace& ws) {
  const auto& cfg = ws.config();
  const auto v0 = cfg.variants.front();
  std::vector<ResultRow> rows;
  for (auto seed : cfg.seeds) {
    const auto model = ws.load_model(seed);
    const auto ds = ws.load_data(seed, v0);
    const auto pred = ws.load_predictor(seed, cfg.predictor.arch, v0);
    for (const auto& locs : cfg.location_sets) {
      const auto schedule = pruning::make_schedule(cfg.ablation_keep, locs, cfg.patches(), pruning::Strategy::kPredictor);
      Timer t{cfg.record_wall_time};
      ResultRow r = base_row("ablate-locations", seed, schedule, cfg.ablation_keep, locs, model, 0);
      r.accuracy = evaluate_split(ws, seed, model, ds.test, v0, schedule, &pred);
      r.grid_id = "loc-" + join_ids(locs) + "@" + fmt_keep(cfg.ablation_keep);
      r.arch = predictor::to_string(cfg.predictor.arch);
      r.train_variant = static_cast<int>(v0);
      r.test_variant = static_cast<int>(v0);
      r.wall_time_ms = t.ms();
      rows.push_back(std::move(r));
    }
  }
  sort_rows(rows);
  return rows;
}

std::vector<ResultRow> run_arch_ablation(const Workspace& ws) {
  const auto& cfg = ws.config();
  const auto v0 = cfg.variants.front();
  std::vector<ResultRow> rows;
  for (auto seed : cfg.seeds) {
    const auto model = ws.load_model(seed);
    const auto ds = ws.load_data(seed, v0);
    for (auto arch : cfg.archs) {
      const auto summary = stage_train_predictor(ws, seed, arch, v0);
      const auto pred = ws.load_predictor(seed, arch, v0);
      for (double keep : cfg.arch_keep_rates) {
        const auto schedule = pruning::make_schedule(keep, cfg.locations, cfg.patches(), pruning::Strategy::kPredictor);
        Timer t{cfg.record_wall_time};
        ResultRow r = base_row("ablate-arch", seed, schedule, keep, cfg.locations, model, 0);
        r.accuracy = evaluate_split(ws, seed, model, ds.test, v0, schedule, &pred);
        r.matching_rate = summary.test_matching_rate;
        r.arch = predictor::to_string(arch);
        r.grid_id = "arch-" + r.arch + "@" + fmt_keep(keep);
        r.train_variant = static_cast<int>(v0);
        r.test_variant = static_cast<int>(v0);
        r.wall_time_ms = t.ms();
        rows.push_back(std::move(r));
      }
    }
  }
  sort_rows(rows);
  return rows;
}

std::vector<ResultRow> run_cross_dataset(const Workspace& ws) {
  const auto& cfg = ws.config();
  if (cfg.variants.size() < 2) throw ConfigError("cross-dataset needs at least two variants");
  std::vector<ResultRow> rows;
  for (auto seed : cfg.seeds) {
    const auto model = ws.load_model(seed);
    std::map<std::uint32_t, data::Dataset> sets;
    for (auto v : cfg.variants) sets.emplace(v, ws.load_data(seed, v));
    const auto schedule =
        pruning::make_schedule(cfg.cross_keep, cfg.locations, cfg.patches(), pruning::Strategy::kPredictor);
    for (auto train_v : cfg.variants) {
      stage_train_predictor(ws, seed, cfg.predictor.arch, train_v);
      const auto pred = ws.load_predictor(seed, cfg.predictor.arch, train_v);
      for (auto test_v : cfg.variants) {
        Timer t{cfg.record_wall_time};
        ResultRow r = base_row("cross-dataset", seed, schedule, cfg.cross_keep, cfg.locations, model, 0);
        r.accuracy = evaluate_split(ws, seed, model, sets.at(test_v).test, test_v, schedule, &pred);
        r.arch = predictor::to_string(cfg.predictor.arch);
        r.train_variant = static_cast<int>(train_v);
        r.test_variant = static_cast<int>(test_v);
        r.grid_id = "v" + std::to_string(train_v) + "-to-v" + std::to_string(test_v) + "@" + fmt_keep(cfg.cross_keep);
        r.wall_time_ms = t.ms();
        rows.push_back(std::move(r));
      }
    }
  }
  sort_rows(rows);
  return rows;
}

std::vector<ResultRow> run_tuning_grid(const Workspace& ws) {
  const auto& cfg = ws.config();
  const auto v0 = cfg.variants.front();
  std::vector<ResultRow> rows;
  for (auto seed : cfg.seeds) {
    const auto model = ws.load_model(seed);
    const auto ds = ws.load_data(seed, v0);
    const auto pred = ws.load_predictor(seed, cfg.predictor.arch, v0);
    for (bool pruned : {true, false}) {
      const auto schedule = tuning_schedule(ws, pruned);
      const std::vector<std::size_t> locs = pruned ? cfg.locations : std::vector<std::size_t>{};
      const double keep = pruned ? cfg.ablation_keep : 1.0;
      for (const std::string mode_name : {"none", "T_only", "T_and_V"}) {
        if (!pruned && mode_name != "none" && !cfg.tune_unpruned) continue;
        Timer t{cfg.record_wall_time};
        std::optional<prompt::PromptState> state;
        if (mode_name != "none") {
          const auto mode = prompt::parse_tune_mode(mode_name);
          const auto dir = ws.prompts_dir(seed, mode, pruned);
          bool fresh = false;
          if (fs::exists(dir / "manifest.json")) {
            const auto tags = nn::read_checkpoint_tags(dir);
            fresh = tags.at("schedule_hash") == prompt::schedule_hash(schedule) && tags.count("tune") &&
                    tags.at("tune") == tune_tag(cfg.tune);
          }
          state = fresh ? prompt::load_prompts(dir) : stage_tune_prompts(ws, seed, mode, pruned).state;
        }
        const std::size_t b_v =
            state && state->mode == prompt::TuneMode::kTextAndVision ? state->b() : 0;
        ResultRow r = base_row("tuning-grid", seed, schedule, keep, locs, model, b_v);
        r.accuracy = evaluate_split(ws, seed, model, ds.test, v0, schedule, &pred, state ? &*state : nullptr);
        r.arch = predictor::to_string(cfg.predictor.arch);
        r.tune_mode = mode_name;
        r.train_variant = static_cast<int>(v0);
        r.test_variant = static_cast<int>(v0);
        r.grid_id = "tune-" + mode_name + (pruned ? "-pruned" : "-full");
        r.wall_time_ms = t.ms();
        rows.push_back(std::move(r));
      }
    }
  }
  sort_rows(rows);
  return rows;
}

std::vector<fs::path> stage_report(const Workspace& ws) {
  const auto dir = ws.reports_dir();
  if (!fs::exists(dir)) throw MissingArtifactError("no reports directory at " + dir.string());
  std::vector<fs::path> csvs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto& p = entry.path();
    const std::string name = p.filename().string();
    if (p.extension() == ".csv" && name.find(".plot.") == std::string::npos) csvs.push_back(p);
  }
  std::sort(csvs.begin(), csvs.end());
  config::json index = config::json::array();
  for (const auto& p : csvs) {
    const auto rows = read_report(p);
    const std::string stem = p.stem().string();
    emit_report(rows, dir, stem);
    index.push_back({{"report", stem}, {"rows", rows.size()}});
  }
  config::write_json(dir / "index.json", index);
  return csvs;
}

}  // namespace tokenrank::bench
