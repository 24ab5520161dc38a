#include "tokenrank/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>

namespace tokenrank::config {

namespace fs = std::filesystem;

namespace {

// shortest decimal that reads back as the same float
double num(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  *res.ptr = '\0';
  return std::strtod(buf, nullptr);
}

}  // namespace

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

ObjectReader::ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
  if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
}

const json* ObjectReader::child(const std::string& key) {
  if (!j_.contains(key)) return nullptr;
  used_.insert(key);
  return &j_.at(key);
}

void ObjectReader::finish() const {
  for (const auto& [key, value] : j_.items()) {
    if (!used_.count(key)) throw ConfigError("unknown key " + where_ + "." + key);
  }
}

json to_json(const data::SyntheticConfig& c) {
  return {{"num_classes", c.num_classes},     {"images_per_class", c.images_per_class},
          {"predictor_per_class", c.predictor_per_class}, {"tune_per_class", c.tune_per_class},
          {"test_per_class", c.test_per_class}, {"grid", c.grid},
          {"patch", c.patch},                 {"glyph", c.glyph},
          {"noise_level", num(c.noise_level)},     {"clutter_prob", num(c.clutter_prob)},
          {"variant", c.variant}};
}

data::SyntheticConfig synthetic_config_from_json(const json& j, const std::string& where) {
  data::SyntheticConfig c;
  ObjectReader r(j, where);
  r.get("num_classes", c.num_classes);
  r.get("images_per_class", c.images_per_class);
  r.get("predictor_per_class", c.predictor_per_class);
  r.get("tune_per_class", c.tune_per_class);
  r.get("test_per_class", c.test_per_class);
  r.get("grid", c.grid);
  r.get("patch", c.patch);
  r.get("glyph", c.glyph);
  r.get("noise_level", c.noise_level);
  r.get("clutter_prob", c.clutter_prob);
  r.get("variant", c.variant);
  r.finish();
  return c;
}

json to_json(const clip::ModelConfig& c) {
  const auto& v = c.vision;
  const auto& t = c.text;
  return {{"vision",
           {{"layers", v.layers},
            {"dim", v.dim},
            {"heads", v.heads},
            {"mlp_ratio", v.mlp_ratio},
            {"patches", v.patches},
            {"patch_dim", v.patch_dim}}},
          {"text",
           {{"layers", t.layers},
            {"dim", t.dim},
            {"heads", t.heads},
            {"mlp_ratio", t.mlp_ratio},
            {"max_len", t.max_len},
            {"class_names", t.class_names}}},
          {"embed_dim", c.embed_dim},
          {"init_log_logit_scale", num(c.init_log_logit_scale)},
          {"max_logit_scale", num(c.max_logit_scale)}};
}

clip::ModelConfig model_config_from_json(const json& j, const std::string& where) {
  clip::ModelConfig c;
  ObjectReader r(j, where);
  if (const json* v = r.child("vision")) {
    ObjectReader rv(*v, r.path("vision"));
    rv.get("layers", c.vision.layers);
    rv.get("dim", c.vision.dim);
    rv.get("heads", c.vision.heads);
    rv.get("mlp_ratio", c.vision.mlp_ratio);
    rv.get("patches", c.vision.patches);
    rv.get("patch_dim", c.vision.patch_dim);
    rv.finish();
  }
  if (const json* t = r.child("text")) {
    ObjectReader rt(*t, r.path("text"));
    rt.get("layers", c.text.layers);
    rt.get("dim", c.text.dim);
    rt.get("heads", c.text.heads);
    rt.get("mlp_ratio", c.text.mlp_ratio);
    rt.get("max_len", c.text.max_len);
    rt.get("class_names", c.text.class_names);
    rt.finish();
  }
  r.get("embed_dim", c.embed_dim);
  r.get("init_log_logit_scale", c.init_log_logit_scale);
  r.get("max_logit_scale", c.max_logit_scale);
  r.finish();
  return c;
}

json to_json(const clip::PretrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_classes", c.batch_classes}, {"lr", num(c.lr)}};
}

clip::PretrainConfig pretrain_config_from_json(const json& j, const std::string& where) {
  clip::PretrainConfig c;
  ObjectReader r(j, where);
  r.get("epochs", c.epochs);
  r.get("batch_classes", c.batch_classes);
  r.get("lr", c.lr);
  r.finish();
  if (!(c.lr > 0.0F)) throw ConfigError(where + ".lr must be positive");
  return c;
}

json to_json(const golden::GoldenConfig& c) {
  return {{"kind", golden::to_string(c.kind)},
          {"r", c.r},
          {"stride", c.stride},
          {"prune_layer", c.prune_layer},
          {"area_norm", c.area_norm},
          {"batched", c.batched},
          {"batch_windows", c.batch_windows}};
}

golden::GoldenConfig golden_config_from_json(const json& j, const std::string& where) {
  golden::GoldenConfig c;
  ObjectReader r(j, where);
  std::string kind = golden::to_string(c.kind);
  r.get("kind", kind);
  c.kind = golden::parse_score_kind(kind);
  r.get("r", c.r);
  r.get("stride", c.stride);
  r.get("prune_layer", c.prune_layer);
  r.get("area_norm", c.area_norm);
  r.get("batched", c.batched);
  r.get("batch_windows", c.batch_windows);
  r.finish();
  return c;
}

json to_json(const predictor::PredictorConfig& c) {
  return {{"arch", predictor::to_string(c.arch)},
          {"attach_layer", c.attach_layer},
          {"epochs", c.epochs},
          {"optimizer", nn::to_string(c.optim.kind)},
          {"lr", num(c.optim.lr)},
          {"mlp_hidden", c.mlp_hidden},
          {"heads", c.heads},
          {"loss", predictor::to_string(c.loss)}};
}

predictor::PredictorConfig predictor_config_from_json(const json& j, const std::string& where) {
  predictor::PredictorConfig c;
  ObjectReader r(j, where);
  std::string arch = predictor::to_string(c.arch);
  std::string opt = nn::to_string(c.optim.kind);
  r.get("arch", arch);
  r.get("attach_layer", c.attach_layer);
  r.get("epochs", c.epochs);
  r.get("optimizer", opt);
  r.get("lr", c.optim.lr);
  r.get("mlp_hidden", c.mlp_hidden);
  r.get("heads", c.heads);
  std::string loss = predictor::to_string(c.loss);
  r.get("loss", loss);
  r.finish();
  c.loss = predictor::parse_loss_kind(loss);
  c.arch = predictor::parse_arch(arch);
  c.optim.kind = nn::parse_optimizer_kind(opt);
  if (!(c.optim.lr > 0.0F)) throw ConfigError(where + ".lr must be positive");
  return c;
}

json to_json(const prompt::TuneConfig& c) {
  return {{"shots", c.shots},   {"b", c.b},
          {"epochs", c.epochs}, {"lr", num(c.lr)},
          {"batch_size", c.batch_size}, {"mode", prompt::to_string(c.mode)}};
}

prompt::TuneConfig tune_config_from_json(const json& j, const std::string& where) {
  prompt::TuneConfig c;
  ObjectReader r(j, where);
  std::string mode = prompt::to_string(c.mode);
  r.get("shots", c.shots);
  r.get("b", c.b);
  r.get("epochs", c.epochs);
  r.get("lr", c.lr);
  r.get("batch_size", c.batch_size);
  r.get("mode", mode);
  r.finish();
  c.mode = prompt::parse_tune_mode(mode);
  if (c.shots == 0) throw ConfigError(where + ".shots must be at least 1");
  if (!(c.lr > 0.0F)) throw ConfigError(where + ".lr must be positive");
  return c;
}

}  // namespace tokenrank::config
