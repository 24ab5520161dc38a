#pragma once

#include <filesystem>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "tokenrank/clip.hpp"
#include "tokenrank/data.hpp"
#include "tokenrank/golden.hpp"
#include "tokenrank/nn/errors.hpp"
#include "tokenrank/predictor.hpp"
#include "tokenrank/prompt.hpp"

namespace tokenrank::config {

using json = nlohmann::ordered_json;

/// ConfigError when the file is missing or not valid JSON.
json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& j);

/// Reads optional keys from one JSON object; finish() rejects unknown keys.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where);

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  const json* child(const std::string& key);
  std::string path(const std::string& key) const { return where_ + "." + key; }
  void finish() const;

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json to_json(const data::SyntheticConfig& c);
data::SyntheticConfig synthetic_config_from_json(const json& j, const std::string& where = "data");

json to_json(const clip::ModelConfig& c);
clip::ModelConfig model_config_from_json(const json& j, const std::string& where = "model");

json to_json(const clip::PretrainConfig& c);
clip::PretrainConfig pretrain_config_from_json(const json& j, const std::string& where = "pretrain");

json to_json(const golden::GoldenConfig& c);
golden::GoldenConfig golden_config_from_json(const json& j, const std::string& where = "golden");

json to_json(const predictor::PredictorConfig& c);
predictor::PredictorConfig predictor_config_from_json(const json& j, const std::string& where = "predictor");

json to_json(const prompt::TuneConfig& c);
prompt::TuneConfig tune_config_from_json(const json& j, const std::string& where = "tune");

}  // namespace tokenrank::config
