#include "tokenrank/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <unordered_set>

#include "tokenrank/nn/errors.hpp"
#include "tokenrank/nn/tensor_io.hpp"

namespace tokenrank::data {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

using Rgb = std::array<float, 3>;

constexpr float kBackgroundGray = 0.5F;
constexpr float kTextureOff = 0.08F;

// Two hue families; `variant` picks one and rotates the texture assignment.
constexpr std::array<Rgb, 8> kPaletteA = {{{0.95F, 0.10F, 0.10F},
                                           {0.10F, 0.85F, 0.15F},
                                           {0.15F, 0.25F, 0.95F},
                                           {0.95F, 0.90F, 0.10F},
                                           {0.90F, 0.15F, 0.85F},
                                           {0.10F, 0.90F, 0.90F},
                                           {0.95F, 0.55F, 0.05F},
                                           {0.55F, 0.10F, 0.95F}}};
constexpr std::array<Rgb, 8> kPaletteB = {{{0.60F, 0.95F, 0.30F},
                                           {0.95F, 0.35F, 0.55F},
                                           {0.30F, 0.60F, 0.95F},
                                           {0.95F, 0.75F, 0.45F},
                                           {0.45F, 0.95F, 0.70F},
                                           {0.75F, 0.45F, 0.95F},
                                           {0.95F, 0.95F, 0.95F},
                                           {0.35F, 0.35F, 0.35F}}};

Rgb class_hue(std::size_t cls, std::uint32_t variant) {
  const auto& palette = (variant % 2 == 0) ? kPaletteA : kPaletteB;
  const Rgb base = palette[cls % palette.size()];
  if (cls < palette.size()) return base;
  // Beyond eight classes, darken successive palette rounds.
  const float shade = 1.0F / static_cast<float>(1 + cls / palette.size());
  return {base[0] * shade, base[1] * shade, base[2] * shade};
}

// Texture predicate over pixel coordinates inside the glyph block.
bool texture_on(std::size_t cls, std::uint32_t variant, std::size_t y, std::size_t x) {
  switch ((cls + variant) % 4) {
    case 0:
      return y % 2 == 0;  // horizontal stripes
    case 1:
      return x % 2 == 0;  // vertical stripes
    case 2:
      return (x + y) % 2 == 0;  // checkerboard
    default:
      return (x + y) % 4 < 2;  // diagonal bands
  }
}

std::size_t split_size(const SyntheticConfig& c, SplitRole role) {
  switch (role) {
    case SplitRole::kPretrain:
      return c.images_per_class;
    case SplitRole::kPredictorTrain:
      return c.predictor_per_class;
    case SplitRole::kTuneTrain:
      return c.tune_per_class;
    case SplitRole::kTest:
      return c.test_per_class;
  }
  return 0;
}

void validate(const SyntheticConfig& c) {
  if (c.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (c.grid < 4) throw ConfigError("grid (patches per side) must be at least 4");
  if (c.patch == 0) throw ConfigError("patch size must be positive");
  if (c.glyph == 0 || c.glyph > c.grid) {
    throw ConfigError("glyph of " + std::to_string(c.glyph) + " patches does not fit a " + std::to_string(c.grid) +
                      "x" + std::to_string(c.grid) + " grid");
  }
  if (c.glyph == c.grid) throw ConfigError("glyph may not cover the whole grid");
  if (c.noise_level < 0.0F) throw ConfigError("noise_level must be non-negative");
  if (c.clutter_prob < 0.0F || c.clutter_prob > 1.0F) throw ConfigError("clutter_prob must lie in [0, 1]");
}

float clamp01(float v) { return std::clamp(v, 0.0F, 1.0F); }

SyntheticImage render(const SyntheticConfig& c, std::size_t label, SeededRng& rng) {
  const std::size_t side = c.grid * c.patch;
  SyntheticImage img;
  img.label = label;
  img.pixels = Tensor({3, side, side});
  img.foreground_mask.assign(c.grid * c.grid, 0);

  const std::size_t positions = c.grid - c.glyph + 1;
  const std::size_t top = rng.below(positions);
  const std::size_t left = rng.below(positions);
  for (std::size_t r = top; r < top + c.glyph; ++r) {
    for (std::size_t col = left; col < left + c.glyph; ++col) img.foreground_mask[r * c.grid + col] = 1;
  }

  const Rgb hue = class_hue(label, c.variant);
  for (std::size_t pr = 0; pr < c.grid; ++pr) {
    for (std::size_t pc = 0; pc < c.grid; ++pc) {
      const bool glyph = img.foreground_mask[pr * c.grid + pc] != 0;
      Rgb flat = {kBackgroundGray, kBackgroundGray, kBackgroundGray};
      if (!glyph && rng.uniform() < c.clutter_prob) flat = class_hue(rng.below(c.num_classes), c.variant);
      for (std::size_t y = 0; y < c.patch; ++y) {
        for (std::size_t x = 0; x < c.patch; ++x) {
          const std::size_t py = pr * c.patch + y;
          const std::size_t px = pc * c.patch + x;
          Rgb colour = flat;
          if (glyph) {
            const bool on = texture_on(label, c.variant, py - top * c.patch, px - left * c.patch);
            colour = on ? hue : Rgb{kTextureOff, kTextureOff, kTextureOff};
          }
          for (std::size_t ch = 0; ch < 3; ++ch) {
            const float noise = c.noise_level > 0.0F ? static_cast<float>(rng.normal(0.0, c.noise_level)) : 0.0F;
            img.pixels[(ch * side + py) * side + px] = clamp01(colour[ch] + noise);
          }
        }
      }
    }
  }
  return img;
}

std::uint64_t content_hash(const SyntheticImage& img) {
  std::uint64_t h = 1469598103934665603ULL ^ img.label;
  for (float v : img.pixels.values()) {
    h ^= std::bit_cast<std::uint32_t>(v);
    h *= 1099511628211ULL;
  }
  return h;
}

ordered_json read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("manifest not found: " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

template <typename T>
T field(const ordered_json& j, const char* name, const fs::path& where) {
  if (!j.contains(name)) throw ParseError(where.string() + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(where.string() + ": field '" + name + "' has the wrong type");
  }
}

}  // namespace

std::string to_string(SplitRole role) {
  switch (role) {
    case SplitRole::kPretrain:
      return "pretrain";
    case SplitRole::kPredictorTrain:
      return "predictor_train";
    case SplitRole::kTuneTrain:
      return "tune_train";
    case SplitRole::kTest:
      return "test";
  }
  return "unknown";
}

SplitRole parse_split_role(const std::string& name) {
  for (auto role : {SplitRole::kPretrain, SplitRole::kPredictorTrain, SplitRole::kTuneTrain, SplitRole::kTest}) {
    if (to_string(role) == name) return role;
  }
  throw ParseError("unknown split role '" + name + "'");
}

const DatasetSplit& Dataset::split(SplitRole role) const {
  switch (role) {
    case SplitRole::kPretrain:
      return pretrain;
    case SplitRole::kPredictorTrain:
      return predictor_train;
    case SplitRole::kTuneTrain:
      return tune_train;
    case SplitRole::kTest:
      return test;
  }
  return test;
}

std::vector<std::string> default_class_names(std::size_t num_classes) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < num_classes; ++i) names.push_back("glyph" + std::to_string(i));
  return names;
}

Dataset generate_synthetic(const SyntheticConfig& config, const SeededRng& rng) {
  validate(config);
  Dataset ds;
  ds.config = config;
  std::unordered_set<std::uint64_t> seen;
  std::uint64_t next_id = 0;
  const auto names = default_class_names(config.num_classes);
  const std::array roles = {SplitRole::kPretrain, SplitRole::kPredictorTrain, SplitRole::kTuneTrain, SplitRole::kTest};
  std::array<DatasetSplit*, 4> targets = {&ds.pretrain, &ds.predictor_train, &ds.tune_train, &ds.test};
  for (std::size_t s = 0; s < roles.size(); ++s) {
    DatasetSplit& split = *targets[s];
    split.role = roles[s];
    split.class_names = names;
    split.grid = config.grid;
    split.patch = config.patch;
    SeededRng stream = rng.fork(static_cast<std::uint64_t>(s) + 1);
    const std::size_t per_class = split_size(config, roles[s]);
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t cls = 0; cls < config.num_classes; ++cls) {
        // Resample on content collision so splits stay disjoint even without noise.
        constexpr int kMaxAttempts = 64;
        int attempt = 0;
        SyntheticImage img = render(config, cls, stream);
        while (!seen.insert(content_hash(img)).second) {
          if (++attempt >= kMaxAttempts) {
            throw ConfigError("cannot draw enough distinct images for class " + names[cls] +
                              "; raise noise_level or lower images per class");
          }
          img = render(config, cls, stream);
        }
        img.id = next_id++;
        split.examples.push_back(std::move(img));
      }
    }
  }
  return ds;
}

TokenGrid patchify(const Tensor& pixels, std::size_t patch) {
  if (pixels.rank() != 3) throw ShapeError("patchify expects [C,H,W] pixels, got " + nn::shape_str(pixels.shape()));
  const std::size_t channels = pixels.dim(0);
  const std::size_t h = pixels.dim(1);
  const std::size_t w = pixels.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch size " +
                     std::to_string(patch));
  }
  if (h != w) throw ShapeError("patchify expects square images");
  const std::size_t side = h / patch;
  const std::size_t d_in = channels * patch * patch;
  TokenGrid grid{Tensor({side * side, d_in}), side};
  for (std::size_t t = 0; t < side * side; ++t) {
    const std::size_t pr = t / side;
    const std::size_t pc = t % side;
    float* dst = grid.tokens.data() + t * d_in;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          *dst++ = pixels[(ch * h + pr * patch + y) * w + pc * patch + x];
        }
      }
    }
  }
  return grid;
}

TokenGrid patchify(const SyntheticImage& image, std::size_t patch) { return patchify(image.pixels, patch); }

Tensor unpatchify(const TokenGrid& grid, std::size_t patch, std::size_t channels) {
  const std::size_t side = grid.grid_side;
  const std::size_t d_in = channels * patch * patch;
  if (grid.tokens.rank() != 2 || grid.tokens.dim(0) != side * side || grid.tokens.dim(1) != d_in) {
    throw ShapeError("unpatchify: tokens " + nn::shape_str(grid.tokens.shape()) + " inconsistent with grid side " +
                     std::to_string(side) + " and patch " + std::to_string(patch));
  }
  const std::size_t h = side * patch;
  Tensor pixels({channels, h, h});
  for (std::size_t t = 0; t < side * side; ++t) {
    const std::size_t pr = t / side;
    const std::size_t pc = t % side;
    const float* src = grid.tokens.data() + t * d_in;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) pixels[(ch * h + pr * patch + y) * h + pc * patch + x] = *src++;
      }
    }
  }
  return pixels;
}

DatasetSplit few_shot_sample(const DatasetSplit& split, std::size_t shots, const SeededRng& rng) {
  if (shots == 0) throw UsageError("few_shot_sample needs at least one shot per class");
  const std::size_t classes = split.class_names.size();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < split.examples.size(); ++i) {
    const std::size_t label = split.examples[i].label;
    if (label >= classes) throw LogicError("example label " + std::to_string(label) + " exceeds class count");
    by_class[label].push_back(i);
  }
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].size() < shots) {
      throw UsageError("class '" + split.class_names[c] + "' has " + std::to_string(by_class[c].size()) +
                       " examples, fewer than the " + std::to_string(shots) + " shots requested");
    }
    SeededRng stream = rng.fork(c);
    const auto perm = stream.permutation(by_class[c].size());
    for (std::size_t k = 0; k < shots; ++k) chosen.push_back(by_class[c][perm[k]]);
  }
  std::sort(chosen.begin(), chosen.end());
  DatasetSplit out;
  out.role = split.role;
  out.class_names = split.class_names;
  out.grid = split.grid;
  out.patch = split.patch;
  for (auto i : chosen) out.examples.push_back(split.examples[i]);
  return out;
}

void save_split(const fs::path& dir, const DatasetSplit& split) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["role"] = to_string(split.role);
  manifest["class_names"] = split.class_names;
  manifest["count"] = split.examples.size();
  manifest["grid"] = split.grid;
  manifest["patch"] = split.patch;
  std::vector<std::uint64_t> ids;
  for (const auto& ex : split.examples) ids.push_back(ex.id);
  manifest["ids"] = ids;

  if (!split.examples.empty()) {
    const std::size_t n = split.examples.size();
    const auto& shape = split.examples.front().pixels.shape();
    const std::size_t per_image = nn::shape_numel(shape);
    const std::size_t cells = split.grid * split.grid;
    nn::Shape pix_shape = {n};
    pix_shape.insert(pix_shape.end(), shape.begin(), shape.end());
    Tensor pixels(pix_shape);
    Tensor labels({n});
    Tensor masks({n, cells});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ex = split.examples[i];
      if (ex.pixels.shape() != shape || ex.foreground_mask.size() != cells) {
        throw ShapeError("save_split: example " + std::to_string(i) + " has inconsistent geometry");
      }
      std::copy_n(ex.pixels.data(), per_image, pixels.data() + i * per_image);
      labels[i] = static_cast<float>(ex.label);
      for (std::size_t c = 0; c < cells; ++c) masks[i * cells + c] = ex.foreground_mask[c];
    }
    nn::write_tensor(dir / "pixels", pixels);
    nn::write_tensor(dir / "labels", labels);
    nn::write_tensor(dir / "masks", masks);
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

DatasetSplit load_split(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  const ordered_json manifest = read_manifest(path);
  DatasetSplit split;
  split.role = parse_split_role(field<std::string>(manifest, "role", path));
  split.class_names = field<std::vector<std::string>>(manifest, "class_names", path);
  const auto count = field<std::size_t>(manifest, "count", path);
  split.grid = field<std::size_t>(manifest, "grid", path);
  split.patch = field<std::size_t>(manifest, "patch", path);
  const auto ids = field<std::vector<std::uint64_t>>(manifest, "ids", path);
  if (ids.size() != count) throw ParseError(path.string() + ": field 'ids' has " + std::to_string(ids.size()) + " entries, expected " + std::to_string(count));
  if (count == 0) return split;

  const Tensor pixels = nn::read_tensor(dir / "pixels");
  const Tensor labels = nn::read_tensor(dir / "labels");
  const Tensor masks = nn::read_tensor(dir / "masks");
  const std::size_t cells = split.grid * split.grid;
  if (pixels.rank() != 4 || pixels.dim(0) != count || labels.numel() != count || masks.numel() != count * cells) {
    throw ParseError(path.string() + ": tensor shapes disagree with field 'count'");
  }
  const nn::Shape image_shape(pixels.shape().begin() + 1, pixels.shape().end());
  const std::size_t per_image = nn::shape_numel(image_shape);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticImage ex;
    ex.pixels = Tensor(image_shape);
    std::copy_n(pixels.data() + i * per_image, per_image, ex.pixels.data());
    const float label = labels[i];
    if (label < 0.0F || label != std::floor(label) || static_cast<std::size_t>(label) >= split.class_names.size()) {
      throw ParseError(path.string() + ": label " + std::to_string(label) + " of example " + std::to_string(i) + " is invalid");
    }
    ex.label = static_cast<std::size_t>(label);
    ex.foreground_mask.resize(cells);
    for (std::size_t c = 0; c < cells; ++c) ex.foreground_mask[c] = masks[i * cells + c] != 0.0F ? 1 : 0;
    ex.id = ids[i];
    split.examples.push_back(std::move(ex));
  }
  return split;
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  const auto& c = ds.config;
  ordered_json manifest;
  manifest["class_names"] = ds.pretrain.class_names;
  manifest["geometry"] = {{"grid", c.grid}, {"patch", c.patch}, {"glyph", c.glyph}, {"channels", 3}};
  manifest["config"] = {{"num_classes", c.num_classes},       {"images_per_class", c.images_per_class},
                        {"predictor_per_class", c.predictor_per_class}, {"tune_per_class", c.tune_per_class},
                        {"test_per_class", c.test_per_class}, {"noise_level", c.noise_level},
                        {"clutter_prob", c.clutter_prob},     {"variant", c.variant}};
  ordered_json counts;
  for (auto role : {SplitRole::kPretrain, SplitRole::kPredictorTrain, SplitRole::kTuneTrain, SplitRole::kTest}) {
    counts[to_string(role)] = ds.split(role).size();
    save_split(dir / to_string(role), ds.split(role));
  }
  manifest["counts"] = counts;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  const ordered_json manifest = read_manifest(path);
  if (!manifest.contains("config") || !manifest["config"].is_object()) throw ParseError(path.string() + ": missing field 'config'");
  if (!manifest.contains("geometry") || !manifest["geometry"].is_object()) throw ParseError(path.string() + ": missing field 'geometry'");
  const auto& cfg = manifest["config"];
  const auto& geo = manifest["geometry"];
  Dataset ds;
  ds.config.num_classes = field<std::size_t>(cfg, "num_classes", path);
  ds.config.images_per_class = field<std::size_t>(cfg, "images_per_class", path);
  ds.config.predictor_per_class = field<std::size_t>(cfg, "predictor_per_class", path);
  ds.config.tune_per_class = field<std::size_t>(cfg, "tune_per_class", path);
  ds.config.test_per_class = field<std::size_t>(cfg, "test_per_class", path);
  ds.config.noise_level = field<float>(cfg, "noise_level", path);
  ds.config.clutter_prob = field<float>(cfg, "clutter_prob", path);
  ds.config.variant = field<std::uint32_t>(cfg, "variant", path);
  ds.config.grid = field<std::size_t>(geo, "grid", path);
  ds.config.patch = field<std::size_t>(geo, "patch", path);
  ds.config.glyph = field<std::size_t>(geo, "glyph", path);
  ds.pretrain = load_split(dir / "pretrain");
  ds.predictor_train = load_split(dir / "predictor_train");
  ds.tune_train = load_split(dir / "tune_train");
  ds.test = load_split(dir / "test");
  return ds;
}

Tensor class_glyph_means(const DatasetSplit& split) {
  const std::size_t classes = split.class_names.size();
  const std::size_t d_in = 3 * split.patch * split.patch;
  Tensor sums({classes, d_in});
  std::vector<std::size_t> counts(classes, 0);
  for (const auto& ex : split.examples) {
    const TokenGrid grid = patchify(ex, split.patch);
    for (std::size_t t = 0; t < ex.foreground_mask.size(); ++t) {
      if (ex.foreground_mask[t] == 0) continue;
      for (std::size_t j = 0; j < d_in; ++j) sums.at(ex.label, j) += grid.tokens.at(t, j);
      ++counts[ex.label];
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < d_in; ++j) sums.at(c, j) /= static_cast<float>(counts[c]);
  }
  return sums;
}

float background_pixel_std(const DatasetSplit& split) {
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& ex : split.examples) {
    const TokenGrid grid = patchify(ex, split.patch);
    const std::size_t d_in = grid.tokens.dim(1);
    const std::size_t per_channel = split.patch * split.patch;
    for (std::size_t t = 0; t < ex.foreground_mask.size(); ++t) {
      if (ex.foreground_mask[t] != 0) continue;
      for (std::size_t ch = 0; ch < d_in / per_channel; ++ch) {
        const float* v = grid.tokens.data() + t * d_in + ch * per_channel;
        double mean = 0.0;
        for (std::size_t j = 0; j < per_channel; ++j) mean += v[j];
        mean /= static_cast<double>(per_channel);
        for (std::size_t j = 0; j < per_channel; ++j) sq += (v[j] - mean) * (v[j] - mean);
        n += per_channel;
      }
    }
  }
  return n == 0 ? 0.0F : static_cast<float>(std::sqrt(sq / static_cast<double>(n)));
}

}  // namespace tokenrank::data
