#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tokenrank/nn/rng.hpp"
#include "tokenrank/nn/tensor.hpp"

namespace tokenrank::data {

using nn::SeededRng;
using nn::Tensor;

/// Geometry and content knobs for the synthetic glyph datasets.
///
/// Each image is a P x P grid of p x p pixel patches over a noisy gray
/// background. A g x g block of patches holds the class glyph: the class hue
/// laid out in a class-specific texture. Background patches may carry flat
/// "clutter" colors drawn from the same hue palette; they never carry texture.
struct SyntheticConfig {
  std::size_t num_classes = 8;
  std::size_t images_per_class = 48;  ///< pretrain split
  std::size_t predictor_per_class = 24;
  std::size_t tune_per_class = 20;
  std::size_t test_per_class = 25;
  std::size_t grid = 8;   ///< P, patches per side
  std::size_t patch = 4;  ///< p, pixels per patch side
  std::size_t glyph = 3;  ///< glyph side in patches
  float noise_level = 0.04F;
  float clutter_prob = 0.15F;
  /// Selects the hue/texture family; different variants give visually
  /// distinct datasets over the same class count.
  std::uint32_t variant = 0;
};

enum class SplitRole { kPretrain, kPredictorTrain, kTuneTrain, kTest };

std::string to_string(SplitRole role);
SplitRole parse_split_role(const std::string& name);

struct SyntheticImage {
  Tensor pixels;  ///< [3, H, W], values in [0, 1]
  std::size_t label = 0;
  std::vector<std::uint8_t> foreground_mask;  ///< P*P cells, row-major; 1 = glyph patch
  std::uint64_t id = 0;                       ///< unique across all splits of a dataset
};

struct DatasetSplit {
  std::vector<SyntheticImage> examples;
  SplitRole role = SplitRole::kTest;
  std::vector<std::string> class_names;
  std::size_t grid = 8;
  std::size_t patch = 4;

  std::size_t size() const noexcept { return examples.size(); }
};

struct Dataset {
  SyntheticConfig config;
  DatasetSplit pretrain;
  DatasetSplit predictor_train;
  DatasetSplit tune_train;
  DatasetSplit test;

  const DatasetSplit& split(SplitRole role) const;
};

/// Flattened patch tokens. Token t covers grid cell (t / grid_side, t % grid_side)
/// and is laid out channel-major, then row, then column inside the patch.
struct TokenGrid {
  Tensor tokens;  ///< [N, 3 p^2]
  std::size_t grid_side = 0;
};

std::vector<std::string> default_class_names(std::size_t num_classes);

/// Throws ConfigError for num_classes < 2, grid < 4, or a glyph that does not
/// fit the grid (or that would cover every patch).
Dataset generate_synthetic(const SyntheticConfig& config, const SeededRng& rng);

TokenGrid patchify(const SyntheticImage& image, std::size_t patch);
TokenGrid patchify(const Tensor& pixels, std::size_t patch);
Tensor unpatchify(const TokenGrid& grid, std::size_t patch, std::size_t channels = 3);

/// Exactly `shots` examples per class, drawn without replacement and returned
/// in their original split order.
DatasetSplit few_shot_sample(const DatasetSplit& split, std::size_t shots, const SeededRng& rng);

void save_split(const std::filesystem::path& dir, const DatasetSplit& split);
DatasetSplit load_split(const std::filesystem::path& dir);

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Per-class mean of the flattened glyph-patch vectors, [num_classes, 3 p^2].
Tensor class_glyph_means(const DatasetSplit& split);

/// Pooled within-patch pixel standard deviation over background patches
/// (deviation from each patch's own mean, so clutter hue does not count).
float background_pixel_std(const DatasetSplit& split);

}  // namespace tokenrank::data
