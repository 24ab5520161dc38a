#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tokenrank/nn/autograd.hpp"
#include "tokenrank/nn/tensor.hpp"

namespace tokenrank::nn {

// On-disk tensor: `<stem>.json` holds {"dtype":"f32","shape":[...],
// "byte_order":"little"}; `<stem>.bin` holds little-endian IEEE-754 float32
// values in row-major order.

void write_tensor(const std::filesystem::path& stem, const Tensor& t);
/// Throws ParseError on a malformed header and IoError when the raw file is
/// missing or its size disagrees with the header.
Tensor read_tensor(const std::filesystem::path& stem);

using CheckpointTags = std::map<std::string, std::string>;

/// A checkpoint directory holds one tensor file pair per parameter plus
/// `manifest.json` listing names, shapes and free-form tags.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<const Parameter*>& params,
                     const CheckpointTags& tags = {});
/// Fills `params` by name. Every parameter must be present with a matching
/// shape. Returns the manifest tags.
CheckpointTags load_checkpoint(const std::filesystem::path& dir, const ParameterRefs& params);
CheckpointTags read_checkpoint_tags(const std::filesystem::path& dir);

std::vector<const Parameter*> as_const(const ParameterRefs& params);

}  // namespace tokenrank::nn
