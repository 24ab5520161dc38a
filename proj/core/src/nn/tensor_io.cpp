#include "tokenrank/nn/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "tokenrank/nn/errors.hpp"

namespace tokenrank::nn {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  fs::path p = stem;
  p += suffix;
  return p;
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFU) << 24) | ((v & 0xFF00U) << 8) | ((v >> 8) & 0xFF00U) | (v >> 24);
  }
}

ordered_json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

Shape parse_shape(const ordered_json& j, const std::string& where) {
  if (!j.is_array()) throw ParseError(where + ": field 'shape' must be an array");
  Shape shape;
  for (const auto& d : j) {
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
      throw ParseError(where + ": field 'shape' must hold positive integers");
    }
    shape.push_back(d.get<std::size_t>());
  }
  if (shape.empty()) throw ParseError(where + ": field 'shape' is empty");
  return shape;
}

}  // namespace

void write_tensor(const fs::path& stem, const Tensor& t) {
  ordered_json header;
  header["dtype"] = "f32";
  header["shape"] = t.shape();
  header["byte_order"] = "little";
  write_text_file(with_suffix(stem, ".json"), header.dump() + "\n");

  std::vector<std::uint32_t> raw(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) raw[i] = to_little(std::bit_cast<std::uint32_t>(t[i]));
  std::ofstream out(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + with_suffix(stem, ".bin").string());
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(std::uint32_t)));
  if (!out) throw IoError("write failed for " + with_suffix(stem, ".bin").string());
}

Tensor read_tensor(const fs::path& stem) {
  const fs::path header_path = with_suffix(stem, ".json");
  const ordered_json header = read_json_file(header_path);
  const std::string where = header_path.string();
  if (!header.is_object()) throw ParseError(where + ": header must be an object");
  if (!header.contains("dtype") || header["dtype"] != "f32") throw ParseError(where + ": field 'dtype' must be \"f32\"");
  if (!header.contains("byte_order") || header["byte_order"] != "little") {
    throw ParseError(where + ": field 'byte_order' must be \"little\"");
  }
  if (!header.contains("shape")) throw ParseError(where + ": missing field 'shape'");
  Shape shape = parse_shape(header["shape"], where);
  const std::size_t count = shape_numel(shape);

  const fs::path raw_path = with_suffix(stem, ".bin");
  std::error_code ec;
  const auto bytes = fs::file_size(raw_path, ec);
  if (ec) throw IoError("cannot stat " + raw_path.string());
  if (bytes != count * sizeof(float)) {
    throw IoError(raw_path.string() + ": expected " + std::to_string(count * sizeof(float)) + " bytes for shape " +
                  shape_str(shape) + ", found " + std::to_string(bytes));
  }
  std::vector<std::uint32_t> raw(count);
  std::ifstream in(raw_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + raw_path.string());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  if (in.gcount() != static_cast<std::streamsize>(bytes)) throw IoError("short read from " + raw_path.string());
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = std::bit_cast<float>(to_little(raw[i]));
  return Tensor(std::move(shape), std::move(data));
}

void save_checkpoint(const fs::path& dir, const std::vector<const Parameter*>& params, const CheckpointTags& tags) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "tokenrank-checkpoint";
  manifest["version"] = 1;
  manifest["tags"] = ordered_json::object();
  for (const auto& [k, v] : tags) manifest["tags"][k] = v;
  manifest["parameters"] = ordered_json::array();
  for (const Parameter* p : params) {
    write_tensor(dir / p->name, p->value);
    ordered_json entry;
    entry["name"] = p->name;
    entry["shape"] = p->value.shape();
    manifest["parameters"].push_back(entry);
  }
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

CheckpointTags read_checkpoint_tags(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw MissingArtifactError("checkpoint manifest not found: " + path.string());
  const ordered_json manifest = read_json_file(path);
  CheckpointTags tags;
  if (manifest.contains("tags")) {
    if (!manifest["tags"].is_object()) throw ParseError(path.string() + ": field 'tags' must be an object");
    for (const auto& [k, v] : manifest["tags"].items()) {
      if (!v.is_string()) throw ParseError(path.string() + ": tag '" + k + "' must be a string");
      tags[k] = v.get<std::string>();
    }
  }
  return tags;
}

CheckpointTags load_checkpoint(const fs::path& dir, const ParameterRefs& params) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw MissingArtifactError("checkpoint manifest not found: " + path.string());
  const ordered_json manifest = read_json_file(path);
  if (!manifest.contains("parameters") || !manifest["parameters"].is_array()) {
    throw ParseError(path.string() + ": field 'parameters' must be an array");
  }
  std::map<std::string, Shape> listed;
  for (const auto& entry : manifest["parameters"]) {
    if (!entry.contains("name") || !entry["name"].is_string()) throw ParseError(path.string() + ": parameter entry lacks 'name'");
    if (!entry.contains("shape")) throw ParseError(path.string() + ": parameter entry lacks 'shape'");
    listed[entry["name"].get<std::string>()] = parse_shape(entry["shape"], path.string());
  }
  for (Parameter* p : params) {
    auto it = listed.find(p->name);
    if (it == listed.end()) throw MissingArtifactError(path.string() + ": no parameter named '" + p->name + "'");
    if (it->second != p->value.shape()) {
      throw ShapeError(path.string() + ": parameter '" + p->name + "' has shape " + shape_str(it->second) +
                       ", expected " + shape_str(p->value.shape()));
    }
    Tensor t = read_tensor(dir / p->name);
    if (t.shape() != p->value.shape()) throw ShapeError("tensor file for '" + p->name + "' disagrees with manifest");
    p->value = std::move(t);
    p->zero_grad();
  }
  return read_checkpoint_tags(dir);
}

std::vector<const Parameter*> as_const(const ParameterRefs& params) { return {params.begin(), params.end()}; }

}  // namespace tokenrank::nn
