#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "seqdet/common.hpp"
#include "seqdet/config.hpp"
#include "seqdet/params.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

// Checkpoint layout (text sections, then binary tensor records):
//   SEQDET-CKPT v1
//   [config]   canonical key = value lines
//   [state]    step / epoch counters
//   [metrics]  free-form history lines, kept verbatim
//   [tensors]  record count, then name/shape headers with f32 payloads
// The writer emits parameters in their registration order and the config in
// its canonical field order, so save -> load -> save is byte-identical.
inline constexpr const char* kCheckpointMagic = "SEQDET-CKPT v1";

struct CheckpointMeta {
  ModelConfig config;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::vector<std::string> metric_lines;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const CheckpointMeta& meta, const ParamStore<T>& ps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kCheckpointMagic << "\n";
  out << "[config]\n" << serialize_config(meta.config);
  out << "[state]\n";
  out << "step = " << meta.step << "\n";
  out << "epoch = " << meta.epoch << "\n";
  out << "[metrics]\n";
  for (const auto& line : meta.metric_lines) out << line << "\n";
  out << "[tensors]\n";
  out << ps.items().size() << "\n";
  for (const auto& [name, tensor] : ps.items()) dump_tensor(out, name, tensor);
  if (!out) throw IoError("short write to " + path.string());
}

// Reads just the config section, enough to construct a matching model.
inline ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic)
    throw IoError(path.string() + ": not a checkpoint file");
  if (!std::getline(in, line) || line != "[config]")
    throw IoError(path.string() + ": expected [config] section");
  std::string config_text;
  while (std::getline(in, line)) {
    if (line == "[state]") return parse_config(config_text);
    config_text += line + "\n";
  }
  throw IoError(path.string() + ": missing [state] section");
}

// Reads the metadata sections and loads every tensor record into ps, which
// must already hold parameters of matching names and shapes (i.e. a model
// built from the same config).
template <typename T>
CheckpointMeta load_checkpoint(const std::filesystem::path& path,
                               ParamStore<T>& ps) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic)
    throw IoError(path.string() + ": not a checkpoint file");

  auto expect = [&](const char* section) {
    if (!std::getline(in, line) || line != section)
      throw IoError(path.string() + ": expected " + section + " section");
  };

  CheckpointMeta meta;
  expect("[config]");
  std::string config_text;
  while (std::getline(in, line)) {
    if (line == "[state]") break;
    config_text += line + "\n";
  }
  meta.config = parse_config(config_text);

  while (std::getline(in, line)) {
    if (line == "[metrics]") break;
    std::istringstream ls(line);
    std::string key, eq, value;
    if (!(ls >> key >> eq >> value) || eq != "=")
      throw IoError(path.string() + ": malformed state line '" + line + "'");
    if (key == "step")
      meta.step = std::stoull(value);
    else if (key == "epoch")
      meta.epoch = std::stoull(value);
    else
      throw IoError(path.string() + ": unknown state key '" + key + "'");
  }

  while (std::getline(in, line)) {
    if (line == "[tensors]") break;
    meta.metric_lines.push_back(line);
  }

  if (!std::getline(in, line))
    throw IoError(path.string() + ": missing tensor count");
  std::size_t count = std::stoull(line);
  if (count != ps.items().size())
    throw IoError(path.string() + ": checkpoint has " + std::to_string(count) +
                  " tensors, model expects " +
                  std::to_string(ps.items().size()));
  for (std::size_t i = 0; i < count; ++i) {
    auto rec = read_dump_record(in);
    if (!ps.has(rec.name))
      throw IoError(path.string() + ": unknown tensor '" + rec.name + "'");
    auto dst = ps.get(rec.name);  // handle shares the stored node
    if (rec.shape != dst.shape())
      throw ShapeError("tensor '" + rec.name + "': checkpoint shape " +
                       shape_str(rec.shape) + " does not match model shape " +
                       shape_str(dst.shape()));
    auto& w = dst.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = T(rec.data[j]);
  }
  return meta;
}

}  // namespace seqdet
