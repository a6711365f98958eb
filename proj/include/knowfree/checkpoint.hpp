#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knowfree/span_model.hpp"

namespace knowfree {

// Binary tensor file: "KFTENSOR" magic, u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rows, u32 cols, rows*cols little-endian
// IEEE-754 doubles in row-major order.
struct NamedTensor {
  std::string name;
  Matrix value;
};

void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::filesystem::path& path);

// Manifest describing how to rebuild the model: configs, label vocabulary,
// token vocabulary and tokenizer mode.
nlohmann::json model_manifest(SpanModel& model);

// Writes `<base>.ckpt` (tensors) and `<base>.json` (manifest).
void save_model(SpanModel& model, const std::filesystem::path& base);
std::unique_ptr<SpanModel> load_model(const std::filesystem::path& base);

}  // namespace knowfree
