#pragma once

#include <nlohmann/json_fwd.hpp>
#include <filesystem>
#include <string>

#include "avattr/tensor.hpp"

namespace avattr::io {

using json = nlohmann::json;

// Arrays are cached as flat little-endian float32 next to a sidecar header
// `<file>.meta.json` carrying shape, dtype and any extra fields (e.g.
// normalization constants).
void write_array(const std::filesystem::path& bin_path, const Tensor<float>& t, const json& extra_meta);
Tensor<float> read_array(const std::filesystem::path& bin_path, json* meta_out = nullptr);

std::vector<json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records);

json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& j);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& content);

}  // namespace avattr::io
