#pragma once

#include "spon/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

// Shared helpers for the JSON artifacts every stage reads and writes.
namespace spon {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

std::uint32_t crc32(std::span<const unsigned char> bytes);
std::uint32_t crc32(std::string_view bytes);
// Eight lowercase hex digits of the CRC32 of `bytes`.
std::string fingerprint(std::string_view bytes);
std::string json_fingerprint(const Json& j);

Json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const Json& j);

Json site_to_json(const LinearSite& site);
LinearSite site_from_json(const Json& j);

Json tensor_to_json(const Tensor& t);              // flat array of floats
Tensor tensor_from_json(const Json& j, Shape shape);

// New artifact object with "schema_version" and "kind" set.
Json make_artifact(std::string_view kind);
// Throws FormatError unless `j` is an object of the given kind and schema version.
void check_artifact(const Json& j, std::string_view kind);

// Two-space indented dump with trailing newline.
std::string dump(const Json& j);
Json read_json_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace spon
