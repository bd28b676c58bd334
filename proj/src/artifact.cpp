#include "spon/artifact.hpp"

#include "spon/error.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <iterator>

namespace spon {

std::uint32_t crc32(std::span<const unsigned char> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = ::crc32(crc, bytes.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32(std::string_view bytes) {
    return crc32(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
}

std::string fingerprint(std::string_view bytes) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc32(bytes));
    return buf;
}

std::string json_fingerprint(const Json& j) { return fingerprint(std::string_view(j.dump())); }

Json config_to_json(const ModelConfig& c) {
    Json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_ff"] = c.d_ff;
    j["context_len"] = c.context_len;
    j["rms_eps"] = c.rms_eps;
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const Json& j) {
    try {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.context_len = j.at("context_len").get<std::size_t>();
        c.rms_eps = j.at("rms_eps").get<float>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config: ") + e.what());
    }
}

Json site_to_json(const LinearSite& site) {
    Json j;
    j["layer"] = site.layer;
    j["site"] = std::string(site_kind_name(site.kind));
    return j;
}

LinearSite site_from_json(const Json& j) {
    try {
        return LinearSite{j.at("layer").get<std::size_t>(), parse_site_kind(j.at("site").get<std::string>())};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad site entry: ") + e.what());
    }
}

Json tensor_to_json(const Tensor& t) {
    Json arr = Json::array();
    for (float v : t.data()) arr.push_back(v);
    return arr;
}

Tensor tensor_from_json(const Json& j, Shape shape) {
    if (!j.is_array() || j.size() != shape_numel(shape))
        throw FormatError("vector of " + std::to_string(shape_numel(shape)) + " floats expected");
    std::vector<float> data;
    data.reserve(j.size());
    for (const Json& v : j) {
        if (!v.is_number()) throw FormatError("non-numeric vector entry");
        data.push_back(v.get<float>());
    }
    return Tensor(std::move(shape), std::move(data));
}

Json make_artifact(std::string_view kind) {
    Json j;
    j["schema_version"] = kSchemaVersion;
    j["kind"] = std::string(kind);
    return j;
}

void check_artifact(const Json& j, std::string_view kind) {
    if (!j.is_object()) throw FormatError("artifact is not a JSON object");
    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
        throw FormatError("artifact has no schema_version");
    if (j["schema_version"].get<int>() != kSchemaVersion)
        throw FormatError("unsupported schema_version " + j["schema_version"].dump() + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
    if (!j.contains("kind") || j["kind"] != kind)
        throw FormatError("expected a '" + std::string(kind) + "' artifact, got " +
                          (j.contains("kind") ? j["kind"].dump() : std::string("no kind")));
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read '" + path.string() + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Json read_json_file(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("write to '" + path.string() + "' failed");
}

}  // namespace spon
