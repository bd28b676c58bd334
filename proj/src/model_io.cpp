#include "spon/artifact.hpp"
#include "spon/error.hpp"
#include "spon/model.hpp"

#include <bit>
#include <cstring>

namespace spon {

namespace {

static_assert(std::endian::native == std::endian::little, "model files are written little-endian");

constexpr std::string_view kMagic = "SPON1";

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view in, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    return v;
}

}  // namespace

std::string serialize_model(const Model& model) {
    validate_weights(model);
    Json header;
    header["schema_version"] = kSchemaVersion;
    header["config"] = config_to_json(model.config);
    header["folded"] = model.folded;
    Json tensors = Json::object();
    std::string blob;
    for (const auto& [name, t] : model.weights.named_tensors()) {
        if (!t->all_finite()) throw NumericError("tensor '" + name + "' is not finite");
        Json entry;
        entry["shape"] = t->shape();
        entry["offset"] = blob.size();
        entry["length"] = t->numel() * sizeof(float);
        tensors[name] = entry;
        blob.append(reinterpret_cast<const char*>(t->ptr()), t->numel() * sizeof(float));
    }
    header["tensors"] = tensors;
    const std::string head = header.dump();

    std::string out;
    out.reserve(kMagic.size() + 4 + head.size() + blob.size() + 4);
    out.append(kMagic);
    put_u32(out, static_cast<std::uint32_t>(head.size()));
    out.append(head);
    out.append(blob);
    put_u32(out, crc32(blob));
    return out;
}

Model deserialize_model(std::string_view bytes) {
    if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic)
        throw FormatError("not a model file (bad magic)");
    std::size_t off = kMagic.size();
    if (bytes.size() < off + 4) throw FormatError("model file truncated in header");
    const std::uint32_t head_len = get_u32(bytes, off);
    off += 4;
    if (bytes.size() < off + head_len + 4) throw FormatError("model file truncated in header");
    Json header;
    try {
        header = Json::parse(bytes.substr(off, head_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("model header is not valid JSON: ") + e.what());
    }
    off += head_len;
    if (!header.is_object() || !header.contains("schema_version") || header["schema_version"] != kSchemaVersion)
        throw FormatError("unsupported model schema_version");

    const std::string_view blob = bytes.substr(off, bytes.size() - off - 4);
    const std::uint32_t stored_crc = get_u32(bytes, bytes.size() - 4);

    Model model;
    model.config = config_from_json(header.at("config"));
    try {
        model.config.validate();
    } catch (const InputError& e) {
        throw FormatError(std::string("model config invalid: ") + e.what());
    }
    model = init_model(model.config);
    try {
        model.folded = header.at("folded").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad folded list: ") + e.what());
    }
    const Json& tensors = header.at("tensors");
    if (!tensors.is_object()) throw FormatError("tensor table missing");

    // Bias entries are optional; create them before binding names.
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        for (SiteKind kind : kAllSiteKinds) {
            const LinearSite s{l, kind};
            if (tensors.contains(s.name() + ".bias"))
                model.weights.bias(s) = Tensor({site_out_dim(model.config, kind)});
        }
    }
    auto named = model.weights.named_tensors();
    if (named.size() != tensors.size()) throw FormatError("tensor table has unexpected entries");
    if (crc32(blob) != stored_crc) throw FormatError("model checksum mismatch");
    for (auto& [name, t] : named) {
        if (!tensors.contains(name)) throw FormatError("tensor '" + name + "' missing");
        const Json& e = tensors[name];
        Shape shape;
        std::size_t offset = 0, length = 0;
        try {
            shape = e.at("shape").get<Shape>();
            offset = e.at("offset").get<std::size_t>();
            length = e.at("length").get<std::size_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("tensor '" + name + "' entry malformed: " + ex.what());
        }
        if (shape != t->shape()) throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) +
                                                   ", expected " + shape_string(t->shape()));
        if (length != t->numel() * sizeof(float) || offset > blob.size() || blob.size() - offset < length)
            throw FormatError("tensor '" + name + "' extent out of range");
        std::memcpy(t->mutable_ptr(), blob.data() + offset, length);
        if (!t->all_finite()) throw FormatError("tensor '" + name + "' holds non-finite values");
    }
    return model;
}

void save_model(const Model& model, const std::filesystem::path& path) { write_file(path, serialize_model(model)); }

Model load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace spon
