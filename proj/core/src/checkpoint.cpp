#include "lnz/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace lnz::checkpoint {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

using nlohmann::json;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("truncated checkpoint file");
    return v;
}

json config_to_json(const model::ModelConfig& c) {
    return json{{"vocab", c.vocab},     {"d_model", c.d_model}, {"n_layers", c.n_layers},
                {"n_heads", c.n_heads}, {"seq_len", c.seq_len}, {"mlp_mult", c.mlp_mult}};
}

model::ModelConfig config_from_json(const json& j) {
    model::ModelConfig c;
    c.vocab = j.at("vocab").get<int64_t>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.seq_len = j.at("seq_len").get<int64_t>();
    c.mlp_mult = j.at("mlp_mult").get<int>();
    return c;
}

json mixer_to_json(const mixer::MixerConfig& m) {
    return json{{"kind", mixer::kind_name(m.kind)},
                {"n_heads", m.n_heads},
                {"d_k", m.d_k},
                {"d_v", m.d_v},
                {"gate_temperature", m.gate_temperature},
                {"retnet_decays", m.retnet_decays}};
}

mixer::MixerConfig mixer_from_json(const json& j) {
    mixer::MixerConfig m;
    m.kind = mixer::kind_from_name(j.at("kind").get<std::string>());
    m.n_heads = j.at("n_heads").get<int>();
    m.d_k = j.at("d_k").get<int>();
    m.d_v = j.at("d_v").get<int>();
    m.gate_temperature = j.at("gate_temperature").get<float>();
    m.retnet_decays = j.at("retnet_decays").get<std::vector<float>>();
    return m;
}

}  // namespace

void save(const std::string& path, const model::Model& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw AssetError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put<uint32_t>(os, kVersion);
    put<uint32_t>(os, static_cast<uint32_t>(m.params.size()));
    for (const auto& [name, t] : m.params) {
        put<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put<uint64_t>(os, static_cast<uint64_t>(t.dim(i)));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.numel())));
    }
    json meta;
    meta["model"] = config_to_json(m.config);
    meta["mixer"] = m.mixer_cfg ? mixer_to_json(*m.mixer_cfg) : json(nullptr);
    meta["cursor"] = {{"tokens_seen", m.cursor.tokens_seen}, {"stage", m.cursor.stage}};
    const std::string s = meta.dump();
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!os) throw AssetError("write failure on " + path);
}

namespace {

struct TensorHeader {
    std::string name;
    Shape shape;
    std::streampos payload;
};

// Scans headers without reading payloads; returns headers + meta.
std::pair<std::vector<TensorHeader>, Meta> scan_file(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic");
    }
    const uint32_t version = get<uint32_t>(is);
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const uint32_t count = get<uint32_t>(is);
    std::vector<TensorHeader> headers;
    headers.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        TensorHeader h;
        const uint16_t len = get<uint16_t>(is);
        h.name.resize(len);
        is.read(h.name.data(), len);
        const uint8_t rank = get<uint8_t>(is);
        int64_t numel = 1;
        for (uint8_t r = 0; r < rank; ++r) {
            const auto d = static_cast<int64_t>(get<uint64_t>(is));
            h.shape.push_back(d);
            numel *= d;
        }
        h.payload = is.tellg();
        is.seekg(static_cast<std::streamoff>(sizeof(float) * numel), std::ios::cur);
        if (!is) throw FormatError("truncated checkpoint file");
        headers.push_back(std::move(h));
    }
    // Everything after the last payload is the JSON meta block.
    const std::streampos meta_at = is.tellg();
    is.seekg(0, std::ios::end);
    const std::streampos end = is.tellg();
    if (end <= meta_at) throw FormatError("checkpoint missing meta block");
    std::string buf(static_cast<size_t>(end - meta_at), '\0');
    is.seekg(meta_at);
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!is) throw FormatError("truncated checkpoint meta");
    json meta;
    try {
        meta = json::parse(buf);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint meta: ") + e.what());
    }
    Meta out;
    try {
        out.config = config_from_json(meta.at("model"));
        if (!meta.at("mixer").is_null()) out.mixer = mixer_from_json(meta.at("mixer"));
        out.cursor.tokens_seen = meta.at("cursor").at("tokens_seen").get<int64_t>();
        out.cursor.stage = meta.at("cursor").at("stage").get<int>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint meta: ") + e.what());
    }
    return {std::move(headers), std::move(out)};
}

}  // namespace

Meta peek(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw AssetError("cannot open checkpoint " + path);
    return scan_file(is).second;
}

model::Model load(const std::string& path, const std::optional<model::ModelConfig>& expect) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw AssetError("cannot open checkpoint " + path);
    auto [headers, meta] = scan_file(is);
    if (expect && !(*expect == meta.config)) {
        throw FormatError("checkpoint model config does not match the expected config");
    }
    // Rebuild the parameter skeleton, then fill payloads.
    model::Model m = meta.mixer ? model::Model::init_student(meta.config, *meta.mixer, 0)
                                : model::Model::init_teacher(meta.config, 0);
    m.cursor = meta.cursor;
    if (headers.size() != m.params.size()) {
        throw FormatError("checkpoint holds " + std::to_string(headers.size()) +
                          " tensors, model expects " + std::to_string(m.params.size()));
    }
    for (size_t i = 0; i < headers.size(); ++i) {
        auto& [name, t] = m.params[i];
        const TensorHeader& h = headers[i];
        if (h.name != name) {
            throw FormatError("checkpoint tensor '" + h.name + "' where '" + name +
                              "' was expected");
        }
        if (h.shape != t.shape()) {
            throw FormatError("checkpoint tensor '" + h.name + "' has shape " +
                              shape_str(h.shape) + ", model expects " + shape_str(t.shape()));
        }
        is.seekg(h.payload);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.numel())));
        if (!is) throw FormatError("truncated checkpoint payload for '" + h.name + "'");
    }
    return m;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw AssetError("cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a(buf, static_cast<size_t>(is.gcount()), h);
    }
    return h;
}

}  // namespace lnz::checkpoint
