#include "cloudcast/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cloudcast {

namespace {

constexpr char kMagic[8] = {'C', 'C', 'K', 'P', 'T', '\x01', '\r', '\n'};

void put_u64le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f64le(std::string& out, double d) {
    put_u64le(out, std::bit_cast<uint64_t>(d));
}

double get_f64le(const unsigned char* p) { return std::bit_cast<double>(get_u64le(p)); }

}  // namespace

void save_checkpoint(const std::string& path, const ParamList& params,
                     const nlohmann::json& meta) {
    nlohmann::json header;
    header["format"] = "cloudcast-checkpoint";
    header["version"] = 1;
    header["meta"] = meta;
    uint64_t offset = 0;
    auto& records = header["tensors"] = nlohmann::json::array();
    for (const auto& p : params) {
        nlohmann::json rec;
        rec["name"] = p.name;
        rec["shape"] = p.tensor.shape();
        rec["offset"] = offset;
        rec["count"] = p.tensor.numel();
        records.push_back(std::move(rec));
        offset += static_cast<uint64_t>(p.tensor.numel());
    }
    const std::string header_str = header.dump();

    std::string blob;
    blob.reserve(16 + header_str.size() + offset * 8);
    blob.append(kMagic, sizeof(kMagic));
    put_u64le(blob, header_str.size());
    blob.append(header_str);
    for (const auto& p : params)
        for (double v : p.tensor.values()) put_f64le(blob, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot open checkpoint for writing: " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw ParseError("short write on checkpoint: " + path);
}

ParamList load_checkpoint(const std::string& path, nlohmann::json* meta_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("checkpoint not found: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());

    if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("bad checkpoint magic in " + path);
    const uint64_t header_len = get_u64le(p + 8);
    if (16 + header_len > blob.size())
        throw ParseError("truncated checkpoint header in " + path + " at offset 16");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("invalid checkpoint header JSON in " + path + ": " + e.what());
    }
    if (meta_out && header.contains("meta")) *meta_out = header["meta"];

    const size_t payload = 16 + header_len;
    ParamList out;
    for (const auto& rec : header.at("tensors")) {
        const std::string name = rec.at("name").get<std::string>();
        const Shape shape = rec.at("shape").get<Shape>();
        const uint64_t offset = rec.at("offset").get<uint64_t>();
        const uint64_t count = rec.at("count").get<uint64_t>();
        if (static_cast<uint64_t>(shape_numel(shape)) != count)
            throw ParseError("checkpoint record " + name + " shape/count mismatch in " + path);
        const size_t begin = payload + offset * 8;
        if (begin + count * 8 > blob.size())
            throw ParseError("truncated checkpoint payload in " + path + " at offset " +
                             std::to_string(begin));
        std::vector<double> values(count);
        for (uint64_t i = 0; i < count; ++i) values[i] = get_f64le(p + begin + i * 8);
        out.push_back({name, Tensor(shape, std::move(values))});
    }
    return out;
}

void assign_parameters(ParamList& dst, const ParamList& src) {
    if (dst.size() != src.size())
        throw ParseError("parameter count mismatch: model has " + std::to_string(dst.size()) +
                         ", checkpoint has " + std::to_string(src.size()));
    for (size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].name != src[i].name)
            throw ParseError("parameter name mismatch at slot " + std::to_string(i) + ": " +
                             dst[i].name + " vs " + src[i].name);
        if (dst[i].tensor.shape() != src[i].tensor.shape())
            throw ParseError("parameter shape mismatch for " + dst[i].name);
        auto vals = dst[i].tensor.mutable_values();
        auto svals = src[i].tensor.values();
        std::copy(svals.begin(), svals.end(), vals.begin());
    }
}

}  // namespace cloudcast
