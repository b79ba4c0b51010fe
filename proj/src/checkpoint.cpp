#include "vinpaint/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <set>

#include <json.hpp>

#include "vinpaint/error.hpp"
#include "vinpaint/io.hpp"

namespace vinpaint::ckpt {

namespace {

using json = nlohmann::json;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t pos) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    }
    return v;
}

void put_f32(std::string& out, float f) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32(const unsigned char* p) {
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(u);
}

std::uint64_t require_uint(const json& entry, const char* field) {
    if (!entry.contains(field) || !entry[field].is_number_unsigned()) {
        throw FormatError(field, "missing or not a non-negative integer");
    }
    return entry[field].get<std::uint64_t>();
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
    json header = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : ckpt) {
        if (name.empty()) throw std::invalid_argument("checkpoint tensor names must be non-empty");
        const std::uint64_t nbytes = tensor.size() * 4;
        header.push_back({{"name", name},
                          {"dtype", "f32"},
                          {"shape", tensor.shape()},
                          {"offset", offset},
                          {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string header_text = header.dump();
    std::string out(kMagic);
    put_u64(out, header_text.size());
    out += header_text;
    out.reserve(out.size() + offset);
    for (const auto& [name, tensor] : ckpt) {
        for (float v : tensor.data()) put_f32(out, v);
    }
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
        throw FormatError("magic", "expected \"CKPT1\"");
    }
    std::size_t pos = kMagic.size();
    if (bytes.size() < pos + 8) throw FormatError("header_length", "file truncated");
    const std::uint64_t header_len = get_u64(bytes, pos);
    pos += 8;
    if (header_len > bytes.size() - pos) {
        throw FormatError("header_length", "declares " + std::to_string(header_len) +
                                               " bytes but only " + std::to_string(bytes.size() - pos) +
                                               " remain");
    }
    json header;
    try {
        header = json::parse(bytes.substr(pos, header_len));
    } catch (const json::parse_error& e) {
        throw FormatError("header", std::string("invalid JSON: ") + e.what());
    }
    if (!header.is_array()) throw FormatError("header", "expected a JSON array");
    pos += header_len;
    const std::string_view payload = bytes.substr(pos);
    const auto* base = reinterpret_cast<const unsigned char*>(payload.data());

    Checkpoint ckpt;
    std::string previous;
    std::set<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& entry : header) {
        if (!entry.is_object()) throw FormatError("header", "entries must be objects");
        if (!entry.contains("name") || !entry["name"].is_string() ||
            entry["name"].get<std::string>().empty()) {
            throw FormatError("name", "missing or empty");
        }
        const auto name = entry["name"].get<std::string>();
        if (!ckpt.empty() && name <= previous) {
            throw FormatError("name", "\"" + name + "\" is duplicated or out of order");
        }
        previous = name;
        if (!entry.contains("dtype") || entry["dtype"] != "f32") {
            throw FormatError("dtype", "\"" + name + "\" must be \"f32\"");
        }
        if (!entry.contains("shape") || !entry["shape"].is_array() || entry["shape"].empty()) {
            throw FormatError("shape", "\"" + name + "\" needs a non-empty dimension list");
        }
        Shape shape;
        for (const auto& d : entry["shape"]) {
            if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
                throw FormatError("shape", "\"" + name + "\" has a non-positive dimension");
            }
            shape.push_back(d.get<std::size_t>());
        }
        const std::uint64_t offset = require_uint(entry, "offset");
        const std::uint64_t nbytes = require_uint(entry, "nbytes");
        if (nbytes != shape_numel(shape) * 4) {
            throw FormatError("nbytes", "\"" + name + "\" size disagrees with shape " + shape_str(shape));
        }
        if (offset > payload.size() || nbytes > payload.size() - offset) {
            throw FormatError("payload", "\"" + name + "\" extends past the end of the file");
        }
        if (offset % 4 != 0) throw FormatError("offset", "\"" + name + "\" is not 4-byte aligned");
        ranges.emplace(offset, offset + nbytes);

        std::vector<float> data(shape_numel(shape));
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = get_f32(base + offset + 4 * i);
        ckpt.emplace(name, TensorF(std::move(shape), std::move(data)));
    }
    std::uint64_t end = 0;
    for (const auto& [lo, hi] : ranges) {
        if (lo < end) throw FormatError("offset", "tensor payloads overlap");
        end = hi;
    }
    if (end != payload.size()) {
        throw FormatError("payload", "length " + std::to_string(payload.size()) +
                                         " does not match header total " + std::to_string(end));
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path));
}

}  // namespace vinpaint::ckpt
