#include "fabric/train/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <vector>

#include "fabric/io/png.hpp"

namespace fabric::train {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace {

constexpr char kMagic[8] = {'F', 'B', 'R', 'C', 'C', 'K', 'P', 'T'};

}  // namespace

std::string serialize_checkpoint(const std::string& kind, const nlohmann::json& config, const nn::ParamStore& params) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params.params()) {
        const std::uint64_t length = t.size() * sizeof(float);
        manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", length}});
        offset += length;
    }
    const nlohmann::json header{{"format_version", kCheckpointVersion},
                                {"kind", kind},
                                {"config", config},
                                {"payload_bytes", offset},
                                {"tensors", manifest}};
    const std::string text = header.dump();
    const std::uint64_t header_len = text.size();

    std::string out;
    out.reserve(sizeof(kMagic) + 8 + text.size() + offset);
    out.append(kMagic, sizeof(kMagic));
    out.append(reinterpret_cast<const char*>(&header_len), 8);
    out += text;
    for (const auto& [name, t] : params.params()) {
        out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
    }
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + sizeof(kMagic), 8);
    const std::size_t header_start = sizeof(kMagic) + 8;
    if (header_len > bytes.size() - header_start) throw CheckpointError("truncated checkpoint header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(header_start, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }

    Checkpoint ck;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    std::uint64_t payload_bytes = 0;
    try {
        const int version = header.at("format_version").get<int>();
        if (version != kCheckpointVersion) {
            throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
        }
        ck.kind = header.at("kind").get<std::string>();
        ck.config = header.at("config");
        payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
        const std::size_t payload_start = header_start + header_len;
        if (bytes.size() - payload_start < payload_bytes) {
            throw CheckpointError("truncated checkpoint payload: expected " + std::to_string(payload_bytes) +
                                  " bytes, found " + std::to_string(bytes.size() - payload_start));
        }
        if (bytes.size() - payload_start > payload_bytes) throw CheckpointError("trailing bytes after checkpoint payload");

        for (const auto& entry : header.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto length = entry.at("length").get<std::uint64_t>();
            for (int d : shape) {
                if (d <= 0) throw CheckpointError("manifest entry " + name + " has a non-positive dimension");
            }
            if (length != numel(shape) * sizeof(float)) {
                throw CheckpointError("manifest entry " + name + " length does not match its shape");
            }
            if (offset > payload_bytes || length > payload_bytes - offset) {
                throw CheckpointError("manifest entry " + name + " lies outside the payload");
            }
            if (ck.params.contains(name)) throw CheckpointError("manifest entry " + name + " is duplicated");
            Tensor t(shape);
            std::memcpy(t.ptr(), bytes.data() + payload_start + offset, length);
            ck.params.add(name, std::move(t));
            spans.emplace_back(offset, length);
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
    }

    std::sort(spans.begin(), spans.end());
    std::uint64_t covered = 0;
    for (const auto& [offset, length] : spans) {
        if (offset != covered) throw CheckpointError("manifest offsets overlap or leave gaps in the payload");
        covered += length;
    }
    if (covered != payload_bytes) throw CheckpointError("manifest does not cover the payload");
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const nn::ParamStore& params) {
    const std::string bytes = serialize_checkpoint(kind, config, params);
    io::write_file_atomic(path, bytes.data(), bytes.size());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto raw = io::read_file(path);
    return parse_checkpoint(std::string(raw.begin(), raw.end()));
}

}  // namespace fabric::train
