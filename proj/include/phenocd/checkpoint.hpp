#pragma once

// Checkpoint files: <dir>/manifest.json describes the tensors,
// <dir>/weights.bin holds their float32 little-endian payloads back to back
// in manifest order. Loading is strict: the registry and the manifest must
// agree on the exact set of names and shapes.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "phenocd/layers.hpp"

namespace phenocd::nn {

static_assert(std::endian::native == std::endian::little,
              "weights.bin is little-endian; big-endian hosts are unsupported");

inline constexpr int kCheckpointFormat = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamRegistry<T>& reg,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["dtype"] = "f32";
    manifest["extra"] = extra;
    auto& plist = manifest["params"] = nlohmann::json::array();

    std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw IngestError("cannot open for writing: " + (dir / "weights.bin").string());
    int64_t offset = 0;
    std::vector<float> buf;
    for (const auto& p : reg.params()) {
        const auto& t = p.node->value;
        plist.push_back({{"name", p.name},
                         {"shape", t.shape},
                         {"offset", offset},
                         {"trainable", p.trainable}});
        buf.resize(static_cast<size_t>(t.numel()));
        for (int64_t i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t.data[i]);
        bin.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        offset += t.numel();
    }
    if (!bin) throw IngestError("write failed: " + (dir / "weights.bin").string());
    bin.close();

    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw IngestError("cannot open for writing: " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
}

template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamRegistry<T>& reg) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IngestError("cannot open checkpoint manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError("malformed checkpoint manifest " + (dir / "manifest.json").string() +
                          ": " + e.what());
    }
    if (!manifest.contains("format") || manifest["format"].get<int>() != kCheckpointFormat)
        throw IngestError("unsupported checkpoint format in " + (dir / "manifest.json").string());
    const auto& plist = manifest.at("params");
    if (plist.size() != reg.params().size())
        throw IngestError("checkpoint has " + std::to_string(plist.size()) + " tensors, model has " +
                          std::to_string(reg.params().size()));

    std::ifstream bin(dir / "weights.bin", std::ios::binary);
    if (!bin) throw IngestError("cannot open checkpoint weights: " + (dir / "weights.bin").string());
    bin.seekg(0, std::ios::end);
    int64_t file_floats = static_cast<int64_t>(bin.tellg()) / static_cast<int64_t>(sizeof(float));
    bin.seekg(0);

    std::vector<float> buf;
    for (size_t i = 0; i < plist.size(); ++i) {
        const auto& entry = plist[i];
        const auto& p = reg.params()[i];
        std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        int64_t offset = entry.at("offset").get<int64_t>();
        if (name != p.name)
            throw IngestError("checkpoint tensor " + std::to_string(i) + " is '" + name +
                              "', model expects '" + p.name + "'");
        if (shape != p.node->value.shape)
            throw IngestError("checkpoint tensor '" + name + "' has shape " +
                              Tensor<float>::to_string(shape) + ", model expects " +
                              p.node->value.shape_str());
        int64_t numel = p.node->value.numel();
        if (offset < 0 || offset + numel > file_floats)
            throw IngestError("checkpoint weights.bin truncated at tensor '" + name + "'");
        buf.resize(static_cast<size_t>(numel));
        bin.seekg(offset * static_cast<int64_t>(sizeof(float)));
        bin.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!bin) throw IngestError("read failed in checkpoint weights at tensor '" + name + "'");
        for (int64_t j = 0; j < numel; ++j) p.node->value.data[j] = static_cast<T>(buf[j]);
    }
    return manifest.contains("extra") ? manifest["extra"] : nlohmann::json::object();
}

}  // namespace phenocd::nn
