#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "smunet/tensor.hpp"

namespace smunet {

// Single-file checkpoint archive: a magic line, a JSON manifest (configs,
// step counter, tensor directory) and a raw little-endian data blob. Writes
// go to a temp file and are renamed into place atomically.

inline constexpr const char* kCheckpointMagic = "SMUNETCKPT1\n";

template <typename T>
struct NamedTensor {
    std::string name;
    const Tensor<T>* tensor;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors,
                     const nlohmann::json& extra) {
    nlohmann::json manifest = extra;
    manifest["format_version"] = 1;
    manifest["scalar"] = sizeof(T) == 4 ? "f32" : "f64";
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& nt : tensors) {
        nlohmann::json e;
        e["name"] = nt.name;
        e["shape"] = nt.tensor->shape();
        e["offset"] = offset;
        e["count"] = nt.tensor->size();
        offset += static_cast<std::uint64_t>(nt.tensor->size());
        dir.push_back(std::move(e));
    }
    manifest["tensors"] = std::move(dir);
    const std::string mstr = manifest.dump();

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
        const std::uint64_t len = mstr.size();
        f.write(reinterpret_cast<const char*>(&len), sizeof(len));
        f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
        for (const auto& nt : tensors)
            f.write(reinterpret_cast<const char*>(nt.tensor->data()),
                    static_cast<std::streamsize>(sizeof(T) * nt.tensor->size()));
        if (!f) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
struct CheckpointArchive {
    nlohmann::json manifest;
    std::map<std::string, Tensor<T>> tensors;
};

template <typename T>
CheckpointArchive<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::string magic(std::strlen(kCheckpointMagic), '\0');
    f.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kCheckpointMagic)
        throw std::runtime_error(path.string() + " is not a checkpoint archive");
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string mstr(len, '\0');
    f.read(mstr.data(), static_cast<std::streamsize>(len));
    if (!f) throw std::runtime_error("truncated checkpoint manifest in " + path.string());

    CheckpointArchive<T> out;
    out.manifest = nlohmann::json::parse(mstr);
    const std::string scalar = out.manifest.value("scalar", "");
    if (scalar != (sizeof(T) == 4 ? "f32" : "f64"))
        throw std::runtime_error("checkpoint scalar type " + scalar +
                                 " does not match this build");
    for (const auto& e : out.manifest["tensors"]) {
        std::vector<std::int64_t> shape = e["shape"].template get<std::vector<std::int64_t>>();
        Tensor<T> t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(sizeof(T) * t.size()));
        if (!f) throw std::runtime_error("truncated tensor data in " + path.string());
        out.tensors.emplace(e["name"].template get<std::string>(), std::move(t));
    }
    return out;
}

} // namespace smunet
