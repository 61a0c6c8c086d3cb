#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "smunet/volume.hpp"

namespace smunet {

namespace fs = std::filesystem;

// Raw case format: one directory per case holding
//   modalities.f32 -- little-endian float32, 4*H*W*D values, index
//                     ((c*D + d)*H + h)*W + w
//   labels.u8      -- H*W*D bytes, same spatial order
//   meta.json      -- {"shape": [H, W, D]}

namespace detail {

template <typename U>
void write_binary(const fs::path& p, const U* data, std::size_t count) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(U)));
    if (!f) throw std::runtime_error("short write to " + p.string());
}

template <typename U>
void read_binary(const fs::path& p, U* data, std::size_t count, const std::string& case_id) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("case " + case_id + ": unreadable file " + p.string());
    f.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(U)));
    if (f.gcount() != static_cast<std::streamsize>(count * sizeof(U)))
        throw std::runtime_error("case " + case_id + ": file " + p.string() +
                                 " is shorter than the declared shape requires");
    char extra;
    if (f.read(&extra, 1))
        throw std::runtime_error("case " + case_id + ": file " + p.string() +
                                 " is longer than the declared shape requires");
}

} // namespace detail

/// Writes one case directory in the raw format.
inline void write_raw_case(const fs::path& case_dir, const LabeledVolume& v) {
    v.validate(case_dir.filename().string());
    fs::create_directories(case_dir);
    const Dims3 sp = v.spatial();
    nlohmann::json meta;
    meta["shape"] = {sp.h, sp.w, sp.d};
    std::ofstream mf(case_dir / "meta.json", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write " + (case_dir / "meta.json").string());
    mf << meta.dump(2) << "\n";
    detail::write_binary(case_dir / "modalities.f32", v.modalities.data(),
                         static_cast<std::size_t>(v.modalities.size()));
    detail::write_binary(case_dir / "labels.u8", v.labels.data(),
                         static_cast<std::size_t>(v.labels.size()));
}

/// Writes a whole dataset as case_000, case_001, ...
inline void write_raw_dataset(const fs::path& dir, const std::vector<LabeledVolume>& vols,
                              std::int64_t name_offset = 0) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < vols.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03lld",
                      static_cast<long long>(name_offset + static_cast<std::int64_t>(i)));
        write_raw_case(dir / name, vols[i]);
    }
}

/// Z-scores each channel over its nonzero voxels, in place. Channels that are
/// entirely zero (masked-away modalities) are left untouched.
inline void zscore_nonzero(LabeledVolume& v) {
    const std::int64_t nvox = v.spatial().voxels();
    for (std::int64_t c = 0; c < kNumModalities; ++c) {
        float* ch = v.modalities.data() + c * nvox;
        double s = 0, s2 = 0;
        std::int64_t n = 0;
        for (std::int64_t i = 0; i < nvox; ++i) {
            if (ch[i] == 0.0f) continue;
            s += ch[i];
            s2 += static_cast<double>(ch[i]) * ch[i];
            ++n;
        }
        if (n < 2) continue;
        const double mu = s / n;
        const double sd = std::sqrt(std::max(1e-12, s2 / n - mu * mu));
        for (std::int64_t i = 0; i < nvox; ++i)
            if (ch[i] != 0.0f) ch[i] = static_cast<float>((ch[i] - mu) / sd);
    }
}

/// Loads every case directory under `path` (sorted by name), validates it
/// against the expected spatial size and the volume invariants, and z-scores
/// intensities per channel over nonzero voxels.
inline std::vector<LabeledVolume> ingest_raw(const fs::path& path,
                                             std::array<std::int64_t, 3> spatial_size) {
    if (!fs::exists(path)) throw std::runtime_error("data directory not found: " + path.string());
    std::vector<fs::path> cases;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_directory() && fs::exists(e.path() / "meta.json")) cases.push_back(e.path());
    std::sort(cases.begin(), cases.end());

    std::vector<LabeledVolume> out;
    out.reserve(cases.size());
    for (const auto& cdir : cases) {
        const std::string case_id = cdir.filename().string();
        nlohmann::json meta;
        {
            std::ifstream mf(cdir / "meta.json");
            if (!mf) throw std::runtime_error("case " + case_id + ": unreadable meta.json");
            try {
                mf >> meta;
            } catch (const std::exception& e) {
                throw std::runtime_error("case " + case_id + ": bad meta.json: " + e.what());
            }
        }
        if (!meta.contains("shape") || !meta["shape"].is_array() || meta["shape"].size() != 3)
            throw std::runtime_error("case " + case_id + ": meta.json lacks a 3-entry shape");
        std::array<std::int64_t, 3> shape{};
        for (int i = 0; i < 3; ++i) shape[static_cast<std::size_t>(i)] = meta["shape"][static_cast<std::size_t>(i)].get<std::int64_t>();
        if (shape != spatial_size)
            throw std::runtime_error("case " + case_id + ": shape mismatch, expected [" +
                                     std::to_string(spatial_size[0]) + "," +
                                     std::to_string(spatial_size[1]) + "," +
                                     std::to_string(spatial_size[2]) + "] got [" +
                                     std::to_string(shape[0]) + "," + std::to_string(shape[1]) +
                                     "," + std::to_string(shape[2]) + "]");
        const Dims3 sp{shape[2], shape[0], shape[1]};
        LabeledVolume v{Tensor<float>::feature_map(kNumModalities, sp),
                        Tensor<std::uint8_t>({sp.d, sp.h, sp.w})};
        detail::read_binary(cdir / "modalities.f32", v.modalities.data(),
                            static_cast<std::size_t>(v.modalities.size()), case_id);
        detail::read_binary(cdir / "labels.u8", v.labels.data(),
                            static_cast<std::size_t>(v.labels.size()), case_id);
        v.validate("case " + case_id);
        zscore_nonzero(v);
        out.push_back(std::move(v));
    }
    return out;
}

} // namespace smunet
