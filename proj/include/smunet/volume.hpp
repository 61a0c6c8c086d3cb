#pragma once

#include <array>

#include "smunet/tensor.hpp"

namespace smunet {

inline constexpr std::array<const char*, 4> kModalityNames = {"flair", "t1", "t1c", "t2"};
inline constexpr std::array<int, 4> kLabelValues = {0, 1, 2, 4};
inline constexpr std::int64_t kNumModalities = 4;

/// Which of (FLAIR, T1, T1c, T2) are available. The all-absent mask is
/// rejected at construction; the ordering matches the results-table columns.
class ModalityMask {
public:
    static ModalityMask of(bool flair, bool t1, bool t1c, bool t2) {
        if (!flair && !t1 && !t1c && !t2)
            throw std::invalid_argument("ModalityMask: at least one modality must be present");
        ModalityMask m;
        m.present_ = {flair, t1, t1c, t2};
        return m;
    }

    static ModalityMask all() { return of(true, true, true, true); }

    /// Parses a 4-character 0/1 string in (flair, t1, t1c, t2) order.
    static ModalityMask parse(const std::string& bits) {
        if (bits.size() != 4 || bits.find_first_not_of("01") != std::string::npos)
            throw std::invalid_argument("ModalityMask: expected 4 bits of 0/1, got '" + bits + "'");
        return of(bits[0] == '1', bits[1] == '1', bits[2] == '1', bits[3] == '1');
    }

    bool has(std::int64_t i) const { return present_.at(static_cast<std::size_t>(i)); }
    const std::array<bool, 4>& present() const { return present_; }

    int count() const {
        int n = 0;
        for (bool p : present_) n += p;
        return n;
    }

    std::string bits() const {
        std::string s;
        for (bool p : present_) s += p ? '1' : '0';
        return s;
    }

    bool operator==(const ModalityMask&) const = default;

private:
    ModalityMask() = default;
    std::array<bool, 4> present_{};
};

/// All 15 non-empty modality subsets in the canonical results-table order:
/// singletons (T2, T1c, T1, FLAIR), then pairs, triples, and the full set.
inline std::vector<ModalityMask> enumerate_subsets() {
    static const std::array<const char*, 15> rows = {
        "0001", "0010", "0100", "1000",                  // singletons
        "0011", "0110", "1100", "0101", "1001", "1010",  // pairs
        "1110", "1101", "1011", "0111",                  // triples
        "1111",                                          // full set
    };
    std::vector<ModalityMask> out;
    out.reserve(rows.size());
    for (const char* r : rows) out.push_back(ModalityMask::parse(r));
    return out;
}

/// A 4-modality scan plus its integer label grid. Channel layout is
/// (modality, d, h, w); labels are (d, h, w) with values in {0, 1, 2, 4}.
struct LabeledVolume {
    Tensor<float> modalities;
    Tensor<std::uint8_t> labels;

    Dims3 spatial() const { return modalities.spatial(); }

    void validate(const std::string& context = "volume") const {
        if (modalities.rank() != 4 || modalities.channels() != kNumModalities)
            throw std::invalid_argument(context + ": expected 4 modality channels, got shape " +
                                        modalities.shape_str());
        if (labels.rank() != 3 || labels.dim(0) != modalities.dim(1) ||
            labels.dim(1) != modalities.dim(2) || labels.dim(2) != modalities.dim(3))
            throw std::invalid_argument(context + ": label grid shape " + labels.shape_str() +
                                        " does not match modality shape " +
                                        modalities.shape_str());
        if (!modalities.all_finite())
            throw std::invalid_argument(context + ": non-finite intensity values");
        for (std::int64_t i = 0; i < labels.size(); ++i) {
            const int v = labels[i];
            if (v != 0 && v != 1 && v != 2 && v != 4)
                throw std::invalid_argument(context + ": invalid label value " +
                                            std::to_string(v));
        }
    }
};

/// The three nested evaluation regions as binary grids.
struct RegionMasks {
    Tensor<std::uint8_t> wt, ct, et;
};

/// Maps labels to the evaluation regions: whole tumor {1,2,4},
/// core tumor {1,4}, enhancing tumor {4}. Nesting et <= ct <= wt holds by
/// construction.
inline RegionMasks derive_regions(const Tensor<std::uint8_t>& labels) {
    RegionMasks r{Tensor<std::uint8_t>(labels.shape()), Tensor<std::uint8_t>(labels.shape()),
                  Tensor<std::uint8_t>(labels.shape())};
    for (std::int64_t i = 0; i < labels.size(); ++i) {
        const int v = labels[i];
        switch (v) {
        case 0:
            break;
        case 1:
            r.wt[i] = 1;
            r.ct[i] = 1;
            break;
        case 2:
            r.wt[i] = 1;
            break;
        case 4:
            r.wt[i] = 1;
            r.ct[i] = 1;
            r.et[i] = 1;
            break;
        default:
            throw std::invalid_argument("derive_regions: invalid label value " +
                                        std::to_string(v));
        }
    }
    return r;
}

/// Zero-fills absent channels, keeping the fixed 4-channel input shape.
inline LabeledVolume apply_modality_mask(const LabeledVolume& v, const ModalityMask& mask) {
    LabeledVolume out = v;
    const std::int64_t nvox = v.spatial().voxels();
    for (std::int64_t c = 0; c < kNumModalities; ++c) {
        if (mask.has(c)) continue;
        float* ch = out.modalities.data() + c * nvox;
        std::fill(ch, ch + nvox, 0.0f);
    }
    return out;
}

/// Class-channel order of the segmentation head: (background, 1, 2, 4).
inline std::int64_t label_to_class(int label) {
    switch (label) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default:
        throw std::invalid_argument("label_to_class: invalid label value " +
                                    std::to_string(label));
    }
}

inline int class_to_label(std::int64_t cls) {
    static constexpr std::array<int, 4> map = {0, 1, 2, 4};
    return map.at(static_cast<std::size_t>(cls));
}

} // namespace smunet
