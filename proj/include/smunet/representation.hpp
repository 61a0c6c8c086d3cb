#pragma once

#include "smunet/unet.hpp"

namespace smunet {

/// The three interchangeable style-matching mechanisms, plus `none` for the
/// plain-student baseline (identity modification, no style machinery).
enum class StyleModule { none, distribution, adversarial, texture };

inline const char* style_module_name(StyleModule m) {
    switch (m) {
    case StyleModule::none: return "none";
    case StyleModule::distribution: return "distribution";
    case StyleModule::adversarial: return "adversarial";
    case StyleModule::texture: return "texture";
    }
    return "?";
}

inline StyleModule parse_style_module(const std::string& s) {
    for (StyleModule m : {StyleModule::none, StyleModule::distribution, StyleModule::adversarial,
                          StyleModule::texture})
        if (s == style_module_name(m)) return m;
    throw std::invalid_argument("unknown style module '" + s +
                                "' (valid: none, distribution, adversarial, texture)");
}

/// Multi-layer texture/contrast representation: the encoder activations of
/// all blocks (shallow = 0-1, deep = 2-3), with per-layer channel count and
/// flattened spatial size recorded for the Gram normalization.
template <typename T>
struct StyleRepresentation {
    std::vector<Var<T>> layers;
    std::vector<std::int64_t> channels;  // C_l
    std::vector<std::int64_t> positions; // N_l

    std::size_t size() const { return layers.size(); }
};

/// Structural/semantic representation: the encoder bottleneck map.
template <typename T>
struct ContentRepresentation {
    Var<T> map;
};

/// Taps every encoder block in order. No resampling or truncation happens
/// here; the taps alias the activations.
template <typename T>
StyleRepresentation<T> extract_style(const EncoderFeatures<T>& features) {
    StyleRepresentation<T> s;
    for (const auto& layer : features.per_block) {
        s.layers.push_back(layer);
        s.channels.push_back(layer->value.channels());
        s.positions.push_back(layer->value.spatial().voxels());
    }
    return s;
}

template <typename T>
StyleRepresentation<T> detach_style(const StyleRepresentation<T>& s) {
    StyleRepresentation<T> out = s;
    for (auto& l : out.layers) l = detach(l);
    return out;
}

template <typename T>
ContentRepresentation<T> extract_content(const EncoderFeatures<T>& features) {
    return {features.bottleneck};
}

/// Output of the active matching module, consumed by modify_style. The
/// distribution variant carries a sampled latent; the adversarial and texture
/// variants carry per-layer global statistics of the missing path's style.
template <typename T>
struct MatchingSignal {
    StyleModule variant = StyleModule::none;
    Var<T> z;                    // distribution: sampled latent (d_z)
    std::vector<Var<T>> stats;   // adversarial/texture: per-layer (2 C_l)
};

/// Per-layer global (mean, std) statistics used as the recalibration signal.
template <typename T>
MatchingSignal<T> recalibration_signal(StyleModule variant, const StyleRepresentation<T>& style) {
    MatchingSignal<T> sig;
    sig.variant = variant;
    for (const auto& layer : style.layers) sig.stats.push_back(channel_stats(layer));
    return sig;
}

/// Learned modification function applied to the missing path's style. The
/// distribution variant concatenates the broadcast latent sample and restores
/// channels with a 1x1x1 convolution; the adversarial and texture variants
/// predict a channelwise (scale, shift) from the layer's global statistics.
/// Both forms are exact no-ops at initialization.
template <typename T>
struct ModificationHeads {
    std::vector<Conv3dLayer<T>> zconv;   // distribution path, per layer
    std::vector<LinearLayer<T>> recal;   // adversarial/texture path, per layer

    static ModificationHeads make(ParamStore<T>& ps, const std::string& name,
                                  const UNetConfig& cfg, std::int64_t d_z) {
        ModificationHeads h;
        for (std::int64_t l = 0; l < cfg.num_blocks; ++l) {
            const std::int64_t c = cfg.width(l);
            h.zconv.push_back(Conv3dLayer<T>::make_passthrough(
                ps, name + ".zconv" + std::to_string(l), c + d_z, c));
            h.recal.push_back(
                LinearLayer<T>::make_zero(ps, name + ".recal" + std::to_string(l), 2 * c, 2 * c));
        }
        return h;
    }
};

template <typename T>
StyleRepresentation<T> modify_style(const StyleRepresentation<T>& style_m,
                                    const MatchingSignal<T>& signal,
                                    const ModificationHeads<T>& heads) {
    StyleRepresentation<T> out = style_m;
    switch (signal.variant) {
    case StyleModule::none:
        return out; // identity modification
    case StyleModule::distribution: {
        if (!signal.z) throw std::invalid_argument("modify_style: distribution signal lacks z");
        for (std::size_t l = 0; l < style_m.size(); ++l)
            out.layers[l] = heads.zconv[l](broadcast_concat(style_m.layers[l], signal.z));
        return out;
    }
    case StyleModule::adversarial:
    case StyleModule::texture: {
        if (signal.stats.size() != style_m.size())
            throw std::invalid_argument("modify_style: signal/style layer count mismatch");
        for (std::size_t l = 0; l < style_m.size(); ++l) {
            const std::int64_t c = style_m.channels[l];
            if (signal.stats[l]->value.size() != 2 * c)
                throw std::invalid_argument("modify_style: stats size mismatch at layer " +
                                            std::to_string(l));
            auto pred = heads.recal[l](signal.stats[l]);
            auto scale = add_scalar(slice_vec(pred, 0, c), T(1));
            auto shift = slice_vec(pred, c, c);
            out.layers[l] = channel_affine(style_m.layers[l], scale, shift);
        }
        return out;
    }
    }
    throw std::logic_error("modify_style: unhandled variant");
}

/// 1x1x1 channel-restoring fusions for the decoder skips. Initialized to an
/// identity on the encoder half plus a small random mix of the style half:
/// training can still learn to ignore the style branch (zeroing its columns
/// recovers the plain encoder features exactly), while gradient reaches the
/// modification heads from the first step.
template <typename T>
struct FusionHeads {
    std::vector<Conv3dLayer<T>> fuse; // one per skip level (0 .. num_blocks-2)

    static FusionHeads make(ParamStore<T>& ps, const std::string& name, const UNetConfig& cfg,
                            Rng& rng) {
        FusionHeads f;
        for (std::int64_t l = 0; l + 1 < cfg.num_blocks; ++l) {
            const std::int64_t c = cfg.width(l);
            f.fuse.push_back(Conv3dLayer<T>::make_passthrough_mix(
                ps, name + ".fuse" + std::to_string(l), 2 * c, c, 0.05, rng));
        }
        return f;
    }

    /// Zeroes the style-branch columns, making fusion an exact passthrough.
    void silence_style_branch() {
        for (auto& layer : fuse) {
            const std::int64_t c = layer.cout;
            for (std::int64_t o = 0; o < c; ++o)
                for (std::int64_t i = c; i < 2 * c; ++i) layer.w->value[o * 2 * c + i] = T(0);
        }
    }
};

/// Rebuilds the decoder input: each skip becomes conv(concat(encoder
/// activation, modified style layer)); the bottleneck handed to the decoder
/// is the content map.
template <typename T>
EncoderFeatures<T> recombine(const EncoderFeatures<T>& features,
                             const StyleRepresentation<T>& modified_style,
                             const ContentRepresentation<T>& content,
                             const FusionHeads<T>& fusion) {
    if (modified_style.size() != features.per_block.size())
        throw std::invalid_argument("recombine: style/feature layer count mismatch");
    EncoderFeatures<T> out;
    const std::size_t n = features.per_block.size();
    for (std::size_t l = 0; l + 1 < n; ++l) {
        const auto& enc = features.per_block[l];
        const auto& sty = modified_style.layers[l];
        if (!enc->value.same_shape(sty->value))
            throw std::invalid_argument("recombine: shape mismatch at level " + std::to_string(l) +
                                        ": " + enc->value.shape_str() + " vs " +
                                        sty->value.shape_str());
        out.per_block.push_back(fusion.fuse[l](concat_channels(enc, sty)));
    }
    out.per_block.push_back(content.map);
    out.bottleneck = content.map;
    return out;
}

} // namespace smunet
