#pragma once

#include "smunet/modules.hpp"

namespace smunet {

/// Architecture of one segmentation path. Both paths use the same config, so
/// their parameter counts are always equal.
struct UNetConfig {
    std::int64_t in_channels = 4;
    std::int64_t base_width = 8;
    std::int64_t num_blocks = 4;
    std::int64_t norm_groups = 8;
    std::int64_t num_classes = 4;

    std::int64_t width(std::int64_t block) const { return base_width << block; }

    std::int64_t pool_factor() const { return std::int64_t(1) << num_blocks; }

    void validate() const {
        if (in_channels <= 0 || base_width <= 0 || num_blocks <= 0 || norm_groups <= 0 ||
            num_classes <= 0)
            throw std::invalid_argument("UNetConfig: all fields must be positive");
        for (std::int64_t i = 0; i < num_blocks; ++i)
            if (width(i) % norm_groups != 0)
                throw std::invalid_argument("UNetConfig: block width " + std::to_string(width(i)) +
                                            " not divisible by norm_groups");
    }
};

/// Encoder activations, shallowest first. per_block[i] is recorded before
/// downsampling so it can serve both skip connections and style taps;
/// bottleneck aliases per_block.back().
template <typename T>
struct EncoderFeatures {
    std::vector<Var<T>> per_block;
    Var<T> bottleneck;
};

/// Two 3x3x3 convolutions, each followed by group norm and ReLU.
template <typename T>
struct ConvBlock {
    Conv3dLayer<T> c1, c2;
    GroupNormLayer<T> n1, n2;

    static ConvBlock make(ParamStore<T>& ps, const std::string& name, std::int64_t cin,
                          std::int64_t cout, std::int64_t groups, Rng& rng) {
        ConvBlock b;
        b.c1 = Conv3dLayer<T>::make(ps, name + ".conv1", cin, cout, 3, rng);
        b.n1 = GroupNormLayer<T>::make(ps, name + ".norm1", cout, groups);
        b.c2 = Conv3dLayer<T>::make(ps, name + ".conv2", cout, cout, 3, rng);
        b.n2 = GroupNormLayer<T>::make(ps, name + ".norm2", cout, groups);
        return b;
    }

    Var<T> operator()(const Var<T>& x) const {
        return relu(n2(c2(relu(n1(c1(x))))));
    }
};

/// One segmentation path: 4-block encoder, mirrored decoder with trilinear
/// upsampling + skip concatenation, 1x1x1 class head emitting pre-softmax
/// scores at full input resolution.
template <typename T>
struct UNet3d {
    UNetConfig cfg;
    std::vector<ConvBlock<T>> enc;
    std::vector<Conv3dLayer<T>> up;  // 1x1x1 channel reduction after upsampling
    std::vector<ConvBlock<T>> dec;
    Conv3dLayer<T> head;

    static UNet3d make(ParamStore<T>& ps, const std::string& name, const UNetConfig& cfg,
                       Rng& rng) {
        cfg.validate();
        UNet3d n;
        n.cfg = cfg;
        for (std::int64_t i = 0; i < cfg.num_blocks; ++i) {
            std::int64_t cin = i == 0 ? cfg.in_channels : cfg.width(i - 1);
            n.enc.push_back(ConvBlock<T>::make(ps, name + ".enc" + std::to_string(i), cin,
                                               cfg.width(i), cfg.norm_groups, rng));
        }
        for (std::int64_t i = cfg.num_blocks - 2; i >= 0; --i) {
            n.up.push_back(Conv3dLayer<T>::make(ps, name + ".up" + std::to_string(i),
                                                cfg.width(i + 1), cfg.width(i), 1, rng));
            n.dec.push_back(ConvBlock<T>::make(ps, name + ".dec" + std::to_string(i),
                                               2 * cfg.width(i), cfg.width(i), cfg.norm_groups,
                                               rng));
        }
        n.head = Conv3dLayer<T>::make(ps, name + ".head", cfg.base_width, cfg.num_classes, 1, rng);
        return n;
    }

    EncoderFeatures<T> encode(const Var<T>& x) const {
        if (x->value.rank() != 4 || x->value.channels() != cfg.in_channels)
            throw std::invalid_argument("encode: expected (" + std::to_string(cfg.in_channels) +
                                        ",d,h,w) input, got " + x->value.shape_str());
        if (!x->value.spatial().divisible_by(cfg.pool_factor()))
            throw std::invalid_argument("encode: spatial dims " + x->value.spatial().str() +
                                        " not divisible by " + std::to_string(cfg.pool_factor()));
        EncoderFeatures<T> f;
        Var<T> t = x;
        for (std::int64_t i = 0; i < cfg.num_blocks; ++i) {
            if (i > 0) t = maxpool2(t);
            t = enc[i](t);
            f.per_block.push_back(t);
        }
        f.bottleneck = f.per_block.back();
        return f;
    }

    /// Decodes from features.bottleneck using features.per_block[0..n-2] as
    /// skips. Callers may substitute recalibrated skips; scales must match.
    Var<T> decode(const EncoderFeatures<T>& f) const {
        if (static_cast<std::int64_t>(f.per_block.size()) != cfg.num_blocks)
            throw std::invalid_argument("decode: expected " + std::to_string(cfg.num_blocks) +
                                        " feature levels, got " +
                                        std::to_string(f.per_block.size()));
        Var<T> t = f.bottleneck;
        for (std::int64_t level = cfg.num_blocks - 2; level >= 0; --level) {
            const std::int64_t k = cfg.num_blocks - 2 - level; // decoder stage index
            t = upsample_trilinear2(t);
            t = up[k](t);
            const Var<T>& skip = f.per_block[level];
            if (skip->value.spatial() != t->value.spatial())
                throw std::invalid_argument("decode: skip scale mismatch at level " +
                                            std::to_string(level) + ": " +
                                            skip->value.spatial().str() + " vs " +
                                            t->value.spatial().str());
            t = dec[k](concat_channels(skip, t));
        }
        return head(t);
    }

    Var<T> forward(const Var<T>& x) const { return decode(encode(x)); }
};

} // namespace smunet
