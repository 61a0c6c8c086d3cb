#pragma once

#include "smunet/volume.hpp"

namespace smunet {

/// Controls synthetic multi-modal volume generation. spatial_size is (H, W, D).
struct PhantomConfig {
    std::array<std::int64_t, 3> spatial_size = {32, 32, 32};
    std::int64_t num_volumes = 1;
    std::uint64_t seed = 0;
    double style_gap = 0.5;       // scales the per-modality texture noise
    double tumor_probability = 1.0;

    Dims3 dims() const { return {spatial_size[2], spatial_size[0], spatial_size[1]}; }

    void validate() const {
        for (auto s : spatial_size)
            if (s <= 0 || s % 16 != 0)
                throw std::invalid_argument(
                    "PhantomConfig: spatial sizes must be positive multiples of 16, got " +
                    std::to_string(s));
        if (num_volumes <= 0)
            throw std::invalid_argument("PhantomConfig: num_volumes must be positive");
        if (style_gap < 0 || !std::isfinite(style_gap))
            throw std::invalid_argument("PhantomConfig: style_gap must be non-negative");
        if (tumor_probability < 0 || tumor_probability > 1)
            throw std::invalid_argument("PhantomConfig: tumor_probability must be in [0,1]");
    }
};

namespace detail {

/// Sum of a few random low-frequency cosines, roughly unit amplitude.
struct SmoothField {
    struct Wave {
        double fd, fh, fw, phase, amp;
    };
    std::vector<Wave> waves;
    double norm = 1;

    static SmoothField make(Rng& rng, double min_wavelength, double max_wavelength) {
        SmoothField f;
        double a2 = 0;
        for (int k = 0; k < 5; ++k) {
            Wave w;
            const double wl = rng.uniform(min_wavelength, max_wavelength);
            // Random direction on the sphere.
            double x = rng.normal(), y = rng.normal(), z = rng.normal();
            const double n = std::sqrt(x * x + y * y + z * z) + 1e-12;
            w.fd = x / n / wl;
            w.fh = y / n / wl;
            w.fw = z / n / wl;
            w.phase = rng.uniform(0, 2 * M_PI);
            w.amp = rng.uniform(0.5, 1.0);
            a2 += w.amp * w.amp / 2;
            f.waves.push_back(w);
        }
        f.norm = 1.0 / std::sqrt(a2);
        return f;
    }

    double at(double d, double h, double w) const {
        double s = 0;
        for (const auto& wv : waves)
            s += wv.amp * std::cos(2 * M_PI * (wv.fd * d + wv.fh * h + wv.fw * w) + wv.phase);
        return s * norm;
    }
};

/// In-place separable box blur along each axis, run `passes` times.
inline void box_blur3(std::vector<double>& v, Dims3 sp, std::int64_t radius, int passes) {
    std::vector<double> tmp(v.size());
    const std::int64_t strides[3] = {sp.h * sp.w, sp.w, 1};
    const std::int64_t lens[3] = {sp.d, sp.h, sp.w};
    for (int pass = 0; pass < passes; ++pass) {
        for (int axis = 0; axis < 3; ++axis) {
            const std::int64_t len = lens[axis], stride = strides[axis];
            const std::int64_t nlines = sp.voxels() / len;
            for (std::int64_t line = 0; line < nlines; ++line) {
                // Base offset of this line in the flattened (d,h,w) grid.
                std::int64_t c0, c1, base;
                if (axis == 0) { c0 = line / sp.w; c1 = line % sp.w; base = c0 * sp.w + c1; }
                else if (axis == 1) { c0 = line / sp.w; c1 = line % sp.w; base = c0 * sp.h * sp.w + c1; }
                else { c0 = line / sp.h; c1 = line % sp.h; base = (c0 * sp.h + c1) * sp.w; }
                double acc = 0;
                const std::int64_t win = 2 * radius + 1;
                for (std::int64_t i = -radius; i <= radius; ++i) {
                    std::int64_t j = std::clamp<std::int64_t>(i, 0, len - 1);
                    acc += v[base + j * stride];
                }
                for (std::int64_t i = 0; i < len; ++i) {
                    tmp[base + i * stride] = acc / win;
                    std::int64_t out_j = std::clamp<std::int64_t>(i - radius, 0, len - 1);
                    std::int64_t in_j = std::clamp<std::int64_t>(i + radius + 1, 0, len - 1);
                    acc += v[base + in_j * stride] - v[base + out_j * stride];
                }
            }
            std::swap(v, tmp);
        }
    }
}

struct Ellipsoid {
    double cd, ch, cw; // center (voxel coordinates)
    double rd, rh, rw; // semi-axes

    bool contains(double d, double h, double w) const {
        const double x = (d - cd) / rd, y = (h - ch) / rh, z = (w - cw) / rw;
        return x * x + y * y + z * z <= 1.0;
    }
};

} // namespace detail

/// Per-modality fixed monotone intensity transforms. FLAIR saturates hard
/// (tumor subregions blur into one bright blob with weak boundary contrast),
/// T1 inverts contrast, T1c expands the top (enhancing core pops), T2 is
/// linear and clean.
inline double modality_transform(std::int64_t modality, double s) {
    switch (modality) {
    case 0: return 0.20 + 0.90 * std::pow(s, 0.30);  // FLAIR
    case 1: return 1.05 - 0.80 * std::pow(s, 1.10);  // T1 (monotone decreasing)
    case 2: return 0.15 + 0.95 * std::pow(s, 1.80);  // T1c
    default: return 0.10 + 0.90 * s;                 // T2
    }
}

/// Texture bandwidth and strength per modality; FLAIR carries the finest and
/// strongest texture so the modality gap is widest where the student looks.
inline constexpr std::array<std::int64_t, 4> kNoiseRadius = {1, 2, 3, 2};
inline constexpr std::array<double, 4> kNoiseAmp = {0.40, 0.12, 0.12, 0.10};

/// Generates deterministic synthetic volumes: a brain blob with a smooth
/// tissue field and, with tumor_probability, three nested tumor shells
/// (edema=2 containing core=1 containing enhancing=4). Every modality renders
/// the same geometry under its own monotone transform plus band-limited noise
/// scaled by style_gap.
inline std::vector<LabeledVolume> generate_phantom(const PhantomConfig& config) {
    config.validate();
    const Dims3 sp = config.dims();
    const std::int64_t nvox = sp.voxels();
    std::vector<LabeledVolume> out;
    out.reserve(config.num_volumes);

    for (std::int64_t vi = 0; vi < config.num_volumes; ++vi) {
        Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(vi)));

        detail::Ellipsoid brain;
        brain.cd = sp.d * rng.uniform(0.47, 0.53);
        brain.ch = sp.h * rng.uniform(0.47, 0.53);
        brain.cw = sp.w * rng.uniform(0.47, 0.53);
        brain.rd = sp.d * rng.uniform(0.34, 0.42);
        brain.rh = sp.h * rng.uniform(0.34, 0.42);
        brain.rw = sp.w * rng.uniform(0.34, 0.42);

        const bool has_tumor = rng.uniform() < config.tumor_probability;
        detail::Ellipsoid wt{}, ct{}, et{};
        if (has_tumor) {
            // Center snapped to a voxel so the innermost shell always owns
            // at least that voxel; radial gaps > 1 voxel keep each shell
            // non-empty along the +h axis.
            wt.cd = std::floor(brain.cd + brain.rd * rng.uniform(-0.2, 0.2)) + 0.5;
            wt.ch = std::floor(brain.ch + brain.rh * rng.uniform(-0.2, 0.2)) + 0.5;
            wt.cw = std::floor(brain.cw + brain.rw * rng.uniform(-0.2, 0.2)) + 0.5;
            auto radius = [&](double full) {
                return std::min(full * rng.uniform(0.17, 0.25), full * 0.45);
            };
            wt.rd = radius(sp.d);
            wt.rh = radius(sp.h);
            wt.rw = radius(sp.w);
            auto shrink = [](const detail::Ellipsoid& e, double f, double floor_r) {
                detail::Ellipsoid s = e;
                s.rd = std::max(e.rd * f, floor_r);
                s.rh = std::max(e.rh * f, floor_r);
                s.rw = std::max(e.rw * f, floor_r);
                return s;
            };
            et = shrink(wt, 0.34, 1.2);
            ct = shrink(wt, 0.62, et.rh + 1.1);
            ct.rd = std::max(ct.rd, et.rd + 1.1);
            ct.rw = std::max(ct.rw, et.rw + 1.1);
            wt.rd = std::max(wt.rd, ct.rd + 1.1);
            wt.rh = std::max(wt.rh, ct.rh + 1.1);
            wt.rw = std::max(wt.rw, ct.rw + 1.1);
        }

        auto tissue_field = detail::SmoothField::make(rng, 6.0, 14.0);

        LabeledVolume v{Tensor<float>::feature_map(kNumModalities, sp),
                        Tensor<std::uint8_t>({sp.d, sp.h, sp.w})};

        // Tissue scalar per voxel; zero outside the brain.
        std::vector<double> s_field(static_cast<std::size_t>(nvox), 0.0);
        std::vector<std::uint8_t> brain_mask(static_cast<std::size_t>(nvox), 0);
        std::int64_t i = 0;
        for (std::int64_t d = 0; d < sp.d; ++d)
            for (std::int64_t h = 0; h < sp.h; ++h)
                for (std::int64_t w = 0; w < sp.w; ++w, ++i) {
                    const double dc = d + 0.5, hc = h + 0.5, wc = w + 0.5;
                    if (!brain.contains(dc, hc, wc)) continue;
                    brain_mask[i] = 1;
                    const double g = tissue_field.at(dc, hc, wc);
                    std::uint8_t label = 0;
                    double base = 0.35, amp = 0.10;
                    if (has_tumor && wt.contains(dc, hc, wc)) {
                        if (et.contains(dc, hc, wc)) {
                            label = 4;
                            base = 0.95;
                            amp = 0.03;
                        } else if (ct.contains(dc, hc, wc)) {
                            label = 1;
                            base = 0.78;
                            amp = 0.04;
                        } else {
                            label = 2;
                            base = 0.62;
                            amp = 0.05;
                        }
                    }
                    v.labels[i] = label;
                    s_field[i] = std::clamp(base + amp * g, 0.02, 1.0);
                }

        // Render each modality: monotone transform + band-limited noise.
        for (std::int64_t m = 0; m < kNumModalities; ++m) {
            std::vector<double> noise(static_cast<std::size_t>(nvox));
            Rng nrng = rng.fork(stream_tag("noise") + static_cast<std::uint64_t>(m));
            for (auto& x : noise) x = nrng.normal();
            detail::box_blur3(noise, sp, kNoiseRadius[m], 2);
            // Normalize the smoothed noise to unit std over the brain.
            double s1 = 0, s2 = 0;
            std::int64_t n_in = 0;
            for (std::int64_t k = 0; k < nvox; ++k) {
                if (!brain_mask[k]) continue;
                s1 += noise[k];
                s2 += noise[k] * noise[k];
                ++n_in;
            }
            const double mu = n_in ? s1 / n_in : 0;
            const double sd = n_in ? std::sqrt(std::max(1e-12, s2 / n_in - mu * mu)) : 1;
            const double amp = config.style_gap * kNoiseAmp[m];
            float* ch = v.modalities.data() + m * nvox;
            for (std::int64_t k = 0; k < nvox; ++k) {
                if (!brain_mask[k]) continue;
                double val = modality_transform(m, s_field[k]);
                if (amp > 0) val += amp * (noise[k] - mu) / sd;
                ch[k] = static_cast<float>(std::max(val, 0.02));
            }
        }
        v.validate("phantom volume " + std::to_string(vi));
        out.push_back(std::move(v));
    }
    return out;
}

} // namespace smunet
