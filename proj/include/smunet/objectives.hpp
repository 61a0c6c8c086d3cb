#pragma once

#include "smunet/style_match.hpp"
#include "smunet/volume.hpp"

namespace smunet {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kCriticClamp = 20.0;

/// Coefficients of the joint objective. Defaults balance the raw term
/// magnitudes at desk scale: the content term is an unnormalized half-SSE
/// over the bottleneck (~10^3 at width 64), and the consistency pair sits an
/// order above the Dice terms, so both are scaled down to keep segmentation
/// in charge of the update direction.
struct LossWeights {
    double lambda_seg = 1.0;
    double lambda_consistency = 0.1;
    double lambda_style = 1.0;
    double lambda_content = 1e-3;

    void validate() const {
        for (double v : {lambda_seg, lambda_consistency, lambda_style, lambda_content})
            if (!(v >= 0) || !std::isfinite(v))
                throw std::invalid_argument("LossWeights: coefficients must be finite and >= 0");
    }
};

/// Per-step observability of every joint-objective term.
struct LossReport {
    double seg_full = 0;
    double seg_missing = 0;
    double mi = 0;
    double l1 = 0;
    double style = 0;
    double content = 0;
    double joint = 0;
    double d_loss = 0; // adversarial only; optimized separately, not in joint
    bool has_d_loss = false;
    std::int64_t step = 0;
};

/// Weighted sum of Eq.-style components; the discriminator loss is excluded
/// (it has its own optimizer). Rejects non-finite components by name.
inline double joint_loss(double seg_full, double seg_missing, double mi, double l1, double style,
                         double content, const LossWeights& w) {
    w.validate();
    const std::pair<const char*, double> parts[] = {
        {"seg_full", seg_full}, {"seg_missing", seg_missing}, {"mi", mi},
        {"l1", l1},             {"style", style},             {"content", content}};
    for (const auto& [name, v] : parts)
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("joint_loss: non-finite component ") + name);
    return w.lambda_seg * (seg_full + seg_missing) + w.lambda_consistency * (mi + l1) +
           w.lambda_style * style + w.lambda_content * content;
}

inline double joint_loss(const LossReport& r, const LossWeights& w) {
    return joint_loss(r.seg_full, r.seg_missing, r.mi, r.l1, r.style, r.content, w);
}

namespace detail {

/// One-hot targets in class-channel order (background, 1, 2, 4).
template <typename T>
Tensor<T> one_hot_labels(const Tensor<std::uint8_t>& labels, std::int64_t num_classes) {
    const std::int64_t nvox = labels.size();
    Tensor<T> g({num_classes, labels.dim(0), labels.dim(1), labels.dim(2)});
    for (std::int64_t i = 0; i < nvox; ++i) {
        const std::int64_t cls = label_to_class(labels[i]);
        g[cls * nvox + i] = T(1);
    }
    return g;
}

} // namespace detail

/// Soft Dice loss: softmax over classes, per-class overlap with one-hot
/// targets, averaged over the classes present in the target.
template <typename T>
Var<T> dice_loss(const Var<T>& logits, const Tensor<std::uint8_t>& labels) {
    if (logits->value.rank() != 4)
        throw std::invalid_argument("dice_loss: logits must be (C,d,h,w)");
    const std::int64_t nc = logits->value.channels();
    const Dims3 sp = logits->value.spatial();
    if (labels.rank() != 3 || labels.dim(0) != sp.d || labels.dim(1) != sp.h ||
        labels.dim(2) != sp.w)
        throw std::invalid_argument("dice_loss: labels shape " + labels.shape_str() +
                                    " does not match logits " + logits->value.shape_str());
    Tensor<T> target = detail::one_hot_labels<T>(labels, nc);

    // Present-class mask and per-class target mass are constants.
    Tensor<T> target_sum({nc});
    Tensor<T> present({nc});
    std::int64_t n_present = 0;
    const std::int64_t nvox = sp.voxels();
    for (std::int64_t c = 0; c < nc; ++c) {
        double s = 0;
        for (std::int64_t i = 0; i < nvox; ++i) s += target[c * nvox + i];
        target_sum[c] = static_cast<T>(s);
        if (s > 0) {
            present[c] = T(1);
            ++n_present;
        }
    }

    auto p = softmax_channels(logits);
    auto inter = sum_spatial(mul(p, make_const(std::move(target))));
    auto p_sum = sum_spatial(p);
    auto numer = add_scalar(mul_scalar(inter, T(2)), static_cast<T>(kDiceEps));
    auto denom = add_scalar(add(p_sum, make_const(std::move(target_sum))),
                            static_cast<T>(kDiceEps));
    auto dice = divide(numer, denom);
    auto mean_present =
        mul_scalar(sum_all(mul(dice, make_const(std::move(present)))), T(1) / T(n_present));
    return add_scalar(neg(mean_present), T(1));
}

/// Eq.-style content distillation: half the summed squared difference, with
/// the full path's content treated as a constant.
template <typename T>
Var<T> content_loss(const ContentRepresentation<T>& fc_f, const ContentRepresentation<T>& fc_m) {
    if (!fc_f.map->value.same_shape(fc_m.map->value))
        throw std::invalid_argument("content_loss: shape mismatch " + fc_f.map->value.shape_str() +
                                    " vs " + fc_m.map->value.shape_str());
    return mul_scalar(sum_all(square(sub(fc_m.map, detach(fc_f.map)))), T(0.5));
}

/// Global consistency: sum over classes of |GAP(sl_f) - GAP(sl_m)|, the full
/// path constant.
template <typename T>
Var<T> l1_global_loss(const Var<T>& sl_f, const Var<T>& sl_m) {
    if (!sl_f->value.same_shape(sl_m->value))
        throw std::invalid_argument("l1_global_loss: shape mismatch");
    return sum_all(abs_of(sub(global_avg_pool(detach(sl_f)), global_avg_pool(sl_m))));
}

/// Pointwise co-training critic: two layers over the concatenated class-score
/// vectors at each spatial position, 64 hidden units.
template <typename T>
struct Critic {
    Conv3dLayer<T> l1, l2;

    static Critic make(ParamStore<T>& ps, const std::string& name, std::int64_t num_classes,
                       Rng& rng) {
        Critic c;
        c.l1 = Conv3dLayer<T>::make(ps, name + ".l1", 2 * num_classes, 64, 1, rng);
        c.l2 = Conv3dLayer<T>::make(ps, name + ".l2", 64, 1, 1, rng);
        return c;
    }

    Var<T> operator()(const Var<T>& pair_scores) const {
        return clamp(l2(relu(l1(pair_scores))), static_cast<T>(-kCriticClamp),
                     static_cast<T>(kCriticClamp));
    }
};

/// Seeded random derangement of [0, n): a permutation with no fixed points,
/// built by Fisher-Yates with rejection.
inline std::vector<std::int64_t> seeded_derangement(std::int64_t n, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("seeded_derangement: need at least 2 positions");
    Rng rng(seed);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    for (int attempt = 0; attempt < 64; ++attempt) {
        for (std::int64_t i = 0; i < n; ++i) perm[i] = i;
        for (std::int64_t i = n - 1; i > 0; --i)
            std::swap(perm[i], perm[rng.below(i + 1)]);
        bool fixed = false;
        for (std::int64_t i = 0; i < n; ++i)
            if (perm[i] == i) {
                fixed = true;
                break;
            }
        if (!fixed) return perm;
    }
    // Rejection is astronomically unlikely to run out; fall back to a cyclic
    // shift, which is always a derangement.
    for (std::int64_t i = 0; i < n; ++i) perm[i] = (i + 1) % n;
    return perm;
}

/// Jensen-Shannon mutual-information consistency term as printed:
///   E_joint[-sp(CT)] - E_marginal[sp(CT)]
/// where joint pairs align spatial positions of both paths and marginal pairs
/// shuffle the missing path's positions by a seeded derangement (batch size is
/// 1, so negatives are intra-volume). The full path is constant; the critic
/// output is clamped to +-20.
template <typename T>
Var<T> mi_js_loss(const Var<T>& sl_f, const Var<T>& sl_m, const Critic<T>& critic,
                  std::uint64_t shuffle_seed) {
    if (!sl_f->value.same_shape(sl_m->value))
        throw std::invalid_argument("mi_js_loss: shape mismatch");
    const std::int64_t nvox = sl_m->value.spatial().voxels();
    if (nvox < 2)
        throw std::invalid_argument("mi_js_loss: need at least 2 spatial positions");
    auto f_const = detach(sl_f);
    auto joint_scores = critic(concat_channels(f_const, sl_m));
    auto shuffled = gather_positions(sl_m, seeded_derangement(nvox, shuffle_seed));
    auto marginal_scores = critic(concat_channels(f_const, shuffled));
    return sub(mean_all(neg(softplus(joint_scores))), mean_all(softplus(marginal_scores)));
}

} // namespace smunet
