#pragma once

#include "smunet/representation.hpp"

namespace smunet {

inline constexpr double kLogClamp = 1e-7; // log-argument clamp for GAN losses

/// Weighted Gram-matrix MSE over all style layers:
///   sum_l w_l / (4 C_l^2 N_l^2) * sum_j (G_f^{l,j} - G_m^{l,j})^2.
/// The full-path style is treated as a constant so distillation flows
/// teacher -> student only. Weights default to uniform 1/L.
template <typename T>
Var<T> texture_loss(const StyleRepresentation<T>& style_f, const StyleRepresentation<T>& style_m,
                    std::vector<double> weights = {}) {
    if (style_f.size() != style_m.size())
        throw std::invalid_argument("texture_loss: layer count mismatch");
    const std::size_t L = style_f.size();
    if (weights.empty()) weights.assign(L, 1.0 / static_cast<double>(L));
    if (weights.size() != L) throw std::invalid_argument("texture_loss: weight count mismatch");
    Var<T> total = make_scalar(T(0));
    for (std::size_t l = 0; l < L; ++l) {
        if (!style_f.layers[l]->value.same_shape(style_m.layers[l]->value))
            throw std::invalid_argument("texture_loss: shape mismatch at layer " +
                                        std::to_string(l));
        const double c = static_cast<double>(style_m.channels[l]);
        const double n = static_cast<double>(style_m.positions[l]);
        auto gf = gram(detach(style_f.layers[l]));
        auto gm = gram(style_m.layers[l]);
        auto sq = sum_all(square(sub(gf, gm)));
        total = add(total, mul_scalar(sq, static_cast<T>(weights[l] / (4.0 * c * c * n * n))));
    }
    return total;
}

/// Parameters of a diagonal Gaussian in the d_z-dimensional latent space.
template <typename T>
struct GaussianStats {
    Var<T> mean;
    Var<T> log_std;
};

/// Pools each style layer, concatenates, and maps through a two-layer head to
/// (mean, log_std). A zero-weight head yields the standard normal.
template <typename T>
struct GaussianHead {
    LinearLayer<T> l1, l2;
    std::int64_t d_z = 0;

    static GaussianHead make(ParamStore<T>& ps, const std::string& name, std::int64_t in,
                             std::int64_t d_z, Rng& rng) {
        GaussianHead h;
        h.d_z = d_z;
        h.l1 = LinearLayer<T>::make_small(ps, name + ".l1", in, 64, 0.05, rng);
        h.l2 = LinearLayer<T>::make_small(ps, name + ".l2", 64, 2 * d_z, 0.05, rng);
        return h;
    }
};

template <typename T>
GaussianStats<T> encode_gaussian(const StyleRepresentation<T>& style,
                                 const GaussianHead<T>& head) {
    std::vector<Var<T>> pooled;
    for (const auto& layer : style.layers) pooled.push_back(global_avg_pool(layer));
    auto h = head.l2(relu(head.l1(concat_vec(pooled))));
    return {slice_vec(h, 0, head.d_z), slice_vec(h, head.d_z, head.d_z)};
}

/// Closed-form KL(q || p) between diagonal Gaussians:
///   sum_i log(sp_i/sq_i) + (sq_i^2 + (mq_i - mp_i)^2) / (2 sp_i^2) - 1/2.
template <typename T>
Var<T> gaussian_kl(const GaussianStats<T>& q, const GaussianStats<T>& p) {
    if (q.mean->value.size() != p.mean->value.size() ||
        q.log_std->value.size() != p.log_std->value.size() ||
        q.mean->value.size() != q.log_std->value.size())
        throw std::invalid_argument("gaussian_kl: dimension mismatch");
    auto var_q = square(exp_of(q.log_std));
    auto var_p = square(exp_of(p.log_std));
    auto dmean2 = square(sub(q.mean, p.mean));
    auto ratio = divide(add(var_q, dmean2), mul_scalar(var_p, T(2)));
    auto terms = add_scalar(add(sub(p.log_std, q.log_std), ratio), T(-0.5));
    return sum_all(terms);
}

/// Distribution matching: the posterior head conditions on the missing path's
/// style, the prior head on the (constant) full path's style; the loss is
/// KL(T || P) and the signal carries z = mean + std * eps. At inference only
/// style_m is needed and eps is pinned to zero.
template <typename T>
struct DistributionMatch {
    Var<T> loss;
    MatchingSignal<T> signal;
};

template <typename T>
DistributionMatch<T> distribution_match(const StyleRepresentation<T>* style_f,
                                        const StyleRepresentation<T>& style_m,
                                        const GaussianHead<T>& posterior,
                                        const GaussianHead<T>& prior,
                                        const Tensor<T>& eps) {
    auto q = encode_gaussian(style_m, posterior);
    if (eps.size() != posterior.d_z)
        throw std::invalid_argument("distribution_match: eps dimension mismatch");
    MatchingSignal<T> sig;
    sig.variant = StyleModule::distribution;
    sig.z = add(q.mean, mul(exp_of(q.log_std), make_const(eps)));

    Var<T> loss;
    if (style_f != nullptr) {
        auto p = encode_gaussian(detach_style(*style_f), prior);
        loss = gaussian_kl(q, p);
    } else {
        loss = make_scalar(T(0)); // inference: no full path available
    }
    return {loss, sig};
}

/// Style discriminator: three 3x3x3 conv blocks (ReLU + per-channel norm over
/// spatial positions, i.e. batch norm at batch size 1) on the deepest style
/// layer, then global pooling and a sigmoid head. Returns the probability
/// that the style came from the full-modality path.
template <typename T>
struct DiscriminatorNet {
    Conv3dLayer<T> c1, c2, c3;
    GroupNormLayer<T> n1, n2, n3;
    LinearLayer<T> out;

    static DiscriminatorNet make(ParamStore<T>& ps, const std::string& name, std::int64_t cin,
                                 Rng& rng) {
        DiscriminatorNet d;
        const std::int64_t w1 = std::max<std::int64_t>(cin / 2, 4);
        const std::int64_t w2 = std::max<std::int64_t>(cin / 4, 4);
        const std::int64_t w3 = std::max<std::int64_t>(cin / 8, 4);
        d.c1 = Conv3dLayer<T>::make(ps, name + ".conv1", cin, w1, 3, rng);
        d.n1 = GroupNormLayer<T>::make(ps, name + ".bn1", w1, w1);
        d.c2 = Conv3dLayer<T>::make(ps, name + ".conv2", w1, w2, 3, rng);
        d.n2 = GroupNormLayer<T>::make(ps, name + ".bn2", w2, w2);
        d.c3 = Conv3dLayer<T>::make(ps, name + ".conv3", w2, w3, 3, rng);
        d.n3 = GroupNormLayer<T>::make(ps, name + ".bn3", w3, w3);
        d.out = LinearLayer<T>::make(ps, name + ".out", w3, 1, rng);
        return d;
    }

    Var<T> operator()(const Var<T>& deepest_style) const {
        // conv -> norm -> ReLU; normalizing after the ReLU would hand the
        // global pooling a zero-mean map and stall every conv gradient.
        auto t = relu(n1(c1(deepest_style)));
        t = relu(n2(c2(t)));
        t = relu(n3(c3(t)));
        return sigmoid(out(global_avg_pool(t)));
    }
};

template <typename T>
Var<T> discriminator(const StyleRepresentation<T>& style, const DiscriminatorNet<T>& net) {
    if (style.layers.empty()) throw std::invalid_argument("discriminator: empty style");
    return net(style.layers.back());
}

/// Two-player objective with the full path as real:
///   d_loss = -log D(fs_f) - log(1 - D(fs_m)), updates the discriminator only
///            (both styles are constants here);
///   g_loss = -log D(fs_m), non-saturating, reaches the missing path only.
/// Log arguments are clamped to [1e-7, 1 - 1e-7].
template <typename T>
struct AdversarialLosses {
    Var<T> d_loss;
    Var<T> g_loss;
    MatchingSignal<T> signal;
};

template <typename T>
AdversarialLosses<T> adversarial_losses(const StyleRepresentation<T>& style_f,
                                        const StyleRepresentation<T>& style_m,
                                        const DiscriminatorNet<T>& net) {
    if (style_f.size() != style_m.size() || style_f.layers.empty())
        throw std::invalid_argument("adversarial_losses: invalid style pair");
    const T lo = static_cast<T>(kLogClamp), hi = static_cast<T>(1.0 - kLogClamp);

    auto d_real = clamp(discriminator(detach_style(style_f), net), lo, hi);
    auto d_fake = clamp(discriminator(detach_style(style_m), net), lo, hi);
    auto d_loss = neg(add(log_of(d_real), log_of(sub(make_scalar(T(1)), d_fake))));

    auto g_prob = clamp(discriminator(style_m, net), lo, hi);
    auto g_loss = neg(log_of(g_prob));

    return {d_loss, g_loss, recalibration_signal(StyleModule::adversarial, style_m)};
}

} // namespace smunet
