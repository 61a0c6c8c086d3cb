#pragma once

#include <map>

#include "smunet/nn_ops.hpp"

namespace smunet {

/// Ordered registry of named, trainable leaf tensors. Registration order is
/// deterministic and doubles as the optimizer slot order and the checkpoint
/// tensor order.
template <typename T>
class ParamStore {
public:
    Var<T> add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
        auto v = make_leaf(std::move(init), true);
        index_[name] = entries_.size();
        entries_.push_back({name, v});
        return v;
    }

    struct Entry {
        std::string name;
        Var<T> var;
    };

    const std::vector<Entry>& entries() const { return entries_; }

    Var<T> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].var;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Var<T>> with_prefix(const std::string& prefix) const {
        std::vector<Var<T>> out;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) out.push_back(e.var);
        return out;
    }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
        return out;
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.var->value.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

namespace init {

/// Kaiming-uniform fan-in initialization (ReLU gain).
template <typename T>
Tensor<T> kaiming(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

/// Small-scale normal init for heads that must start near (but not at) zero.
template <typename T>
Tensor<T> small_normal(std::vector<std::int64_t> shape, double scale, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(scale * rng.normal());
    return t;
}

template <typename T>
Tensor<T> constant(std::vector<std::int64_t> shape, T value) {
    Tensor<T> t(std::move(shape));
    t.fill(value);
    return t;
}

} // namespace init

/// 3D convolution layer; kernel 1 or 3, stride 1, same padding.
template <typename T>
struct Conv3dLayer {
    Var<T> w, b;
    std::int64_t cin = 0, cout = 0, k = 3;

    static Conv3dLayer make(ParamStore<T>& ps, const std::string& name, std::int64_t cin,
                            std::int64_t cout, std::int64_t k, Rng& rng) {
        Conv3dLayer l;
        l.cin = cin;
        l.cout = cout;
        l.k = k;
        const std::int64_t fan_in = cin * k * k * k;
        l.w = ps.add(name + ".w", init::kaiming<T>({cout, fan_in}, fan_in, rng));
        l.b = ps.add(name + ".b", init::constant<T>({cout}, T(0)));
        return l;
    }

    /// 1x1x1 conv initialized to pass the first `cout` input channels through
    /// unchanged and ignore the rest. Exact no-op until trained.
    static Conv3dLayer make_passthrough(ParamStore<T>& ps, const std::string& name,
                                        std::int64_t cin, std::int64_t cout) {
        Conv3dLayer l;
        l.cin = cin;
        l.cout = cout;
        l.k = 1;
        Tensor<T> w({cout, cin});
        for (std::int64_t o = 0; o < cout; ++o) w[o * cin + o] = T(1);
        l.w = ps.add(name + ".w", std::move(w));
        l.b = ps.add(name + ".b", init::constant<T>({cout}, T(0)));
        return l;
    }

    /// Passthrough on the first `cout` channels plus a small random mix-in of
    /// the remaining ones, keeping the auxiliary branch live from step one.
    static Conv3dLayer make_passthrough_mix(ParamStore<T>& ps, const std::string& name,
                                            std::int64_t cin, std::int64_t cout, double scale,
                                            Rng& rng) {
        Conv3dLayer l;
        l.cin = cin;
        l.cout = cout;
        l.k = 1;
        Tensor<T> w({cout, cin});
        for (std::int64_t o = 0; o < cout; ++o)
            for (std::int64_t i = 0; i < cin; ++i)
                w[o * cin + i] = i == o ? T(1) : (i < cout ? T(0) : static_cast<T>(scale * rng.normal()));
        l.w = ps.add(name + ".w", std::move(w));
        l.b = ps.add(name + ".b", init::constant<T>({cout}, T(0)));
        return l;
    }

    Var<T> operator()(const Var<T>& x) const { return conv3d(x, w, b, k); }

    std::int64_t weight_count() const { return cout * cin * k * k * k; }
};

template <typename T>
struct GroupNormLayer {
    Var<T> gamma, beta;
    std::int64_t groups = 1;

    static GroupNormLayer make(ParamStore<T>& ps, const std::string& name, std::int64_t channels,
                               std::int64_t groups) {
        GroupNormLayer l;
        l.groups = groups;
        l.gamma = ps.add(name + ".g", init::constant<T>({channels}, T(1)));
        l.beta = ps.add(name + ".b", init::constant<T>({channels}, T(0)));
        return l;
    }

    Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

template <typename T>
struct LinearLayer {
    Var<T> w, b;

    static LinearLayer make(ParamStore<T>& ps, const std::string& name, std::int64_t in,
                            std::int64_t out, Rng& rng) {
        LinearLayer l;
        l.w = ps.add(name + ".w", init::kaiming<T>({out, in}, in, rng));
        l.b = ps.add(name + ".b", init::constant<T>({out}, T(0)));
        return l;
    }

    static LinearLayer make_zero(ParamStore<T>& ps, const std::string& name, std::int64_t in,
                                 std::int64_t out) {
        LinearLayer l;
        l.w = ps.add(name + ".w", init::constant<T>({out, in}, T(0)));
        l.b = ps.add(name + ".b", init::constant<T>({out}, T(0)));
        return l;
    }

    static LinearLayer make_small(ParamStore<T>& ps, const std::string& name, std::int64_t in,
                                  std::int64_t out, double scale, Rng& rng) {
        LinearLayer l;
        l.w = ps.add(name + ".w", init::small_normal<T>({out, in}, scale, rng));
        l.b = ps.add(name + ".b", init::constant<T>({out}, T(0)));
        return l;
    }

    Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

/// Slice of a rank-1 tensor: v[offset .. offset+len).
template <typename T>
Var<T> slice_vec(const Var<T>& v, std::int64_t offset, std::int64_t len) {
    if (v->value.rank() != 1 || offset < 0 || offset + len > v->value.size())
        throw std::invalid_argument("slice_vec: bad range");
    Tensor<T> out({len});
    for (std::int64_t i = 0; i < len; ++i) out[i] = v->value[offset + i];
    return make_op(std::move(out), {v}, [v = v.get(), offset, len](Node<T>& n) {
        auto& gv = v->grad();
        const auto& g = n.grad();
        for (std::int64_t i = 0; i < len; ++i) gv[offset + i] += g[i];
    });
}

/// Concatenate rank-1 tensors.
template <typename T>
Var<T> concat_vec(const std::vector<Var<T>>& vs) {
    std::int64_t total = 0;
    for (const auto& v : vs) {
        if (v->value.rank() != 1) throw std::invalid_argument("concat_vec: rank-1 inputs only");
        total += v->value.size();
    }
    Tensor<T> out({total});
    std::int64_t off = 0;
    for (const auto& v : vs) {
        std::memcpy(out.data() + off, v->value.data(), sizeof(T) * v->value.size());
        off += v->value.size();
    }
    std::vector<Var<T>> parents = vs;
    return make_op(std::move(out), std::move(parents), [vs](Node<T>& n) {
        const auto& g = n.grad();
        std::int64_t off = 0;
        for (const auto& v : vs) {
            if (v->requires_grad) {
                auto& gv = v->grad();
                for (std::int64_t i = 0; i < gv.size(); ++i) gv[i] += g[off + i];
            }
            off += v->value.size();
        }
    });
}

} // namespace smunet
