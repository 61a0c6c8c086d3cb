#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "smunet/tensor.hpp"

namespace smunet {

// Reverse-mode autodiff over Tensor<T>. A step builds a DAG of Node objects;
// backward() runs one reverse topological sweep and accumulates gradients
// into every node that requires them. Graphs are throwaway per step;
// parameters are long-lived leaves owned by the model structs.

template <typename T>
class Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
class Node {
public:
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> backprop; // reads this->grad_, writes parents' grads

    explicit Node(Tensor<T> v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

    Tensor<T>& grad() {
        if (grad_.size() == 0) grad_ = Tensor<T>(value.shape());
        return grad_;
    }

    bool has_grad() const { return grad_.size() != 0; }

    void zero_grad() {
        if (grad_.size() != 0) grad_.fill(T(0));
    }

private:
    Tensor<T> grad_;
};

template <typename T>
Var<T> make_leaf(Tensor<T> v, bool requires_grad = false) {
    return std::make_shared<Node<T>>(std::move(v), requires_grad);
}

template <typename T>
Var<T> make_const(Tensor<T> v) {
    return make_leaf(std::move(v), false);
}

template <typename T>
Var<T> make_scalar(T x) {
    return make_leaf(Tensor<T>::scalar(x), false);
}

/// Cuts the tape: same value, no gradient path to the source.
template <typename T>
Var<T> detach(const Var<T>& a) {
    return make_leaf(a->value, false);
}

namespace detail {

template <typename T>
bool any_requires(std::initializer_list<const Var<T>*> ps) {
    for (auto p : ps)
        if ((*p)->requires_grad) return true;
    return false;
}

} // namespace detail

/// Builds an op node; backprop is dropped when no parent needs gradients.
template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, F&& backprop) {
    bool rg = false;
    for (auto& p : parents) rg = rg || p->requires_grad;
    auto n = std::make_shared<Node<T>>(std::move(value), rg);
    if (rg) {
        n->parents = std::move(parents);
        n->backprop = std::forward<F>(backprop);
    }
    return n;
}

/// Reverse sweep from a scalar root. Seeds d(root)/d(root) = 1.
template <typename T>
void backward(const Var<T>& root) {
    if (root->value.size() != 1) throw std::logic_error("backward() needs a scalar root");
    if (!root->requires_grad) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop && n->has_grad()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise / scalar / reduction ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
}

} // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    return make_op(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node<T>& n) {
        const auto& g = n.grad();
        if (a->requires_grad) {
            auto& ga = a->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    return make_op(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node<T>& n) {
        const auto& g = n.grad();
        if (a->requires_grad) {
            auto& ga = a->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    return make_op(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node<T>& n) {
        const auto& g = n.grad();
        if (a->requires_grad) {
            auto& ga = a->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b->value[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a->value[i];
        }
    });
}

template <typename T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape(a, b, "divide");
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] / b->value[i];
    return make_op(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node<T>& n) {
        const auto& g = n.grad();
        if (a->requires_grad) {
            auto& ga = a->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b->value[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad();
            for (std::int64_t i = 0; i < g.size(); ++i) {
                T bv = b->value[i];
                gb[i] -= g[i] * a->value[i] / (bv * bv);
            }
        }
    });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T c) {
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * c;
    return make_op(std::move(out), {a}, [a = a.get(), c](Node<T>& n) {
        const auto& g = n.grad();
        auto& ga = a->grad();
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + c;
    return make_op(std::move(out), {a}, [a = a.get()](Node<T>& n) {
        const auto& g = n.grad();
        auto& ga = a->grad();
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return mul_scalar(a, T(-1));
}

namespace detail {

// Generic unary op: fn(x) -> y, dfn(x, y) -> dy/dx.
template <typename T, typename FwdF, typename DerivF>
Var<T> unary(const Var<T>& a, FwdF&& f, DerivF&& df) {
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = f(a->value[i]);
    return make_op(std::move(out), {a}, [a = a.get(), df](Node<T>& n) {
        const auto& g = n.grad();
        auto& ga = a->grad();
        for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(a->value[i], n.value[i]);
    });
}

} // namespace detail

template <typename T>
Var<T> relu(const Var<T>& a) {
    return detail::unary(
        a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    return detail::unary(
        a,
        [](T x) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
        },
        [](T, T y) { return y * (T(1) - y); });
}

/// sp(z) = log(1 + e^z), evaluated stably.
template <typename T>
Var<T> softplus(const Var<T>& a) {
    return detail::unary(
        a,
        [](T x) {
            return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        },
        [](T x, T) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
        });
}

template <typename T>
Var<T> exp_of(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log_of(const Var<T>& a) {
    return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> abs_of(const Var<T>& a) {
    return detail::unary(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

/// Gradient is passed through strictly inside (lo, hi) and cut at the rails.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    return detail::unary(
        a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    // Accumulate in double so float-instantiated losses keep full precision.
    double s = 0;
    for (std::int64_t i = 0; i < a->value.size(); ++i) s += static_cast<double>(a->value[i]);
    return make_op(Tensor<T>::scalar(static_cast<T>(s)), {a}, [a = a.get()](Node<T>& n) {
        T g = n.grad()[0];
        auto& ga = a->grad();
        for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a->value.size()));
}

/// (C, d, h, w) -> (C): sum over spatial positions.
template <typename T>
Var<T> sum_spatial(const Var<T>& a) {
    const std::int64_t c = a->value.channels();
    const std::int64_t nvox = a->value.size() / c;
    Tensor<T> out({c});
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double s = 0;
        const T* base = a->value.data() + ch * nvox;
        for (std::int64_t i = 0; i < nvox; ++i) s += static_cast<double>(base[i]);
        out[ch] = static_cast<T>(s);
    }
    return make_op(std::move(out), {a}, [a = a.get(), c, nvox](Node<T>& n) {
        const auto& g = n.grad();
        auto& ga = a->grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T gc = g[ch];
            T* base = ga.data() + ch * nvox;
            for (std::int64_t i = 0; i < nvox; ++i) base[i] += gc;
        }
    });
}

/// Global average pooling: (C, d, h, w) -> (C).
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
    const std::int64_t c = a->value.channels();
    const std::int64_t nvox = a->value.size() / c;
    return mul_scalar(sum_spatial(a), T(1) / static_cast<T>(nvox));
}

/// Concatenate two feature maps along the channel axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 4 || b->value.rank() != 4 || a->value.spatial() != b->value.spatial())
        throw std::invalid_argument("concat_channels: incompatible shapes " +
                                    a->value.shape_str() + " vs " + b->value.shape_str());
    const std::int64_t ca = a->value.channels(), cb = b->value.channels();
    const Dims3 sp = a->value.spatial();
    const std::int64_t nvox = sp.voxels();
    Tensor<T> out = Tensor<T>::feature_map(ca + cb, sp);
    std::memcpy(out.data(), a->value.data(), sizeof(T) * ca * nvox);
    std::memcpy(out.data() + ca * nvox, b->value.data(), sizeof(T) * cb * nvox);
    return make_op(std::move(out), {a, b}, [a = a.get(), b = b.get(), ca, cb, nvox](Node<T>& n) {
        const auto& g = n.grad();
        if (a->requires_grad) {
            auto& ga = a->grad();
            for (std::int64_t i = 0; i < ca * nvox; ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            auto& gb = b->grad();
            const T* src = g.data() + ca * nvox;
            for (std::int64_t i = 0; i < cb * nvox; ++i) gb[i] += src[i];
        }
    });
}

/// Appends a vector z as constant-valued channels broadcast over space.
template <typename T>
Var<T> broadcast_concat(const Var<T>& a, const Var<T>& z) {
    if (a->value.rank() != 4 || z->value.rank() != 1)
        throw std::invalid_argument("broadcast_concat: need (C,sp) and (d) inputs");
    const std::int64_t ca = a->value.channels(), dz = z->value.size();
    const Dims3 sp = a->value.spatial();
    const std::int64_t nvox = sp.voxels();
    Tensor<T> out = Tensor<T>::feature_map(ca + dz, sp);
    std::memcpy(out.data(), a->value.data(), sizeof(T) * ca * nvox);
    for (std::int64_t i = 0; i < dz; ++i) {
        T* dst = out.data() + (ca + i) * nvox;
        std::fill(dst, dst + nvox, z->value[i]);
    }
    return make_op(std::move(out), {a, z}, [a = a.get(), z = z.get(), ca, dz, nvox](Node<T>& n) {
        const auto& g = n.grad();
        if (a->requires_grad) {
            auto& ga = a->grad();
            for (std::int64_t i = 0; i < ca * nvox; ++i) ga[i] += g[i];
        }
        if (z->requires_grad) {
            auto& gz = z->grad();
            for (std::int64_t i = 0; i < dz; ++i) {
                const T* src = g.data() + (ca + i) * nvox;
                double s = 0;
                for (std::int64_t k = 0; k < nvox; ++k) s += static_cast<double>(src[k]);
                gz[i] += static_cast<T>(s);
            }
        }
    });
}

/// y = x * scale_c + shift_c, broadcast per channel.
template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& scale, const Var<T>& shift) {
    const std::int64_t c = x->value.channels();
    if (scale->value.size() != c || shift->value.size() != c)
        throw std::invalid_argument("channel_affine: scale/shift must have one entry per channel");
    const std::int64_t nvox = x->value.size() / c;
    Tensor<T> out(x->value.shape());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T s = scale->value[ch], t = shift->value[ch];
        const T* src = x->value.data() + ch * nvox;
        T* dst = out.data() + ch * nvox;
        for (std::int64_t i = 0; i < nvox; ++i) dst[i] = src[i] * s + t;
    }
    return make_op(std::move(out), {x, scale, shift},
                   [x = x.get(), sc = scale.get(), sh = shift.get(), c, nvox](Node<T>& n) {
                       const auto& g = n.grad();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const T* gch = g.data() + ch * nvox;
                           if (x->requires_grad) {
                               T* gx = x->grad().data() + ch * nvox;
                               const T s = sc->value[ch];
                               for (std::int64_t i = 0; i < nvox; ++i) gx[i] += gch[i] * s;
                           }
                           if (sc->requires_grad) {
                               const T* xv = x->value.data() + ch * nvox;
                               double s = 0;
                               for (std::int64_t i = 0; i < nvox; ++i)
                                   s += static_cast<double>(gch[i]) * xv[i];
                               sc->grad()[ch] += static_cast<T>(s);
                           }
                           if (sh->requires_grad) {
                               double s = 0;
                               for (std::int64_t i = 0; i < nvox; ++i) s += static_cast<double>(gch[i]);
                               sh->grad()[ch] += static_cast<T>(s);
                           }
                       }
                   });
}

/// Permutes spatial positions: y[c][i] = x[c][perm[i]]. perm is a bijection.
template <typename T>
Var<T> gather_positions(const Var<T>& x, std::vector<std::int64_t> perm) {
    const std::int64_t c = x->value.channels();
    const std::int64_t nvox = x->value.size() / c;
    if (static_cast<std::int64_t>(perm.size()) != nvox)
        throw std::invalid_argument("gather_positions: permutation length mismatch");
    Tensor<T> out(x->value.shape());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* src = x->value.data() + ch * nvox;
        T* dst = out.data() + ch * nvox;
        for (std::int64_t i = 0; i < nvox; ++i) dst[i] = src[perm[i]];
    }
    return make_op(std::move(out), {x},
                   [x = x.get(), perm = std::move(perm), c, nvox](Node<T>& n) {
                       const auto& g = n.grad();
                       auto& gx = x->grad();
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                           const T* gsrc = g.data() + ch * nvox;
                           T* gdst = gx.data() + ch * nvox;
                           for (std::int64_t i = 0; i < nvox; ++i) gdst[perm[i]] += gsrc[i];
                       }
                   });
}

/// Softmax across the channel axis at every spatial position.
template <typename T>
Var<T> softmax_channels(const Var<T>& a) {
    const std::int64_t c = a->value.channels();
    const std::int64_t nvox = a->value.size() / c;
    Tensor<T> out(a->value.shape());
    for (std::int64_t i = 0; i < nvox; ++i) {
        T mx = a->value[i];
        for (std::int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, a->value[ch * nvox + i]);
        double denom = 0;
        for (std::int64_t ch = 0; ch < c; ++ch)
            denom += std::exp(static_cast<double>(a->value[ch * nvox + i] - mx));
        for (std::int64_t ch = 0; ch < c; ++ch)
            out[ch * nvox + i] = static_cast<T>(
                std::exp(static_cast<double>(a->value[ch * nvox + i] - mx)) / denom);
    }
    return make_op(std::move(out), {a}, [a = a.get(), c, nvox](Node<T>& n) {
        const auto& g = n.grad();
        const auto& y = n.value;
        auto& ga = a->grad();
        for (std::int64_t i = 0; i < nvox; ++i) {
            double dot = 0;
            for (std::int64_t ch = 0; ch < c; ++ch)
                dot += static_cast<double>(g[ch * nvox + i]) * y[ch * nvox + i];
            for (std::int64_t ch = 0; ch < c; ++ch) {
                std::int64_t k = ch * nvox + i;
                ga[k] += y[k] * (g[k] - static_cast<T>(dot));
            }
        }
    });
}

} // namespace smunet
