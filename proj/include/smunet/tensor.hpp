#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smunet {

/// Spatial extent of a 3D grid, stored as (d, h, w) with w fastest in memory.
struct Dims3 {
    std::int64_t d = 0, h = 0, w = 0;

    std::int64_t voxels() const { return d * h * w; }
    bool operator==(const Dims3&) const = default;

    Dims3 halved() const { return {d / 2, h / 2, w / 2}; }
    Dims3 doubled() const { return {d * 2, h * 2, w * 2}; }

    bool divisible_by(std::int64_t f) const {
        return d % f == 0 && h % f == 0 && w % f == 0;
    }

    std::string str() const {
        std::ostringstream os;
        os << d << "x" << h << "x" << w;
        return os.str();
    }
};

/// Dense tensor over scalar T. Rank <= 4; feature maps are (channels, d, h, w).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (auto s : shape_) {
            if (s <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= s;
        }
        v_.assign(static_cast<std::size_t>(n), T(0));
    }

    static Tensor scalar(T x) {
        Tensor t(std::vector<std::int64_t>{1});
        t.v_[0] = x;
        return t;
    }

    static Tensor feature_map(std::int64_t channels, Dims3 sp) {
        return Tensor({channels, sp.d, sp.h, sp.w});
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }

    /// Channel count of a feature map / leading dimension otherwise.
    std::int64_t channels() const { return shape_.empty() ? 1 : shape_[0]; }

    Dims3 spatial() const {
        if (shape_.size() != 4) throw std::logic_error("spatial() needs a rank-4 tensor");
        return {shape_[1], shape_[2], shape_[3]};
    }

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }
    T& operator[](std::int64_t i) { return v_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return v_[static_cast<std::size_t>(i)]; }

    T item() const {
        if (v_.size() != 1) throw std::logic_error("item() on non-scalar tensor");
        return v_[0];
    }

    void fill(T x) { std::fill(v_.begin(), v_.end(), x); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T x : v_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(v_[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ")";
        return os.str();
    }

private:
    template <typename U>
    friend class Tensor;

    std::vector<std::int64_t> shape_;
    std::vector<T> v_;
};

/// Deterministic counter-free PRNG (SplitMix64). Used everywhere instead of
/// std:: distributions so streams are identical across platforms and builds.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; one value per call, deterministic.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform integer in [0, n).
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    /// Derived stream; tag mixes the parent state without advancing it.
    Rng fork(std::uint64_t tag) const {
        std::uint64_t z = state_ ^ (0x9e3779b97f4a7c15ull * (tag + 0x6a09e667f3bcc909ull));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        return Rng(z ^ (z >> 27));
    }

private:
    std::uint64_t state_;
};

/// Stable 64-bit mix for deriving per-step / per-stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t stream_tag(const char* name) {
    // FNV-1a over the stream name.
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const char* p = name; *p; ++p) h = (h ^ static_cast<unsigned char>(*p)) * 0x100000001b3ull;
    return h;
}

} // namespace smunet
