#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tora2 {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct BoundsError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};

// Dense row-major tensor of doubles. Small value type; all math in the
// autograd layer operates on these buffers in place.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s)
        : shape(std::move(s)), data(static_cast<size_t>(count(shape)), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (count(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor: data size does not match shape " + shape_str());
    }

    static int64_t count(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw ShapeError("tensor: negative dimension");
            n *= d;
        }
        return n;
    }
    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        for (double& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    int64_t rows() const { return shape.at(0); }
    int64_t cols() const { return shape.at(1); }

    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    // 4D accessor for (F, H, W, C) volumes.
    double& at4(int64_t f, int64_t y, int64_t x, int64_t c) {
        return data[static_cast<size_t>(((f * shape[1] + y) * shape[2] + x) * shape[3] + c)];
    }
    double at4(int64_t f, int64_t y, int64_t x, int64_t c) const {
        return data[static_cast<size_t>(((f * shape[1] + y) * shape[2] + x) * shape[3] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs_diff(const Tensor& o) const {
        if (!same_shape(o)) throw ShapeError("max_abs_diff: shape mismatch");
        double m = 0.0;
        for (size_t i = 0; i < data.size(); ++i) m = std::max(m, std::fabs(data[i] - o.data[i]));
        return m;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

inline uint64_t fnv1a64(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}
inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Deterministic RNG. Normals are produced by an explicit Box-Muller over the
// mt19937_64 stream so draws do not depend on the stdlib's distribution
// implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t bits() { return gen_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 1.0 - uniform();  // (0, 1]
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    int64_t randint(int64_t n) {  // [0, n), rejection sampled
        if (n <= 0) throw ValueError("randint: n must be positive");
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Derives a decorrelated child stream; used to give every purpose
    // (weights, noise, dropout, data) its own reproducible sequence.
    Rng fork(const std::string& stream) {
        uint64_t h = fnv1a64(stream) ^ bits();
        return Rng(h * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull);
    }

    Tensor randn(std::vector<int64_t> shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = stddev * normal();
        return t;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Rng derive_rng(uint64_t seed, const std::string& stream) {
    return Rng(seed ^ fnv1a64(stream));
}

}  // namespace tora2
