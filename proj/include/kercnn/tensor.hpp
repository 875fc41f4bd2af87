#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace kercnn {

// ---------------------------------------------------------------------------
// Shape: dense row-major extents, rank 1..4. Missing trailing dims read as 1,
// so count() is always the product of all four slots.
// ---------------------------------------------------------------------------
struct Shape {
    std::array<int, 4> d{1, 1, 1, 1};
    int rank = 1;

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        if (dims.size() < 1 || dims.size() > 4)
            throw std::invalid_argument("Shape: rank must be 1..4");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int v : dims) {
            if (v < 0) throw std::invalid_argument("Shape: negative extent");
            d[i++] = v;
        }
    }

    int operator[](int i) const { return d[static_cast<std::size_t>(i)]; }

    std::size_t count() const {
        return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) *
               static_cast<std::size_t>(d[2]) * static_cast<std::size_t>(d[3]);
    }

    bool operator==(const Shape& o) const { return rank == o.rank && d == o.d; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank; ++i) {
            if (i) s += ",";
            s += std::to_string(d[static_cast<std::size_t>(i)]);
        }
        return s + "]";
    }
};

// ---------------------------------------------------------------------------
// Tensor<T>: owning row-major buffer with a Shape. The scalar type is the
// template knob that separates fast float32 training from float64 oracles.
//
// Index order follows the layouts used throughout:
//   images      (H, W, C)
//   filters     (i, j, k, c)   k = output feature, c = input channel
//   lat. kernel (i, j, f, g)   f = source feature, g = target feature
// ---------------------------------------------------------------------------
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.count(), fill) {}

    static Tensor zeros(std::initializer_list<int> dims) { return Tensor(Shape(dims)); }
    static Tensor full(std::initializer_list<int> dims, T v) { return Tensor(Shape(dims), v); }
    static Tensor from(std::initializer_list<int> dims, std::vector<T> values) {
        Tensor t{Shape(dims)};
        if (values.size() != t.size())
            throw std::invalid_argument("Tensor::from: value count does not match shape");
        t.data_ = std::move(values);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return shape_.rank; }
    int dim(int i) const { return shape_[i]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& flat(std::size_t i) { return data_[i]; }
    const T& flat(std::size_t i) const { return data_[i]; }

    T& operator()(int i) { return data_[idx1(i)]; }
    const T& operator()(int i) const { return data_[idx1(i)]; }
    T& operator()(int i, int j) { return data_[idx2(i, j)]; }
    const T& operator()(int i, int j) const { return data_[idx2(i, j)]; }
    T& operator()(int i, int j, int k) { return data_[idx3(i, j, k)]; }
    const T& operator()(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
    T& operator()(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
    const T& operator()(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

    // Same data, new extents; count must match (flatten and friends).
    Tensor reshaped(Shape s) const {
        if (s.count() != size())
            throw std::invalid_argument("Tensor::reshaped: element count mismatch " +
                                        shape_.str() + " -> " + s.str());
        Tensor t = *this;
        t.shape_ = s;
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void check_finite(const char* what) const {
        if (!all_finite())
            throw std::runtime_error(std::string("non-finite values in ") + what);
    }

    T max_abs_diff(const Tensor& o) const {
        if (shape_ != o.shape_)
            throw std::invalid_argument("max_abs_diff: shape mismatch");
        T m = T(0);
        for (std::size_t i = 0; i < data_.size(); ++i)
            m = std::max(m, std::abs(data_[i] - o.data_[i]));
        return m;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t{shape_};
        for (std::size_t i = 0; i < data_.size(); ++i)
            t.flat(i) = static_cast<U>(data_[i]);
        return t;
    }

    bool operator==(const Tensor& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

private:
    template <typename>
    friend class Tensor;

    std::size_t idx1(int i) const { return static_cast<std::size_t>(i); }
    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i) * shape_.d[1] + static_cast<std::size_t>(j);
    }
    std::size_t idx3(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * shape_.d[1] + static_cast<std::size_t>(j)) *
                   shape_.d[2] +
               static_cast<std::size_t>(k);
    }
    std::size_t idx4(int i, int j, int k, int l) const {
        return ((static_cast<std::size_t>(i) * shape_.d[1] + static_cast<std::size_t>(j)) *
                    shape_.d[2] +
                static_cast<std::size_t>(k)) *
                   shape_.d[3] +
               static_cast<std::size_t>(l);
    }

    Shape shape_;
    std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Rng: mt19937_64 with hand-rolled distributions so streams are identical
// across standard libraries. uniform01 maps the top 53 bits to [0,1).
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Inclusive range, rejection sampled so every value is equally likely.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw std::invalid_argument("Rng::uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
        if (span == 0) return static_cast<std::int64_t>(eng_());  // full 64-bit range
        const std::uint64_t limit =
            std::numeric_limits<std::uint64_t>::max() / span * span;
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return lo + static_cast<std::int64_t>(x % span);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    int sign() { return (eng_() & 1u) ? 1 : -1; }

    double normal() {  // Box-Muller, one fresh pair per call, second value dropped
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename V>
    void shuffle(std::vector<V>& v) {  // Fisher-Yates, stable across platforms
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j =
                static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

// splitmix64-style combiner for deriving child seeds (epoch shuffles, per-sample
// dropout masks) from a base seed without correlated streams.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1u);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// FNV-1a 64-bit, used for filter checksums and config digests.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace kercnn
