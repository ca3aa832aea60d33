#pragma once

// Minimal dense linear algebra, a deterministic RNG and the elementwise
// numeric kernels shared by all other headers. Everything is 64-bit float;
// accumulation loops run in a fixed order so results are reproducible
// bit-for-bit across runs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "iphash/errors.hpp"

namespace iphash {

// Row-major dense matrix of doubles. Immutable use after construction is
// thread-safe; entries are expected to stay finite.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            std::ostringstream os;
            os << "matrix data length " << data_.size() << " does not match shape "
               << rows_ << "x" << cols_;
            throw DimensionError(os.str());
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("ragged initializer for matrix rows");
            }
            std::size_t j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) {
        return std::span<double>(data_.data() + r * cols_, cols_);
    }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_.data() + r * cols_, cols_);
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Standard product with a deterministic reduction order: for each output
// cell the k-index ascends, so results never depend on scheduling.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        std::ostringstream os;
        os << "matmul shape mismatch: (" << a.rows() << "x" << a.cols() << ") x ("
           << b.rows() << "x" << b.cols() << ")";
        throw DimensionError(os.str());
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    if (!out.all_finite()) {
        throw InvalidParameterError("matmul produced non-finite entries");
    }
    return out;
}

// Temperature softmax with max-subtraction. Output entries are positive and
// sum to one.
inline std::vector<double> softmax(std::span<const double> logits, double tau) {
    if (!(tau > 0.0)) {
        std::ostringstream os;
        os << "softmax temperature must be positive, got " << tau;
        throw InvalidParameterError(os.str());
    }
    if (logits.empty()) {
        throw InvalidParameterError("softmax of empty logit vector");
    }
    double max_logit = -std::numeric_limits<double>::infinity();
    for (double v : logits) {
        if (!std::isfinite(v)) {
            throw InvalidParameterError("softmax input contains a non-finite logit");
        }
        max_logit = std::max(max_logit, v);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - max_logit) / tau);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        std::ostringstream os;
        os << "dot product length mismatch: " << u.size() << " vs " << v.size();
        throw DimensionError(os.str());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double norm(std::span<const double> u) {
    return std::sqrt(dot(u, u));
}

// Cosine similarity in [-1, 1]; invariant under positive scaling of either
// argument.
inline double cosine(std::span<const double> u, std::span<const double> v) {
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) {
        throw InvalidParameterError("cosine of a zero-norm vector is undefined");
    }
    return dot(u, v) / (nu * nv);
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
inline std::uint64_t rotl64(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}
} // namespace detail

// xoshiro256++ seeded through splitmix64. The algorithm is fixed in-repo so
// identical seeds give identical draw sequences on every platform; never
// swap in the platform default generator.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased uniform integer in [0, n) by rejection.
    std::uint64_t uniform_below(std::uint64_t n) {
        if (n == 0) {
            throw InvalidParameterError("uniform_below(0) is undefined");
        }
        const std::uint64_t max64 = std::numeric_limits<std::uint64_t>::max();
        const std::uint64_t bound = max64 - ((max64 % n) + 1) % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x > bound);
        return x % n;
    }

    // Standard normal via the Marsaglia polar method (no trig, so the value
    // stream tracks the IEEE semantics of sqrt/log only).
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        cached_ = v * f;
        has_cached_ = true;
        return u * f;
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Uniform sample of `count` distinct indices from [0, population),
    // returned sorted ascending.
    std::vector<std::size_t> sample_indices(std::size_t population, std::size_t count) {
        if (count > population) {
            throw InvalidParameterError("sample_indices: count exceeds population");
        }
        std::vector<std::size_t> idx(population);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(uniform_below(population - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(count);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

private:
    std::uint64_t state_[4] = {};
    bool has_cached_ = false;
    double cached_ = 0.0;
};

} // namespace iphash
