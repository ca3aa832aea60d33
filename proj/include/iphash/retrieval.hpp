#pragma once

// Bit-packed Hamming-distance search: packing +-1 sign matrices into 64-bit
// words, XOR/popcount distance, and exact top-k ranking with a fixed tie
// rule (ascending database index). Full scan only; desk-scale databases do
// not need an index structure and exactness keeps MAP auditable.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "iphash/errors.hpp"
#include "iphash/numkit.hpp"
#include "iphash/parallel.hpp"

namespace iphash {

// n codes of L bits each, ceil(L/64) words per code. Bit j is set iff
// sign j is +1; unused high bits in the last word stay zero.
struct PackedCodes {
    std::size_t count = 0;
    std::size_t bits = 0;
    std::size_t words_per_code = 0;
    std::vector<std::uint64_t> words;

    std::span<const std::uint64_t> code(std::size_t i) const {
        return std::span<const std::uint64_t>(words.data() + i * words_per_code,
                                              words_per_code);
    }
};

inline PackedCodes pack(const Matrix& signs) {
    PackedCodes packed;
    packed.count = signs.rows();
    packed.bits = signs.cols();
    packed.words_per_code = (signs.cols() + 63) / 64;
    packed.words.assign(packed.count * packed.words_per_code, 0);
    for (std::size_t i = 0; i < signs.rows(); ++i) {
        std::uint64_t* dst = packed.words.data() + i * packed.words_per_code;
        for (std::size_t j = 0; j < signs.cols(); ++j) {
            const double s = signs(i, j);
            if (s == 1.0) {
                dst[j / 64] |= std::uint64_t{1} << (j % 64);
            } else if (s != -1.0) {
                std::ostringstream os;
                os << "pack: entry at (" << i << "," << j << ") is " << s
                   << ", expected exactly -1 or +1";
                throw InvalidCodeError(os.str());
            }
        }
    }
    return packed;
}

inline Matrix unpack(const PackedCodes& packed) {
    Matrix signs(packed.count, packed.bits);
    for (std::size_t i = 0; i < packed.count; ++i) {
        const auto code = packed.code(i);
        for (std::size_t j = 0; j < packed.bits; ++j) {
            signs(i, j) = (code[j / 64] >> (j % 64)) & 1 ? 1.0 : -1.0;
        }
    }
    return signs;
}

inline std::size_t hamming(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
    if (a.size() != b.size()) {
        throw DimensionError("hamming: word counts differ");
    }
    std::size_t distance = 0;
    for (std::size_t w = 0; w < a.size(); ++w) {
        distance += static_cast<std::size_t>(std::popcount(a[w] ^ b[w]));
    }
    return distance;
}

inline std::size_t hamming(const PackedCodes& a, std::size_t i, const PackedCodes& b,
                           std::size_t j) {
    if (a.bits != b.bits) {
        std::ostringstream os;
        os << "hamming: code lengths differ (" << a.bits << " vs " << b.bits << ")";
        throw DimensionError(os.str());
    }
    if (i >= a.count || j >= b.count) {
        throw IndexError("hamming: code index out of range");
    }
    return hamming(a.code(i), b.code(j));
}

struct RankedEntry {
    std::size_t index;     // position within the database code set
    std::size_t distance;  // Hamming distance to the query
};

// Ascending distance; ties broken by ascending database index.
struct RankedList {
    std::size_t query_index = 0;
    std::vector<RankedEntry> entries;
};

// Exact k-nearest per query over the whole database. k larger than the
// database returns everything. Queries fan out in parallel and land in
// per-query slots, so results are deterministic.
inline std::vector<RankedList> search(const PackedCodes& queries, const PackedCodes& database,
                                      std::size_t k) {
    if (queries.bits != database.bits) {
        std::ostringstream os;
        os << "search: query codes have " << queries.bits << " bits, database has "
           << database.bits;
        throw DimensionError(os.str());
    }
    if (k < 1) {
        throw InvalidParameterError("search: k must be >= 1");
    }
    const std::size_t n = database.count;
    const std::size_t keep = std::min(k, n);
    std::vector<RankedList> results(queries.count);
    parallel_for(queries.count, [&](std::size_t q) {
        const auto query_code = queries.code(q);
        std::vector<std::size_t> distances(n);
        for (std::size_t i = 0; i < n; ++i) {
            distances[i] = hamming(query_code, database.code(i));
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (distances[a] != distances[b]) {
                                  return distances[a] < distances[b];
                              }
                              return a < b;
                          });
        auto& list = results[q];
        list.query_index = q;
        list.entries.resize(keep);
        for (std::size_t r = 0; r < keep; ++r) {
            list.entries[r] = RankedEntry{order[r], distances[order[r]]};
        }
    });
    return results;
}

} // namespace iphash
