#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "iphash/numkit.hpp"
#include "test_helpers.hpp"

using iphash::Matrix;
using iphash::Rng;

TEST_CASE("matmul identity passes vectors through") {
    const auto eye = Matrix::from_rows({{1, 0}, {0, 1}});
    const auto v = Matrix::from_rows({{3}, {4}});
    const auto out = iphash::matmul(eye, v);
    REQUIRE(out.rows() == 2);
    REQUIRE(out.cols() == 1);
    CHECK(out(0, 0) == 3.0);
    CHECK(out(1, 0) == 4.0);
}

TEST_CASE("matmul hand-checked inner product") {
    const auto a = Matrix::from_rows({{1, 2}});
    const auto b = Matrix::from_rows({{3}, {4}});
    const auto out = iphash::matmul(a, b);
    REQUIRE(out.size() == 1);
    CHECK(out(0, 0) == 11.0);
}

TEST_CASE("matmul rejects mismatched shapes") {
    const Matrix a(2, 3);
    const Matrix b(4, 5);
    REQUIRE_THROWS_AS(iphash::matmul(a, b), iphash::DimensionError);
    REQUIRE_THROWS_WITH(iphash::matmul(a, b),
                        Catch::Matchers::ContainsSubstring("2x3") &&
                            Catch::Matchers::ContainsSubstring("4x5"));
}

TEST_CASE("matmul is associative on random matrices") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n1 = 1 + rng.uniform_below(5);
        const std::size_t n2 = 1 + rng.uniform_below(5);
        const std::size_t n3 = 1 + rng.uniform_below(5);
        const std::size_t n4 = 1 + rng.uniform_below(5);
        const auto a = testutil::random_matrix(rng, n1, n2);
        const auto b = testutil::random_matrix(rng, n2, n3);
        const auto c = testutil::random_matrix(rng, n3, n4);
        const auto left = iphash::matmul(iphash::matmul(a, b), c);
        const auto right = iphash::matmul(a, iphash::matmul(b, c));
        for (std::size_t i = 0; i < left.size(); ++i) {
            const double l = left.data()[i];
            const double r = right.data()[i];
            CHECK(std::abs(l - r) <= 1e-9 * std::max({1.0, std::abs(l), std::abs(r)}));
        }
    }
}

TEST_CASE("softmax of equal logits is uniform") {
    const std::vector<double> logits{0.0, 0.0, 0.0};
    const auto p = iphash::softmax(logits, 1.0);
    for (double v : p) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-15));
}

TEST_CASE("softmax matches the closed form at tau=2") {
    const std::vector<double> logits{2.0, 0.0};
    const auto p = iphash::softmax(logits, 2.0);
    CHECK(p[0] == Catch::Approx(0.731059).margin(1e-5));
    CHECK(p[1] == Catch::Approx(0.268941).margin(1e-5));
}

TEST_CASE("softmax flattens to uniform at large temperature") {
    const std::vector<double> logits{5.0, 1.0, 1.0};
    const auto p = iphash::softmax(logits, 1e6);
    for (double v : p) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-5));
}

TEST_CASE("softmax rejects non-positive temperature") {
    const std::vector<double> logits{1.0, 2.0};
    REQUIRE_THROWS_AS(iphash::softmax(logits, 0.0), iphash::InvalidParameterError);
    REQUIRE_THROWS_AS(iphash::softmax(logits, -3.0), iphash::InvalidParameterError);
}

TEST_CASE("softmax normalization and shift invariance properties") {
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.uniform_below(12);
        auto logits = testutil::random_vector(rng, n, 5.0);
        const double tau = 0.25 + 4.0 * rng.uniform();
        const auto p = iphash::softmax(logits, tau);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);

        const double shift = 10.0 * (rng.uniform() - 0.5);
        auto shifted = logits;
        for (double& v : shifted) v += shift;
        const auto q = iphash::softmax(shifted, tau);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(std::abs(p[i] - q[i]) <= 1e-12);
        }
    }
}

TEST_CASE("cosine basics") {
    const std::vector<double> u{3.0, 4.0};
    CHECK(iphash::cosine(u, u) == Catch::Approx(1.0).margin(1e-15));

    const std::vector<double> a{1.0, 0.0};
    const std::vector<double> b{1.0, 1.0};
    CHECK(iphash::cosine(a, b) == Catch::Approx(0.707107).margin(1e-6));

    const std::vector<double> c{0.0, 1.0};
    CHECK(iphash::cosine(a, c) == 0.0);
}

TEST_CASE("cosine rejects zero-norm vectors") {
    const std::vector<double> z{0.0, 0.0};
    const std::vector<double> u{1.0, 2.0};
    REQUIRE_THROWS_AS(iphash::cosine(z, u), iphash::InvalidParameterError);
    REQUIRE_THROWS_AS(iphash::cosine(u, z), iphash::InvalidParameterError);
}

TEST_CASE("cosine is invariant under positive scaling") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.uniform_below(8);
        auto u = testutil::random_vector(rng, n);
        auto v = testutil::random_vector(rng, n);
        if (iphash::norm(u) == 0.0 || iphash::norm(v) == 0.0) continue;
        const double alpha = 0.01 + 10.0 * rng.uniform();
        const double beta = 0.01 + 10.0 * rng.uniform();
        auto su = u;
        auto sv = v;
        for (double& x : su) x *= alpha;
        for (double& x : sv) x *= beta;
        CHECK(std::abs(iphash::cosine(u, v) - iphash::cosine(su, sv)) <= 1e-12);
    }
}

TEST_CASE("rng reproducibility: equal seeds emit equal draws") {
    Rng a(123456789);
    Rng b(123456789);
    for (int i = 0; i < 10000; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }
    Rng c(123456789);
    Rng d(123456789);
    for (int i = 0; i < 10000; ++i) {
        REQUIRE(c.normal() == d.normal());
    }
}

TEST_CASE("rng seeds diverge") {
    Rng a(1);
    Rng b(2);
    bool any_diff = false;
    for (int i = 0; i < 16; ++i) {
        any_diff |= a.next_u64() != b.next_u64();
    }
    CHECK(any_diff);
}

TEST_CASE("uniform_below stays in range and rejects zero") {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const std::uint64_t n = 1 + rng.next_u64() % 97;
        CHECK(rng.uniform_below(n) < n);
    }
    REQUIRE_THROWS_AS(rng.uniform_below(0), iphash::InvalidParameterError);
}

TEST_CASE("sample_indices returns sorted distinct indices") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t population = 1 + rng.uniform_below(50);
        const std::size_t count = rng.uniform_below(population + 1);
        const auto picked = rng.sample_indices(population, count);
        REQUIRE(picked.size() == count);
        for (std::size_t i = 0; i < picked.size(); ++i) {
            CHECK(picked[i] < population);
            if (i > 0) CHECK(picked[i] > picked[i - 1]);
        }
    }
}
