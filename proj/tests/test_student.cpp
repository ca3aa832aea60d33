#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "iphash/student.hpp"
#include "test_helpers.hpp"

using iphash::Matrix;
using iphash::MaskPattern;
using iphash::Rng;
using iphash::StudentEncoder;

namespace {

// Independent straight-line restatement of the encoder formula, kept apart
// from the implementation on purpose.
std::vector<double> encode_oracle(const Matrix& tokens, const MaskPattern& mask,
                                  const StudentEncoder& enc) {
    const std::size_t d_in = enc.w_tok.rows();
    const std::size_t d_h = enc.w_tok.cols();
    const std::size_t d = enc.w_out.cols();
    std::vector<double> pooled(d_h, 0.0);
    for (std::size_t p : mask.kept) {
        for (std::size_t h = 0; h < d_h; ++h) {
            double a = enc.b_tok[h];
            for (std::size_t i = 0; i < d_in; ++i) a += tokens(p, i) * enc.w_tok(i, h);
            pooled[h] += std::max(0.0, a);
        }
    }
    for (double& v : pooled) v /= static_cast<double>(mask.kept.size());
    std::vector<double> out(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double s = enc.b_out[j];
        for (std::size_t h = 0; h < d_h; ++h) s += pooled[h] * enc.w_out(h, j);
        out[j] = s;
    }
    return out;
}

} // namespace

TEST_CASE("mask cardinality follows the floor rule") {
    Rng rng(1);
    CHECK(iphash::random_mask(196, 0.25, rng).kept.size() == 147);
    CHECK(iphash::random_mask(10, 0.99, rng).kept.size() == 1);
    const auto full = iphash::random_mask(7, 0.0, rng);
    REQUIRE(full.kept.size() == 7);
    for (std::size_t p = 0; p < 7; ++p) CHECK(full.kept[p] == p);
}

TEST_CASE("mask ratio outside [0,1) is rejected") {
    Rng rng(2);
    REQUIRE_THROWS_AS(iphash::random_mask(10, 1.0, rng), iphash::InvalidParameterError);
    REQUIRE_THROWS_AS(iphash::random_mask(10, -0.1, rng), iphash::InvalidParameterError);
}

TEST_CASE("mask cardinality property: sorted, bounded, at least one kept") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t total = 1 + rng.uniform_below(64);
        const double ratio = rng.uniform() * 0.999;
        const auto mask = iphash::random_mask(total, ratio, rng);
        const std::size_t masked =
            static_cast<std::size_t>(std::floor(ratio * static_cast<double>(total) + 1e-9));
        REQUIRE(mask.kept.size() ==
                total - std::min(masked, total - 1));
        REQUIRE(!mask.kept.empty());
        for (std::size_t i = 0; i < mask.kept.size(); ++i) {
            CHECK(mask.kept[i] < total);
            if (i > 0) CHECK(mask.kept[i] > mask.kept[i - 1]);
        }
    }
}

TEST_CASE("equal rng state gives equal masks") {
    Rng a(77);
    Rng b(77);
    for (int i = 0; i < 100; ++i) {
        const auto ma = iphash::random_mask(32, 0.4, a);
        const auto mb = iphash::random_mask(32, 0.4, b);
        REQUIRE(ma.kept == mb.kept);
    }
}

TEST_CASE("all-zero parameters encode to zero") {
    Rng rng(4);
    const auto enc = StudentEncoder::zeros(5, 4, 3);
    const auto tokens = testutil::random_matrix(rng, 6, 5);
    const auto v = iphash::encode(tokens, iphash::full_mask(6), enc);
    for (double x : v) CHECK(x == 0.0);
}

TEST_CASE("identity weights pass a nonnegative token through") {
    StudentEncoder enc = StudentEncoder::zeros(3, 3, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        enc.w_tok(i, i) = 1.0;
        enc.w_out(i, i) = 1.0;
    }
    Matrix tokens(1, 3);
    tokens(0, 0) = 0.5;
    tokens(0, 1) = 0.0;
    tokens(0, 2) = 2.0;
    const auto v = iphash::encode(tokens, iphash::full_mask(1), enc);
    CHECK(v[0] == 0.5);
    CHECK(v[1] == 0.0);
    CHECK(v[2] == 2.0);
}

TEST_CASE("encode matches an independent reimplementation") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d_in = 1 + rng.uniform_below(8);
        const std::size_t d_h = 1 + rng.uniform_below(8);
        const std::size_t d = 1 + rng.uniform_below(8);
        const std::size_t total = 1 + rng.uniform_below(10);
        auto enc = StudentEncoder::random_init(d_in, d_h, d, rng);
        for (double& b : enc.b_tok) b = rng.normal();
        for (double& b : enc.b_out) b = rng.normal();
        const auto tokens = testutil::random_matrix(rng, total, d_in);
        const auto mask = iphash::random_mask(total, rng.uniform() * 0.9, rng);
        const auto got = iphash::encode(tokens, mask, enc);
        const auto want = encode_oracle(tokens, mask, enc);
        for (std::size_t j = 0; j < d; ++j) {
            CHECK(std::abs(got[j] - want[j]) <= 1e-12);
        }
    }
}

TEST_CASE("permuting kept tokens leaves the encoding unchanged") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t total = 2 + rng.uniform_below(8);
        const std::size_t d_in = 1 + rng.uniform_below(6);
        auto enc = StudentEncoder::random_init(d_in, 4, 5, rng);
        const auto tokens = testutil::random_matrix(rng, total, d_in);
        std::vector<std::size_t> perm(total);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm);
        Matrix permuted(total, d_in);
        for (std::size_t p = 0; p < total; ++p) {
            const auto src = tokens.row(perm[p]);
            std::copy(src.begin(), src.end(), permuted.row(p).begin());
        }
        const auto a = iphash::encode(tokens, iphash::full_mask(total), enc);
        const auto b = iphash::encode(permuted, iphash::full_mask(total), enc);
        for (std::size_t j = 0; j < a.size(); ++j) {
            CHECK(std::abs(a[j] - b[j]) <= 1e-12);
        }
    }
}

TEST_CASE("zero mask ratio equals encoding the complete sample") {
    Rng rng(7);
    const auto enc = StudentEncoder::random_init(4, 6, 5, rng);
    const auto tokens = testutil::random_matrix(rng, 9, 4);
    const auto via_ratio = iphash::random_mask(9, 0.0, rng);
    const auto a = iphash::encode(tokens, via_ratio, enc);
    const auto b = iphash::encode(tokens, iphash::full_mask(9), enc);
    REQUIRE(a == b);
}

TEST_CASE("reconstruction loss basics") {
    Rng rng(8);
    const std::size_t d = 4;
    auto enc = StudentEncoder::zeros(3, 2, d);

    SECTION("exact match gives zero loss and zero grads") {
        // Zero encoder output matched by zero teacher features.
        const std::vector<Matrix> tokens{testutil::random_matrix(rng, 5, 3)};
        const std::vector<MaskPattern> masks{iphash::full_mask(5)};
        const std::vector<std::vector<double>> teacher{std::vector<double>(d, 0.0)};
        const auto res = iphash::rec_loss_and_grad(tokens, masks, enc, teacher);
        CHECK(res.loss == 0.0);
        for (double g : res.grads.w_tok.data()) CHECK(g == 0.0);
        for (double g : res.grads.w_out.data()) CHECK(g == 0.0);
        for (double g : res.grads.b_tok) CHECK(g == 0.0);
        for (double g : res.grads.b_out) CHECK(g == 0.0);
    }

    SECTION("unit offset gives unit loss") {
        auto enc1 = StudentEncoder::zeros(3, 2, 2);
        enc1.b_out = {1.0, 0.0};  // encoder output (1,0) for any input
        const std::vector<Matrix> tokens{testutil::random_matrix(rng, 5, 3)};
        const std::vector<MaskPattern> masks{iphash::full_mask(5)};
        const std::vector<std::vector<double>> teacher{{0.0, 0.0}};
        const auto res = iphash::rec_loss_and_grad(tokens, masks, enc1, teacher);
        CHECK(res.loss == Catch::Approx(1.0).margin(1e-15));
    }

    SECTION("empty batch is rejected") {
        REQUIRE_THROWS_AS(iphash::rec_loss_and_grad({}, {}, enc, {}),
                          iphash::InvalidParameterError);
    }
}

TEST_CASE("reconstruction gradients match central finite differences") {
    Rng rng(9);
    const double step = 1e-5;
    int checked_trials = 0;
    for (int trial = 0; trial < 25 && checked_trials < 20; ++trial) {
        const std::size_t d_in = 2 + rng.uniform_below(7);
        const std::size_t d_h = 2 + rng.uniform_below(5);
        const std::size_t d = 2 + rng.uniform_below(7);
        const std::size_t total = 2 + rng.uniform_below(4);
        const std::size_t batch = 1 + rng.uniform_below(4);

        auto enc = StudentEncoder::random_init(d_in, d_h, d, rng);
        for (double& b : enc.b_tok) b = 0.2 * rng.normal();
        for (double& b : enc.b_out) b = 0.2 * rng.normal();

        std::vector<Matrix> tokens(batch);
        std::vector<MaskPattern> masks(batch);
        std::vector<std::vector<double>> teacher(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            tokens[i] = testutil::random_matrix(rng, total, d_in);
            masks[i] = iphash::random_mask(total, 0.25, rng);
            teacher[i] = testutil::random_vector(rng, d);
        }

        // Skip configurations that sit on a ReLU kink.
        bool near_kink = false;
        for (std::size_t i = 0; i < batch && !near_kink; ++i) {
            for (std::size_t p : masks[i].kept) {
                for (std::size_t h = 0; h < d_h; ++h) {
                    double a = enc.b_tok[h];
                    for (std::size_t c = 0; c < d_in; ++c) {
                        a += enc.w_tok(c, h) * tokens[i](p, c);
                    }
                    if (std::abs(a) < 1e-4) near_kink = true;
                }
            }
        }
        if (near_kink) continue;
        ++checked_trials;

        const auto res = iphash::rec_loss_and_grad(tokens, masks, enc, teacher);
        const auto loss_at = [&]() {
            return iphash::rec_loss_and_grad(tokens, masks, enc, teacher).loss;
        };
        const auto check_tensor = [&](std::vector<double>& params,
                                      const std::vector<double>& grads) {
            for (std::size_t idx = 0; idx < params.size(); ++idx) {
                const double saved = params[idx];
                params[idx] = saved + step;
                const double up = loss_at();
                params[idx] = saved - step;
                const double down = loss_at();
                params[idx] = saved;
                const double numeric = (up - down) / (2.0 * step);
                CHECK(testutil::rel_err(grads[idx], numeric) <= 1e-6);
            }
        };
        check_tensor(enc.w_tok.data(), res.grads.w_tok.data());
        check_tensor(enc.b_tok, res.grads.b_tok);
        check_tensor(enc.w_out.data(), res.grads.w_out.data());
        check_tensor(enc.b_out, res.grads.b_out);
    }
    REQUIRE(checked_trials >= 20);
}
