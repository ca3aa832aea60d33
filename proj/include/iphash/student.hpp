#pragma once

// Stage 1: random token masking, the trainable encoder and the feature
// reconstruction loss against frozen teacher features, with hand-derived
// gradients.
//
// The encoder is the smallest permutation-invariant architecture for which
// masking is well defined:
//
//   v = b_out + W_out^T . mean_{p in kept} ReLU(W_tok^T t_p + b_tok)
//
// Masked tokens are dropped from the mean, not zero-filled, so the pooling
// denominator is the kept count.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <vector>

#include "iphash/errors.hpp"
#include "iphash/numkit.hpp"

namespace iphash {

// Which token indices survive masking. kept is sorted ascending and never
// empty.
struct MaskPattern {
    std::vector<std::size_t> kept;
    std::size_t total_tokens = 0;
    double ratio = 0.0;
};

// Uniform sample without replacement of P - floor(m*P) kept indices.
// floor is evaluated with a small tolerance so ratios like 0.3 * 10 land on
// their mathematical value despite binary rounding.
inline MaskPattern random_mask(std::size_t total_tokens, double ratio, Rng& rng) {
    if (total_tokens < 1) {
        throw InvalidParameterError("random_mask: need at least one token");
    }
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        std::ostringstream os;
        os << "mask ratio must lie in [0,1), got " << ratio;
        throw InvalidParameterError(os.str());
    }
    std::size_t masked = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(total_tokens) + 1e-9));
    if (masked >= total_tokens) masked = total_tokens - 1;
    MaskPattern mask;
    mask.total_tokens = total_tokens;
    mask.ratio = ratio;
    mask.kept = rng.sample_indices(total_tokens, total_tokens - masked);
    return mask;
}

inline MaskPattern full_mask(std::size_t total_tokens) {
    MaskPattern mask;
    mask.total_tokens = total_tokens;
    mask.ratio = 0.0;
    mask.kept.resize(total_tokens);
    for (std::size_t p = 0; p < total_tokens; ++p) mask.kept[p] = p;
    return mask;
}

// Trainable parameters theta: a per-token affine map into a hidden space,
// ReLU, mean pool over kept tokens, and an output affine map.
struct StudentEncoder {
    Matrix w_tok;               // d_in x d_h
    std::vector<double> b_tok;  // d_h
    Matrix w_out;               // d_h x d
    std::vector<double> b_out;  // d

    std::size_t token_dim() const { return w_tok.rows(); }
    std::size_t hidden_dim() const { return w_tok.cols(); }
    std::size_t feature_dim() const { return w_out.cols(); }

    static StudentEncoder zeros(std::size_t d_in, std::size_t d_h, std::size_t d) {
        StudentEncoder enc;
        enc.w_tok = Matrix(d_in, d_h);
        enc.b_tok.assign(d_h, 0.0);
        enc.w_out = Matrix(d_h, d);
        enc.b_out.assign(d, 0.0);
        return enc;
    }

    // He-style random init for the ReLU layer, smaller fan-in scaling on the
    // output layer, zero biases.
    static StudentEncoder random_init(std::size_t d_in, std::size_t d_h, std::size_t d,
                                      Rng& rng) {
        StudentEncoder enc = zeros(d_in, d_h, d);
        const double tok_scale = std::sqrt(2.0 / static_cast<double>(d_in));
        for (double& w : enc.w_tok.data()) w = tok_scale * rng.normal();
        const double out_scale = std::sqrt(1.0 / static_cast<double>(d_h));
        for (double& w : enc.w_out.data()) w = out_scale * rng.normal();
        return enc;
    }
};

// Gradient accumulator shaped like a StudentEncoder.
struct StudentGrads {
    Matrix w_tok;
    std::vector<double> b_tok;
    Matrix w_out;
    std::vector<double> b_out;

    static StudentGrads zeros_like(const StudentEncoder& enc) {
        StudentGrads g;
        g.w_tok = Matrix(enc.w_tok.rows(), enc.w_tok.cols());
        g.b_tok.assign(enc.b_tok.size(), 0.0);
        g.w_out = Matrix(enc.w_out.rows(), enc.w_out.cols());
        g.b_out.assign(enc.b_out.size(), 0.0);
        return g;
    }
};

// Forward activations kept around for the backward pass.
struct EncodeTrace {
    Matrix hidden;               // |kept| x d_h, post-ReLU
    std::vector<double> pooled;  // d_h
};

namespace detail {

inline void check_encode_shapes(const Matrix& tokens, const MaskPattern& mask,
                                const StudentEncoder& enc) {
    if (tokens.cols() != enc.token_dim()) {
        std::ostringstream os;
        os << "token dim " << tokens.cols() << " does not match encoder input dim "
           << enc.token_dim();
        throw DimensionError(os.str());
    }
    if (mask.kept.empty()) {
        throw InvalidParameterError("mask keeps no tokens");
    }
    if (mask.total_tokens != tokens.rows()) {
        std::ostringstream os;
        os << "mask covers " << mask.total_tokens << " tokens but sample has "
           << tokens.rows();
        throw DimensionError(os.str());
    }
    for (std::size_t p : mask.kept) {
        if (p >= tokens.rows()) {
            throw IndexError("mask index exceeds token count");
        }
    }
}

} // namespace detail

inline std::vector<double> encode_traced(const Matrix& tokens, const MaskPattern& mask,
                                         const StudentEncoder& enc, EncodeTrace& trace) {
    detail::check_encode_shapes(tokens, mask, enc);
    const std::size_t d_in = enc.token_dim();
    const std::size_t d_h = enc.hidden_dim();
    const std::size_t d = enc.feature_dim();
    const std::size_t kept = mask.kept.size();

    trace.hidden = Matrix(kept, d_h);
    trace.pooled.assign(d_h, 0.0);
    for (std::size_t ki = 0; ki < kept; ++ki) {
        const auto t = tokens.row(mask.kept[ki]);
        for (std::size_t h = 0; h < d_h; ++h) {
            double a = enc.b_tok[h];
            for (std::size_t i = 0; i < d_in; ++i) a += enc.w_tok(i, h) * t[i];
            const double r = a > 0.0 ? a : 0.0;
            trace.hidden(ki, h) = r;
            trace.pooled[h] += r;
        }
    }
    const double inv_kept = 1.0 / static_cast<double>(kept);
    for (double& v : trace.pooled) v *= inv_kept;

    std::vector<double> out(enc.b_out);
    for (std::size_t h = 0; h < d_h; ++h) {
        const double ph = trace.pooled[h];
        for (std::size_t j = 0; j < d; ++j) out[j] += enc.w_out(h, j) * ph;
    }
    return out;
}

// Pure function of (tokens, mask, parameters).
inline std::vector<double> encode(const Matrix& tokens, const MaskPattern& mask,
                                  const StudentEncoder& enc) {
    EncodeTrace trace;
    return encode_traced(tokens, mask, enc, trace);
}

// Accumulates d(loss)/d(theta) into grads given the upstream gradient with
// respect to the encoder output. ReLU uses subgradient 0 at the kink.
inline void encoder_backward(const Matrix& tokens, const MaskPattern& mask,
                             const StudentEncoder& enc, const EncodeTrace& trace,
                             std::span<const double> grad_v, StudentGrads& grads) {
    const std::size_t d_in = enc.token_dim();
    const std::size_t d_h = enc.hidden_dim();
    const std::size_t d = enc.feature_dim();
    const std::size_t kept = mask.kept.size();

    for (std::size_t j = 0; j < d; ++j) grads.b_out[j] += grad_v[j];

    std::vector<double> grad_pooled(d_h, 0.0);
    for (std::size_t h = 0; h < d_h; ++h) {
        const double ph = trace.pooled[h];
        double gp = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            grads.w_out(h, j) += ph * grad_v[j];
            gp += enc.w_out(h, j) * grad_v[j];
        }
        grad_pooled[h] = gp;
    }

    const double inv_kept = 1.0 / static_cast<double>(kept);
    for (std::size_t ki = 0; ki < kept; ++ki) {
        const auto t = tokens.row(mask.kept[ki]);
        for (std::size_t h = 0; h < d_h; ++h) {
            if (trace.hidden(ki, h) <= 0.0) continue;
            const double ga = grad_pooled[h] * inv_kept;
            grads.b_tok[h] += ga;
            for (std::size_t i = 0; i < d_in; ++i) {
                grads.w_tok(i, h) += t[i] * ga;
            }
        }
    }
}

// Mean squared reconstruction error against teacher features over a batch,
// plus analytic gradients for every encoder parameter.
struct RecLossResult {
    double loss = 0.0;
    StudentGrads grads;
};

inline RecLossResult rec_loss_and_grad(const std::vector<Matrix>& batch_tokens,
                                       const std::vector<MaskPattern>& masks,
                                       const StudentEncoder& enc,
                                       const std::vector<std::vector<double>>& teacher_features) {
    if (batch_tokens.empty()) {
        throw InvalidParameterError("rec_loss_and_grad: batch is empty");
    }
    if (batch_tokens.size() != masks.size() || batch_tokens.size() != teacher_features.size()) {
        throw DimensionError("rec_loss_and_grad: batch component sizes differ");
    }
    RecLossResult res;
    res.grads = StudentGrads::zeros_like(enc);
    const double inv_batch = 1.0 / static_cast<double>(batch_tokens.size());
    std::vector<double> grad_v(enc.feature_dim());
    for (std::size_t i = 0; i < batch_tokens.size(); ++i) {
        if (teacher_features[i].size() != enc.feature_dim()) {
            throw DimensionError("rec_loss_and_grad: teacher feature dim mismatch");
        }
        EncodeTrace trace;
        const auto v = encode_traced(batch_tokens[i], masks[i], enc, trace);
        double sq = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double diff = v[j] - teacher_features[i][j];
            sq += diff * diff;
            grad_v[j] = 2.0 * inv_batch * diff;
        }
        res.loss += sq;
        encoder_backward(batch_tokens[i], masks[i], enc, trace, grad_v, res.grads);
    }
    res.loss *= inv_batch;
    return res;
}

} // namespace iphash
