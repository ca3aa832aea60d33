#pragma once

// Stage 2: the hash projection, the constructed-classifier logits, the three
// hashing losses (KL distillation, pairwise similarity with a straight-
// through estimator, quantization) and the joint objective that also folds
// in the stage-1 reconstruction term.
//
// Conventions fixed here:
//   h = v . phi                 (row-vector times d x L projection)
//   b = sign(h), sign(0) := +1  (so |b| = sqrt(L) exactly)
//   student logits s = (W0 . phi) . h, z = softmax(s / tau)
//   sim loss backward treats d(b)/d(h) = identity (straight-through) and
//   differentiates the cosine at the +-1 point with the full quotient rule,
//   so the gradient equals that of the sign-frozen relaxed objective.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "iphash/errors.hpp"
#include "iphash/numkit.hpp"
#include "iphash/student.hpp"
#include "iphash/teacher.hpp"

namespace iphash {

// Trainable projection phi mapping d-dim features to L hash logits.
struct HashLayer {
    Matrix phi;  // d x L

    std::size_t feature_dim() const { return phi.rows(); }
    std::size_t bits() const { return phi.cols(); }

    static HashLayer random_init(std::size_t d, std::size_t bits, Rng& rng) {
        HashLayer layer;
        layer.phi = Matrix(d, bits);
        const double scale = std::sqrt(1.0 / static_cast<double>(d));
        for (double& w : layer.phi.data()) w = scale * rng.normal();
        return layer;
    }
};

// A binary code: entries exactly -1 or +1.
struct CodeVector {
    std::vector<double> signs;
};

inline std::vector<double> hash_project(std::span<const double> v, const HashLayer& layer) {
    if (v.size() != layer.feature_dim()) {
        std::ostringstream os;
        os << "hash_project: feature dim " << v.size() << " does not match projection rows "
           << layer.feature_dim();
        throw DimensionError(os.str());
    }
    std::vector<double> h(layer.bits(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double vi = v[i];
        for (std::size_t j = 0; j < layer.bits(); ++j) h[j] += vi * layer.phi(i, j);
    }
    return h;
}

inline double sign_value(double x) { return x >= 0.0 ? 1.0 : -1.0; }

inline CodeVector binarize(std::span<const double> h) {
    CodeVector code;
    code.signs.resize(h.size());
    for (std::size_t j = 0; j < h.size(); ++j) {
        if (!std::isfinite(h[j])) {
            throw InvalidParameterError("binarize: non-finite hash logit");
        }
        code.signs[j] = sign_value(h[j]);
    }
    return code;
}

// Cosine between two +-1 codes of length L reduces to dot/L.
inline double code_cosine(const CodeVector& a, const CodeVector& b) {
    if (a.signs.size() != b.signs.size()) {
        throw DimensionError("code_cosine: code lengths differ");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < a.signs.size(); ++j) s += a.signs[j] * b.signs[j];
    return s / static_cast<double>(a.signs.size());
}

// z = softmax((W0 . phi . h) / tau). W0 . phi is recomputed from the current
// phi; W0 never changes.
inline std::vector<double> student_logits(std::span<const double> h, const HashLayer& layer,
                                          const Matrix& classifier, double tau) {
    if (classifier.cols() != layer.feature_dim()) {
        std::ostringstream os;
        os << "student_logits: classifier dim " << classifier.cols()
           << " does not match projection rows " << layer.feature_dim();
        throw DimensionError(os.str());
    }
    if (h.size() != layer.bits()) {
        throw DimensionError("student_logits: hash logit length does not match code length");
    }
    const Matrix constructed = matmul(classifier, layer.phi);  // K x L
    std::vector<double> s(constructed.rows(), 0.0);
    for (std::size_t k = 0; k < constructed.rows(); ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < h.size(); ++j) acc += constructed(k, j) * h[j];
        s[k] = acc;
    }
    return softmax(s, tau);
}

enum class KlDirection {
    TeacherToStudent,  // KL(teacher || student): standard distillation
    StudentToTeacher,  // KL(student || teacher): the literal equation order
};

inline KlDirection parse_kl_direction(const std::string& name) {
    if (name == "teacher-to-student") return KlDirection::TeacherToStudent;
    if (name == "student-to-teacher") return KlDirection::StudentToTeacher;
    throw InvalidParameterError("unknown kl_direction: " + name);
}

inline std::string kl_direction_name(KlDirection dir) {
    return dir == KlDirection::TeacherToStudent ? "teacher-to-student" : "student-to-teacher";
}

// KL(p || q) with 0*ln(0) := 0. q entries must be positive wherever p is.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw DimensionError("kl_divergence: distribution lengths differ");
    }
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] == 0.0) continue;
        s += p[k] * std::log(p[k] / q[k]);
    }
    return s;
}

namespace detail {

inline void check_distribution(std::span<const double> row, std::size_t index) {
    double sum = 0.0;
    for (double v : row) {
        if (v < 0.0) {
            std::ostringstream os;
            os << "teacher soft label " << index << " has a negative entry";
            throw InvalidDistributionError(os.str());
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        std::ostringstream os;
        os << "teacher soft label " << index << " sums to " << sum
           << ", not 1 within 1e-6";
        throw InvalidDistributionError(os.str());
    }
}

} // namespace detail

struct KlLossResult {
    double loss = 0.0;
    std::vector<std::vector<double>> grad_h;  // per sample, length L
    Matrix grad_phi;                          // direct path through W0 . phi
};

// Batch KL loss between cached teacher soft labels and the constructed-
// classifier student distribution. grad_h carries the path through h; the
// second phi appearance (inside W0 . phi) accumulates into grad_phi here.
inline KlLossResult kl_loss_and_grads(const std::vector<std::vector<double>>& batch_h,
                                      const HashLayer& layer, const Matrix& classifier,
                                      const std::vector<std::vector<double>>& teacher_labels,
                                      double tau,
                                      KlDirection direction = KlDirection::TeacherToStudent) {
    if (batch_h.empty()) {
        throw InvalidParameterError("kl_loss_and_grads: batch is empty");
    }
    if (batch_h.size() != teacher_labels.size()) {
        throw DimensionError("kl_loss_and_grads: batch and teacher label counts differ");
    }
    if (!(tau > 0.0)) {
        throw InvalidParameterError("kl_loss_and_grads: tau must be positive");
    }
    const std::size_t n = batch_h.size();
    const std::size_t bits = layer.bits();
    const std::size_t d = layer.feature_dim();
    const std::size_t num_classes = classifier.rows();
    const Matrix constructed = matmul(classifier, layer.phi);  // K x L

    KlLossResult res;
    res.grad_h.assign(n, std::vector<double>(bits, 0.0));
    res.grad_phi = Matrix(d, bits);
    const double inv_batch = 1.0 / static_cast<double>(n);

    std::vector<double> s(num_classes);
    std::vector<double> grad_s(num_classes);
    std::vector<double> w0t_gs(d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& h = batch_h[i];
        const auto& t = teacher_labels[i];
        if (h.size() != bits) {
            throw DimensionError("kl_loss_and_grads: hash logit length mismatch");
        }
        if (t.size() != num_classes) {
            throw DimensionError("kl_loss_and_grads: teacher label length mismatch");
        }
        detail::check_distribution(t, i);

        for (std::size_t k = 0; k < num_classes; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < bits; ++j) acc += constructed(k, j) * h[j];
            s[k] = acc;
        }
        const auto z = softmax(s, tau);

        if (direction == KlDirection::TeacherToStudent) {
            res.loss += kl_divergence(t, z);
            for (std::size_t k = 0; k < num_classes; ++k) {
                grad_s[k] = inv_batch * (z[k] - t[k]) / tau;
            }
        } else {
            // KL(z || t); clamp the teacher denominator away from zero.
            double div = 0.0;
            std::vector<double> log_ratio(num_classes);
            for (std::size_t k = 0; k < num_classes; ++k) {
                const double tk = t[k] > 1e-300 ? t[k] : 1e-300;
                log_ratio[k] = std::log(z[k] / tk);
                div += z[k] * log_ratio[k];
            }
            res.loss += div;
            for (std::size_t k = 0; k < num_classes; ++k) {
                grad_s[k] = inv_batch * z[k] * (log_ratio[k] - div) / tau;
            }
        }

        for (std::size_t j = 0; j < bits; ++j) {
            double g = 0.0;
            for (std::size_t k = 0; k < num_classes; ++k) g += constructed(k, j) * grad_s[k];
            res.grad_h[i][j] = g;
        }
        for (std::size_t a = 0; a < d; ++a) {
            double g = 0.0;
            for (std::size_t k = 0; k < num_classes; ++k) g += classifier(k, a) * grad_s[k];
            w0t_gs[a] = g;
        }
        for (std::size_t a = 0; a < d; ++a) {
            const double ga = w0t_gs[a];
            for (std::size_t j = 0; j < bits; ++j) res.grad_phi(a, j) += ga * h[j];
        }
    }
    res.loss *= inv_batch;
    return res;
}

struct SimLossResult {
    double loss = 0.0;
    std::vector<std::vector<double>> grad_h;  // per sample, length L
    std::size_t pair_count = 0;
};

// Pairwise similarity preservation over unordered in-batch pairs. Forward
// binarizes; backward is the straight-through estimator, differentiating the
// cosine at the +-1 point (where both code norms equal sqrt(L)).
inline SimLossResult sim_loss_and_grads(const std::vector<std::vector<double>>& batch_h,
                                        const std::vector<std::vector<double>>& teacher_features) {
    if (batch_h.size() != teacher_features.size()) {
        throw DimensionError("sim_loss_and_grads: batch and teacher feature counts differ");
    }
    if (batch_h.size() < 2) {
        throw InvalidParameterError(
            "sim_loss_and_grads: the pair loss needs a batch of at least 2");
    }
    const std::size_t n = batch_h.size();
    const std::size_t bits = batch_h[0].size();
    SimLossResult res;
    res.pair_count = n * (n - 1) / 2;
    res.grad_h.assign(n, std::vector<double>(bits, 0.0));

    std::vector<CodeVector> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (batch_h[i].size() != bits) {
            throw DimensionError("sim_loss_and_grads: inconsistent code lengths in batch");
        }
        codes[i] = binarize(batch_h[i]);
    }

    const double inv_pairs = 1.0 / static_cast<double>(res.pair_count);
    const double inv_bits = 1.0 / static_cast<double>(bits);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double cv = cosine(teacher_features[i], teacher_features[j]);
            const double cb = code_cosine(codes[i], codes[j]);
            const double diff = cv - cb;
            res.loss += diff * diff;
            const double coef = 2.0 * inv_pairs * (cb - cv);
            for (std::size_t t = 0; t < bits; ++t) {
                res.grad_h[i][t] += coef * (codes[j].signs[t] - cb * codes[i].signs[t]) * inv_bits;
                res.grad_h[j][t] += coef * (codes[i].signs[t] - cb * codes[j].signs[t]) * inv_bits;
            }
        }
    }
    res.loss *= inv_pairs;
    return res;
}

struct QuanLossResult {
    double loss = 0.0;
    std::vector<std::vector<double>> grad_h;
};

// Mean squared distance between hash logits and their codes; sign is treated
// as constant in the gradient.
inline QuanLossResult quan_loss_and_grad(const std::vector<std::vector<double>>& batch_h) {
    if (batch_h.empty()) {
        throw InvalidParameterError("quan_loss_and_grad: batch is empty");
    }
    QuanLossResult res;
    const std::size_t n = batch_h.size();
    res.grad_h.assign(n, {});
    const double inv_batch = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& h = batch_h[i];
        auto& g = res.grad_h[i];
        g.resize(h.size());
        for (std::size_t j = 0; j < h.size(); ++j) {
            const double r = h[j] - sign_value(h[j]);
            res.loss += r * r;
            g[j] = 2.0 * inv_batch * r;
        }
    }
    res.loss *= inv_batch;
    return res;
}

// Per-step loss breakdown. total always recomposes from the components as
// l_kl + l_sim + l_quan + gamma * l_rec; disabled terms are zero.
struct LossReport {
    double l_kl = 0.0;
    double l_sim = 0.0;
    double l_quan = 0.0;
    double l_rec = 0.0;
    double total = 0.0;
    double gamma = 0.0;
    double tau = 0.0;
    std::size_t pair_count = 0;
};

struct LossSwitches {
    bool use_kl = true;
    bool use_rec = true;
};

struct TotalLossResult {
    LossReport report;
    StudentGrads encoder_grads;
    Matrix phi_grads;
};

// The joint objective over one batch, with gradients for every trainable
// parameter. Encoder gradients accumulate the reconstruction path directly
// and the three hashing losses through h = v . phi; phi gradients accumulate
// from kl (both appearances), sim (via STE) and quan.
inline TotalLossResult total_loss(const std::vector<Matrix>& batch_tokens,
                                  const std::vector<MaskPattern>& masks,
                                  const StudentEncoder& enc, const HashLayer& layer,
                                  const std::vector<std::vector<double>>& teacher_features,
                                  const std::vector<std::vector<double>>& teacher_labels,
                                  const Matrix& classifier, double tau, double gamma,
                                  const LossSwitches& switches = {},
                                  KlDirection direction = KlDirection::TeacherToStudent) {
    const std::size_t n = batch_tokens.size();
    if (n == 0) {
        throw InvalidParameterError("total_loss: batch is empty");
    }
    if (masks.size() != n || teacher_features.size() != n || teacher_labels.size() != n) {
        throw DimensionError("total_loss: batch component sizes differ");
    }
    const std::size_t bits = layer.bits();
    const std::size_t d = layer.feature_dim();
    if (enc.feature_dim() != d) {
        throw DimensionError("total_loss: encoder output dim does not match projection rows");
    }

    TotalLossResult res;
    res.encoder_grads = StudentGrads::zeros_like(enc);
    res.phi_grads = Matrix(d, bits);
    res.report.gamma = gamma;
    res.report.tau = tau;

    // Forward: student features and hash logits per sample.
    std::vector<EncodeTrace> traces(n);
    std::vector<std::vector<double>> batch_v(n);
    std::vector<std::vector<double>> batch_h(n);
    for (std::size_t i = 0; i < n; ++i) {
        batch_v[i] = encode_traced(batch_tokens[i], masks[i], enc, traces[i]);
        batch_h[i] = hash_project(batch_v[i], layer);
    }

    std::vector<std::vector<double>> grad_h(n, std::vector<double>(bits, 0.0));
    std::vector<std::vector<double>> grad_v(n, std::vector<double>(d, 0.0));

    if (switches.use_kl) {
        auto kl = kl_loss_and_grads(batch_h, layer, classifier, teacher_labels, tau, direction);
        res.report.l_kl = kl.loss;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < bits; ++j) grad_h[i][j] += kl.grad_h[i][j];
        }
        for (std::size_t idx = 0; idx < res.phi_grads.size(); ++idx) {
            res.phi_grads.data()[idx] += kl.grad_phi.data()[idx];
        }
    }

    {
        auto sim = sim_loss_and_grads(batch_h, teacher_features);
        res.report.l_sim = sim.loss;
        res.report.pair_count = sim.pair_count;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < bits; ++j) grad_h[i][j] += sim.grad_h[i][j];
        }
    }

    {
        auto quan = quan_loss_and_grad(batch_h);
        res.report.l_quan = quan.loss;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < bits; ++j) grad_h[i][j] += quan.grad_h[i][j];
        }
    }

    // Chain rule through h = v . phi for all hashing losses.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
            const double va = batch_v[i][a];
            double gv = 0.0;
            for (std::size_t j = 0; j < bits; ++j) {
                res.phi_grads(a, j) += va * grad_h[i][j];
                gv += layer.phi(a, j) * grad_h[i][j];
            }
            grad_v[i][a] = gv;
        }
    }

    if (switches.use_rec) {
        const double inv_batch = 1.0 / static_cast<double>(n);
        double rec = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (teacher_features[i].size() != d) {
                throw DimensionError("total_loss: teacher feature dim mismatch");
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = batch_v[i][j] - teacher_features[i][j];
                rec += diff * diff;
                grad_v[i][j] += gamma * 2.0 * inv_batch * diff;
            }
        }
        res.report.l_rec = rec * inv_batch;
    }

    for (std::size_t i = 0; i < n; ++i) {
        encoder_backward(batch_tokens[i], masks[i], enc, traces[i], grad_v[i],
                         res.encoder_grads);
    }

    res.report.total = res.report.l_kl + res.report.l_sim + res.report.l_quan +
                       gamma * res.report.l_rec;
    return res;
}

} // namespace iphash
