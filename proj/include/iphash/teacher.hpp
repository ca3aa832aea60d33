#pragma once

// The fixed pre-trained side of training: teacher features and temperature-
// softened soft labels computed once from the frozen classifier. Nothing in
// here is ever updated by the optimizer.

#include <cstddef>
#include <span>
#include <sstream>

#include "iphash/errors.hpp"
#include "iphash/numkit.hpp"

namespace iphash {

// Immutable after build_teacher; safe to share read-only across threads.
struct TeacherBank {
    Matrix features;    // N x d
    Matrix classifier;  // K x d, frozen
    double tau = 10.0;
    Matrix soft_labels; // N x K, cached softmax(classifier . v / tau)

    std::size_t num_samples() const { return features.rows(); }
    std::size_t feature_dim() const { return features.cols(); }
    std::size_t num_classes() const { return classifier.rows(); }
};

// Soft labels depend only on complete inputs and fixed weights, so they are
// computed in one pass here and cached for the whole run.
inline TeacherBank build_teacher(Matrix features, Matrix classifier, double tau) {
    if (!(tau > 0.0)) {
        std::ostringstream os;
        os << "teacher temperature must be positive, got " << tau;
        throw InvalidParameterError(os.str());
    }
    if (features.cols() != classifier.cols()) {
        std::ostringstream os;
        os << "teacher feature dim " << features.cols()
           << " does not match classifier column count " << classifier.cols();
        throw DimensionError(os.str());
    }
    TeacherBank bank;
    bank.features = std::move(features);
    bank.classifier = std::move(classifier);
    bank.tau = tau;

    const std::size_t n = bank.features.rows();
    const std::size_t k = bank.classifier.rows();
    const std::size_t d = bank.features.cols();
    bank.soft_labels = Matrix(n, k);
    std::vector<double> logits(k);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = bank.features.row(i);
        for (std::size_t r = 0; r < k; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += bank.classifier(r, j) * v[j];
            logits[r] = s;
        }
        const auto z = softmax(logits, tau);
        std::copy(z.begin(), z.end(), bank.soft_labels.row(i).begin());
    }
    return bank;
}

inline std::span<const double> teacher_feature(const TeacherBank& bank, std::size_t i) {
    if (i >= bank.num_samples()) {
        std::ostringstream os;
        os << "teacher feature index " << i << " out of range (N=" << bank.num_samples() << ")";
        throw IndexError(os.str());
    }
    return bank.features.row(i);
}

inline std::span<const double> teacher_soft_label(const TeacherBank& bank, std::size_t i) {
    if (i >= bank.num_samples()) {
        std::ostringstream os;
        os << "teacher soft label index " << i << " out of range (N=" << bank.num_samples()
           << ")";
        throw IndexError(os.str());
    }
    return bank.soft_labels.row(i);
}

} // namespace iphash
