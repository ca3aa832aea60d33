#pragma once

// Adam optimization with per-parameter-group learning rates, the epoch/batch
// loop, model serialization and the finite-difference gradient-check
// harness.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iphash/dataio.hpp"
#include "iphash/errors.hpp"
#include "iphash/hashcore.hpp"
#include "iphash/numkit.hpp"
#include "iphash/parallel.hpp"
#include "iphash/student.hpp"
#include "iphash/teacher.hpp"

namespace iphash {

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment buffers for one parameter tensor. Sized lazily on the
// first step.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
};

// One standard Adam update with bias correction. step_index is 1-based and
// shared across all tensors updated in the same optimizer step.
inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& state, const AdamParams& hp, double lr,
                      std::uint64_t step_index) {
    if (params.size() != grads.size()) {
        std::ostringstream os;
        os << "adam_step: parameter count " << params.size() << " does not match gradient count "
           << grads.size();
        throw DimensionError(os.str());
    }
    if (step_index < 1) {
        throw InvalidParameterError("adam_step: step_index must be >= 1");
    }
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    } else if (state.m.size() != params.size()) {
        throw DimensionError("adam_step: state size does not match parameter count");
    }
    const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step_index));
    const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step_index));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + hp.eps);
    }
}

// Full training configuration. Defaults follow the reference protocol:
// tau 10, gamma 0.1, mask ratio 25%, 100 epochs, batch 64, Adam at 1e-3 for
// the hash layer and 1e-5 for the encoder.
struct TrainConfig {
    std::size_t bits = 16;
    double tau = 10.0;
    double gamma = 0.1;
    double mask_ratio = 0.25;
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr_hash = 1e-3;
    double lr_encoder = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    bool use_kl = true;
    bool use_rec = true;
    std::string kl_direction = "teacher-to-student";
    std::size_t hidden_dim = 32;

    void validate() const {
        if (bits < 1) throw InvalidParameterError("config field bits must be >= 1");
        if (!(tau > 0.0)) throw InvalidParameterError("config field tau must be > 0");
        if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
            throw InvalidParameterError("config field mask_ratio must lie in [0,1)");
        }
        if (!(lr_hash > 0.0)) throw InvalidParameterError("config field lr_hash must be > 0");
        if (!(lr_encoder > 0.0)) {
            throw InvalidParameterError("config field lr_encoder must be > 0");
        }
        if (batch_size < 2) {
            throw InvalidParameterError("config field batch_size must be >= 2 (pair loss)");
        }
        if (hidden_dim < 1) throw InvalidParameterError("config field hidden_dim must be >= 1");
        if (!(gamma >= 0.0)) throw InvalidParameterError("config field gamma must be >= 0");
        parse_kl_direction(kl_direction);
    }
};

inline nlohmann::ordered_json config_to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["bits"] = c.bits;
    j["tau"] = c.tau;
    j["gamma"] = c.gamma;
    j["mask_ratio"] = c.mask_ratio;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr_hash"] = c.lr_hash;
    j["lr_encoder"] = c.lr_encoder;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["seed"] = c.seed;
    j["use_kl"] = c.use_kl;
    j["use_rec"] = c.use_rec;
    j["kl_direction"] = c.kl_direction;
    j["hidden_dim"] = c.hidden_dim;
    return j;
}

// Applies keys from a JSON object onto a config, rejecting unknown keys so
// experiment manifests cannot silently drift.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
    for (const auto& [key, value] : j.items()) {
        if (key == "bits") base.bits = value.get<std::size_t>();
        else if (key == "tau") base.tau = value.get<double>();
        else if (key == "gamma") base.gamma = value.get<double>();
        else if (key == "mask_ratio") base.mask_ratio = value.get<double>();
        else if (key == "epochs") base.epochs = value.get<std::size_t>();
        else if (key == "batch_size") base.batch_size = value.get<std::size_t>();
        else if (key == "lr_hash") base.lr_hash = value.get<double>();
        else if (key == "lr_encoder") base.lr_encoder = value.get<double>();
        else if (key == "beta1") base.beta1 = value.get<double>();
        else if (key == "beta2") base.beta2 = value.get<double>();
        else if (key == "adam_eps") base.adam_eps = value.get<double>();
        else if (key == "seed") base.seed = value.get<std::uint64_t>();
        else if (key == "use_kl") base.use_kl = value.get<bool>();
        else if (key == "use_rec") base.use_rec = value.get<bool>();
        else if (key == "kl_direction") base.kl_direction = value.get<std::string>();
        else if (key == "hidden_dim") base.hidden_dim = value.get<std::size_t>();
        else throw InvalidParameterError("unknown config key: " + key);
    }
    return base;
}

struct TrainedModel {
    TrainConfig config;
    StudentEncoder encoder;
    HashLayer layer;
    std::vector<LossReport> log;  // one averaged report per epoch
};

inline constexpr const char* kModelFormat = "iphash-model/1";

inline void save_model(const std::filesystem::path& path, const TrainedModel& model) {
    nlohmann::ordered_json head;
    head["format"] = kModelFormat;
    head["config"] = config_to_json(model.config);
    head["sections"] = {"w_tok", "b_tok", "w_out", "b_out", "phi"};
    nlohmann::ordered_json log = nlohmann::ordered_json::array();
    for (const auto& r : model.log) {
        log.push_back({{"l_kl", r.l_kl},
                       {"l_sim", r.l_sim},
                       {"l_quan", r.l_quan},
                       {"l_rec", r.l_rec},
                       {"total", r.total},
                       {"gamma", r.gamma},
                       {"tau", r.tau},
                       {"pair_count", r.pair_count}});
    }
    head["training_log"] = std::move(log);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorruptFileError("cannot open for writing: " + path.string());
    const std::string h = head.dump();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.put('\n');
    write_tensor_stream(out, Tensor::from_matrix(model.encoder.w_tok), "f64");
    write_tensor_stream(out, Tensor{{model.encoder.b_tok.size()}, model.encoder.b_tok}, "f64");
    write_tensor_stream(out, Tensor::from_matrix(model.encoder.w_out), "f64");
    write_tensor_stream(out, Tensor{{model.encoder.b_out.size()}, model.encoder.b_out}, "f64");
    write_tensor_stream(out, Tensor::from_matrix(model.layer.phi), "f64");
    if (!out) throw CorruptFileError("write failed: " + path.string());
}

inline TrainedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFileError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(in, line)) {
        throw CorruptFileError("model file missing header line");
    }
    nlohmann::json head;
    try {
        head = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError("model header is not valid JSON: " + std::string(e.what()));
    }
    if (!head.contains("format") || head["format"] != kModelFormat) {
        throw CorruptFileError(std::string("model format field must be \"") + kModelFormat +
                               "\"");
    }
    TrainedModel model;
    model.config = config_from_json(head.at("config"));
    if (head.contains("training_log")) {
        for (const auto& r : head["training_log"]) {
            LossReport rep;
            rep.l_kl = r.at("l_kl").get<double>();
            rep.l_sim = r.at("l_sim").get<double>();
            rep.l_quan = r.at("l_quan").get<double>();
            rep.l_rec = r.at("l_rec").get<double>();
            rep.total = r.at("total").get<double>();
            rep.gamma = r.at("gamma").get<double>();
            rep.tau = r.at("tau").get<double>();
            rep.pair_count = r.at("pair_count").get<std::size_t>();
            model.log.push_back(rep);
        }
    }
    model.encoder.w_tok = read_tensor_stream(in, "w_tok").as_matrix();
    model.encoder.b_tok = read_tensor_stream(in, "b_tok").data;
    model.encoder.w_out = read_tensor_stream(in, "w_out").as_matrix();
    model.encoder.b_out = read_tensor_stream(in, "b_out").data;
    model.layer.phi = read_tensor_stream(in, "phi").as_matrix();
    return model;
}

namespace detail {

inline void check_report_finite(const LossReport& r, std::size_t epoch, std::size_t step) {
    const std::pair<const char*, double> parts[] = {
        {"L_kl", r.l_kl}, {"L_sim", r.l_sim}, {"L_quan", r.l_quan}, {"L_rec", r.l_rec},
        {"total", r.total}};
    for (const auto& [name, value] : parts) {
        if (!std::isfinite(value)) {
            std::ostringstream os;
            os << "training aborted: non-finite " << name << " at epoch " << epoch + 1
               << " step " << step;
            throw Error(os.str());
        }
    }
}

} // namespace detail

using EpochCallback = std::function<void(std::size_t epoch, const LossReport&)>;

// Runs the full two-stage objective over the train split. Per epoch: shuffle
// the train indices, then per batch draw fresh masks, run the student
// forward, fetch cached teacher rows, take the joint loss and one Adam step
// per parameter group. Deterministic given (dataset, config.seed).
inline TrainedModel train(const LoadedDataset& ds, const TrainConfig& config,
                          const EpochCallback& on_epoch = {}) {
    config.validate();
    if (ds.split.train.empty()) {
        throw InvalidParameterError("train split is empty");
    }
    if (ds.split.train.size() < 2) {
        throw InvalidParameterError("train split needs at least 2 samples for the pair loss");
    }

    const std::size_t d_in = ds.token_dim();
    const std::size_t d = ds.feature_dim();
    Rng rng(config.seed);

    TrainedModel model;
    model.config = config;
    model.encoder = StudentEncoder::random_init(d_in, config.hidden_dim, d, rng);
    model.layer = HashLayer::random_init(d, config.bits, rng);

    const TeacherBank teacher = build_teacher(ds.features, ds.classifier, config.tau);
    const LossSwitches switches{config.use_kl, config.use_rec};
    const KlDirection direction = parse_kl_direction(config.kl_direction);
    const AdamParams adam{config.beta1, config.beta2, config.adam_eps};

    AdamState st_w_tok, st_b_tok, st_w_out, st_b_out, st_phi;
    std::uint64_t step_index = 0;

    std::vector<std::size_t> order = ds.split.train;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        LossReport epoch_report;
        epoch_report.gamma = config.gamma;
        epoch_report.tau = config.tau;
        std::size_t batches = 0;

        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(start + config.batch_size, order.size());
            const std::size_t nb = end - start;
            if (nb < 2) continue;  // pair loss needs pairs; drop a trailing singleton

            std::vector<Matrix> tokens(nb);
            std::vector<MaskPattern> masks(nb);
            std::vector<std::vector<double>> features(nb);
            std::vector<std::vector<double>> labels(nb);
            for (std::size_t i = 0; i < nb; ++i) {
                const std::size_t sample = order[start + i];
                tokens[i] = ds.sample_tokens(sample);
                masks[i] = random_mask(ds.tokens_per_sample(), config.mask_ratio, rng);
                const auto f = teacher_feature(teacher, sample);
                features[i].assign(f.begin(), f.end());
                const auto z = teacher_soft_label(teacher, sample);
                labels[i].assign(z.begin(), z.end());
            }

            const auto result =
                total_loss(tokens, masks, model.encoder, model.layer, features, labels,
                           teacher.classifier, config.tau, config.gamma, switches, direction);
            detail::check_report_finite(result.report, epoch, step_index + 1);

            ++step_index;
            adam_step(model.encoder.w_tok.data(), result.encoder_grads.w_tok.data(),
                      st_w_tok, adam, config.lr_encoder, step_index);
            adam_step(model.encoder.b_tok, result.encoder_grads.b_tok, st_b_tok, adam,
                      config.lr_encoder, step_index);
            adam_step(model.encoder.w_out.data(), result.encoder_grads.w_out.data(),
                      st_w_out, adam, config.lr_encoder, step_index);
            adam_step(model.encoder.b_out, result.encoder_grads.b_out, st_b_out, adam,
                      config.lr_encoder, step_index);
            adam_step(model.layer.phi.data(), result.phi_grads.data(), st_phi, adam,
                      config.lr_hash, step_index);

            epoch_report.l_kl += result.report.l_kl;
            epoch_report.l_sim += result.report.l_sim;
            epoch_report.l_quan += result.report.l_quan;
            epoch_report.l_rec += result.report.l_rec;
            epoch_report.pair_count += result.report.pair_count;
            ++batches;
        }

        if (batches > 0) {
            const double inv = 1.0 / static_cast<double>(batches);
            epoch_report.l_kl *= inv;
            epoch_report.l_sim *= inv;
            epoch_report.l_quan *= inv;
            epoch_report.l_rec *= inv;
        }
        epoch_report.total = epoch_report.l_kl + epoch_report.l_sim + epoch_report.l_quan +
                             config.gamma * epoch_report.l_rec;
        model.log.push_back(epoch_report);
        if (on_epoch) on_epoch(epoch, epoch_report);
    }
    return model;
}

// Encodes every sample with the complete token grid (mask ratio is ignored
// at encode time) and returns the N x L matrix of +-1 signs.
inline Matrix encode_dataset(const LoadedDataset& ds, const TrainedModel& model) {
    if (ds.token_dim() != model.encoder.token_dim()) {
        throw DimensionError("encode_dataset: dataset token dim does not match model");
    }
    if (ds.feature_dim() != model.layer.feature_dim()) {
        throw DimensionError("encode_dataset: dataset feature dim does not match model");
    }
    const std::size_t n = ds.num_samples();
    const std::size_t bits = model.layer.bits();
    Matrix codes(n, bits);
    const MaskPattern full = full_mask(ds.tokens_per_sample());
    parallel_for(n, [&](std::size_t i) {
        const Matrix tokens = ds.sample_tokens(i);
        const auto v = encode(tokens, full, model.encoder);
        const auto h = hash_project(v, model.layer);
        const auto code = binarize(h);
        std::copy(code.signs.begin(), code.signs.end(), codes.row(i).begin());
    });
    return codes;
}

// ---------------------------------------------------------------------------
// Gradient checking.
//
// The joint objective is non-smooth at sign(); finite differences are taken
// on the sign-frozen relaxation instead: codes become b~ = sign(h0) + (h - h0)
// around the base point h0, the quantization target is frozen at sign(h0),
// and the pair cosine uses true (varying) norms. The analytic STE gradients
// equal the gradient of that relaxation at the base point, so central
// differences must agree there.

struct GradCheckOptions {
    std::size_t trials = 20;
    std::uint64_t seed = 12345;
    double fd_step = 1e-5;
    double tolerance = 1e-4;
    // Test fixture: scales the analytic phi gradient to prove the harness
    // notices a wrong gradient. 1.0 means no mutation.
    double mutate_scale = 1.0;
};

struct GradCheckTrialResult {
    double max_rel_err = 0.0;
    std::size_t params_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckTrialResult> trials;
    double max_rel_err = 0.0;
    double tolerance = 1e-4;
    bool pass = false;
};

// Relative error with a small absolute floor so zero gradients from dead
// ReLU units compare cleanly against finite-difference noise.
inline double gradcheck_rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
    return std::abs(analytic - numeric) / denom;
}

namespace detail {

struct GradCheckProblem {
    std::vector<Matrix> tokens;
    std::vector<MaskPattern> masks;
    std::vector<std::vector<double>> teacher_features;
    std::vector<std::vector<double>> teacher_labels;
    Matrix classifier;
    StudentEncoder encoder;
    HashLayer layer;
    double tau = 2.0;
    double gamma = 0.1;
    KlDirection direction = KlDirection::TeacherToStudent;
};

// Smallest |pre-activation| across the batch; trials too close to a ReLU
// kink are redrawn because central differences straddle the kink there.
inline double min_abs_preactivation(const GradCheckProblem& p) {
    double best = std::numeric_limits<double>::infinity();
    const std::size_t d_in = p.encoder.token_dim();
    const std::size_t d_h = p.encoder.hidden_dim();
    for (std::size_t i = 0; i < p.tokens.size(); ++i) {
        for (std::size_t ki : p.masks[i].kept) {
            const auto t = p.tokens[i].row(ki);
            for (std::size_t h = 0; h < d_h; ++h) {
                double a = p.encoder.b_tok[h];
                for (std::size_t c = 0; c < d_in; ++c) a += p.encoder.w_tok(c, h) * t[c];
                best = std::min(best, std::abs(a));
            }
        }
    }
    return best;
}

inline GradCheckProblem draw_gradcheck_problem(Rng& rng, bool alternate_direction) {
    for (;;) {
        GradCheckProblem p;
        const std::size_t d_in = 2 + rng.uniform_below(15);   // [2,16]
        const std::size_t d_h = 2 + rng.uniform_below(7);     // [2,8]
        const std::size_t d = 2 + rng.uniform_below(15);      // [2,16]
        const std::size_t bits = 1 + rng.uniform_below(8);    // [1,8]
        const std::size_t k = 2 + rng.uniform_below(9);       // [2,10]
        const std::size_t batch = 2 + rng.uniform_below(3);   // [2,4]
        const std::size_t tokens = 2 + rng.uniform_below(5);  // [2,6]
        const double taus[] = {1.0, 2.0, 10.0};
        p.tau = taus[rng.uniform_below(3)];
        const double ratios[] = {0.0, 0.25, 0.5};
        const double ratio = ratios[rng.uniform_below(3)];
        p.direction = alternate_direction ? KlDirection::StudentToTeacher
                                          : KlDirection::TeacherToStudent;

        p.encoder = StudentEncoder::random_init(d_in, d_h, d, rng);
        for (double& b : p.encoder.b_tok) b = 0.1 * rng.normal();
        for (double& b : p.encoder.b_out) b = 0.1 * rng.normal();
        p.layer = HashLayer::random_init(d, bits, rng);

        p.classifier = Matrix(k, d);
        for (double& w : p.classifier.data()) w = 0.5 * rng.normal();

        p.tokens.resize(batch);
        p.masks.resize(batch);
        p.teacher_features.resize(batch);
        p.teacher_labels.resize(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            p.tokens[i] = Matrix(tokens, d_in);
            for (double& v : p.tokens[i].data()) v = rng.normal();
            p.masks[i] = random_mask(tokens, ratio, rng);
            p.teacher_features[i].resize(d);
            for (double& v : p.teacher_features[i]) v = rng.normal();
            std::vector<double> logits(k);
            for (double& v : logits) v = rng.normal();
            p.teacher_labels[i] = softmax(logits, 1.0);
        }
        if (min_abs_preactivation(p) > 1e-4) return p;
    }
}

// The sign-frozen relaxed objective described above. base_h and base_signs
// are captured once at the base parameters.
inline double relaxed_total(const GradCheckProblem& p, const StudentEncoder& enc,
                            const HashLayer& layer,
                            const std::vector<std::vector<double>>& base_h,
                            const std::vector<std::vector<double>>& base_signs) {
    const std::size_t n = p.tokens.size();
    const std::size_t bits = layer.bits();
    std::vector<std::vector<double>> vs(n), hs(n), relaxed_codes(n);
    for (std::size_t i = 0; i < n; ++i) {
        vs[i] = encode(p.tokens[i], p.masks[i], enc);
        hs[i] = hash_project(vs[i], layer);
        relaxed_codes[i].resize(bits);
        for (std::size_t j = 0; j < bits; ++j) {
            relaxed_codes[i][j] = base_signs[i][j] + (hs[i][j] - base_h[i][j]);
        }
    }

    const Matrix constructed = matmul(p.classifier, layer.phi);
    double l_kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(constructed.rows(), 0.0);
        for (std::size_t k = 0; k < constructed.rows(); ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < bits; ++j) acc += constructed(k, j) * hs[i][j];
            s[k] = acc;
        }
        const auto z = softmax(s, p.tau);
        if (p.direction == KlDirection::TeacherToStudent) {
            l_kl += kl_divergence(p.teacher_labels[i], z);
        } else {
            l_kl += kl_divergence(z, p.teacher_labels[i]);
        }
    }
    l_kl /= static_cast<double>(n);

    double l_sim = 0.0;
    const std::size_t pairs = n * (n - 1) / 2;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double cv = cosine(p.teacher_features[i], p.teacher_features[j]);
            const double cb = cosine(relaxed_codes[i], relaxed_codes[j]);
            l_sim += (cv - cb) * (cv - cb);
        }
    }
    l_sim /= static_cast<double>(pairs);

    double l_quan = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < bits; ++j) {
            const double r = hs[i][j] - base_signs[i][j];
            l_quan += r * r;
        }
    }
    l_quan /= static_cast<double>(n);

    double l_rec = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < vs[i].size(); ++j) {
            const double diff = vs[i][j] - p.teacher_features[i][j];
            l_rec += diff * diff;
        }
    }
    l_rec /= static_cast<double>(n);

    return l_kl + l_sim + l_quan + p.gamma * l_rec;
}

} // namespace detail

inline GradCheckReport gradcheck(const GradCheckOptions& options) {
    GradCheckReport report;
    report.tolerance = options.tolerance;
    Rng rng(options.seed);

    for (std::size_t trial = 0; trial < options.trials; ++trial) {
        auto problem = detail::draw_gradcheck_problem(rng, trial % 2 == 1);

        auto analytic = total_loss(problem.tokens, problem.masks, problem.encoder,
                                   problem.layer, problem.teacher_features,
                                   problem.teacher_labels, problem.classifier, problem.tau,
                                   problem.gamma, LossSwitches{true, true}, problem.direction);
        if (options.mutate_scale != 1.0) {
            for (double& g : analytic.phi_grads.data()) g *= options.mutate_scale;
        }

        // Capture the base point for the sign-frozen relaxation.
        const std::size_t n = problem.tokens.size();
        std::vector<std::vector<double>> base_h(n), base_signs(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto v = encode(problem.tokens[i], problem.masks[i], problem.encoder);
            base_h[i] = hash_project(v, problem.layer);
            base_signs[i] = binarize(base_h[i]).signs;
        }

        const auto eval = [&](const StudentEncoder& enc, const HashLayer& layer) {
            return detail::relaxed_total(problem, enc, layer, base_h, base_signs);
        };

        GradCheckTrialResult tr;
        const auto check_tensor = [&](std::vector<double>& params,
                                      const std::vector<double>& grads) {
            for (std::size_t idx = 0; idx < params.size(); ++idx) {
                const double saved = params[idx];
                params[idx] = saved + options.fd_step;
                const double up = eval(problem.encoder, problem.layer);
                params[idx] = saved - options.fd_step;
                const double down = eval(problem.encoder, problem.layer);
                params[idx] = saved;
                const double numeric = (up - down) / (2.0 * options.fd_step);
                tr.max_rel_err = std::max(tr.max_rel_err,
                                          gradcheck_rel_err(grads[idx], numeric));
                ++tr.params_checked;
            }
        };

        check_tensor(problem.encoder.w_tok.data(), analytic.encoder_grads.w_tok.data());
        check_tensor(problem.encoder.b_tok, analytic.encoder_grads.b_tok);
        check_tensor(problem.encoder.w_out.data(), analytic.encoder_grads.w_out.data());
        check_tensor(problem.encoder.b_out, analytic.encoder_grads.b_out);
        check_tensor(problem.layer.phi.data(), analytic.phi_grads.data());

        report.max_rel_err = std::max(report.max_rel_err, tr.max_rel_err);
        report.trials.push_back(tr);
    }
    report.pass = report.max_rel_err <= options.tolerance;
    return report;
}

} // namespace iphash
