// iphash: one binary for the whole workflow. Subcommands:
//   synth      generate a synthetic token/feature/label dataset + manifest
//   train      learn the encoder and hash layer on a manifest's train split
//   encode     binarize every sample with a trained model
//   retrieve   rank the database for each query by Hamming distance
//   eval       MAP@k + precision-recall reports
//   gradcheck  finite-difference validation of every analytic gradient
//   sweep      train/evaluate across a list of tau or mask-ratio values
//
// Exit codes: 0 success, 1 internal or check failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iphash/dataio.hpp"
#include "iphash/evalkit.hpp"
#include "iphash/hashcore.hpp"
#include "iphash/retrieval.hpp"
#include "iphash/trainer.hpp"

namespace {

namespace fs = std::filesystem;

// Thrown for post-parse validation problems that are the user's to fix.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainCliOptions {
    std::string data;
    std::string out;
    std::string config_path;
    iphash::TrainConfig config;
    bool no_kl = false;
    bool no_rec = false;
};

// Registers the shared training flags on a subcommand. Flag values override
// config-file values, which override built-in defaults.
void add_train_flags(CLI::App* cmd, TrainCliOptions& opt) {
    cmd->add_option("--config", opt.config_path, "JSON config file (flags override it)");
    cmd->add_option("--bits", opt.config.bits, "code length in bits")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--tau", opt.config.tau, "softmax temperature");
    cmd->add_option("--gamma", opt.config.gamma, "reconstruction loss weight");
    cmd->add_option("--mask-ratio", opt.config.mask_ratio, "token mask ratio in [0,1)");
    cmd->add_option("--epochs", opt.config.epochs, "training epochs");
    cmd->add_option("--batch-size", opt.config.batch_size, "minibatch size");
    cmd->add_option("--lr-hash", opt.config.lr_hash, "learning rate for the hash layer");
    cmd->add_option("--lr-encoder", opt.config.lr_encoder, "learning rate for the encoder");
    cmd->add_option("--seed", opt.config.seed, "training seed");
    cmd->add_option("--hidden-dim", opt.config.hidden_dim, "encoder hidden width");
    cmd->add_option("--kl-direction", opt.config.kl_direction,
                    "teacher-to-student or student-to-teacher");
    cmd->add_flag("--no-kl", opt.no_kl, "disable the KL distillation loss");
    cmd->add_flag("--no-rec", opt.no_rec, "disable the reconstruction loss");
}

// Merge order: defaults, then config file, then explicitly passed flags.
iphash::TrainConfig resolve_train_config(const CLI::App* cmd, const TrainCliOptions& opt) {
    iphash::TrainConfig merged;
    if (!opt.config_path.empty()) {
        std::ifstream in(opt.config_path);
        if (!in) throw UsageError("cannot open config file: " + opt.config_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config file is not valid JSON: " + std::string(e.what()));
        }
        try {
            merged = iphash::config_from_json(j, merged);
        } catch (const iphash::InvalidParameterError& e) {
            throw UsageError(e.what());
        }
    }
    const auto overridden = [&](const std::string& flag) { return cmd->count(flag) > 0; };
    if (overridden("--bits")) merged.bits = opt.config.bits;
    if (overridden("--tau")) merged.tau = opt.config.tau;
    if (overridden("--gamma")) merged.gamma = opt.config.gamma;
    if (overridden("--mask-ratio")) merged.mask_ratio = opt.config.mask_ratio;
    if (overridden("--epochs")) merged.epochs = opt.config.epochs;
    if (overridden("--batch-size")) merged.batch_size = opt.config.batch_size;
    if (overridden("--lr-hash")) merged.lr_hash = opt.config.lr_hash;
    if (overridden("--lr-encoder")) merged.lr_encoder = opt.config.lr_encoder;
    if (overridden("--seed")) merged.seed = opt.config.seed;
    if (overridden("--hidden-dim")) merged.hidden_dim = opt.config.hidden_dim;
    if (overridden("--kl-direction")) merged.kl_direction = opt.config.kl_direction;
    if (opt.no_kl) merged.use_kl = false;
    if (opt.no_rec) merged.use_rec = false;
    try {
        merged.validate();
    } catch (const iphash::InvalidParameterError& e) {
        throw UsageError(e.what());
    }
    return merged;
}

void print_epoch(std::size_t epoch, const iphash::LossReport& r) {
    std::printf("epoch %3zu  total %.6f  kl %.6f  sim %.6f  quan %.6f  rec %.6f\n",
                epoch + 1, r.total, r.l_kl, r.l_sim, r.l_quan, r.l_rec);
}

iphash::Matrix rows_subset(const iphash::Matrix& m, const std::vector<std::size_t>& ids) {
    iphash::Matrix out(ids.size(), m.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto src = m.row(ids[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

struct EvalArtifacts {
    iphash::EvalReport report;
};

iphash::EvalReport run_eval(const fs::path& codes_path, const fs::path& manifest_path,
                            std::size_t k, iphash::ApDenominator mode) {
    const auto manifest = iphash::load_manifest(manifest_path);
    const auto codes = iphash::read_tensor(codes_path).as_matrix();
    const auto labels =
        iphash::read_tensor(manifest.resolve(manifest.labels_path)).as_matrix();
    if (codes.rows() != labels.rows()) {
        throw iphash::DimensionError("code row count does not match label row count");
    }
    const auto query_codes = iphash::pack(rows_subset(codes, manifest.split.query));
    const auto database_codes = iphash::pack(rows_subset(codes, manifest.split.database));
    return iphash::evaluate(query_codes, database_codes, labels, manifest.split.query,
                            manifest.split.database, k, mode);
}

int cmd_synth(const iphash::SynthSpec& spec, const std::string& out_dir) {
    iphash::generate_synthetic(spec, out_dir);
    std::cout << (fs::path(out_dir) / "manifest.json").string() << "\n";
    return 0;
}

int cmd_train(const CLI::App* cmd, const TrainCliOptions& opt) {
    const auto config = resolve_train_config(cmd, opt);
    const auto dataset = iphash::load_dataset(fs::path(opt.data));
    const auto model = iphash::train(dataset, config, print_epoch);
    iphash::save_model(opt.out, model);
    std::cout << "model saved to " << opt.out << "\n";
    return 0;
}

int cmd_encode(const std::string& data, const std::string& model_path,
               const std::string& out) {
    const auto dataset = iphash::load_dataset(fs::path(data));
    const auto model = iphash::load_model(model_path);
    const auto codes = iphash::encode_dataset(dataset, model);
    iphash::write_tensor(out, iphash::Tensor::from_matrix(codes), "f64");
    std::cout << "codes written to " << out << " (" << codes.rows() << "x" << codes.cols()
              << ")\n";
    return 0;
}

int cmd_retrieve(const std::string& codes_path, const std::string& data, std::size_t k,
                 const std::string& out) {
    const auto manifest = iphash::load_manifest(fs::path(data));
    const auto codes = iphash::read_tensor(codes_path).as_matrix();
    const auto query_codes = iphash::pack(rows_subset(codes, manifest.split.query));
    const auto database_codes = iphash::pack(rows_subset(codes, manifest.split.database));
    const auto rankings = iphash::search(query_codes, database_codes, k);

    nlohmann::ordered_json j;
    j["k"] = k;
    j["bits"] = query_codes.bits;
    nlohmann::ordered_json lists = nlohmann::ordered_json::array();
    for (const auto& list : rankings) {
        nlohmann::ordered_json entry;
        entry["query"] = manifest.split.query[list.query_index];
        std::vector<std::size_t> neighbors;
        std::vector<std::size_t> distances;
        neighbors.reserve(list.entries.size());
        distances.reserve(list.entries.size());
        for (const auto& e : list.entries) {
            neighbors.push_back(manifest.split.database[e.index]);
            distances.push_back(e.distance);
        }
        entry["neighbors"] = neighbors;
        entry["distances"] = distances;
        lists.push_back(std::move(entry));
    }
    j["rankings"] = std::move(lists);
    std::ofstream outfile(out, std::ios::binary | std::ios::trunc);
    if (!outfile) throw iphash::CorruptFileError("cannot open for writing: " + out);
    outfile << j.dump(2) << "\n";
    std::cout << "rankings written to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& codes_path, const std::string& data, std::size_t k,
             const std::string& denom, std::uint64_t seed, const std::string& out_dir) {
    auto report = run_eval(codes_path, data, k, iphash::parse_ap_denominator(denom));
    report.seed = seed;
    report.config = {{"codes", codes_path}, {"data", data}, {"k", k},
                     {"ap_denominator", denom}};
    fs::create_directories(out_dir);
    iphash::write_eval_report(fs::path(out_dir) / "eval-report.json", report);
    iphash::write_pr_csv(fs::path(out_dir) / "pr-curve.csv", report);
    std::printf("MAP@%zu = %.6f over %zu queries\n", k, report.map_at_k, report.num_queries);
    return 0;
}

int cmd_gradcheck(const iphash::GradCheckOptions& options) {
    const auto report = iphash::gradcheck(options);
    for (std::size_t t = 0; t < report.trials.size(); ++t) {
        std::printf("trial %2zu  params %4zu  max rel err %.3e\n", t + 1,
                    report.trials[t].params_checked, report.trials[t].max_rel_err);
    }
    std::printf("gradcheck %s: max relative error %.3e (tolerance %.1e) over %zu trials\n",
                report.pass ? "PASS" : "FAIL", report.max_rel_err, report.tolerance,
                report.trials.size());
    return report.pass ? 0 : 1;
}

int cmd_sweep(const CLI::App* cmd, const TrainCliOptions& opt, const std::string& param,
              const std::vector<double>& values, std::size_t k, const std::string& out) {
    const auto base_config = resolve_train_config(cmd, opt);
    const auto dataset = iphash::load_dataset(fs::path(opt.data));

    std::ofstream csv(out, std::ios::binary | std::ios::trunc);
    if (!csv) throw iphash::CorruptFileError("cannot open for writing: " + out);
    csv << "value,map\n";
    csv << std::setprecision(17);
    for (double value : values) {
        iphash::TrainConfig config = base_config;
        if (param == "tau") {
            config.tau = value;
        } else {
            config.mask_ratio = value;
        }
        try {
            config.validate();
        } catch (const iphash::InvalidParameterError& e) {
            throw UsageError(e.what());
        }
        const auto model = iphash::train(dataset, config);
        const auto codes = iphash::encode_dataset(dataset, model);
        const auto query_codes = iphash::pack(rows_subset(codes, dataset.split.query));
        const auto database_codes = iphash::pack(rows_subset(codes, dataset.split.database));
        const auto report =
            iphash::evaluate(query_codes, database_codes, dataset.labels, dataset.split.query,
                             dataset.split.database, k, iphash::ApDenominator::TopK);
        csv << value << "," << report.map_at_k << "\n";
        std::printf("%s=%g  MAP@%zu = %.6f\n", param.c_str(), value, k, report.map_at_k);
    }
    std::cout << "sweep written to " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"IPHash: unsupervised information-preserving hashing at desk scale"};
    app.require_subcommand(1);

    // synth
    iphash::SynthSpec spec;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--classes", spec.num_classes, "number of classes")
        ->check(CLI::PositiveNumber);
    synth->add_option("--per-class", spec.samples_per_class, "samples per class")
        ->check(CLI::PositiveNumber);
    synth->add_option("--feature-dim", spec.d, "teacher feature dimension d");
    synth->add_option("--token-dim", spec.d_in, "token dimension d_in");
    synth->add_option("--tokens", spec.tokens_per_sample, "tokens per sample P");
    synth->add_option("--center-scale", spec.center_scale, "class center scale");
    synth->add_option("--feature-noise", spec.feature_noise, "teacher feature noise");
    synth->add_option("--token-noise", spec.token_noise, "per-token noise");
    synth->add_option("--seed", spec.seed, "dataset seed");
    synth->add_option("--queries-per-class", spec.queries_per_class, "query count per class");
    synth->add_option("--train-count", spec.train_count, "train subset size");
    synth->add_option("--teacher-classes", spec.teacher_classes, "teacher label-space size K");
    synth->add_option("--out", synth_out, "output directory")->required();

    // train
    TrainCliOptions train_opt;
    auto* train = app.add_subcommand("train", "train encoder + hash layer");
    train->add_option("--data", train_opt.data, "dataset manifest.json")->required();
    train->add_option("--out", train_opt.out, "output model file")->required();
    add_train_flags(train, train_opt);

    // encode
    std::string enc_data, enc_model, enc_out;
    auto* encode = app.add_subcommand("encode", "binarize every dataset sample");
    encode->add_option("--data", enc_data, "dataset manifest.json")->required();
    encode->add_option("--model", enc_model, "trained model file")->required();
    encode->add_option("--out", enc_out, "output codes tensor (.iph)")->required();

    // retrieve
    std::string ret_codes, ret_data, ret_out = "rankings.json";
    std::size_t ret_k = 1000;
    auto* retrieve = app.add_subcommand("retrieve", "Hamming top-k search");
    retrieve->add_option("--codes", ret_codes, "codes tensor (.iph)")->required();
    retrieve->add_option("--data", ret_data, "dataset manifest.json")->required();
    retrieve->add_option("--k", ret_k, "neighbors per query")->check(CLI::PositiveNumber);
    retrieve->add_option("--out", ret_out, "output rankings JSON");

    // eval
    std::string eval_codes, eval_data, eval_denom = "topk", eval_out_dir = ".";
    std::size_t eval_k = 1000;
    std::uint64_t eval_seed = 0;
    auto* eval = app.add_subcommand("eval", "MAP@k and PR-curve reports");
    eval->add_option("--codes", eval_codes, "codes tensor (.iph)")->required();
    eval->add_option("--data", eval_data, "dataset manifest.json")->required();
    eval->add_option("--k", eval_k, "MAP truncation depth")->check(CLI::PositiveNumber);
    eval->add_option("--ap-denominator", eval_denom, "topk or all")
        ->check(CLI::IsMember({"topk", "all"}));
    eval->add_option("--seed", eval_seed, "seed recorded in the report metadata");
    eval->add_option("--out-dir", eval_out_dir, "directory for eval-report.json/pr-curve.csv");

    // gradcheck
    iphash::GradCheckOptions gc;
    bool gc_mutate = false;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--trials", gc.trials, "random configurations to test")
        ->check(CLI::PositiveNumber);
    gradcheck->add_option("--seed", gc.seed, "seed for the random configurations");
    gradcheck->add_option("--step", gc.fd_step, "central difference step");
    gradcheck->add_option("--tolerance", gc.tolerance, "max relative error allowed");
    gradcheck
        ->add_flag("--mutate-gradient", gc_mutate,
                   "test fixture: perturb one gradient term by +10% and expect failure")
        ->group("");  // hidden

    // sweep
    TrainCliOptions sweep_opt;
    std::string sweep_param, sweep_out = "sweep.csv";
    std::vector<double> sweep_values;
    std::size_t sweep_k = 1000;
    auto* sweep = app.add_subcommand("sweep", "train/evaluate across parameter values");
    sweep->add_option("--param", sweep_param, "tau or mask-ratio")
        ->required()
        ->check(CLI::IsMember({"tau", "mask-ratio"}));
    sweep->add_option("--values", sweep_values, "comma-separated parameter values")
        ->required()
        ->delimiter(',');
    sweep->add_option("--data", sweep_opt.data, "dataset manifest.json")->required();
    sweep->add_option("--k", sweep_k, "MAP truncation depth")->check(CLI::PositiveNumber);
    sweep->add_option("--out", sweep_out, "output CSV path");
    add_train_flags(sweep, sweep_opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) {
            try {
                spec.validate();
            } catch (const iphash::InvalidParameterError& e) {
                throw UsageError(e.what());
            }
            return cmd_synth(spec, synth_out);
        }
        if (train->parsed()) return cmd_train(train, train_opt);
        if (encode->parsed()) return cmd_encode(enc_data, enc_model, enc_out);
        if (retrieve->parsed()) return cmd_retrieve(ret_codes, ret_data, ret_k, ret_out);
        if (eval->parsed()) {
            return cmd_eval(eval_codes, eval_data, eval_k, eval_denom, eval_seed,
                            eval_out_dir);
        }
        if (gradcheck->parsed()) {
            if (gc_mutate) gc.mutate_scale = 1.1;
            return cmd_gradcheck(gc);
        }
        if (sweep->parsed()) {
            if (sweep_values.empty()) throw UsageError("--values must list at least one value");
            return cmd_sweep(sweep, sweep_opt, sweep_param, sweep_values, sweep_k, sweep_out);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
