#pragma once

// The .iph tensor file format, dataset manifests with query/database/train
// splits, and the synthetic dataset generator that stands in for offline
// feature extraction.
//
// A .iph file is a single-line JSON header followed immediately by the raw
// row-major little-endian payload:
//
//   {"magic":"IPH1","dtype":"f64","shape":[2,3]}\n<48 payload bytes>
//
// Arithmetic is always done in f64; f32 files are widened on load.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iphash/errors.hpp"
#include "iphash/numkit.hpp"

namespace iphash {

// N-dimensional tensor held as f64 regardless of on-disk dtype.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }

    Matrix as_matrix() const {
        if (shape.size() != 2) {
            std::ostringstream os;
            os << "expected a rank-2 tensor, got rank " << shape.size();
            throw DimensionError(os.str());
        }
        return Matrix(shape[0], shape[1], data);
    }

    static Tensor from_matrix(const Matrix& m) {
        return Tensor{{m.rows(), m.cols()}, m.data()};
    }
};

namespace detail {

inline void append_le_bytes(std::string& out, std::uint64_t word, int nbytes) {
    for (int i = 0; i < nbytes; ++i) {
        out.push_back(static_cast<char>((word >> (8 * i)) & 0xffu));
    }
}

inline std::uint64_t read_le_word(const unsigned char* p, int nbytes) {
    std::uint64_t word = 0;
    for (int i = 0; i < nbytes; ++i) {
        word |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return word;
}

} // namespace detail

inline void write_tensor_stream(std::ostream& out, const Tensor& tensor,
                                const std::string& dtype = "f64") {
    if (tensor.shape.empty()) {
        throw InvalidParameterError("write_tensor: shape must be nonempty");
    }
    for (std::size_t s : tensor.shape) {
        if (s < 1) throw InvalidParameterError("write_tensor: shape entries must be >= 1");
    }
    if (dtype != "f32" && dtype != "f64") {
        throw InvalidParameterError("write_tensor: dtype must be f32 or f64, got " + dtype);
    }
    if (tensor.element_count() != tensor.data.size()) {
        std::ostringstream os;
        os << "write_tensor: data length " << tensor.data.size()
           << " does not match shape product " << tensor.element_count();
        throw DimensionError(os.str());
    }

    nlohmann::ordered_json header;
    header["magic"] = "IPH1";
    header["dtype"] = dtype;
    header["shape"] = tensor.shape;

    std::string payload;
    if (dtype == "f64") {
        payload.reserve(tensor.data.size() * 8);
        for (double v : tensor.data) {
            detail::append_le_bytes(payload, std::bit_cast<std::uint64_t>(v), 8);
        }
    } else {
        payload.reserve(tensor.data.size() * 4);
        for (double v : tensor.data) {
            const float f = static_cast<float>(v);
            detail::append_le_bytes(payload, std::bit_cast<std::uint32_t>(f), 4);
        }
    }

    const std::string head = header.dump();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.put('\n');
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& tensor,
                         const std::string& dtype = "f64") {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CorruptFileError("cannot open for writing: " + path.string());
    }
    write_tensor_stream(out, tensor, dtype);
    if (!out) {
        throw CorruptFileError("write failed: " + path.string());
    }
}

// Reads just the header line and validates it. Useful for cheap shape checks.
inline nlohmann::json read_tensor_header(std::istream& in, const std::string& name) {
    std::string line;
    if (!std::getline(in, line)) {
        throw CorruptFileError(name + ": missing header line");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(name + ": header is not valid JSON: " + e.what());
    }
    if (!header.contains("magic") || header["magic"] != "IPH1") {
        throw CorruptFileError(name + ": bad magic field (expected \"IPH1\")");
    }
    if (!header.contains("dtype") ||
        (header["dtype"] != "f32" && header["dtype"] != "f64")) {
        throw CorruptFileError(name + ": bad dtype field (expected \"f32\" or \"f64\")");
    }
    if (!header.contains("shape") || !header["shape"].is_array() || header["shape"].empty()) {
        throw CorruptFileError(name + ": bad shape field (expected nonempty array)");
    }
    for (const auto& s : header["shape"]) {
        if (!s.is_number_unsigned() || s.get<std::uint64_t>() < 1) {
            throw CorruptFileError(name + ": bad shape field (entries must be integers >= 1)");
        }
    }
    return header;
}

inline std::vector<std::size_t> read_tensor_shape(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CorruptFileError("cannot open: " + path.string());
    }
    const auto header = read_tensor_header(in, path.filename().string());
    return header["shape"].get<std::vector<std::size_t>>();
}

// Reads header + exactly the payload the header promises, leaving the stream
// positioned after the tensor (so tensors can be concatenated in one file).
inline Tensor read_tensor_stream(std::istream& in, const std::string& name) {
    const auto header = read_tensor_header(in, name);
    const std::string dtype = header["dtype"].get<std::string>();
    Tensor tensor;
    tensor.shape = header["shape"].get<std::vector<std::size_t>>();

    const std::size_t count = tensor.element_count();
    const std::size_t elem_size = dtype == "f64" ? 8 : 4;
    std::string payload(count * elem_size, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (static_cast<std::size_t>(in.gcount()) != payload.size()) {
        std::ostringstream os;
        os << name << ": payload truncated, got " << in.gcount() << " of "
           << payload.size() << " bytes";
        throw CorruptFileError(os.str());
    }

    tensor.data.resize(count);
    const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
    if (dtype == "f64") {
        for (std::size_t i = 0; i < count; ++i) {
            tensor.data[i] = std::bit_cast<double>(detail::read_le_word(bytes + i * 8, 8));
        }
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            const auto word = static_cast<std::uint32_t>(detail::read_le_word(bytes + i * 4, 4));
            tensor.data[i] = static_cast<double>(std::bit_cast<float>(word));
        }
    }
    return tensor;
}

inline Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CorruptFileError("cannot open: " + path.string());
    }
    const std::string name = path.filename().string();
    Tensor tensor = read_tensor_stream(in, name);
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw CorruptFileError(name + ": payload has trailing bytes beyond the declared shape");
    }
    return tensor;
}

// Index sets partitioning a dataset. Queries and database are disjoint and
// the train set is drawn from the database, mirroring the usual retrieval
// protocol. Lists are kept sorted so index-based tie rules are canonical.
struct SplitSpec {
    std::vector<std::size_t> query;
    std::vector<std::size_t> database;
    std::vector<std::size_t> train;
};

struct DatasetManifest {
    std::filesystem::path base_dir;
    std::string tokens_path;
    std::string teacher_features_path;
    std::string classifier_path;
    std::string labels_path;
    SplitSpec split;

    std::filesystem::path resolve(const std::string& rel) const {
        std::filesystem::path p(rel);
        return p.is_absolute() ? p : base_dir / p;
    }
};

namespace detail {

inline void validate_split(const SplitSpec& split, std::size_t num_samples) {
    std::vector<bool> in_query(num_samples, false);
    std::vector<bool> in_database(num_samples, false);
    for (std::size_t i : split.query) {
        if (i >= num_samples) throw CorruptFileError("split.query index out of range");
        in_query[i] = true;
    }
    for (std::size_t i : split.database) {
        if (i >= num_samples) throw CorruptFileError("split.database index out of range");
        if (in_query[i]) throw CorruptFileError("split.query and split.database overlap");
        if (in_database[i]) throw CorruptFileError("split.database contains a duplicate index");
        in_database[i] = true;
    }
    for (std::size_t i : split.train) {
        if (i >= num_samples || !in_database[i]) {
            throw CorruptFileError("split.train must be a subset of split.database");
        }
    }
}

} // namespace detail

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["tokens_path"] = m.tokens_path;
    j["teacher_features_path"] = m.teacher_features_path;
    j["classifier_path"] = m.classifier_path;
    j["labels_path"] = m.labels_path;
    j["split"] = {{"query", m.split.query},
                  {"database", m.split.database},
                  {"train", m.split.train}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorruptFileError("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFileError("cannot open: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError("manifest is not valid JSON: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    try {
        m.tokens_path = j.at("tokens_path").get<std::string>();
        m.teacher_features_path = j.at("teacher_features_path").get<std::string>();
        m.classifier_path = j.at("classifier_path").get<std::string>();
        m.labels_path = j.at("labels_path").get<std::string>();
        m.split.query = j.at("split").at("query").get<std::vector<std::size_t>>();
        m.split.database = j.at("split").at("database").get<std::vector<std::size_t>>();
        m.split.train = j.at("split").at("train").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError("manifest field error: " + std::string(e.what()));
    }
    std::sort(m.split.query.begin(), m.split.query.end());
    std::sort(m.split.database.begin(), m.split.database.end());
    std::sort(m.split.train.begin(), m.split.train.end());

    const auto tokens_shape = read_tensor_shape(m.resolve(m.tokens_path));
    if (tokens_shape.size() != 3) {
        throw CorruptFileError("tokens tensor must have shape [N,P,d_in]");
    }
    detail::validate_split(m.split, tokens_shape[0]);
    return m;
}

// Everything a training or evaluation run needs, loaded and cross-checked.
struct LoadedDataset {
    Tensor tokens;      // N x P x d_in
    Matrix features;    // N x d teacher features
    Matrix classifier;  // K x d fixed teacher classifier
    Matrix labels;      // N x C multi-hot
    SplitSpec split;

    std::size_t num_samples() const { return tokens.shape[0]; }
    std::size_t tokens_per_sample() const { return tokens.shape[1]; }
    std::size_t token_dim() const { return tokens.shape[2]; }
    std::size_t feature_dim() const { return features.cols(); }

    // Copies sample i's token grid into a P x d_in matrix.
    Matrix sample_tokens(std::size_t i) const {
        const std::size_t p = tokens_per_sample();
        const std::size_t d_in = token_dim();
        Matrix out(p, d_in);
        const double* src = tokens.data.data() + i * p * d_in;
        std::copy(src, src + p * d_in, out.data().begin());
        return out;
    }
};

inline LoadedDataset load_dataset(const DatasetManifest& m) {
    LoadedDataset ds;
    ds.tokens = read_tensor(m.resolve(m.tokens_path));
    if (ds.tokens.shape.size() != 3) {
        throw CorruptFileError("tokens tensor must have shape [N,P,d_in]");
    }
    ds.features = read_tensor(m.resolve(m.teacher_features_path)).as_matrix();
    ds.classifier = read_tensor(m.resolve(m.classifier_path)).as_matrix();
    ds.labels = read_tensor(m.resolve(m.labels_path)).as_matrix();
    ds.split = m.split;

    const std::size_t n = ds.tokens.shape[0];
    if (ds.features.rows() != n) {
        throw CorruptFileError("teacher feature count does not match token count");
    }
    if (ds.labels.rows() != n) {
        throw CorruptFileError("label row count does not match token count");
    }
    if (ds.classifier.cols() != ds.features.cols()) {
        throw CorruptFileError("classifier column count does not match feature dimension");
    }
    for (std::size_t i = 0; i < n; ++i) {
        bool any = false;
        for (std::size_t c = 0; c < ds.labels.cols(); ++c) {
            if (ds.labels(i, c) > 0.5) {
                any = true;
                break;
            }
        }
        if (!any) {
            std::ostringstream os;
            os << "sample " << i << " has no positive label bit";
            throw CorruptFileError(os.str());
        }
    }
    detail::validate_split(ds.split, n);
    return ds;
}

inline LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
    return load_dataset(load_manifest(manifest_path));
}

// Parameters of the synthetic dataset generator. Teacher features are a
// Gaussian mixture; tokens are a fixed linear projection of the feature plus
// per-token noise, so mean-pooled tokens recover the feature's projection.
struct SynthSpec {
    std::size_t num_classes = 10;
    std::size_t samples_per_class = 220;
    std::size_t d = 32;     // teacher feature dimension
    std::size_t d_in = 16;  // token dimension
    std::size_t tokens_per_sample = 8;  // P
    double center_scale = 1.0;
    double feature_noise = 0.35;
    double token_noise = 0.6;
    std::uint64_t seed = 7;
    // Split sizing; queries are drawn per class, the train set from the
    // database.
    std::size_t queries_per_class = 20;
    std::size_t train_count = 1000;
    // Teacher label-space size K; kept larger than the class count to mimic
    // an upstream classifier over a different label space.
    std::size_t teacher_classes = 40;

    void validate() const {
        if (num_classes < 1 || samples_per_class < 1 || d < 1 || d_in < 1 ||
            tokens_per_sample < 1 || teacher_classes < 1) {
            throw InvalidParameterError("synthetic spec: all dimensions must be >= 1");
        }
        if (center_scale < 0.0 || feature_noise < 0.0 || token_noise < 0.0) {
            throw InvalidParameterError("synthetic spec: noise scales must be >= 0");
        }
        if (queries_per_class >= samples_per_class) {
            throw InvalidParameterError(
                "synthetic spec: queries_per_class must leave database samples per class");
        }
    }
};

// Generates the dataset files plus manifest.json under out_dir and returns
// the manifest. Deterministic: the same spec and seed give byte-identical
// files. The mixing matrix used for tokens is persisted as mixing.iph.
inline DatasetManifest generate_synthetic(const SynthSpec& spec,
                                          const std::filesystem::path& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);

    const std::size_t n = spec.num_classes * spec.samples_per_class;
    Rng rng(spec.seed);

    // Class centers, then per-sample features, then the token mixing matrix,
    // then token noise, then the classifier, then splits. The draw order is
    // fixed; do not reorder.
    Matrix centers(spec.num_classes, spec.d);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t j = 0; j < spec.d; ++j) {
            centers(c, j) = spec.center_scale * rng.normal();
        }
    }

    Matrix features(n, spec.d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i / spec.samples_per_class;
        for (std::size_t j = 0; j < spec.d; ++j) {
            features(i, j) = centers(c, j) + spec.feature_noise * rng.normal();
        }
    }

    // Mixing matrix entries scale like 1/sqrt(d) so token coordinates stay
    // O(center_scale) regardless of d.
    Matrix mixing(spec.d_in, spec.d);
    const double mix_scale = 1.0 / std::sqrt(static_cast<double>(spec.d));
    for (std::size_t i = 0; i < spec.d_in; ++i) {
        for (std::size_t j = 0; j < spec.d; ++j) {
            mixing(i, j) = mix_scale * rng.normal();
        }
    }

    Tensor tokens;
    tokens.shape = {n, spec.tokens_per_sample, spec.d_in};
    tokens.data.resize(n * spec.tokens_per_sample * spec.d_in);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> base(spec.d_in, 0.0);
        for (std::size_t r = 0; r < spec.d_in; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < spec.d; ++j) s += mixing(r, j) * features(i, j);
            base[r] = s;
        }
        for (std::size_t p = 0; p < spec.tokens_per_sample; ++p) {
            double* dst = tokens.data.data() +
                          (i * spec.tokens_per_sample + p) * spec.d_in;
            for (std::size_t r = 0; r < spec.d_in; ++r) {
                dst[r] = base[r] + spec.token_noise * rng.normal();
            }
        }
    }

    Matrix classifier(spec.teacher_classes, spec.d);
    const double w0_scale = std::pow(static_cast<double>(spec.d), -0.25);
    for (std::size_t k = 0; k < spec.teacher_classes; ++k) {
        for (std::size_t j = 0; j < spec.d; ++j) {
            classifier(k, j) = w0_scale * rng.normal();
        }
    }

    Matrix labels(n, spec.num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        labels(i, i / spec.samples_per_class) = 1.0;
    }

    // Per-class query draw, remainder database, train drawn from database.
    SplitSpec split;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::vector<std::size_t> members(spec.samples_per_class);
        std::iota(members.begin(), members.end(), c * spec.samples_per_class);
        rng.shuffle(members);
        for (std::size_t i = 0; i < members.size(); ++i) {
            (i < spec.queries_per_class ? split.query : split.database).push_back(members[i]);
        }
    }
    std::sort(split.query.begin(), split.query.end());
    std::sort(split.database.begin(), split.database.end());
    {
        const std::size_t train_count = std::min(spec.train_count, split.database.size());
        std::vector<std::size_t> pool = split.database;
        rng.shuffle(pool);
        split.train.assign(pool.begin(), pool.begin() + train_count);
        std::sort(split.train.begin(), split.train.end());
    }

    write_tensor(out_dir / "tokens.iph", tokens, "f64");
    write_tensor(out_dir / "teacher_features.iph", Tensor::from_matrix(features), "f64");
    write_tensor(out_dir / "classifier.iph", Tensor::from_matrix(classifier), "f64");
    write_tensor(out_dir / "labels.iph", Tensor::from_matrix(labels), "f64");
    write_tensor(out_dir / "mixing.iph", Tensor::from_matrix(mixing), "f64");

    DatasetManifest manifest;
    manifest.base_dir = out_dir;
    manifest.tokens_path = "tokens.iph";
    manifest.teacher_features_path = "teacher_features.iph";
    manifest.classifier_path = "classifier.iph";
    manifest.labels_path = "labels.iph";
    manifest.split = std::move(split);
    save_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

} // namespace iphash
