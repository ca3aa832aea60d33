#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <fstream>

#include "iphash/dataio.hpp"
#include "test_helpers.hpp"

using iphash::Tensor;

TEST_CASE("tensor round-trip is byte-identical for f64") {
    testutil::TempDir dir("tensor-rt");
    Tensor t;
    t.shape = {2, 3};
    t.data = {1.0, -2.5, 1.0 / 3.0, 0.0, -0.0, 12345.6789};
    const auto p1 = dir.path() / "a.iph";
    const auto p2 = dir.path() / "b.iph";
    iphash::write_tensor(p1, t, "f64");
    const auto back = iphash::read_tensor(p1);
    REQUIRE(back.shape == t.shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        CHECK(std::memcmp(&back.data[i], &t.data[i], sizeof(double)) == 0);
    }
    iphash::write_tensor(p2, back, "f64");
    CHECK(testutil::slurp(p1) == testutil::slurp(p2));
}

TEST_CASE("f32 round-trip carries f32 rounding semantics") {
    testutil::TempDir dir("tensor-f32");
    Tensor t;
    t.shape = {1, 1};
    t.data = {1.0 / 3.0};
    const auto p = dir.path() / "third.iph";
    iphash::write_tensor(p, t, "f32");
    const auto back = iphash::read_tensor(p);
    CHECK(back.data[0] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
    CHECK(back.data[0] != 1.0 / 3.0);
}

TEST_CASE("corrupt tensors name the offending field") {
    testutil::TempDir dir("tensor-bad");

    SECTION("payload shorter than the shape promises") {
        const auto p = dir.path() / "short.iph";
        std::ofstream out(p, std::ios::binary);
        out << R"({"magic":"IPH1","dtype":"f64","shape":[4,3]})" << "\n";
        for (int i = 0; i < 11 * 8; ++i) out.put('\0');
        out.close();
        REQUIRE_THROWS_AS(iphash::read_tensor(p), iphash::CorruptFileError);
        REQUIRE_THROWS_WITH(iphash::read_tensor(p),
                            Catch::Matchers::ContainsSubstring("payload"));
    }

    SECTION("payload longer than the shape promises") {
        const auto p = dir.path() / "long.iph";
        std::ofstream out(p, std::ios::binary);
        out << R"({"magic":"IPH1","dtype":"f64","shape":[1,1]})" << "\n";
        for (int i = 0; i < 16; ++i) out.put('\0');
        out.close();
        REQUIRE_THROWS_WITH(iphash::read_tensor(p),
                            Catch::Matchers::ContainsSubstring("trailing"));
    }

    SECTION("bad magic") {
        const auto p = dir.path() / "magic.iph";
        std::ofstream out(p, std::ios::binary);
        out << R"({"magic":"NOPE","dtype":"f64","shape":[1]})" << "\n";
        for (int i = 0; i < 8; ++i) out.put('\0');
        out.close();
        REQUIRE_THROWS_WITH(iphash::read_tensor(p),
                            Catch::Matchers::ContainsSubstring("magic"));
    }

    SECTION("bad dtype") {
        const auto p = dir.path() / "dtype.iph";
        std::ofstream out(p, std::ios::binary);
        out << R"({"magic":"IPH1","dtype":"i8","shape":[1]})" << "\n";
        out.close();
        REQUIRE_THROWS_WITH(iphash::read_tensor(p),
                            Catch::Matchers::ContainsSubstring("dtype"));
    }

    SECTION("zero shape entry") {
        const auto p = dir.path() / "shape.iph";
        std::ofstream out(p, std::ios::binary);
        out << R"({"magic":"IPH1","dtype":"f64","shape":[0,3]})" << "\n";
        out.close();
        REQUIRE_THROWS_WITH(iphash::read_tensor(p),
                            Catch::Matchers::ContainsSubstring("shape"));
    }
}

TEST_CASE("synthetic generator emits the documented shapes") {
    testutil::TempDir dir("synth-shapes");
    iphash::SynthSpec spec;
    spec.num_classes = 10;
    spec.samples_per_class = 220;
    spec.d = 32;
    spec.d_in = 16;
    spec.tokens_per_sample = 8;
    spec.seed = 7;
    const auto manifest = iphash::generate_synthetic(spec, dir.path());

    CHECK(iphash::read_tensor_shape(dir.path() / "tokens.iph") ==
          std::vector<std::size_t>{2200, 8, 16});
    CHECK(iphash::read_tensor_shape(dir.path() / "teacher_features.iph") ==
          std::vector<std::size_t>{2200, 32});
    CHECK(iphash::read_tensor_shape(dir.path() / "classifier.iph") ==
          std::vector<std::size_t>{spec.teacher_classes, 32});
    CHECK(iphash::read_tensor_shape(dir.path() / "labels.iph") ==
          std::vector<std::size_t>{2200, 10});

    const auto ds = iphash::load_dataset(dir.path() / "manifest.json");
    CHECK(ds.split.query.size() == 10 * spec.queries_per_class);
    CHECK(ds.split.database.size() == 2200 - 10 * spec.queries_per_class);
    CHECK(ds.split.train.size() == spec.train_count);
    CHECK(manifest.split.query.size() == ds.split.query.size());
}

TEST_CASE("synthetic generation is byte-deterministic") {
    testutil::TempDir a("synth-det-a");
    testutil::TempDir b("synth-det-b");
    iphash::SynthSpec spec;
    spec.num_classes = 3;
    spec.samples_per_class = 12;
    spec.d = 6;
    spec.d_in = 4;
    spec.tokens_per_sample = 5;
    spec.queries_per_class = 2;
    spec.train_count = 20;
    spec.seed = 99;
    iphash::generate_synthetic(spec, a.path());
    iphash::generate_synthetic(spec, b.path());
    for (const char* name :
         {"tokens.iph", "teacher_features.iph", "classifier.iph", "labels.iph",
          "mixing.iph", "manifest.json"}) {
        CHECK(testutil::slurp(a.path() / name) == testutil::slurp(b.path() / name));
    }
}

TEST_CASE("zero noise degenerates to identical same-class features") {
    testutil::TempDir dir("synth-zero");
    iphash::SynthSpec spec;
    spec.num_classes = 2;
    spec.samples_per_class = 5;
    spec.d = 4;
    spec.d_in = 3;
    spec.tokens_per_sample = 4;
    spec.queries_per_class = 1;
    spec.train_count = 8;
    spec.feature_noise = 0.0;
    spec.token_noise = 0.0;
    spec.seed = 3;
    iphash::generate_synthetic(spec, dir.path());
    const auto ds = iphash::load_dataset(dir.path() / "manifest.json");

    for (std::size_t c = 0; c < 2; ++c) {
        const auto first = ds.features.row(c * 5);
        for (std::size_t i = 1; i < 5; ++i) {
            const auto other = ds.features.row(c * 5 + i);
            for (std::size_t j = 0; j < ds.features.cols(); ++j) {
                CHECK(other[j] == first[j]);
            }
        }
    }

    // With zero token noise every token is exactly the mixing projection of
    // the feature, which is the student's recoverability premise.
    const auto mixing = iphash::read_tensor(dir.path() / "mixing.iph").as_matrix();
    for (std::size_t i = 0; i < ds.num_samples(); ++i) {
        const auto tokens = ds.sample_tokens(i);
        for (std::size_t r = 0; r < ds.token_dim(); ++r) {
            double expected = 0.0;
            for (std::size_t j = 0; j < ds.feature_dim(); ++j) {
                expected += mixing(r, j) * ds.features(i, j);
            }
            for (std::size_t p = 0; p < ds.tokens_per_sample(); ++p) {
                CHECK(tokens(p, r) == expected);
            }
        }
    }
}

TEST_CASE("split integrity is validated on load") {
    testutil::TempDir dir("split-bad");
    iphash::SynthSpec spec;
    spec.num_classes = 2;
    spec.samples_per_class = 6;
    spec.d = 4;
    spec.d_in = 3;
    spec.tokens_per_sample = 2;
    spec.queries_per_class = 1;
    spec.train_count = 5;
    iphash::generate_synthetic(spec, dir.path());

    auto manifest = iphash::load_manifest(dir.path() / "manifest.json");

    SECTION("query/database overlap rejected") {
        auto broken = manifest;
        broken.split.database.push_back(broken.split.query.front());
        iphash::save_manifest(dir.path() / "manifest.json", broken);
        REQUIRE_THROWS_AS(iphash::load_manifest(dir.path() / "manifest.json"),
                          iphash::CorruptFileError);
    }

    SECTION("train outside database rejected") {
        auto broken = manifest;
        broken.split.train.push_back(broken.split.query.front());
        iphash::save_manifest(dir.path() / "manifest.json", broken);
        REQUIRE_THROWS_AS(iphash::load_manifest(dir.path() / "manifest.json"),
                          iphash::CorruptFileError);
    }

    SECTION("out-of-range index rejected") {
        auto broken = manifest;
        broken.split.database.push_back(12);  // N = 12, max valid is 11
        iphash::save_manifest(dir.path() / "manifest.json", broken);
        REQUIRE_THROWS_AS(iphash::load_manifest(dir.path() / "manifest.json"),
                          iphash::CorruptFileError);
    }
}

TEST_CASE("queries leave enough samples per class") {
    iphash::SynthSpec spec;
    spec.samples_per_class = 5;
    spec.queries_per_class = 5;
    REQUIRE_THROWS_AS(spec.validate(), iphash::InvalidParameterError);
}
