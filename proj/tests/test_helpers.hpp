#pragma once

// Shared helpers for the unit suites: temp directories, relative error, and
// small random-object builders that stay independent of the library's own
// initialization helpers where a test needs an oracle.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "iphash/numkit.hpp"

namespace testutil {

// Unique scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<unsigned> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("iphash-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
                 std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-2});
    return std::abs(a - b) / denom;
}

inline std::vector<double> random_vector(iphash::Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

inline iphash::Matrix random_matrix(iphash::Rng& rng, std::size_t rows, std::size_t cols,
                                    double scale = 1.0) {
    iphash::Matrix m(rows, cols);
    for (double& x : m.data()) x = scale * rng.normal();
    return m;
}

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

} // namespace testutil
