#pragma once

// Retrieval quality metrics: truncated average precision and MAP@k,
// precision-recall curves, and the JSON/CSV report emission.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iphash/errors.hpp"
#include "iphash/numkit.hpp"
#include "iphash/parallel.hpp"
#include "iphash/retrieval.hpp"

namespace iphash {

// Two samples are relevant iff they share at least one positive label bit;
// single-label datasets reduce to class equality.
inline bool share_any_label(const Matrix& labels, std::size_t i, std::size_t j) {
    for (std::size_t c = 0; c < labels.cols(); ++c) {
        if (labels(i, c) > 0.5 && labels(j, c) > 0.5) return true;
    }
    return false;
}

// Denominator convention for truncated AP: count relevant returns within the
// top-k (the usual evaluation-protocol reading), or all relevant items in
// the database.
enum class ApDenominator { TopK, AllRelevant };

inline ApDenominator parse_ap_denominator(const std::string& name) {
    if (name == "topk") return ApDenominator::TopK;
    if (name == "all") return ApDenominator::AllRelevant;
    throw InvalidParameterError("unknown ap denominator: " + name + " (expected topk or all)");
}

// AP over the first min(k, n) ranks of one ranking. rel_flags follow rank
// order. AP is 0 when the denominator count is zero.
inline double average_precision(const std::vector<char>& rel_flags, std::size_t k,
                                ApDenominator mode = ApDenominator::TopK,
                                std::size_t total_relevant = 0) {
    if (rel_flags.empty()) {
        throw InvalidParameterError("average_precision: empty ranking");
    }
    if (k < 1) {
        throw InvalidParameterError("average_precision: k must be >= 1");
    }
    const std::size_t cutoff = std::min(k, rel_flags.size());
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t r = 1; r <= cutoff; ++r) {
        if (rel_flags[r - 1]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r);
        }
    }
    const std::size_t denom = mode == ApDenominator::TopK ? hits : total_relevant;
    return denom == 0 ? 0.0 : sum / static_cast<double>(denom);
}

// One precision/recall point per rank. Returns an empty curve when the
// database holds no relevant item for this query.
struct PrPoint {
    double recall = 0.0;
    double precision = 0.0;
};

inline std::vector<PrPoint> pr_curve(const std::vector<char>& rel_flags,
                                     std::size_t total_relevant) {
    if (total_relevant == 0) return {};
    std::vector<PrPoint> points(rel_flags.size());
    std::size_t hits = 0;
    for (std::size_t r = 1; r <= rel_flags.size(); ++r) {
        if (rel_flags[r - 1]) ++hits;
        points[r - 1].precision = static_cast<double>(hits) / static_cast<double>(r);
        points[r - 1].recall = static_cast<double>(hits) / static_cast<double>(total_relevant);
    }
    return points;
}

struct EvalReport {
    double map_at_k = 0.0;
    std::size_t k = 0;
    std::size_t bits = 0;
    std::uint64_t seed = 0;
    std::string ap_denominator = "topk";
    std::size_t num_queries = 0;
    std::size_t num_database = 0;
    std::size_t queries_without_relevant = 0;
    std::vector<double> per_query_ap;
    std::vector<PrPoint> pr_points;  // dataset-level pointwise mean per rank
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

// Full evaluation pass: rank the whole database per query, truncate at k for
// MAP, and aggregate the per-query PR curves by pointwise mean at each rank.
// query_ids/database_ids map code rows back to label rows.
inline EvalReport evaluate(const PackedCodes& query_codes, const PackedCodes& database_codes,
                           const Matrix& labels, const std::vector<std::size_t>& query_ids,
                           const std::vector<std::size_t>& database_ids, std::size_t k,
                           ApDenominator mode = ApDenominator::TopK) {
    if (query_codes.count != query_ids.size() || database_codes.count != database_ids.size()) {
        throw DimensionError("evaluate: code counts do not match id lists");
    }
    if (database_codes.count == 0) {
        throw InvalidParameterError("evaluate: database is empty");
    }
    if (k < 1) {
        throw InvalidParameterError("evaluate: k must be >= 1");
    }
    for (std::size_t id : query_ids) {
        if (id >= labels.rows()) throw IndexError("evaluate: query id exceeds label count");
    }
    for (std::size_t id : database_ids) {
        if (id >= labels.rows()) throw IndexError("evaluate: database id exceeds label count");
    }

    const std::size_t n = database_codes.count;
    const auto rankings = search(query_codes, database_codes, n);

    EvalReport report;
    report.k = k;
    report.bits = query_codes.bits;
    report.ap_denominator = mode == ApDenominator::TopK ? "topk" : "all";
    report.num_queries = query_codes.count;
    report.num_database = n;
    report.per_query_ap.assign(query_codes.count, 0.0);

    std::vector<double> precision_sum(n, 0.0);
    std::vector<double> recall_sum(n, 0.0);
    std::size_t curves = 0;

    std::vector<std::vector<char>> flags(query_codes.count);
    std::vector<std::size_t> totals(query_codes.count, 0);
    parallel_for(query_codes.count, [&](std::size_t q) {
        auto& f = flags[q];
        f.resize(n);
        std::size_t total = 0;
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t db_id = database_ids[rankings[q].entries[r].index];
            f[r] = share_any_label(labels, query_ids[q], db_id) ? 1 : 0;
            total += f[r];
        }
        totals[q] = total;
        report.per_query_ap[q] = average_precision(f, k, mode, total);
    });

    double ap_sum = 0.0;
    for (std::size_t q = 0; q < query_codes.count; ++q) {
        ap_sum += report.per_query_ap[q];
        if (totals[q] == 0) {
            ++report.queries_without_relevant;
            continue;
        }
        const auto curve = pr_curve(flags[q], totals[q]);
        for (std::size_t r = 0; r < n; ++r) {
            precision_sum[r] += curve[r].precision;
            recall_sum[r] += curve[r].recall;
        }
        ++curves;
    }
    report.map_at_k = ap_sum / static_cast<double>(query_codes.count);
    if (curves > 0) {
        report.pr_points.resize(n);
        for (std::size_t r = 0; r < n; ++r) {
            report.pr_points[r].precision = precision_sum[r] / static_cast<double>(curves);
            report.pr_points[r].recall = recall_sum[r] / static_cast<double>(curves);
        }
    }
    return report;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    j["map_at_k"] = report.map_at_k;
    j["k"] = report.k;
    j["bits"] = report.bits;
    j["seed"] = report.seed;
    j["ap_denominator"] = report.ap_denominator;
    j["num_queries"] = report.num_queries;
    j["num_database"] = report.num_database;
    j["queries_without_relevant"] = report.queries_without_relevant;
    j["per_query_ap"] = report.per_query_ap;
    nlohmann::ordered_json curve = nlohmann::ordered_json::array();
    for (const auto& p : report.pr_points) {
        curve.push_back({{"recall", p.recall}, {"precision", p.precision}});
    }
    j["pr_curve"] = std::move(curve);
    j["config"] = report.config;
    return j;
}

inline void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorruptFileError("cannot open for writing: " + path.string());
    out << report_to_json(report).dump(2) << "\n";
}

inline void write_pr_csv(const std::filesystem::path& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorruptFileError("cannot open for writing: " + path.string());
    out << "rank,recall,precision\n";
    out << std::setprecision(17);
    for (std::size_t r = 0; r < report.pr_points.size(); ++r) {
        out << (r + 1) << "," << report.pr_points[r].recall << ","
            << report.pr_points[r].precision << "\n";
    }
}

} // namespace iphash
