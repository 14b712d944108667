// SPDX-License-Identifier: Apache-2.0
//
// Parameter accounting and single-query inference latency measurement.
// Timing runs in 32-bit mode on one thread; absolute milliseconds are
// machine-specific, the speedup ratios are the contract.
#pragma once

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tinykd/checkpoint.hpp"
#include "tinykd/encoder.hpp"
#include "tinykd/qa.hpp"

namespace tinykd {

struct LatencyStats {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    std::vector<double> samples_ms;  // exactly `runs` timed samples
};

// Times `runs` batch-1 forward passes (encoder + span head) at the given
// sequence length after `warmup` untimed passes.
template <class S>
LatencyStats measure_latency_model(const EncoderModelT<S>& model, const SpanHeadT<S>& head, std::size_t seq_len,
                                   std::size_t runs = 10, std::size_t warmup = 3) {
    if (runs < 1) throw std::invalid_argument("measure_latency: runs must be >= 1");
    if (seq_len == 0 || seq_len > model.config.max_positions)
        throw std::invalid_argument("measure_latency: seq_len " + std::to_string(seq_len) +
                                    " outside [1, max_positions " + std::to_string(model.config.max_positions) +
                                    "]");
    IntTensor ids({1, seq_len}, std::vector<std::int32_t>(seq_len));
    for (std::size_t i = 0; i < seq_len; ++i)
        ids.data[i] = static_cast<std::int32_t>(i % model.config.vocab);
    const BoolTensor mask = BoolTensor::full({1, seq_len}, true);

    S sink = S(0);
    auto one_pass = [&] {
        const auto trace = forward(model, ids, mask);
        const auto [start, end] = span_logits(trace.hidden_states.back(), head, mask);
        sink += start.value()[0] + end.value().back();
    };
    for (std::size_t i = 0; i < warmup; ++i) one_pass();

    LatencyStats stats;
    stats.samples_ms.reserve(runs);
    using Clock = std::chrono::steady_clock;
    for (std::size_t i = 0; i < runs; ++i) {
        const auto t0 = Clock::now();
        one_pass();
        const auto t1 = Clock::now();
        stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    volatile S keep = sink;
    (void)keep;

    double sum = 0.0;
    for (double s : stats.samples_ms) sum += s;
    stats.mean_ms = sum / static_cast<double>(runs);
    double var = 0.0;
    for (double s : stats.samples_ms) var += (s - stats.mean_ms) * (s - stats.mean_ms);
    stats.std_ms = std::sqrt(var / static_cast<double>(runs));
    return stats;
}

inline LatencyStats measure_latency(const std::string& checkpoint_path, std::size_t seq_len, std::size_t runs = 10,
                                    std::size_t warmup = 3) {
    const auto ckpt = load_checkpoint<float>(checkpoint_path);
    return measure_latency_model(ckpt.model, ckpt.head, seq_len, runs, warmup);
}

struct BenchModelStats {
    std::string name;
    std::size_t layers = 0;
    std::size_t hidden = 0;
    std::size_t ff = 0;
    std::size_t params = 0;  // encoder + head + projection scalars
    double latency_ms_mean = 0.0;
    double latency_ms_std = 0.0;
    double speedup = 0.0;
};

struct BenchReport {
    std::string reference;
    std::size_t seq_len = 0;
    std::size_t runs = 0;
    std::vector<BenchModelStats> models;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& m : models)
            rows.push_back({{"name", m.name},
                            {"layers", m.layers},
                            {"hidden", m.hidden},
                            {"ff", m.ff},
                            {"params", m.params},
                            {"latency_ms_mean", m.latency_ms_mean},
                            {"latency_ms_std", m.latency_ms_std},
                            {"speedup", m.speedup}});
        return {{"reference", reference}, {"seq_len", seq_len}, {"runs", runs}, {"models", rows}};
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::left << std::setw(24) << "model" << std::right << std::setw(8) << "layers" << std::setw(8)
           << "hidden" << std::setw(8) << "ff" << std::setw(12) << "params" << std::setw(14) << "latency(ms)"
           << std::setw(10) << "std" << std::setw(10) << "speedup" << "\n";
        os << std::string(94, '-') << "\n";
        for (const auto& m : models) {
            os << std::left << std::setw(24) << m.name << std::right << std::setw(8) << m.layers << std::setw(8)
               << m.hidden << std::setw(8) << m.ff << std::setw(12) << m.params << std::setw(14) << std::fixed
               << std::setprecision(2) << m.latency_ms_mean << std::setw(10) << m.latency_ms_std << std::setw(10)
               << m.speedup << "\n";
            os.unsetf(std::ios::fixed);
            os << std::setprecision(6);
        }
        return os.str();
    }
};

// One row per model, speedup relative to the named reference (whose speedup
// is exactly 1.0).
inline BenchReport speedup_report(const std::vector<std::pair<std::string, std::string>>& name_and_path,
                                  const std::string& reference, std::size_t seq_len, std::size_t runs = 10,
                                  std::size_t warmup = 3) {
    BenchReport report;
    report.reference = reference;
    report.seq_len = seq_len;
    report.runs = runs;

    std::size_t ref_index = name_and_path.size();
    for (std::size_t i = 0; i < name_and_path.size(); ++i)
        if (name_and_path[i].first == reference) ref_index = i;
    if (ref_index == name_and_path.size())
        throw std::runtime_error("report error: reference model '" + reference + "' not among the benchmarked set");

    for (const auto& [name, path] : name_and_path) {
        const auto ckpt = load_checkpoint<float>(path);
        BenchModelStats row;
        row.name = name;
        row.layers = ckpt.model.config.layers;
        row.hidden = ckpt.model.config.hidden;
        row.ff = ckpt.model.config.ff;
        row.params = count_params(ckpt.model.config) + span_head_param_count(ckpt.model.config.hidden);
        if (ckpt.plan)
            for (const auto& w : ckpt.plan->projections) row.params += w.size();
        const LatencyStats stats = measure_latency_model(ckpt.model, ckpt.head, seq_len, runs, warmup);
        row.latency_ms_mean = stats.mean_ms;
        row.latency_ms_std = stats.std_ms;
        report.models.push_back(row);
    }
    const double ref_mean = report.models[ref_index].latency_ms_mean;
    for (std::size_t i = 0; i < report.models.size(); ++i)
        report.models[i].speedup = (i == ref_index) ? 1.0 : ref_mean / report.models[i].latency_ms_mean;
    return report;
}

} // namespace tinykd
