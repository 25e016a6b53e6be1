// SPDX-License-Identifier: Apache-2.0
//
// Per-component parameter counts and batch-size-1 latency.
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "qelab/corpus.hpp"
#include "qelab/model.hpp"

namespace qelab {

struct ComponentStats {
  std::size_t params = 0;
  double mean_ms = 0;
  double median_ms = 0;
};

struct BenchReport {
  ComponentStats embedding;
  ComponentStats encoder_layer;  // mean over layers
  ComponentStats head;
  ComponentStats total;          // whole forward call
  std::size_t n_layers = 0;
  // Sum over layers of per-pair encoder time.
  double encoder_mean_ms = 0;
  double encoder_share = 0;
  std::string precision;
  std::size_t warmup = 0;
  std::size_t reps = 0;
  std::size_t n_pairs = 0;
  std::string host;
};

void to_json(nlohmann::json& j, const BenchReport& r);

// A repetition is one pass over `inputs`, each forwarded alone. Warmup
// passes are discarded. Requires warmup >= 1 and reps >= 10.
template <typename T>
BenchReport profile_latency(const QeModel<T>& model, std::span<const EncodedInput> inputs, std::size_t warmup = 10,
                            std::size_t reps = 100);

template <typename T>
BenchReport profile_latency(const QeModel<T>& model, std::span<const SentencePair> pairs, std::size_t warmup = 10,
                            std::size_t reps = 100);

struct BenchRow {
  std::string module;
  std::size_t params = 0;
  double latency_ms_mean = 0;
  double latency_ms_median = 0;

  bool operator==(const BenchRow&) const = default;
};

struct BenchTable {
  std::vector<BenchRow> rows;
  std::string text;
  std::string csv;
};

// Rows: Embedding, Encoder (per layer), Head, Total.
BenchTable emit_table(const BenchReport& report);
std::vector<BenchRow> parse_bench_csv(const std::string& csv);

// uname-style host descriptor.
std::string host_description();

}  // namespace qelab
