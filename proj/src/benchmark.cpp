// SPDX-License-Identifier: Apache-2.0
#include "qelab/benchmark.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "qelab/errors.hpp"

namespace qelab {

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + mid));
}

ComponentStats stats_of(std::size_t params, const std::vector<double>& samples) {
  return ComponentStats{params, mean_of(samples), median_of(samples)};
}

std::string fmt(double v, const char* spec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

std::string host_description() {
  utsname u{};
  if (uname(&u) != 0) return "unknown";
  return std::string(u.sysname) + " " + u.release + " " + u.machine;
}

void to_json(nlohmann::json& j, const BenchReport& r) {
  const auto comp = [](const ComponentStats& c) {
    return nlohmann::json{{"params", c.params}, {"latency_ms_mean", c.mean_ms}, {"latency_ms_median", c.median_ms}};
  };
  j = nlohmann::json{{"embedding", comp(r.embedding)},
                     {"encoder_per_layer", comp(r.encoder_layer)},
                     {"head", comp(r.head)},
                     {"total", comp(r.total)},
                     {"n_layers", r.n_layers},
                     {"encoder_mean_ms", r.encoder_mean_ms},
                     {"encoder_share", r.encoder_share},
                     {"environment",
                      {{"precision", r.precision},
                       {"warmup", r.warmup},
                       {"reps", r.reps},
                       {"n_pairs", r.n_pairs},
                       {"batch_size", 1},
                       {"threads", 1},
                       {"host", r.host}}}};
}

template <typename T>
BenchReport profile_latency(const QeModel<T>& model, std::span<const EncodedInput> inputs, std::size_t warmup,
                            std::size_t reps) {
  if (inputs.empty()) throw UsageError("profile_latency: no input pairs");
  if (warmup < 1) throw UsageError("profile_latency: warmup must be >= 1");
  if (reps < 10) throw UsageError("profile_latency: reps must be >= 10");
  using Clock = std::chrono::steady_clock;

  std::vector<double> emb, layer, head, total, encoder;
  ForwardTimings timings;
  ForwardOptions<T> opts;
  opts.timings = &timings;
  for (std::size_t rep = 0; rep < warmup + reps; ++rep) {
    const bool keep = rep >= warmup;
    for (const auto& input : inputs) {
      const auto t0 = Clock::now();
      forward(model, input, opts);
      const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      if (!keep) continue;
      total.push_back(ms);
      emb.push_back(timings.embedding_ms);
      head.push_back(timings.head_ms);
      double enc = 0;
      for (double l : timings.layer_ms) {
        layer.push_back(l);
        enc += l;
      }
      encoder.push_back(enc);
    }
  }

  const auto pc = count_params(model);
  BenchReport r;
  r.embedding = stats_of(pc.embedding, emb);
  r.encoder_layer = stats_of(pc.per_encoder_layer, layer);
  r.head = stats_of(pc.head, head);
  r.total = stats_of(pc.total, total);
  r.n_layers = model.layers.size();
  r.encoder_mean_ms = mean_of(encoder);
  r.encoder_share = r.total.mean_ms > 0 ? std::clamp(r.encoder_mean_ms / r.total.mean_ms, 0.0, 1.0) : 0.0;
  r.precision = to_string(precision_of<T>());
  r.warmup = warmup;
  r.reps = reps;
  r.n_pairs = inputs.size();
  r.host = host_description();
  return r;
}

template <typename T>
BenchReport profile_latency(const QeModel<T>& model, std::span<const SentencePair> pairs, std::size_t warmup,
                            std::size_t reps) {
  std::vector<EncodedInput> inputs;
  inputs.reserve(pairs.size());
  for (const auto& p : pairs) inputs.push_back(model.encode(p));
  return profile_latency(model, std::span<const EncodedInput>(inputs), warmup, reps);
}

BenchTable emit_table(const BenchReport& r) {
  BenchTable t;
  t.rows = {{"Embedding", r.embedding.params, r.embedding.mean_ms, r.embedding.median_ms},
            {"Encoder (per layer)", r.encoder_layer.params, r.encoder_layer.mean_ms, r.encoder_layer.median_ms},
            {"Head", r.head.params, r.head.mean_ms, r.head.median_ms},
            {"Total", r.total.params, r.total.mean_ms, r.total.median_ms}};
  std::ostringstream text, csv;
  text << "module                 params      mean_ms   median_ms\n";
  csv << "module,params,latency_ms_mean,latency_ms_median\n";
  for (const auto& row : t.rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-20s %10zu %12.4f %11.4f\n", row.module.c_str(), row.params,
                  row.latency_ms_mean, row.latency_ms_median);
    text << line;
    csv << row.module << ',' << row.params << ',' << fmt(row.latency_ms_mean, "%.17g") << ','
        << fmt(row.latency_ms_median, "%.17g") << '\n';
  }
  text << "layers " << r.n_layers << ", encoder share " << fmt(r.encoder_share, "%.3f") << ", " << r.precision
       << ", warmup " << r.warmup << ", reps " << r.reps << ", " << r.host << '\n';
  t.text = text.str();
  t.csv = csv.str();
  return t;
}

std::vector<BenchRow> parse_bench_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "module,params,latency_ms_mean,latency_ms_median") {
    throw FormatError("bench csv: unexpected header");
  }
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string module, params, mean, median;
    if (!std::getline(ls, module, ',') || !std::getline(ls, params, ',') || !std::getline(ls, mean, ',') ||
        !std::getline(ls, median)) {
      throw FormatError("bench csv: malformed row '" + line + "'");
    }
    try {
      rows.push_back({module, std::stoull(params), std::stod(mean), std::stod(median)});
    } catch (const std::exception&) {
      throw FormatError("bench csv: malformed row '" + line + "'");
    }
  }
  return rows;
}

#define QELAB_INSTANTIATE(T)                                                                                      \
  template BenchReport profile_latency(const QeModel<T>&, std::span<const EncodedInput>, std::size_t, std::size_t); \
  template BenchReport profile_latency(const QeModel<T>&, std::span<const SentencePair>, std::size_t, std::size_t);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
