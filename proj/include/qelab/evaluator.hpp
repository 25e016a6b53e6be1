// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "qelab/corpus.hpp"
#include "qelab/model.hpp"

namespace qelab {

// Pearson correlation, accumulated in double. Throws NumericError when either
// sequence has zero variance and UsageError on length mismatch or n < 2.
double pearson(std::span<const double> xs, std::span<const double> ys);

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t n() const { return tp + fp + fn + tn; }
  double precision() const;  // 0 when nothing was predicted positive
  double recall() const;     // 0 when there are no gold positives
};

// "Acceptable" (1) is the positive class.
ConfusionCounts confusion_counts(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> golds);

struct F1Score {
  double value = 0;
  // Set when precision or recall is undefined, or both are zero; value is 0.
  bool degenerate = false;
  ConfusionCounts counts;
};

F1Score f1(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> golds);
F1Score f1(const ConfusionCounts& counts);

// Maps a z-space prediction to raw DA with the language's training stats
// and applies the same >= boundary as binarize().
bool regression_to_binary(double z_pred, const NormStats& stats, const std::string& lang, QualityThreshold threshold);

struct MetricAtLatency {
  double metric = 0;
  double latency_ms = 0;
};

struct Degradation {
  double speedup = 1;
  double degradation_pct = 0;  // positive means the compressed model is worse
};

Degradation degradation_and_speedup(MetricAtLatency original, MetricAtLatency compressed);

// Metric keys are "pearson" and "f1_<threshold>", e.g. "f1_51".
std::string f1_key(double threshold);

struct EvalReport {
  std::map<std::string, double> metrics;  // mean over runs
  std::map<std::string, double> stddev;   // sample std over runs
  std::map<std::string, std::map<std::string, double>> per_lang;
  std::map<std::string, std::map<std::string, double>> per_lang_std;
  std::map<std::string, double> lang_average;  // unweighted mean over languages
  std::size_t n_runs = 1;
  std::size_t n_examples = 0;

  std::optional<double> metric(const std::string& key) const;
  std::optional<double> pearson() const { return metric("pearson"); }
  std::optional<double> f1_at(double threshold) const { return metric(f1_key(threshold)); }
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// Mean and sample standard deviation of every metric, overall and per
// language, plus the cross-language average. Throws UsageError when the
// reports disagree on metrics or languages.
EvalReport aggregate_runs(std::span<const EvalReport> reports);

struct SampleRecord {
  std::string lang;
  double gold = 0;       // raw DA
  double predicted = 0;  // raw DA (regression) or acceptable probability (classification)
  bool gold_acceptable = false;
  bool predicted_acceptable = false;
};

struct EvalResult {
  EvalReport report;
  std::vector<SampleRecord> samples;
};

// Raw head outputs (z-space score or logit) for every pair, batched.
template <typename T>
std::vector<double> predict(const QeModel<T>& model, std::span<const SentencePair> pairs, std::size_t batch_size = 64,
                            const ForwardOptions<T>& options = {});

// Regression models report Pearson on raw DA plus F1 at every threshold via
// regression_to_binary. Classification models report F1 only at the
// threshold they were trained for, deciding acceptable at logit >= 0.
// Zero-variance Pearson throws NumericError when `strict`, else reads NaN.
template <typename T>
EvalResult evaluate(const QeModel<T>& model, std::span<const SentencePair> pairs, std::span<const double> thresholds,
                    const ForwardOptions<T>& options = {}, bool strict = true);

std::string samples_csv(std::span<const SampleRecord> samples);

}  // namespace qelab
