// SPDX-License-Identifier: Apache-2.0
#include "qelab/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "qelab/errors.hpp"

namespace qelab {

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) {
    throw UsageError("pearson: length mismatch " + std::to_string(xs.size()) + " vs " + std::to_string(ys.size()));
  }
  const std::size_t n = xs.size();
  if (n < 2) throw UsageError("pearson: need at least 2 points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw NumericError("pearson: non-finite input");
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0) || !(syy > 0)) {
    throw NumericError("pearson: correlation undefined, " + std::string(!(sxx > 0) ? "predictions" : "gold scores") +
                       " have zero variance");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double ConfusionCounts::precision() const {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double ConfusionCounts::recall() const {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

ConfusionCounts confusion_counts(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> golds) {
  if (preds.size() != golds.size() || preds.empty()) {
    throw UsageError("f1: need equal non-empty label lists, got " + std::to_string(preds.size()) + " and " +
                     std::to_string(golds.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] != 0, g = golds[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

F1Score f1(const ConfusionCounts& counts) {
  F1Score s;
  s.counts = counts;
  const double p = counts.precision();
  const double r = counts.recall();
  if (counts.tp + counts.fp == 0 || counts.tp + counts.fn == 0 || p + r == 0) {
    s.degenerate = true;
    s.value = 0;
    return s;
  }
  s.value = 2 * p * r / (p + r);
  return s;
}

F1Score f1(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> golds) {
  return f1(confusion_counts(preds, golds));
}

bool regression_to_binary(double z_pred, const NormStats& stats, const std::string& lang, QualityThreshold threshold) {
  if (!stats.contains(lang)) throw UsageError("regression_to_binary: unknown language '" + lang + "'");
  return is_acceptable(denormalize(z_pred, stats, lang), threshold);
}

Degradation degradation_and_speedup(MetricAtLatency original, MetricAtLatency compressed) {
  if (!(original.latency_ms > 0) || !(compressed.latency_ms > 0)) {
    throw UsageError("degradation_and_speedup: latencies must be positive");
  }
  if (original.metric == 0) throw UsageError("degradation_and_speedup: original metric is zero");
  Degradation d;
  d.speedup = original.latency_ms / compressed.latency_ms;
  d.degradation_pct = 100.0 * (original.metric - compressed.metric) / original.metric;
  return d;
}

std::string f1_key(double threshold) {
  std::ostringstream os;
  os << "f1_" << threshold;
  return os.str();
}

std::optional<double> EvalReport::metric(const std::string& key) const {
  auto it = metrics.find(key);
  if (it == metrics.end()) return std::nullopt;
  return it->second;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  for (const auto& [k, v] : r.metrics) j[k] = v;
  j["std"] = r.stddev;
  j["per_lang"] = r.per_lang;
  j["per_lang_std"] = r.per_lang_std;
  j["lang_average"] = r.lang_average;
  j["n_runs"] = r.n_runs;
  j["n_examples"] = r.n_examples;
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r = EvalReport{};
  for (const auto& [k, v] : j.items()) {
    if (v.is_number() && k != "n_runs" && k != "n_examples") r.metrics[k] = v.get<double>();
  }
  if (j.contains("std")) r.stddev = j.at("std").get<std::map<std::string, double>>();
  if (j.contains("per_lang")) r.per_lang = j.at("per_lang").get<std::map<std::string, std::map<std::string, double>>>();
  if (j.contains("per_lang_std")) {
    r.per_lang_std = j.at("per_lang_std").get<std::map<std::string, std::map<std::string, double>>>();
  }
  if (j.contains("lang_average")) r.lang_average = j.at("lang_average").get<std::map<std::string, double>>();
  if (j.contains("n_runs")) r.n_runs = j.at("n_runs").get<std::size_t>();
  if (j.contains("n_examples")) r.n_examples = j.at("n_examples").get<std::size_t>();
}

namespace {

std::pair<double, double> mean_and_sample_std(const std::vector<double>& xs) {
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

std::set<std::string> keys_of(const std::map<std::string, double>& m) {
  std::set<std::string> out;
  for (const auto& [k, v] : m) out.insert(k);
  return out;
}

std::map<std::string, double> average_over_langs(const std::map<std::string, std::map<std::string, double>>& per_lang) {
  std::map<std::string, std::vector<double>> acc;
  for (const auto& [lang, metrics] : per_lang) {
    for (const auto& [k, v] : metrics) acc[k].push_back(v);
  }
  std::map<std::string, double> out;
  for (const auto& [k, vs] : acc) out[k] = mean_and_sample_std(vs).first;
  return out;
}

}  // namespace

EvalReport aggregate_runs(std::span<const EvalReport> reports) {
  if (reports.empty()) throw UsageError("aggregate_runs: no reports");
  const auto metric_keys = keys_of(reports.front().metrics);
  std::set<std::string> langs;
  for (const auto& [lang, m] : reports.front().per_lang) langs.insert(lang);
  for (const auto& r : reports) {
    if (keys_of(r.metrics) != metric_keys) throw UsageError("aggregate_runs: reports carry different metric sets");
    std::set<std::string> l;
    for (const auto& [lang, m] : r.per_lang) {
      l.insert(lang);
      if (keys_of(m) != metric_keys) throw UsageError("aggregate_runs: inconsistent metrics for language " + lang);
    }
    if (l != langs) throw UsageError("aggregate_runs: reports cover different language sets");
  }

  EvalReport out;
  out.n_runs = 0;
  out.n_examples = reports.front().n_examples;
  for (const auto& r : reports) out.n_runs += r.n_runs;
  for (const auto& key : metric_keys) {
    std::vector<double> xs;
    for (const auto& r : reports) xs.push_back(r.metrics.at(key));
    auto [m, s] = mean_and_sample_std(xs);
    out.metrics[key] = m;
    out.stddev[key] = s;
    for (const auto& lang : langs) {
      std::vector<double> ls;
      for (const auto& r : reports) ls.push_back(r.per_lang.at(lang).at(key));
      auto [lm, lsd] = mean_and_sample_std(ls);
      out.per_lang[lang][key] = lm;
      out.per_lang_std[lang][key] = lsd;
    }
  }
  out.lang_average = average_over_langs(out.per_lang);
  return out;
}

template <typename T>
std::vector<double> predict(const QeModel<T>& model, std::span<const SentencePair> pairs, std::size_t batch_size,
                            const ForwardOptions<T>& options) {
  std::vector<EncodedInput> encoded;
  encoded.reserve(pairs.size());
  for (const auto& p : pairs) encoded.push_back(model.encode(p));
  std::vector<double> out(pairs.size());
  std::vector<const EncodedInput*> ptrs;
  for (std::size_t start = 0; start < encoded.size(); start += batch_size) {
    const std::size_t end = std::min(encoded.size(), start + batch_size);
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&encoded[i]);
    const auto res = forward_batch(model, make_batch(ptrs), options);
    for (std::size_t i = start; i < end; ++i) out[i] = static_cast<double>(res.output[i - start]);
  }
  return out;
}

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

std::map<std::string, double> metrics_for(std::span<const double> raw_preds,
                                          std::span<const SentencePair> pairs, HeadMode mode,
                                          std::span<const double> thresholds, const std::vector<std::size_t>& subset,
                                          const std::vector<std::vector<std::uint8_t>>& pred_labels, bool strict) {
  std::map<std::string, double> m;
  if (mode == HeadMode::regression) {
    std::vector<double> xs, ys;
    for (auto i : subset) {
      xs.push_back(raw_preds[i]);
      ys.push_back(pairs[i].da_mean);
    }
    try {
      m["pearson"] = pearson(xs, ys);
    } catch (const NumericError&) {
      if (strict) throw;
      m["pearson"] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    std::vector<std::uint8_t> p, g;
    for (auto i : subset) {
      p.push_back(pred_labels[t][i]);
      g.push_back(is_acceptable(pairs[i].da_mean, QualityThreshold{thresholds[t]}));
    }
    m[f1_key(thresholds[t])] = f1(p, g).value;
  }
  return m;
}

}  // namespace

template <typename T>
EvalResult evaluate(const QeModel<T>& model, std::span<const SentencePair> pairs, std::span<const double> thresholds,
                    const ForwardOptions<T>& options, bool strict) {
  if (pairs.size() < 2) throw UsageError("evaluate: need at least 2 pairs");
  const HeadMode mode = model.config.head_mode;
  std::vector<double> used_thresholds;
  if (mode == HeadMode::classification) {
    if (!model.threshold) throw ModeError("evaluate: classification model has no training threshold recorded");
    for (double t : thresholds) {
      if (t == *model.threshold) used_thresholds.push_back(t);
    }
  } else {
    used_thresholds.assign(thresholds.begin(), thresholds.end());
  }

  const auto outputs = predict(model, pairs, 64, options);
  for (double o : outputs) {
    if (!std::isfinite(o)) throw NumericError("evaluate: model produced a non-finite prediction");
  }
  std::vector<double> raw(pairs.size());
  std::vector<std::vector<std::uint8_t>> labels(used_thresholds.size(), std::vector<std::uint8_t>(pairs.size()));
  EvalResult result;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    SampleRecord rec;
    rec.lang = pairs[i].lang_pair;
    rec.gold = pairs[i].da_mean;
    if (mode == HeadMode::regression) {
      raw[i] = denormalize(outputs[i], model.norm_stats, pairs[i].lang_pair);
      rec.predicted = raw[i];
      for (std::size_t t = 0; t < used_thresholds.size(); ++t) {
        labels[t][i] = regression_to_binary(outputs[i], model.norm_stats, pairs[i].lang_pair,
                                            QualityThreshold{used_thresholds[t]});
      }
    } else {
      rec.predicted = sigmoid(outputs[i]);
      for (std::size_t t = 0; t < used_thresholds.size(); ++t) labels[t][i] = outputs[i] >= 0.0;
    }
    const double boundary = used_thresholds.empty() ? 51.0 : used_thresholds.front();
    rec.gold_acceptable = is_acceptable(rec.gold, QualityThreshold{boundary});
    rec.predicted_acceptable = used_thresholds.empty() ? false : labels[0][i] != 0;
    result.samples.push_back(rec);
  }

  std::vector<std::size_t> all(pairs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto& rep = result.report;
  rep.n_examples = pairs.size();
  rep.metrics = metrics_for(raw, pairs, mode, used_thresholds, all, labels, strict);
  for (const auto& [k, v] : rep.metrics) rep.stddev[k] = 0.0;
  for (const auto& lang : languages_of(pairs)) {
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].lang_pair == lang) subset.push_back(i);
    }
    rep.per_lang[lang] = metrics_for(raw, pairs, mode, used_thresholds, subset, labels, strict);
    for (const auto& [k, v] : rep.per_lang[lang]) rep.per_lang_std[lang][k] = 0.0;
  }
  rep.lang_average = average_over_langs(rep.per_lang);
  return result;
}

std::string samples_csv(std::span<const SampleRecord> samples) {
  std::ostringstream os;
  os.precision(10);
  os << "lang,gold,predicted,gold_acceptable,predicted_acceptable,same_side\n";
  for (const auto& s : samples) {
    os << s.lang << ',' << s.gold << ',' << s.predicted << ',' << s.gold_acceptable << ','
       << s.predicted_acceptable << ',' << (s.gold_acceptable == s.predicted_acceptable) << '\n';
  }
  return os.str();
}

#define QELAB_INSTANTIATE(T)                                                                                     \
  template std::vector<double> predict(const QeModel<T>&, std::span<const SentencePair>, std::size_t,            \
                                       const ForwardOptions<T>&);                                                 \
  template EvalResult evaluate(const QeModel<T>&, std::span<const SentencePair>, std::span<const double>,        \
                               const ForwardOptions<T>&, bool);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
