// SPDX-License-Identifier: Apache-2.0
//
// Experiment drivers shared by the command-line tool and the acceptance
// suite: configuration, corpus loading, baseline training, compression
// sweeps, bilingual/multilingual comparison and report rendering.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "qelab/benchmark.hpp"
#include "qelab/compressor.hpp"
#include "qelab/corpus.hpp"
#include "qelab/evaluator.hpp"
#include "qelab/model.hpp"
#include "qelab/trainer.hpp"

namespace qelab {

enum class Regime { bilingual, multilingual };

std::string to_string(Regime regime);
Regime parse_regime(const std::string& s);

struct TsvSource {
  std::string lang;
  std::filesystem::path train;
  std::filesystem::path dev;
  std::filesystem::path test;
};

struct CorpusSource {
  std::optional<SynthSpec> synth;
  std::vector<TsvSource> tsv;
  ColumnMap columns;
};

struct BenchSettings {
  std::size_t warmup = 2;
  std::size_t reps = 10;
  std::size_t pairs = 50;  // test pairs profiled per model
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  OptimizerConfig optimizer = OptimizerConfig::synthetic_preset();
  // Fine-tuning budget after compression.
  TrainConfig finetune;
  CorpusSource corpus;
  Regime regime = Regime::bilingual;
  std::vector<double> thresholds = {51.0, 70.0};
  std::vector<std::uint64_t> seeds = {1};
  std::vector<CompressionPlan> plans;
  std::filesystem::path out_dir = "runs";
  BenchSettings bench;

  ExperimentConfig();
  // Checks internal consistency and that every referenced path exists.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// "model" and its size fields are required; everything else has defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Per-language splits with da_z set from each language's training stats.
std::map<std::string, Splits> load_corpus(const CorpusSource& source);

// Training units of a regime: one per language, or "all" for the
// concatenated multilingual corpus.
std::map<std::string, Splits> training_units(const std::map<std::string, Splits>& corpus, Regime regime,
                                             std::uint64_t seed);

// Fresh model seeded with `seed`, vocabulary from the training split,
// trained with config.train.
template <typename T>
QeModel<T> train_baseline(const ExperimentConfig& config, const Splits& data, std::uint64_t seed,
                          TrainHistory* history = nullptr);

CompressOptions compress_options(const ExperimentConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPoint {
  std::string technique;  // "baseline" for the uncompressed model
  double plan_param = 0;
  std::uint64_t seed = 0;
  std::string lang;
  double latency_ms = 0;
  double speedup = 1;
  // "pearson", "f1_51", ...; NaN when undefined for the model.
  std::map<std::string, double> metrics;
  std::map<std::string, double> degradation_pct;
};

// technique, plan_param, seed, speedup, pearson, f1_51, f1_70,
// degradation_pearson_pct, degradation_f1_51_pct, degradation_f1_70_pct, lang
std::string sweep_csv(std::span<const SweepPoint> points);
std::vector<SweepPoint> parse_sweep_csv(const std::string& csv);

// Degradation % against speedup, one colour per technique.
std::string sweep_svg(std::span<const SweepPoint> points, const std::string& metric);

// Cross product of plans x seeds per training unit, with one baseline row per
// (seed, unit). Training runs on `workers` threads; profiling is sequential.
template <typename T>
std::vector<SweepPoint> run_sweep(const ExperimentConfig& config, const std::map<std::string, Splits>& corpus,
                                  std::size_t workers = 1);

// QELAB_WORKERS, defaulting to 1.
std::size_t worker_count_from_env();

// ---------------------------------------------------------------------------
// Bilingual vs multilingual

struct RegimeRow {
  std::string regime;  // "BL" or "ML"
  std::string lang;    // language tag, or "all" for the ML model on every test pair
  std::string plan;    // "none" or "<technique>:<param>"
  std::string metric;
  double value = 0;
  std::uint64_t seed = 0;
};

std::string plan_label(const std::optional<CompressionPlan>& plan);

// One BL model per language and one ML model on the concatenation, each
// uncompressed and under every configured plan. BL rows evaluate a
// language's model on its own test split; ML rows evaluate the shared model
// on each language's test pairs and on all of them. Throws UsageError for a
// single-language corpus.
template <typename T>
std::vector<RegimeRow> compare_regimes(const ExperimentConfig& config, const std::map<std::string, Splits>& corpus,
                                       std::size_t workers = 1);

// regime, lang, plan, metric, value, seed
std::string regimes_csv(std::span<const RegimeRow> rows);

// ---------------------------------------------------------------------------
// Reports

// Mean +- std per language and metric.
std::string eval_report_text(const EvalReport& report);

// Sweep points averaged over seeds and languages per (technique, param).
std::string sweep_summary_text(std::span<const SweepPoint> points);

}  // namespace qelab
