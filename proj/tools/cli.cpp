// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "qelab/benchmark.hpp"
#include "qelab/compressor.hpp"
#include "qelab/corpus.hpp"
#include "qelab/errors.hpp"
#include "qelab/evaluator.hpp"
#include "qelab/experiment.hpp"
#include "qelab/model.hpp"
#include "qelab/trainer.hpp"

namespace fs = std::filesystem;

namespace qelab {

namespace {

const std::vector<double> kTokenPrunePreset = {0.1, 0.3, 0.5, 0.7};

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string precision;
  std::string mode;
  std::vector<double> thresholds;
  std::string out_dir;
};

struct PlanFlags {
  std::string technique;
  std::vector<std::size_t> drops;
  std::vector<std::size_t> replaces;
  std::vector<double> lambdas;
};

struct Args {
  Common common;
  PlanFlags plans;
  std::string checkpoint;
  std::string test;
  std::string lang;
  std::string columns = "named";
  std::size_t warmup = 10;
  std::size_t reps = 100;
  std::size_t pairs = 50;
  std::size_t languages = 1;
  std::optional<std::size_t> n_train, n_dev, n_test;
  std::vector<std::string> inputs;
};

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) sub->add_option("--config", c.config, "Experiment config (JSON)");
  sub->add_option("--seed,--seeds", c.seeds, "Seed list, comma separated")->delimiter(',');
  sub->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  sub->add_option("--mode", c.mode, "reg or cls")->check(CLI::IsMember({"reg", "cls"}));
  sub->add_option("--threshold,--thresholds", c.thresholds, "Acceptability thresholds")->delimiter(',');
  sub->add_option("--out-dir", c.out_dir, "Output directory");
}

void add_plan_flags(CLI::App* sub, PlanFlags& p) {
  sub->add_option("--technique", p.technique, "layer-prune, token-prune or module-replace")
      ->check(CLI::IsMember({"layer-prune", "token-prune", "module-replace"}));
  sub->add_option("--drops", p.drops, "Layers dropped by layer pruning")->delimiter(',');
  sub->add_option("--replaces", p.replaces, "Layers replaced by module replacement")->delimiter(',');
  sub->add_option("--lambdas", p.lambdas, "Token-pruning regularisation weights")->delimiter(',');
}

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (!c.precision.empty()) cfg.model.precision = parse_precision(c.precision);
  if (!c.mode.empty()) {
    cfg.model.head_mode = parse_head_mode(c.mode);
    cfg.train.objective = objective_for(cfg.model.head_mode);
    cfg.finetune.objective = cfg.train.objective;
  }
  if (!c.thresholds.empty()) cfg.thresholds = c.thresholds;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

std::vector<CompressionPlan> plans_from_flags(const PlanFlags& p, std::size_t n_layers) {
  std::vector<CompressionPlan> plans;
  const bool any = !p.drops.empty() || !p.replaces.empty() || !p.lambdas.empty();
  const auto use = [&](const char* name) { return p.technique.empty() || p.technique == name; };
  if (!p.technique.empty()) {
    if ((p.technique != "layer-prune" && !p.drops.empty()) || (p.technique != "module-replace" && !p.replaces.empty()) ||
        (p.technique != "token-prune" && !p.lambdas.empty())) {
      throw UsageError("plan values do not match --technique " + p.technique);
    }
  }
  auto drops = p.drops;
  auto replaces = p.replaces;
  auto lambdas = p.lambdas;
  if (!p.technique.empty() && !any) {
    if (p.technique == "layer-prune") drops = layer_prune_preset(n_layers);
    if (p.technique == "module-replace") replaces = module_replace_preset(n_layers);
    if (p.technique == "token-prune") lambdas = kTokenPrunePreset;
  }
  if (use("layer-prune"))
    for (auto n : drops) plans.push_back(LayerPrunePlan{n});
  if (use("module-replace"))
    for (auto n : replaces) plans.push_back(ModuleReplacePlan{n});
  if (use("token-prune")) {
    for (double l : lambdas) {
      TokenPrunePlan t;
      t.lambda = l;
      plans.push_back(t);
    }
  }
  return plans;
}

// Runs f.template operator()<T>() with T matching `p`.
template <typename F>
decltype(auto) dispatch(Precision p, F&& f) {
  if (p == Precision::f64) return f.template operator()<double>();
  return f.template operator()<float>();
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void ensure_dir(const fs::path& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

ColumnMap column_map(const std::string& name) {
  if (name == "named") return ColumnMap{};
  if (name == "positional") return ColumnMap::positional();
  throw UsageError("--columns must be 'named' or 'positional'");
}

std::string single_language(const NormStats& stats, const std::string& requested) {
  if (!requested.empty()) return requested;
  if (stats.per_lang.size() == 1) return stats.per_lang.begin()->first;
  throw UsageError("model covers several languages; pass --lang");
}

const Splits& pick_unit(const std::map<std::string, Splits>& units, const std::string& lang) {
  if (!lang.empty()) {
    auto it = units.find(lang);
    if (it == units.end()) throw UsageError("no training unit '" + lang + "' in the corpus");
    return it->second;
  }
  if (units.size() != 1) throw UsageError("corpus has several training units; pass --lang");
  return units.begin()->second;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Args& a, std::ostream& out) {
  auto cfg = resolve_config(a.common);
  SynthSpec spec = cfg.corpus.synth.value_or(SynthSpec::with_languages(a.languages));
  if (a.languages != spec.languages.size() && a.common.config.empty()) {
    spec = SynthSpec::with_languages(a.languages);
  }
  if (!a.common.seeds.empty()) spec.seed = a.common.seeds.front();
  if (a.n_train) spec.n_train = *a.n_train;
  if (a.n_dev) spec.n_dev = *a.n_dev;
  if (a.n_test) spec.n_test = *a.n_test;
  const auto corpus = synthesize_corpus(spec);

  const fs::path dir = cfg.out_dir;
  ensure_dir(dir);
  cfg.corpus = CorpusSource{};
  for (const auto& [lang, splits] : corpus) {
    ensure_dir(dir / lang);
    write_tsv(dir / lang / "train.tsv", splits.train);
    write_tsv(dir / lang / "dev.tsv", splits.dev);
    write_tsv(dir / lang / "test.tsv", splits.test);
    cfg.corpus.tsv.push_back({lang, fs::path(lang) / "train.tsv", fs::path(lang) / "dev.tsv", fs::path(lang) / "test.tsv"});
    out << lang << ": " << splits.train.size() << " train, " << splits.dev.size() << " dev, " << splits.test.size()
        << " test\n";
  }
  cfg.out_dir = "runs";
  write_file_atomic(dir / "config.json", dump(nlohmann::json(cfg)));
  out << "wrote " << (dir / "config.json").string() << '\n';
  return kExitOk;
}

int cmd_train(const Args& a, std::ostream& out) {
  const auto cfg = resolve_config(a.common);
  cfg.validate();
  const auto corpus = load_corpus(cfg.corpus);
  return dispatch(cfg.model.precision, [&]<typename T>() {
    for (auto seed : cfg.seeds) {
      for (const auto& [unit, data] : training_units(corpus, cfg.regime, seed)) {
        TrainHistory history;
        const auto model = train_baseline<T>(cfg, data, seed, &history);
        const auto report = evaluate(model, data.test, cfg.thresholds).report;
        const fs::path dir = cfg.out_dir / unit / ("seed" + std::to_string(seed));
        ensure_dir(dir);
        save_checkpoint(model, dir / "model.ckpt");
        write_file_atomic(dir / "history.json", dump(nlohmann::json(history)));
        write_file_atomic(dir / "eval.json", dump(nlohmann::json(report)));
        out << unit << " seed " << seed << ": best epoch " << history.best_epoch << " of " << history.epochs.size()
            << " -> " << (dir / "model.ckpt").string() << '\n'
            << eval_report_text(report);
      }
    }
    return kExitOk;
  });
}

int cmd_compress(const Args& a, std::ostream& out) {
  if (a.checkpoint.empty()) throw UsageError("compress: --checkpoint is required");
  auto cfg = resolve_config(a.common);
  const auto precision = checkpoint_precision(a.checkpoint);
  return dispatch(precision, [&]<typename T>() {
    const auto model = load_checkpoint<T>(a.checkpoint);
    cfg.model = model.config;
    auto plans = plans_from_flags(a.plans, model.config.n_layers);
    if (plans.empty()) plans = cfg.plans;
    if (plans.empty()) throw UsageError("compress: no plan given (use --technique with --drops/--replaces/--lambdas)");
    cfg.validate();
    const auto corpus = load_corpus(cfg.corpus);
    const auto seed = cfg.seeds.front();
    const auto units = training_units(corpus, cfg.regime, seed);
    const auto& data = pick_unit(units, a.lang);
    for (const auto& plan : plans) {
      validate_plan(plan, model.config.n_layers);
      const auto result = compress(model, plan, data, compress_options(cfg, seed));
      const auto report = evaluate(result.model, data.test, cfg.thresholds, {}, false).report;
      std::ostringstream name;
      name << technique_name(plan) << '-' << plan_param(plan);
      const fs::path dir = cfg.out_dir / name.str();
      ensure_dir(dir);
      save_checkpoint(result.model, dir / "model.ckpt");
      write_file_atomic(dir / "history.json", dump(nlohmann::json(result.history)));
      write_file_atomic(dir / "eval.json", dump(nlohmann::json(report)));
      out << name.str() << ": " << result.model.layers.size() << " layers -> " << (dir / "model.ckpt").string()
          << '\n'
          << eval_report_text(report);
    }
    return kExitOk;
  });
}

template <typename T>
std::vector<SentencePair> test_pairs(const QeModel<T>& model, const Args& a) {
  if (!a.test.empty()) {
    const auto lang = single_language(model.norm_stats, a.lang);
    return load_mlqepe_tsv(a.test, column_map(a.columns), lang);
  }
  if (a.common.config.empty()) throw UsageError("pass --test or --config");
  const auto cfg = resolve_config(a.common);
  const auto corpus = load_corpus(cfg.corpus);
  std::vector<SentencePair> pairs;
  for (const auto& [lang, splits] : corpus) {
    if (!a.lang.empty() && lang != a.lang) continue;
    pairs.insert(pairs.end(), splits.test.begin(), splits.test.end());
  }
  if (pairs.empty()) throw DataError("no test pairs selected");
  return pairs;
}

int cmd_eval(const Args& a, std::ostream& out) {
  if (a.checkpoint.empty()) throw UsageError("eval: --checkpoint is required");
  const auto thresholds = a.common.thresholds.empty() ? std::vector<double>{51.0, 70.0} : a.common.thresholds;
  std::optional<HeadMode> mode;
  if (!a.common.mode.empty()) mode = parse_head_mode(a.common.mode);
  return dispatch(checkpoint_precision(a.checkpoint), [&]<typename T>() {
    const auto model = load_checkpoint<T>(a.checkpoint, mode);
    const auto pairs = test_pairs(model, a);
    const auto result = evaluate(model, pairs, thresholds);
    const auto text = dump(nlohmann::json(result.report));
    if (!a.common.out_dir.empty()) {
      const fs::path dir = a.common.out_dir;
      ensure_dir(dir);
      write_file_atomic(dir / "eval.json", text);
      write_file_atomic(dir / "samples.csv", samples_csv(result.samples));
    }
    out << text;
    return kExitOk;
  });
}

int cmd_bench(const Args& a, std::ostream& out) {
  if (a.checkpoint.empty()) throw UsageError("bench: --checkpoint is required");
  return dispatch(checkpoint_precision(a.checkpoint), [&]<typename T>() {
    const auto model = load_checkpoint<T>(a.checkpoint);
    auto pairs = test_pairs(model, a);
    if (pairs.size() > a.pairs) pairs.resize(a.pairs);
    const auto report = profile_latency(model, std::span<const SentencePair>(pairs), a.warmup, a.reps);
    const auto table = emit_table(report);
    if (!a.common.out_dir.empty()) {
      const fs::path dir = a.common.out_dir;
      ensure_dir(dir);
      write_file_atomic(dir / "bench.json", dump(nlohmann::json(report)));
      write_file_atomic(dir / "bench.csv", table.csv);
    }
    out << table.text;
    return kExitOk;
  });
}

int cmd_sweep(const Args& a, std::ostream& out) {
  auto cfg = resolve_config(a.common);
  auto plans = plans_from_flags(a.plans, cfg.model.n_layers);
  if (!plans.empty()) cfg.plans = plans;
  if (cfg.plans.empty()) throw UsageError("sweep: no plans (use --technique or config 'plans')");
  cfg.validate();
  const auto corpus = load_corpus(cfg.corpus);
  const auto points = dispatch(cfg.model.precision, [&]<typename T>() {
    return run_sweep<T>(cfg, corpus, worker_count_from_env());
  });
  const fs::path dir = cfg.out_dir;
  ensure_dir(dir);
  write_file_atomic(dir / "config.json", dump(nlohmann::json(cfg)));
  write_file_atomic(dir / "sweep.csv", sweep_csv(points));
  const std::string metric = cfg.model.head_mode == HeadMode::regression ? "pearson" : f1_key(cfg.thresholds.front());
  write_file_atomic(dir / ("sweep_" + metric + ".svg"), sweep_svg(points, metric));
  if (cfg.model.head_mode == HeadMode::regression) {
    write_file_atomic(dir / "sweep_f1_51.svg", sweep_svg(points, "f1_51"));
  }
  out << sweep_summary_text(points) << "wrote " << points.size() << " rows to " << (dir / "sweep.csv").string()
      << '\n';
  return kExitOk;
}

int cmd_regimes(const Args& a, std::ostream& out) {
  auto cfg = resolve_config(a.common);
  auto plans = plans_from_flags(a.plans, cfg.model.n_layers);
  if (!plans.empty()) cfg.plans = plans;
  cfg.validate();
  const auto corpus = load_corpus(cfg.corpus);
  const auto rows = dispatch(cfg.model.precision, [&]<typename T>() {
    return compare_regimes<T>(cfg, corpus, worker_count_from_env());
  });
  const fs::path dir = cfg.out_dir;
  ensure_dir(dir);
  const auto csv = regimes_csv(rows);
  write_file_atomic(dir / "regimes.csv", csv);
  out << csv;
  return kExitOk;
}

// Files under `inputs` with the given name, or the inputs themselves.
std::vector<fs::path> collect(const std::vector<std::string>& inputs, const std::string& name) {
  std::vector<fs::path> found;
  for (const auto& in : inputs) {
    const fs::path p = in;
    if (!fs::exists(p)) throw DataError("report: no such path " + in);
    if (fs::is_regular_file(p)) {
      if (p.filename() == name) found.push_back(p);
      continue;
    }
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file() && e.path().filename() == name) found.push_back(e.path());
    }
  }
  std::sort(found.begin(), found.end());
  return found;
}

int cmd_report(const Args& a, std::ostream& out) {
  if (a.inputs.empty()) throw UsageError("report: pass run directories or files");
  const auto evals = collect(a.inputs, "eval.json");
  const auto sweeps = collect(a.inputs, "sweep.csv");
  const auto benches = collect(a.inputs, "bench.csv");
  if (evals.empty() && sweeps.empty() && benches.empty()) {
    throw DataError("report: no eval.json, sweep.csv or bench.csv found");
  }

  // Runs are aggregated per language set so bilingual runs of different
  // directions stay apart.
  std::map<std::string, std::vector<EvalReport>> groups;
  for (const auto& p : evals) {
    EvalReport r;
    try {
      r = nlohmann::json::parse(read_file(p)).get<EvalReport>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("report: " + p.string() + ": " + e.what());
    }
    std::string key;
    for (const auto& [lang, m] : r.per_lang) key += (key.empty() ? "" : "+") + lang;
    groups[key].push_back(std::move(r));
  }
  for (const auto& [key, reports] : groups) {
    out << "== " << key << " (" << reports.size() << " runs)\n" << eval_report_text(aggregate_runs(reports)) << '\n';
  }
  if (!sweeps.empty()) {
    std::vector<SweepPoint> points;
    for (const auto& p : sweeps) {
      auto rows = parse_sweep_csv(read_file(p));
      points.insert(points.end(), rows.begin(), rows.end());
    }
    out << "== sweep (" << points.size() << " rows)\n" << sweep_summary_text(points) << '\n';
  }
  for (const auto& p : benches) {
    out << "== bench " << p.string() << '\n';
    for (const auto& r : parse_bench_csv(read_file(p))) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-20s %10zu %12.4f %11.4f\n", r.module.c_str(), r.params, r.latency_ms_mean,
                    r.latency_ms_median);
      out << line;
    }
    out << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quality-estimation compression lab", "qelab"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  Args a;

  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus as TSV plus a config referencing it");
  add_common(synth, a.common);
  synth->add_option("--languages", a.languages, "Number of synthetic language directions")->check(CLI::PositiveNumber);
  synth->add_option("--n-train", a.n_train, "Training pairs per language");
  synth->add_option("--n-dev", a.n_dev, "Dev pairs per language");
  synth->add_option("--n-test", a.n_test, "Test pairs per language");

  auto* train = app.add_subcommand("train", "Train baseline models, one per seed and training unit");
  add_common(train, a.common);

  auto* comp = app.add_subcommand("compress", "Compress a trained checkpoint and fine-tune it");
  add_common(comp, a.common);
  add_plan_flags(comp, a.plans);
  comp->add_option("--checkpoint", a.checkpoint, "Trained model")->check(CLI::ExistingFile);
  comp->add_option("--lang", a.lang, "Training unit for bilingual corpora");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test set");
  add_common(eval, a.common);
  eval->add_option("--checkpoint", a.checkpoint, "Model to evaluate")->check(CLI::ExistingFile);
  eval->add_option("--test", a.test, "Test TSV")->check(CLI::ExistingFile);
  eval->add_option("--lang", a.lang, "Language tag of the test file");
  eval->add_option("--columns", a.columns, "named or positional");

  auto* bench = app.add_subcommand("bench", "Profile per-component latency at batch size 1");
  add_common(bench, a.common);
  bench->add_option("--checkpoint", a.checkpoint, "Model to profile")->check(CLI::ExistingFile);
  bench->add_option("--test", a.test, "TSV with pairs to profile")->check(CLI::ExistingFile);
  bench->add_option("--lang", a.lang, "Language tag of the test file");
  bench->add_option("--columns", a.columns, "named or positional");
  bench->add_option("--warmup", a.warmup, "Discarded passes");
  bench->add_option("--reps", a.reps, "Timed passes");
  bench->add_option("--pairs", a.pairs, "Pairs per pass");

  auto* sweep = app.add_subcommand("sweep", "Baseline and compressed models for every plan and seed");
  add_common(sweep, a.common);
  add_plan_flags(sweep, a.plans);

  auto* regimes = app.add_subcommand("regimes", "Bilingual against multilingual models");
  add_common(regimes, a.common);
  add_plan_flags(regimes, a.plans);

  auto* report = app.add_subcommand("report", "Aggregate eval.json, sweep.csv and bench.csv files");
  report->add_option("inputs", a.inputs, "Run directories or files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(a, out);
    if (*train) return cmd_train(a, out);
    if (*comp) return cmd_compress(a, out);
    if (*eval) return cmd_eval(a, out);
    if (*bench) return cmd_bench(a, out);
    if (*sweep) return cmd_sweep(a, out);
    if (*regimes) return cmd_regimes(a, out);
    if (*report) return cmd_report(a, out);
  } catch (const UsageError& e) {
    err << "qelab: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "qelab: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "qelab: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    err << "qelab: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "qelab: " << e.what() << '\n';
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cout, std::cerr); }

}  // namespace qelab
