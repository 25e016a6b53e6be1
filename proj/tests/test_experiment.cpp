// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"

#include "helpers.hpp"
#include "qelab/errors.hpp"
#include "qelab/experiment.hpp"

using namespace qelab;
using qelab::testing::temp_dir;

namespace {

ExperimentConfig small_config(std::size_t n_languages = 1) {
  ExperimentConfig c;
  c.model = qelab::testing::tiny_config<float>(2, 16);
  auto spec = qelab::testing::tiny_spec(80, 3, n_languages);
  spec.n_dev = 20;
  spec.n_test = 30;
  c.corpus.synth = spec;
  c.train.max_epochs = 2;
  c.train.patience = 2;
  c.train.batch_size = 16;
  c.finetune = c.train;
  c.finetune.max_epochs = 1;
  c.bench.pairs = 5;
  return c;
}

bool same_metrics(const SweepPoint& a, const SweepPoint& b) {
  if (a.technique != b.technique || a.plan_param != b.plan_param || a.seed != b.seed || a.lang != b.lang) {
    return false;
  }
  if (a.metrics.size() != b.metrics.size()) return false;
  for (const auto& [k, v] : a.metrics) {
    const double w = b.metrics.at(k);
    if (!(v == w || (std::isnan(v) && std::isnan(w)))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("experiment config parsing") {
  const auto dir = temp_dir("experiment_config");
  const auto cfg = small_config();
  nlohmann::json j = cfg;
  const auto back = j.get<ExperimentConfig>();
  CHECK(back.model.d_model == 16);
  CHECK(back.train.max_epochs == 2);
  CHECK(back.corpus.synth.has_value());
  CHECK(back.thresholds == std::vector<double>{51, 70});

  nlohmann::json missing = j;
  missing.erase("model");
  std::ofstream(dir / "bad.json") << missing.dump();
  try {
    load_experiment_config(dir / "bad.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'model'") != std::string::npos);
  }

  nlohmann::json cls = j;
  cls["mode"] = "classification";
  const auto c2 = cls.get<ExperimentConfig>();
  CHECK(c2.model.head_mode == HeadMode::classification);
  CHECK(c2.train.objective == Objective::bce);

  auto bad = cfg;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.corpus.tsv.push_back({"x", dir / "nope.tsv", dir / "nope.tsv", dir / "nope.tsv"});
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.corpus.synth.reset();
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = cfg;
  bad.plans = {LayerPrunePlan{2}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("load_corpus from TSV files normalises per language") {
  const auto dir = temp_dir("experiment_tsv");
  const auto synth = synthesize_corpus(qelab::testing::tiny_spec(60, 5, 2));
  CorpusSource src;
  for (const auto& [lang, s] : synth) {
    write_tsv(dir / (lang + "_train.tsv"), s.train);
    write_tsv(dir / (lang + "_dev.tsv"), s.dev);
    write_tsv(dir / (lang + "_test.tsv"), s.test);
    src.tsv.push_back({lang, dir / (lang + "_train.tsv"), dir / (lang + "_dev.tsv"), dir / (lang + "_test.tsv")});
  }
  const auto loaded = load_corpus(src);
  REQUIRE(loaded.size() == 2);
  for (const auto& [lang, s] : loaded) {
    double mean = 0;
    for (const auto& p : s.train) mean += p.da_z;
    CHECK(std::abs(mean / static_cast<double>(s.train.size())) < 1e-9);
    CHECK(s.test.size() == synth.at(lang).test.size());
  }
  const auto bl = training_units(loaded, Regime::bilingual, 1);
  CHECK(bl.size() == 2);
  const auto ml = training_units(loaded, Regime::multilingual, 1);
  REQUIRE(ml.size() == 1);
  CHECK(ml.begin()->first == "all");
  CHECK(ml.begin()->second.train.size() == 120);
  CHECK(parse_regime(to_string(Regime::multilingual)) == Regime::multilingual);
}

TEST_CASE("sweep cross product, CSV and reproducibility") {
  auto cfg = small_config();
  cfg.seeds = {1, 2};
  cfg.plans = {LayerPrunePlan{1}, ModuleReplacePlan{2}};
  const auto corpus = load_corpus(cfg.corpus);
  const auto points = run_sweep<float>(cfg, corpus, 1);
  CHECK(points.size() == 2 * (2 + 1));
  std::size_t baselines = 0;
  std::set<std::pair<std::string, std::uint64_t>> cells;
  for (const auto& p : points) {
    if (p.technique == "baseline") {
      ++baselines;
      CHECK(p.speedup == 1.0);
      CHECK(p.degradation_pct.at("pearson") == 0.0);
    } else {
      cells.emplace(p.technique, p.seed);
    }
    CHECK(p.metrics.count("pearson") == 1);
    CHECK(p.metrics.count("f1_51") == 1);
    CHECK(p.metrics.count("f1_70") == 1);
    CHECK(p.latency_ms > 0);
  }
  CHECK(baselines == 2);
  CHECK(cells.size() == 4);

  const auto csv = sweep_csv(points);
  CHECK(csv.rfind("technique,plan_param,seed,speedup,pearson,f1_51,f1_70,degradation_pearson_pct,"
                  "degradation_f1_51_pct,degradation_f1_70_pct,lang",
                  0) == 0);
  const auto parsed = parse_sweep_csv(csv);
  REQUIRE(parsed.size() == points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    CHECK(parsed[i].technique == points[i].technique);
    CHECK(parsed[i].seed == points[i].seed);
    CHECK(parsed[i].speedup == doctest::Approx(points[i].speedup).epsilon(1e-9));
    CHECK(parsed[i].metrics.at("pearson") == doctest::Approx(points[i].metrics.at("pearson")).epsilon(1e-9));
  }

  const auto again = run_sweep<float>(cfg, corpus, 1);
  const auto threaded = run_sweep<float>(cfg, corpus, 2);
  REQUIRE(again.size() == points.size());
  REQUIRE(threaded.size() == points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    CHECK(same_metrics(points[i], again[i]));
    CHECK(same_metrics(points[i], threaded[i]));
  }

  const auto svg = sweep_svg(points, "pearson");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("layer-prune") != std::string::npos);
  CHECK(sweep_summary_text(points).find("module-replace") != std::string::npos);
}

TEST_CASE("regime comparison rows") {
  auto cfg = small_config(2);
  const auto corpus = load_corpus(cfg.corpus);
  const auto rows = compare_regimes<float>(cfg, corpus, 1);
  std::map<std::string, std::size_t> per_metric_bl, per_metric_ml_all;
  for (const auto& r : rows) {
    CHECK(r.plan == "none");
    if (r.regime == "BL") ++per_metric_bl[r.metric];
    if (r.regime == "ML" && r.lang == "all") ++per_metric_ml_all[r.metric];
  }
  for (const std::string m : {"pearson", "f1_51", "f1_70"}) {
    CHECK(per_metric_bl[m] == 2);
    CHECK(per_metric_ml_all[m] == 1);
  }
  CHECK(regimes_csv(rows).rfind("regime,lang,plan,metric,value,seed\n", 0) == 0);

  // ML per-language rows use only that language's test pairs.
  for (const auto& r : rows) {
    if (r.regime != "ML" || r.lang == "all" || r.metric != "pearson") continue;
    CHECK(corpus.count(r.lang) == 1);
  }

  auto single = small_config(1);
  const auto one = load_corpus(single.corpus);
  CHECK_THROWS_AS(compare_regimes<float>(single, one, 1), UsageError);
  CHECK(plan_label(std::nullopt) == "none");
  CHECK(plan_label(CompressionPlan{LayerPrunePlan{2}}) == "layer-prune:2");
}

TEST_CASE("report text") {
  EvalReport r;
  r.metrics["pearson"] = 0.5;
  r.stddev["pearson"] = 0.1;
  r.per_lang["syn0"]["pearson"] = 0.5;
  r.per_lang_std["syn0"]["pearson"] = 0.1;
  const auto text = eval_report_text(r);
  CHECK(text.find("syn0") != std::string::npos);
  CHECK(text.find("0.5") != std::string::npos);
}
