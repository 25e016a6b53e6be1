// SPDX-License-Identifier: Apache-2.0
#include "qelab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "qelab/errors.hpp"

namespace qelab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing required field '") + key + "'");
  return j.at(key);
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

nlohmann::json synth_to_json(const SynthSpec& s) {
  std::size_t band = s.languages.empty() ? 120 : s.languages.front().band_end - s.languages.front().band_begin;
  return {{"n_train", s.n_train},       {"n_dev", s.n_dev},
          {"n_test", s.n_test},         {"n_languages", s.languages.size()},
          {"band_size", band},          {"min_len", s.min_len},
          {"max_len", s.max_len},       {"min_corruption", s.min_corruption},
          {"max_corruption", s.max_corruption}, {"noise_sigma", s.noise_sigma},
          {"substitution_share", s.substitution_share}, {"seed", s.seed}};
}

SynthSpec synth_from_json(const nlohmann::json& j) {
  auto s = SynthSpec::with_languages(j.value("n_languages", std::size_t{1}), j.value("band_size", std::size_t{120}));
  s.n_train = j.value("n_train", s.n_train);
  s.n_dev = j.value("n_dev", s.n_dev);
  s.n_test = j.value("n_test", s.n_test);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.min_corruption = j.value("min_corruption", s.min_corruption);
  s.max_corruption = j.value("max_corruption", s.max_corruption);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.substitution_share = j.value("substitution_share", s.substitution_share);
  s.seed = j.value("seed", s.seed);
  return s;
}

// Runs f(i) for i in [0, n) on up to `workers` threads; rethrows the first error.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double safe_degradation(double orig, double comp) {
  if (!std::isfinite(orig) || !std::isfinite(comp) || orig == 0) return kNaN;
  return degradation_and_speedup({orig, 1.0}, {comp, 1.0}).degradation_pct;
}

const std::vector<std::string> kSweepMetrics = {"pearson", "f1_51", "f1_70"};

std::map<std::string, double> fixed_metrics(const EvalReport& report) {
  std::map<std::string, double> out;
  for (const auto& key : kSweepMetrics) out[key] = report.metric(key).value_or(kNaN);
  return out;
}

template <typename T>
struct Cell {
  std::uint64_t seed = 0;
  std::string unit;
  const Splits* data = nullptr;
  std::optional<QeModel<T>> baseline;
  std::vector<QeModel<T>> compressed;
};

template <typename T>
std::vector<Cell<T>> train_cells(const ExperimentConfig& config, std::size_t workers,
                                 const std::vector<std::map<std::string, Splits>>& units) {
  std::vector<Cell<T>> cells;
  for (std::size_t s = 0; s < config.seeds.size(); ++s) {
    for (const auto& [name, splits] : units[s]) {
      Cell<T> c;
      c.seed = config.seeds[s];
      c.unit = name;
      c.data = &splits;
      cells.push_back(std::move(c));
    }
  }
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    auto& c = cells[i];
    c.baseline = train_baseline<T>(config, *c.data, c.seed);
    const auto opts = compress_options(config, c.seed);
    for (const auto& plan : config.plans) c.compressed.push_back(compress(*c.baseline, plan, *c.data, opts).model);
  });
  return cells;
}

std::vector<SentencePair> bench_pairs(const Splits& data, std::size_t n) {
  std::vector<SentencePair> out(data.test.begin(), data.test.begin() + std::min(n, data.test.size()));
  if (out.empty()) throw DataError("sweep: empty test split");
  return out;
}

}  // namespace

std::string to_string(Regime regime) { return regime == Regime::bilingual ? "bilingual" : "multilingual"; }

Regime parse_regime(const std::string& s) {
  if (s == "bilingual" || s == "BL" || s == "bl") return Regime::bilingual;
  if (s == "multilingual" || s == "ML" || s == "ml") return Regime::multilingual;
  throw ConfigError("unknown regime '" + s + "' (expected bilingual or multilingual)");
}

ExperimentConfig::ExperimentConfig() {
  train.max_epochs = 20;
  finetune.max_epochs = 5;
  finetune.patience = 2;
  corpus.synth = SynthSpec::with_languages(1);
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  finetune.validate();
  optimizer.validate();
  if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
  if (thresholds.empty()) throw ConfigError("config: thresholds must not be empty");
  if (corpus.synth.has_value() == !corpus.tsv.empty()) {
    throw ConfigError("config: corpus needs exactly one of 'synth' or 'tsv'");
  }
  for (const auto& src : corpus.tsv) {
    for (const auto* p : {&src.train, &src.dev, &src.test}) {
      if (!std::filesystem::exists(*p)) throw DataError("config: corpus file not found: " + p->string());
    }
  }
  for (const auto& plan : plans) validate_plan(plan, model.n_layers);
  if (bench.warmup < 1 || bench.reps < 10 || bench.pairs < 1) {
    throw ConfigError("config: bench needs warmup >= 1, reps >= 10, pairs >= 1");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json corpus;
  if (c.corpus.synth) corpus["synth"] = synth_to_json(*c.corpus.synth);
  if (!c.corpus.tsv.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& s : c.corpus.tsv) {
      arr.push_back({{"lang", s.lang}, {"train", s.train.string()}, {"dev", s.dev.string()}, {"test", s.test.string()}});
    }
    corpus["tsv"] = arr;
    corpus["columns"] = {{"src", c.corpus.columns.src},
                         {"mt", c.corpus.columns.mt},
                         {"mean", c.corpus.columns.mean},
                         {"z", c.corpus.columns.z},
                         {"has_header", c.corpus.columns.has_header}};
  }
  j = nlohmann::json{{"model", c.model},
                     {"mode", c.model.head_mode == HeadMode::regression ? "reg" : "cls"},
                     {"train", c.train},
                     {"optimizer", c.optimizer},
                     {"finetune", c.finetune},
                     {"corpus", corpus},
                     {"regime", to_string(c.regime)},
                     {"thresholds", c.thresholds},
                     {"seeds", c.seeds},
                     {"plans", c.plans},
                     {"out_dir", c.out_dir.string()},
                     {"bench", {{"warmup", c.bench.warmup}, {"reps", c.bench.reps}, {"pairs", c.bench.pairs}}}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  c = ExperimentConfig{};
  c.model = require(j, "model").get<ModelConfig>();
  if (j.contains("mode")) c.model.head_mode = parse_head_mode(j.at("mode").get<std::string>());
  if (j.contains("precision")) c.model.precision = parse_precision(j.at("precision").get<std::string>());
  if (j.contains("train")) from_json(j.at("train"), c.train);
  c.train.objective = objective_for(c.model.head_mode);
  if (j.contains("finetune")) from_json(j.at("finetune"), c.finetune);
  c.finetune.objective = objective_for(c.model.head_mode);
  if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer);
  if (j.contains("corpus")) {
    const auto& cj = j.at("corpus");
    c.corpus = CorpusSource{};
    if (cj.contains("synth")) c.corpus.synth = synth_from_json(cj.at("synth"));
    if (cj.contains("tsv")) {
      for (const auto& s : cj.at("tsv")) {
        c.corpus.tsv.push_back({require(s, "lang").get<std::string>(), require(s, "train").get<std::string>(),
                                require(s, "dev").get<std::string>(), require(s, "test").get<std::string>()});
      }
    }
    if (cj.contains("columns")) {
      const auto& col = cj.at("columns");
      if (col.is_string()) {
        const auto name = col.get<std::string>();
        if (name == "positional") {
          c.corpus.columns = ColumnMap::positional();
        } else if (name != "named") {
          throw ConfigError("config: corpus.columns must be 'named', 'positional' or an object");
        }
      } else {
        c.corpus.columns.src = col.value("src", c.corpus.columns.src);
        c.corpus.columns.mt = col.value("mt", c.corpus.columns.mt);
        c.corpus.columns.mean = col.value("mean", c.corpus.columns.mean);
        c.corpus.columns.z = col.value("z", c.corpus.columns.z);
        c.corpus.columns.has_header = col.value("has_header", c.corpus.columns.has_header);
      }
    }
  }
  if (j.contains("regime")) c.regime = parse_regime(j.at("regime").get<std::string>());
  if (j.contains("thresholds")) c.thresholds = j.at("thresholds").get<std::vector<double>>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("plans")) c.plans = j.at("plans").get<std::vector<CompressionPlan>>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    c.bench.warmup = b.value("warmup", c.bench.warmup);
    c.bench.reps = b.value("reps", c.bench.reps);
    c.bench.pairs = b.value("pairs", c.bench.pairs);
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  for (auto& s : c.corpus.tsv) {
    for (auto* p : {&s.train, &s.dev, &s.test}) {
      if (p->is_relative()) *p = base / *p;
    }
  }
  return c;
}

std::map<std::string, Splits> load_corpus(const CorpusSource& source) {
  if (source.synth) return synthesize_corpus(*source.synth);
  std::map<std::string, Splits> out;
  for (const auto& s : source.tsv) {
    Splits sp;
    auto [train, stats] = z_normalize(load_mlqepe_tsv(s.train, source.columns, s.lang));
    sp.train = std::move(train);
    sp.dev = z_normalize(load_mlqepe_tsv(s.dev, source.columns, s.lang), stats).first;
    sp.test = z_normalize(load_mlqepe_tsv(s.test, source.columns, s.lang), stats).first;
    if (!out.emplace(s.lang, std::move(sp)).second) throw ConfigError("config: duplicate corpus language " + s.lang);
  }
  return out;
}

std::map<std::string, Splits> training_units(const std::map<std::string, Splits>& corpus, Regime regime,
                                             std::uint64_t seed) {
  if (regime == Regime::bilingual) return corpus;
  return {{"all", concat_multilingual(corpus, seed)}};
}

template <typename T>
QeModel<T> train_baseline(const ExperimentConfig& config, const Splits& data, std::uint64_t seed,
                          TrainHistory* history) {
  auto mc = config.model;
  mc.seed = seed;
  mc.precision = precision_of<T>();
  auto model = QeModel<T>::init(mc);
  model.vocab = build_vocab(data.train, mc.vocab_size);
  auto tc = config.train;
  tc.seed = seed;
  tc.objective = objective_for(mc.head_mode);
  if (mc.head_mode == HeadMode::classification) tc.threshold = config.thresholds.front();
  auto h = train(model, data, tc, config.optimizer);
  if (history) *history = std::move(h);
  return model;
}

CompressOptions compress_options(const ExperimentConfig& config, std::uint64_t seed) {
  CompressOptions o;
  o.finetune = config.finetune;
  o.optimizer = config.optimizer;
  o.seed = seed;
  return o;
}

// ---------------------------------------------------------------------------

std::string sweep_csv(std::span<const SweepPoint> points) {
  std::ostringstream os;
  os << "technique,plan_param,seed,speedup,pearson,f1_51,f1_70,degradation_pearson_pct,degradation_f1_51_pct,"
        "degradation_f1_70_pct,lang\n";
  const auto get = [](const std::map<std::string, double>& m, const std::string& k) {
    auto it = m.find(k);
    return it == m.end() ? kNaN : it->second;
  };
  for (const auto& p : points) {
    os << p.technique << ',' << fmt_double(p.plan_param) << ',' << p.seed << ',' << fmt_double(p.speedup);
    for (const auto& k : kSweepMetrics) os << ',' << fmt_double(get(p.metrics, k));
    for (const auto& k : kSweepMetrics) os << ',' << fmt_double(get(p.degradation_pct, k));
    os << ',' << p.lang << '\n';
  }
  return os.str();
}

std::vector<SweepPoint> parse_sweep_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line.rfind("technique,plan_param,seed,speedup,", 0) != 0) {
    throw FormatError("sweep csv: unexpected header");
  }
  std::vector<SweepPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 11) throw FormatError("sweep csv: expected 11 fields in '" + line + "'");
    try {
      SweepPoint p;
      p.technique = f[0];
      p.plan_param = std::stod(f[1]);
      p.seed = std::stoull(f[2]);
      p.speedup = std::stod(f[3]);
      for (std::size_t i = 0; i < 3; ++i) {
        p.metrics[kSweepMetrics[i]] = std::stod(f[4 + i]);
        p.degradation_pct[kSweepMetrics[i]] = std::stod(f[7 + i]);
      }
      p.lang = f[10];
      out.push_back(std::move(p));
    } catch (const std::invalid_argument&) {
      throw FormatError("sweep csv: malformed row '" + line + "'");
    }
  }
  return out;
}

std::string sweep_svg(std::span<const SweepPoint> points, const std::string& metric) {
  constexpr double W = 640, H = 420, ml = 70, mr = 150, mt = 30, mb = 55;
  double xmax = 1.0, ymin = 0.0, ymax = 1.0;
  for (const auto& p : points) {
    auto it = p.degradation_pct.find(metric);
    if (it == p.degradation_pct.end() || !std::isfinite(it->second) || !std::isfinite(p.speedup)) continue;
    xmax = std::max(xmax, p.speedup);
    ymin = std::min(ymin, it->second);
    ymax = std::max(ymax, it->second);
  }
  xmax *= 1.1;
  const double pad = 0.1 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  const auto sx = [&](double x) { return ml + x / xmax * (W - ml - mr); };
  const auto sy = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };
  const std::map<std::string, std::string> colours = {{"baseline", "#555555"},
                                                      {"layer-prune", "#1f77b4"},
                                                      {"token-prune", "#2ca02c"},
                                                      {"module-replace", "#d62728"}};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  if (ymin < 0 && ymax > 0) {
    os << "<line x1=\"" << ml << "\" y1=\"" << sy(0) << "\" x2=\"" << W - mr << "\" y2=\"" << sy(0)
       << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double xv = xmax * i / 5.0;
    const double yv = ymin + (ymax - ymin) * i / 5.0;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << H - mb + 16 << "\" text-anchor=\"middle\">" << fmt_fixed(xv, 1)
       << "</text>\n";
    os << "<text x=\"" << ml - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << fmt_fixed(yv, 1)
       << "</text>\n";
  }
  os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">speedup (x)</text>\n";
  os << "<text transform=\"translate(18," << (mt + H - mb) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << "degradation % (" << metric << ")</text>\n";
  std::set<std::string> seen;
  for (const auto& p : points) {
    auto it = p.degradation_pct.find(metric);
    if (it == p.degradation_pct.end() || !std::isfinite(it->second) || !std::isfinite(p.speedup)) continue;
    auto c = colours.find(p.technique);
    const std::string colour = c == colours.end() ? "#9467bd" : c->second;
    seen.insert(p.technique);
    os << "<circle cx=\"" << sx(p.speedup) << "\" cy=\"" << sy(it->second) << "\" r=\"4\" fill=\"" << colour
       << "\" fill-opacity=\"0.75\"><title>" << p.technique << ' ' << p.plan_param << " seed " << p.seed << ' '
       << p.lang << "</title></circle>\n";
  }
  double ly = mt + 10;
  for (const auto& t : seen) {
    auto c = colours.find(t);
    os << "<circle cx=\"" << W - mr + 20 << "\" cy=\"" << ly << "\" r=\"5\" fill=\""
       << (c == colours.end() ? "#9467bd" : c->second) << "\"/>\n";
    os << "<text x=\"" << W - mr + 30 << "\" y=\"" << ly + 4 << "\">" << t << "</text>\n";
    ly += 18;
  }
  os << "</svg>\n";
  return os.str();
}

std::size_t worker_count_from_env() {
  const char* v = std::getenv("QELAB_WORKERS");
  if (!v || !*v) return 1;
  try {
    return std::max<std::size_t>(1, std::stoull(v));
  } catch (const std::exception&) {
    throw ConfigError(std::string("QELAB_WORKERS must be a positive integer, got '") + v + "'");
  }
}

template <typename T>
std::vector<SweepPoint> run_sweep(const ExperimentConfig& config, const std::map<std::string, Splits>& corpus,
                                  std::size_t workers) {
  config.validate();
  std::vector<std::map<std::string, Splits>> units;
  for (auto seed : config.seeds) units.push_back(training_units(corpus, config.regime, seed));
  auto cells = train_cells<T>(config, workers, units);

  std::vector<SweepPoint> out;
  for (auto& c : cells) {
    const auto bench = bench_pairs(*c.data, config.bench.pairs);
    const auto measure = [&](const QeModel<T>& m, SweepPoint& p) {
      p.metrics = fixed_metrics(evaluate(m, c.data->test, config.thresholds, {}, false).report);
      p.latency_ms = profile_latency(m, std::span<const SentencePair>(bench), config.bench.warmup, config.bench.reps)
                         .total.mean_ms;
    };
    SweepPoint base;
    base.technique = "baseline";
    base.seed = c.seed;
    base.lang = c.unit;
    measure(*c.baseline, base);
    for (const auto& k : kSweepMetrics) base.degradation_pct[k] = std::isfinite(base.metrics[k]) ? 0.0 : kNaN;
    out.push_back(base);
    for (std::size_t i = 0; i < config.plans.size(); ++i) {
      SweepPoint p;
      p.technique = technique_name(config.plans[i]);
      p.plan_param = plan_param(config.plans[i]);
      p.seed = c.seed;
      p.lang = c.unit;
      measure(c.compressed[i], p);
      p.speedup = p.latency_ms > 0 ? base.latency_ms / p.latency_ms : kNaN;
      for (const auto& k : kSweepMetrics) p.degradation_pct[k] = safe_degradation(base.metrics[k], p.metrics[k]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string plan_label(const std::optional<CompressionPlan>& plan) {
  if (!plan) return "none";
  std::ostringstream os;
  os << technique_name(*plan) << ':' << plan_param(*plan);
  return os.str();
}

template <typename T>
std::vector<RegimeRow> compare_regimes(const ExperimentConfig& config, const std::map<std::string, Splits>& corpus,
                                       std::size_t workers) {
  if (corpus.size() < 2) throw UsageError("regimes: need a multilingual corpus with at least 2 languages");
  config.validate();
  std::vector<std::map<std::string, Splits>> units;
  for (auto seed : config.seeds) {
    auto u = corpus;
    u.emplace("all", concat_multilingual(corpus, seed));
    units.push_back(std::move(u));
  }
  auto cells = train_cells<T>(config, workers, units);

  std::vector<RegimeRow> rows;
  const auto emit = [&](const std::string& regime, const std::string& lang, const std::string& plan,
                        const EvalReport& report, std::uint64_t seed) {
    for (const auto& [metric, value] : report.metrics) rows.push_back({regime, lang, plan, metric, value, seed});
  };
  for (auto& c : cells) {
    std::vector<std::pair<std::string, const QeModel<T>*>> models{{plan_label(std::nullopt), &*c.baseline}};
    for (std::size_t i = 0; i < config.plans.size(); ++i) models.emplace_back(plan_label(config.plans[i]), &c.compressed[i]);
    for (const auto& [label, m] : models) {
      if (c.unit != "all") {
        emit("BL", c.unit, label, evaluate(*m, c.data->test, config.thresholds, {}, false).report, c.seed);
        continue;
      }
      for (const auto& [lang, splits] : corpus) {
        const auto test = filter_lang(c.data->test, lang);
        emit("ML", lang, label, evaluate(*m, test, config.thresholds, {}, false).report, c.seed);
      }
      emit("ML", "all", label, evaluate(*m, c.data->test, config.thresholds, {}, false).report, c.seed);
    }
  }
  return rows;
}

std::string regimes_csv(std::span<const RegimeRow> rows) {
  std::ostringstream os;
  os << "regime,lang,plan,metric,value,seed\n";
  for (const auto& r : rows) {
    os << r.regime << ',' << r.lang << ',' << r.plan << ',' << r.metric << ',' << fmt_double(r.value) << ',' << r.seed
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

std::string eval_report_text(const EvalReport& report) {
  std::set<std::string> keys;
  for (const auto& [k, v] : report.metrics) keys.insert(k);
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-12s", "lang");
  os << buf;
  for (const auto& k : keys) {
    std::snprintf(buf, sizeof(buf), " %18s", k.c_str());
    os << buf;
  }
  os << '\n';
  const auto row = [&](const std::string& name, const std::map<std::string, double>& mean,
                       const std::map<std::string, double>* stddev) {
    std::snprintf(buf, sizeof(buf), "%-12s", name.c_str());
    os << buf;
    for (const auto& k : keys) {
      auto it = mean.find(k);
      std::string cell = it == mean.end() ? "-" : fmt_fixed(it->second, 4);
      if (stddev && it != mean.end()) {
        auto s = stddev->find(k);
        if (s != stddev->end()) cell += " +- " + fmt_fixed(s->second, 4);
      }
      std::snprintf(buf, sizeof(buf), " %18s", cell.c_str());
      os << buf;
    }
    os << '\n';
  };
  for (const auto& [lang, m] : report.per_lang) {
    auto s = report.per_lang_std.find(lang);
    row(lang, m, s == report.per_lang_std.end() ? nullptr : &s->second);
  }
  if (report.per_lang.size() > 1) row("avg(langs)", report.lang_average, nullptr);
  row("all", report.metrics, &report.stddev);
  os << "runs " << report.n_runs << ", examples " << report.n_examples << '\n';
  return os.str();
}

std::string sweep_summary_text(std::span<const SweepPoint> points) {
  struct Acc {
    std::vector<double> speedup;
    std::map<std::string, std::vector<double>> deg;
  };
  std::map<std::pair<std::string, double>, Acc> groups;
  for (const auto& p : points) {
    auto& a = groups[{p.technique, p.plan_param}];
    if (std::isfinite(p.speedup)) a.speedup.push_back(p.speedup);
    for (const auto& [k, v] : p.degradation_pct) {
      if (std::isfinite(v)) a.deg[k].push_back(v);
    }
  }
  const auto mean = [](const std::vector<double>& v) {
    if (v.empty()) return kNaN;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%-16s %8s %9s %12s %12s %12s\n", "technique", "param", "speedup", "deg_pearson%",
                "deg_f1_51%", "deg_f1_70%");
  os << buf;
  for (const auto& [key, a] : groups) {
    const auto d = [&](const char* k) {
      auto it = a.deg.find(k);
      return fmt_fixed(it == a.deg.end() ? kNaN : mean(it->second), 2);
    };
    std::snprintf(buf, sizeof(buf), "%-16s %8s %9s %12s %12s %12s\n", key.first.c_str(),
                  fmt_fixed(key.second, 3).c_str(), fmt_fixed(mean(a.speedup), 2).c_str(), d("pearson").c_str(),
                  d("f1_51").c_str(), d("f1_70").c_str());
    os << buf;
  }
  return os.str();
}

#define QELAB_INSTANTIATE(T)                                                                                     \
  template QeModel<T> train_baseline(const ExperimentConfig&, const Splits&, std::uint64_t, TrainHistory*);      \
  template std::vector<SweepPoint> run_sweep<T>(const ExperimentConfig&, const std::map<std::string, Splits>&,   \
                                                std::size_t);                                                    \
  template std::vector<RegimeRow> compare_regimes<T>(const ExperimentConfig&,                                    \
                                                     const std::map<std::string, Splits>&, std::size_t);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
