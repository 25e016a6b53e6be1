// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion on stdout, details on
// the following indented lines. Pass criterion numbers as arguments to run a
// subset. Exit status is nonzero when a gated criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "qelab/benchmark.hpp"
#include "qelab/compressor.hpp"
#include "qelab/errors.hpp"
#include "qelab/evaluator.hpp"
#include "qelab/experiment.hpp"
#include "qelab/trainer.hpp"

using namespace qelab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::vector<std::string> details;

  void note(const std::string& line) { details.push_back(line); }
  // Records a check and returns its value.
  bool check(bool ok, const std::string& what) {
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    return ok;
  }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
bool tensors_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool models_equal(const QeModel<T>& a, const QeModel<T>& b) {
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !tensors_equal(*pa[i].second, *pb[i].second)) return false;
  }
  return true;
}

ModelConfig sized(std::size_t n_layers, std::size_t d, HeadMode mode = HeadMode::regression, std::size_t P = 48) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d;
  c.d_ff = 4 * d;
  c.head_hidden = d;
  c.max_positions = P;
  c.head_mode = mode;
  return c;
}

Splits synth_splits(std::size_t n_train, std::size_t n_dev, std::size_t n_test, double max_corruption = 0.8) {
  auto s = SynthSpec::with_languages(1);
  s.n_train = n_train;
  s.n_dev = n_dev;
  s.n_test = n_test;
  s.max_corruption = max_corruption;
  return synthesize_corpus(s).begin()->second;
}

template <typename T>
QeModel<T> trained(const ModelConfig& mc, const Splits& data, std::size_t epochs, std::uint64_t seed = 1,
                   std::size_t patience = 3) {
  ExperimentConfig cfg;
  cfg.model = mc;
  cfg.train.max_epochs = epochs;
  cfg.train.patience = patience;
  return train_baseline<T>(cfg, data, seed);
}

double test_pearson(const QeModel<float>& m, const Splits& data, const ForwardOptions<float>& opts = {}) {
  const std::vector<double> t{51};
  return *evaluate(m, data.test, t, opts).report.pearson();
}

// ---------------------------------------------------------------------------

double naive_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - mx) * (y[i] - my);
    dx += (x[i] - mx) * (x[i] - mx);
    dy += (y[i] - my) * (y[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

double naive_f1(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& g) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    tp += p[i] && g[i];
    fp += p[i] && !g[i];
    fn += !p[i] && g[i];
  }
  if (tp == 0) return 0;
  const double prec = tp / (tp + fp), rec = tp / (tp + fn);
  return 2 * prec * rec / (prec + rec);
}

Outcome metric_oracles() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(2, 400);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> rate(0.05, 0.95);
  double worst_r = 0, worst_f = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = len(rng);
    std::vector<double> x(n), y(n);
    for (std::size_t k = 0; k < n; ++k) {
      x[k] = nd(rng) * 30 + 50;
      y[k] = 0.4 * x[k] + nd(rng) * 10;
    }
    worst_r = std::max(worst_r, std::abs(pearson(x, y) - naive_pearson(x, y)));
  }
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = len(rng);
    std::bernoulli_distribution pp(rate(rng)), gp(rate(rng));
    std::vector<std::uint8_t> p(n), g(n);
    for (std::size_t k = 0; k < n; ++k) {
      p[k] = pp(rng);
      g[k] = gp(rng);
    }
    worst_f = std::max(worst_f, std::abs(f1(p, g).value - naive_f1(p, g)));
  }
  bool ok = o.check(worst_r <= 1e-10, "pearson vs two-pass oracle, max |diff| " + fmt(worst_r));
  ok &= o.check(worst_f <= 1e-10, "f1 vs confusion-count oracle, max |diff| " + fmt(worst_f));

  const std::vector<double> a{1, 2, 3}, b{1, 2, 4}, neg{-1, -2, -3};
  ok &= o.check(pearson(a, a) == 1.0, "r = 1 for identical sequences");
  ok &= o.check(pearson(a, neg) == -1.0, "r = -1 for negated sequences");
  const double r = pearson(a, b);
  ok &= o.check(std::abs(r - 3.0 / std::sqrt(2.0 * 42.0 / 9.0)) <= 1e-14 && std::floor(r * 1e6) == 981980.0,
                "r([1,2,3],[1,2,4]) = " + fmt(r, 10));
  const std::vector<std::uint8_t> p{1, 1, 1, 0, 0, 0}, g{1, 1, 0, 1, 1, 0};
  const double f = f1(p, g).value;
  ok &= o.check(std::abs(f - 4.0 / 7.0) <= 1e-15, "F1(tp=2, fp=1, fn=2) = " + fmt(f, 10));
  const double secs = seconds_since(t0);
  ok &= o.check(secs < 5, "runtime " + fmt(secs, 3) + " s < 5 s");
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

double fd_loss(const QeModel<double>& m, const EncodedBatch& batch, const std::vector<double>& target) {
  return mse_loss(forward_batch(m, batch).output, std::span<const double>(target)).item();
}

Outcome gradient_check() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = synth_splits(200, 10, 10);
  auto mc = sized(2, 32);
  mc.precision = Precision::f64;
  mc.vocab_size = 200;
  auto m = QeModel<double>::init(mc);
  m.vocab = build_vocab(data.train, mc.vocab_size);
  std::vector<EncodedInput> inputs;
  for (std::size_t i = 0; i < 3; ++i) inputs.push_back(m.encode(data.train[i]));
  std::vector<const EncodedInput*> ptrs;
  for (const auto& e : inputs) ptrs.push_back(&e);
  const auto batch = make_batch(ptrs);
  const std::vector<double> target{0.7, -0.4, 1.2};

  auto params = m.named_parameters();
  for (auto& [n, t] : params) t->clear_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(mse_loss(forward_batch(m, batch).output, std::span<const double>(target)));
  }
  // Per tensor: max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-4).
  const double h = 1e-5;
  double worst = 0;
  std::string worst_name;
  for (auto& [name, t] : params) {
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    double diff = 0, scale = 1e-4;
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double keep = (*t)[i];
      (*t)[i] = keep + h;
      const double up = fd_loss(m, batch, target);
      (*t)[i] = keep - h;
      const double down = fd_loss(m, batch, target);
      (*t)[i] = keep;
      const double numeric = (up - down) / (2 * h);
      diff = std::max(diff, std::abs(analytic[i] - numeric));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    }
    if (diff / scale > worst) {
      worst = diff / scale;
      worst_name = name;
    }
  }
  bool ok = o.check(worst <= 1e-6, std::to_string(params.size()) + " tensors, worst relative error " + fmt(worst) +
                                       " (" + worst_name + ")");
  const double secs = seconds_since(t0);
  ok &= o.check(secs < 120, "runtime " + fmt(secs, 3) + " s < 120 s");
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome parameter_accounting() {
  Outcome o;
  const auto m = QeModel<float>::init(ModelConfig{});
  const auto c = count_params(m);
  bool ok = o.check(c.embedding == 72320, "embedding " + std::to_string(c.embedding));
  ok &= o.check(c.per_encoder_layer == 49984, "per layer " + std::to_string(c.per_encoder_layer));
  ok &= o.check(c.head == 4225, "head " + std::to_string(c.head));
  ok &= o.check(c.total == 276481, "total " + std::to_string(c.total));
  const auto e = expected_param_counts(ModelConfig{});
  ok &= o.check(e.total == c.total && e.embedding == c.embedding, "closed form agrees with the instantiated model");
  for (std::size_t n = 0; n < 4; ++n) {
    const auto p = count_params(prune_layers(m, n));
    ok &= o.check(c.total - p.total == n * 49984, "prune_layers(" + std::to_string(n) + ") total " +
                                                      std::to_string(p.total));
  }
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome learnability() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  auto spec = SynthSpec::with_languages(1);
  spec.n_train = 5000;
  spec.n_dev = 500;
  spec.n_test = 1000;
  spec.noise_sigma = 2;
  const auto data = synthesize_corpus(spec).begin()->second;
  const std::vector<double> thresholds{51};

  ExperimentConfig cfg;
  cfg.train.max_epochs = 20;
  auto reg = train_baseline<float>(cfg, data, 1);
  const double r = *evaluate(reg, data.test, thresholds).report.pearson();
  o.note("regression trained in " + fmt(seconds_since(t0), 3) + " s");
  bool ok = o.check(r >= 0.85, "regression test Pearson " + fmt(r) + " >= 0.85");

  cfg.model.head_mode = HeadMode::classification;
  auto cls = train_baseline<float>(cfg, data, 1);
  const double f = *evaluate(cls, data.test, thresholds).report.f1_at(51);
  ok &= o.check(f >= 0.90, "classification test F1(51) " + fmt(f) + " >= 0.90");
  const double secs = seconds_since(t0);
  ok &= o.check(secs < 900, "runtime " + fmt(secs, 4) + " s < 900 s");
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome identity_limits() {
  Outcome o;
  const auto data = synth_splits(1500, 200, 500);
  const auto base = trained<float>(sized(3, 32), data, 12);

  const auto p0 = prune_layers(base, 0);
  bool ok = o.check(models_equal(base, p0), "LayerPrune(0) tensors bit-identical");
  bool same_pred = true;
  for (const auto& pair : data.test) same_pred &= forward(base, base.encode(pair)) == forward(p0, p0.encode(pair));
  ok &= o.check(same_pred, "LayerPrune(0) predictions bit-identical");

  bool full_same = true;
  for (const auto& pair : data.test) {
    const auto e = base.encode(pair);
    const RetentionSchedule full{std::vector<std::size_t>(base.layers.size(), e.length())};
    full_same &= prune_tokens_forward(base, full, e) == forward(base, e);
  }
  ok &= o.check(full_same, "full-length token schedule predictions bit-identical");

  SoftExtractionOptions opts;
  opts.train.max_epochs = 3;
  opts.train.patience = 3;
  const auto soft = train_soft_extraction(base, 0.0, data, opts);
  ForwardOptions<float> with_masks;
  with_masks.soft = &soft.masks;
  const double r0 = test_pearson(base, data);
  const double r1 = test_pearson(base, data, with_masks);
  ok &= o.check(std::abs(r0 - r1) <= 1e-3, "lambda = 0 soft extraction Pearson " + fmt(r1, 6) + " vs baseline " +
                                               fmt(r0, 6));
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome module_replacement() {
  Outcome o;
  const auto data = synth_splits(800, 100, 200);
  const auto teacher = trained<float>(sized(4, 32), data, 5);
  ReplaceOptions opts;
  opts.train.max_epochs = 3;
  opts.train.patience = 3;
  const auto out = replace_modules(teacher, 2, data, opts);
  bool ok = o.check(out.model.layers.size() == 3, "student layers " + std::to_string(out.model.layers.size()) +
                                                      " = L - N + 1 = 3");

  std::map<std::string, const Tensor<float>*> teacher_params;
  for (const auto& [name, t] : teacher.named_parameters()) teacher_params[name] = t;
  const auto frozen = non_target_parameter_names(out.model);
  std::size_t equal = 0;
  for (const auto& [name, t] : out.model.named_parameters()) {
    if (frozen.count(name) && teacher_params.count(name) && tensors_equal(*t, *teacher_params.at(name))) ++equal;
  }
  ok &= o.check(equal == frozen.size(), std::to_string(equal) + " of " + std::to_string(frozen.size()) +
                                            " frozen tensors byte-equal the teacher");
  ok &= o.check(!tensors_equal(out.model.layers.back().wq, teacher.layers.back().wq), "target layer was trained");

  auto dteacher = qelab::testing::tiny_model<double>(data, 3, HeadMode::regression, 32);
  qelab::testing::scramble(dteacher, 5);
  const auto aligned = build_student(dteacher, 1, 0, &dteacher.layers.back());
  std::vector<EncodedInput> enc;
  for (std::size_t i = 0; i < 16; ++i) enc.push_back(dteacher.encode(data.train[i]));
  std::vector<const EncodedInput*> ptrs;
  for (const auto& e : enc) ptrs.push_back(&e);
  const auto batch = make_batch(ptrs);
  const double mse = hidden_state_mse(dteacher, batch, forward_batch(aligned, batch)).item();
  ok &= o.check(mse == 0.0, "hidden-state MSE " + fmt(mse) + " in the aligned construction");
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome trend_reproduction() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg;
  cfg.model = sized(6, 32);
  auto spec = SynthSpec::with_languages(1);
  spec.n_train = 3000;
  spec.n_dev = 300;
  spec.n_test = 1000;
  spec.max_corruption = 0.6;
  spec.noise_sigma = 2;
  cfg.corpus.synth = spec;
  cfg.train.max_epochs = 20;
  cfg.train.patience = 3;
  cfg.finetune.max_epochs = 1;
  cfg.finetune.patience = 2;
  cfg.seeds = {1, 2, 3, 4, 5};
  cfg.plans = {LayerPrunePlan{2}, LayerPrunePlan{3}, LayerPrunePlan{4}, LayerPrunePlan{5}};
  cfg.bench.pairs = 20;
  const auto corpus = load_corpus(cfg.corpus);

  std::map<std::uint64_t, double> pearson_deg, f1_deg;
  std::map<std::pair<double, std::string>, std::vector<double>> by_level;
  for (const auto mode : {HeadMode::regression, HeadMode::classification}) {
    cfg.model.head_mode = mode;
    for (const auto& p : run_sweep<float>(cfg, corpus, 1)) {
      if (p.technique != "layer-prune") continue;
      const std::string key = mode == HeadMode::regression ? "pearson" : "f1_51";
      by_level[{p.plan_param, key}].push_back(p.degradation_pct.at(key));
      if (p.plan_param == 5) (mode == HeadMode::regression ? pearson_deg : f1_deg)[p.seed] = p.degradation_pct.at(key);
    }
  }
  for (const auto& [k, v] : by_level) {
    double mean = 0;
    for (double x : v) mean += x / static_cast<double>(v.size());
    o.note("drop " + fmt(k.first) + " mean " + k.second + " degradation " + fmt(mean) + " %");
  }
  std::size_t wins = 0;
  for (const auto& [seed, pd] : pearson_deg) {
    const double fd = f1_deg.at(seed);
    wins += pd > fd;
    o.note("seed " + std::to_string(seed) + " at drop 5: Pearson " + fmt(pd) + " % vs F1(51) " + fmt(fd) + " %");
  }
  o.pass = o.check(wins >= 4, "Pearson degradation exceeds F1 degradation in " + std::to_string(wins) + " of 5 seeds");
  o.note("runtime " + fmt(seconds_since(t0), 4) + " s");
  return o;
}

// ---------------------------------------------------------------------------

Outcome regime_diagnostic() {
  Outcome o;
  ExperimentConfig cfg;
  cfg.model = sized(4, 32);
  auto spec = SynthSpec::with_languages(4);
  spec.n_train = 600;
  spec.n_dev = 100;
  spec.n_test = 300;
  cfg.corpus.synth = spec;
  cfg.train.max_epochs = 10;
  cfg.train.patience = 3;
  cfg.finetune.max_epochs = 2;
  cfg.plans = {LayerPrunePlan{3}};
  cfg.bench.pairs = 10;
  const auto corpus = load_corpus(cfg.corpus);
  const auto rows = compare_regimes<float>(cfg, corpus, 1);

  // lang -> plan -> regime -> pearson
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> table;
  for (const auto& r : rows) {
    if (r.metric == "pearson") table[r.lang][r.plan][r.regime] = r.value;
  }
  o.note("lang   plan            BL      ML");
  std::size_t ml_not_better = 0, n = 0;
  for (const auto& [lang, plans] : table) {
    for (const auto& [plan, regimes] : plans) {
      const auto bl = regimes.count("BL") ? fmt(regimes.at("BL")) : std::string("-");
      const auto ml = regimes.count("ML") ? fmt(regimes.at("ML")) : std::string("-");
      char line[128];
      std::snprintf(line, sizeof line, "%-6s %-15s %-7s %s", lang.c_str(), plan.c_str(), bl.c_str(), ml.c_str());
      o.note(line);
      if (plan != "none" && regimes.count("BL") && regimes.count("ML")) {
        ++n;
        ml_not_better += regimes.at("ML") <= regimes.at("BL");
      }
    }
  }
  o.note("diagnostic: ML <= BL at the deepest pruning level in " + std::to_string(ml_not_better) + " of " +
         std::to_string(n) + " languages" + (ml_not_better * 2 > n ? " (expected pattern observed)"
                                                                  : " (expected pattern not observed)"));
  o.pass = o.check(n == 4, "ML-vs-BL table emitted for 4 languages");
  return o;
}

// ---------------------------------------------------------------------------

Outcome benchmark_sanity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = synth_splits(300, 10, 100);
  std::vector<BenchReport> reports;
  for (std::size_t L : {4, 8}) {
    ModelConfig mc;
    mc.n_layers = L;
    auto m = QeModel<float>::init(mc);
    m.vocab = build_vocab(data.train, mc.vocab_size);
    reports.push_back(profile_latency(m, std::span<const SentencePair>(data.test).first(30), 10, 100));
  }
  const double ratio = reports[1].encoder_mean_ms / reports[0].encoder_mean_ms;
  bool ok = o.check(ratio >= 1.7 && ratio <= 2.3, "encoder latency ratio L=8 / L=4 = " + fmt(ratio) + " in [1.7, 2.3]");
  for (const auto& r : reports) {
    const double parts = r.embedding.mean_ms + r.encoder_mean_ms + r.head.mean_ms;
    const double gap = (r.total.mean_ms - parts) / r.total.mean_ms;
    ok &= o.check(gap >= 0 && gap <= 0.05, "L=" + std::to_string(r.n_layers) + " components " + fmt(parts) +
                                               " ms of total " + fmt(r.total.mean_ms) + " ms (gap " +
                                               fmt(100 * gap, 3) + " %)");
  }
  const auto rows = emit_table(reports[0]).rows;
  ok &= o.check(rows.size() == 4 && rows[0].params == 72320 && rows[1].params == 49984 && rows[2].params == 4225 &&
                    rows[3].params == 276481,
                "L=4 table params 72,320 / 49,984 / 4,225 / 276,481");
  const double secs = seconds_since(t0);
  ok &= o.check(secs < 120, "runtime " + fmt(secs, 3) + " s < 120 s");
  o.pass = ok;
  return o;
}

// ---------------------------------------------------------------------------

Outcome persistence() {
  Outcome o;
  const auto dir = fs::temp_directory_path() / "qelab_acceptance";
  fs::create_directories(dir);
  const auto data = synth_splits(300, 30, 30);
  auto m = trained<double>([] {
    auto c = sized(2, 32);
    c.precision = Precision::f64;
    return c;
  }(), data, 1);
  save_checkpoint(m, dir / "m.ckpt");
  const auto back = load_checkpoint<double>(dir / "m.ckpt");
  bool ok = o.check(models_equal(m, back), "all tensors byte-identical after save/load");
  ok &= o.check(checkpoint_bytes(back) == read_file(dir / "m.ckpt"), "re-serialised file is byte-identical");
  ok &= o.check(back.norm_stats.at("syn0").mean == m.norm_stats.at("syn0").mean &&
                    back.norm_stats.at("syn0").std == m.norm_stats.at("syn0").std,
                "normalisation stats identical");

  auto bytes = read_file(dir / "m.ckpt");
  std::size_t rejected = 0;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> pos(20, bytes.size() - 5);
  for (int i = 0; i < 20; ++i) {
    auto bad = bytes;
    bad[pos(rng)] ^= 0x10;
    try {
      checkpoint_from_bytes<double>(bad);
    } catch (const ChecksumError&) {
      ++rejected;
    } catch (const FormatError&) {
      // Corrupted framing fields are reported as format errors.
      ++rejected;
    }
  }
  ok &= o.check(rejected == 20, std::to_string(rejected) + " of 20 corrupted files rejected");
  bool checksum = false;
  auto blob = bytes;
  blob[bytes.size() - 10] ^= 0x01;
  try {
    checkpoint_from_bytes<double>(blob);
  } catch (const ChecksumError&) {
    checksum = true;
  }
  ok &= o.check(checksum, "flipped tensor byte raises ChecksumError");
  fs::remove_all(dir);
  o.pass = ok;
  return o;
}

struct Criterion {
  int id;
  const char* name;
  bool gated;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "metric oracles", true, metric_oracles},
      {2, "gradient correctness", true, gradient_check},
      {3, "parameter accounting", true, parameter_accounting},
      {4, "learnability", true, learnability},
      {5, "compression identity limits", true, identity_limits},
      {6, "module-replacement contracts", true, module_replacement},
      {7, "trend reproduction", true, trend_reproduction},
      {8, "regime trend (diagnostic)", false, regime_diagnostic},
      {9, "benchmark sanity", true, benchmark_sanity},
      {10, "persistence", true, persistence},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.note(std::string("exception: ") + e.what());
    }
    std::cout << (out.pass ? "PASS" : "FAIL") << "  criterion " << c.id << ": " << c.name << " ("
              << fmt(seconds_since(t0), 3) << " s)\n";
    for (const auto& d : out.details) std::cout << "      " << d << '\n';
    std::cout.flush();
    if (!out.pass && c.gated) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
