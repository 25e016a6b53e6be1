// SPDX-License-Identifier: Apache-2.0
#include "qelab/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "qelab/errors.hpp"
#include "qelab/evaluator.hpp"

namespace qelab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

OptimizerConfig OptimizerConfig::synthetic_preset() {
  OptimizerConfig c;
  c.learning_rate = 3e-4;
  return c;
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("optimizer: learning_rate must be > 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("optimizer: betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("optimizer: eps must be > 0");
  if (weight_decay < 0) throw ConfigError("optimizer: weight_decay must be >= 0");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"seed", c.seed},
                     {"objective", c.objective == Objective::mse ? "mse" : "bce"},
                     {"threshold", c.threshold},
                     {"freeze", c.freeze},
                     {"select_best", c.select_best}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  if (j.contains("objective")) {
    const auto o = j.at("objective").get<std::string>();
    if (o != "mse" && o != "bce") throw ConfigError("train: objective must be mse or bce");
    c.objective = o == "mse" ? Objective::mse : Objective::bce;
  }
  c.threshold = j.value("threshold", c.threshold);
  if (j.contains("freeze")) c.freeze = j.at("freeze").get<std::set<std::string>>();
  c.select_best = j.value("select_best", c.select_best);
  c.verbose = j.value("verbose", c.verbose);
}

Objective objective_for(HeadMode mode) { return mode == HeadMode::regression ? Objective::mse : Objective::bce; }

void to_json(nlohmann::json& j, const TrainHistory& h) {
  j = nlohmann::json::object();
  auto epochs = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"loss", e.train_loss},
                      {"dev_metric", std::isfinite(e.dev_metric) ? nlohmann::json(e.dev_metric) : nlohmann::json()},
                      {"seconds", e.seconds}});
  }
  j["epochs"] = std::move(epochs);
  j["best_epoch"] = h.best_epoch;
  j["stopped_early"] = h.stopped_early;
}

template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const OptimizerConfig& cfg,
                std::size_t t) {
  if (params.size() != grads.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
  }
  if (t == 0) throw UsageError("adamw_step: step index is 1-based");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  const T lr = static_cast<T>(cfg.learning_rate);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T decay = static_cast<T>(1.0 - cfg.learning_rate * cfg.weight_decay);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    const T m_hat = state.m[i] / c1;
    const T v_hat = state.v[i] / c2;
    params[i] *= decay;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template <typename T>
double dev_metric(const QeModel<T>& model, std::span<const SentencePair> pairs, double threshold,
                  const ForwardOptions<T>& options) {
  if (pairs.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto out = predict(model, pairs, 64, options);
  for (double o : out) {
    if (!std::isfinite(o)) return std::numeric_limits<double>::quiet_NaN();
  }
  if (model.config.head_mode == HeadMode::regression) {
    std::vector<double> raw(out.size()), gold(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      raw[i] = denormalize(out[i], model.norm_stats, pairs[i].lang_pair);
      gold[i] = pairs[i].da_mean;
    }
    try {
      return pearson(raw, gold);
    } catch (const NumericError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  }
  std::vector<std::uint8_t> p(out.size()), g(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    p[i] = out[i] >= 0.0;
    g[i] = is_acceptable(pairs[i].da_mean, QualityThreshold{threshold});
  }
  return f1(p, g).value;
}

namespace {

struct TrainExample {
  EncodedInput input;
  double target = 0;
};

template <typename T>
std::vector<std::vector<T>> snapshot(const std::vector<std::pair<std::string, Tensor<T>*>>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.emplace_back(t->data().begin(), t->data().end());
  return out;
}

template <typename T>
void restore(const std::vector<std::pair<std::string, Tensor<T>*>>& params, const std::vector<std::vector<T>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(saved[i].begin(), saved[i].end(), params[i].second->data().begin());
}

}  // namespace

template <typename T>
TrainHistory train(QeModel<T>& model, const Splits& splits, const TrainConfig& cfg, const OptimizerConfig& opt_cfg,
                   const TrainHooks<T>& hooks) {
  cfg.validate();
  opt_cfg.validate();
  if (splits.train.empty()) throw DataError("train: empty training split");
  if (cfg.objective != objective_for(model.config.head_mode)) {
    throw ModeError("train: objective " + std::string(cfg.objective == Objective::mse ? "mse" : "bce") +
                    " does not match a " + to_string(model.config.head_mode) + " head");
  }
  if (model.norm_stats.per_lang.empty()) model.norm_stats = z_normalize(splits.train).second;
  if (model.config.head_mode == HeadMode::classification) model.threshold = cfg.threshold;

  std::vector<TrainExample> examples;
  examples.reserve(splits.train.size());
  for (const auto& p : splits.train) {
    TrainExample ex;
    ex.input = model.encode(p);
    ex.target = cfg.objective == Objective::mse
                    ? (p.da_mean - model.norm_stats.at(p.lang_pair).mean) / model.norm_stats.at(p.lang_pair).std
                    : (is_acceptable(p.da_mean, QualityThreshold{cfg.threshold}) ? 1.0 : 0.0);
    examples.push_back(std::move(ex));
  }

  // Trainable set; frozen model tensors stop requiring grad for the duration.
  std::vector<std::pair<std::string, Tensor<T>*>> trainable;
  std::vector<std::pair<Tensor<T>*, bool>> saved_flags;
  for (auto& [name, t] : model.named_parameters()) {
    saved_flags.emplace_back(t, t->requires_grad());
    if (cfg.freeze.count(name)) {
      t->set_requires_grad(false);
      t->clear_grad();
    } else {
      t->set_requires_grad(true);
      trainable.emplace_back(name, t);
    }
  }
  const std::size_t first_extra = trainable.size();
  for (const auto& p : hooks.extra_params) trainable.push_back(p);
  struct FlagRestore {
    std::vector<std::pair<Tensor<T>*, bool>>& flags;
    ~FlagRestore() {
      for (auto& [t, f] : flags) t->set_requires_grad(f);
    }
  } flag_restore{saved_flags};

  std::vector<AdamState<T>> states(trainable.size());
  std::size_t step = 0;
  TrainHistory history;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<T>> best_params;
  std::size_t since_best = 0;

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const EncodedInput*> batch_inputs;
  std::vector<T> targets;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(cfg.seed * 1000003ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch_inputs.clear();
      targets.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch_inputs.push_back(&examples[order[i]].input);
        targets.push_back(static_cast<T>(examples[order[i]].target));
      }
      const auto batch = make_batch(batch_inputs);
      Tape<T> tape;
      Tensor<T> loss;
      {
        TapeScope<T> scope(tape);
        const auto res = forward_batch(model, batch, hooks.forward);
        loss = cfg.objective == Objective::mse ? mse_loss(res.output, std::span<const T>(targets))
                                               : bce_with_logits(res.output, std::span<const T>(targets));
        if (hooks.extra_loss) loss = add(loss, hooks.extra_loss(batch, res));
      }
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += lv;
      ++n_batches;
      if (trainable.empty() || !loss.requires_grad()) continue;
      for (auto& [name, t] : trainable) t->zero_grad();
      tape.backward(loss);
      ++step;
      for (std::size_t i = 0; i < trainable.size(); ++i) {
        Tensor<T>& p = *trainable[i].second;
        if (i >= first_extra && hooks.extra_sgd_lr > 0) {
          const auto g = p.grad();
          const auto lr = static_cast<T>(hooks.extra_sgd_lr);
          for (std::size_t k = 0; k < g.size(); ++k) p[k] -= lr * g[k];
        } else {
          adamw_step<T>(p.data(), std::span<const T>(p.grad()), states[i], opt_cfg, step);
        }
      }
      if (hooks.after_step) hooks.after_step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, n_batches));
    rec.dev_metric = dev_metric(model, splits.dev, cfg.threshold, hooks.forward);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    if (cfg.verbose) {
      std::cerr << "epoch " << epoch << " loss " << rec.train_loss << " dev " << rec.dev_metric << " ("
                << rec.seconds << "s)\n";
    }
    if (std::isfinite(rec.dev_metric) && rec.dev_metric > best) {
      best = rec.dev_metric;
      history.best_epoch = epoch;
      since_best = 0;
      if (cfg.select_best) best_params = snapshot(trainable);
    } else if (++since_best >= cfg.patience) {
      history.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  if (cfg.select_best && !best_params.empty()) restore(trainable, best_params);
  for (auto& [name, t] : trainable) t->clear_grad();
  return history;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'Q', 'E', 'L', 'A', 'B', 'C', 'K', 'P'};

template <typename V>
void put(std::string& out, V value) {
  char buf[sizeof(V)];
  std::memcpy(buf, &value, sizeof(V));
  out.append(buf, sizeof(V));
}

template <typename V>
V get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(V) > bytes.size()) throw FormatError("checkpoint: truncated file");
  V v;
  std::memcpy(&v, bytes.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

std::uint32_t crc(std::string_view bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + pos), chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

struct ParsedCheckpoint {
  nlohmann::json manifest;
  std::string_view blob;
};

ParsedCheckpoint parse_framing(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic, not a qelab checkpoint");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: format version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto manifest_len = get<std::uint64_t>(bytes, pos);
  if (manifest_len > bytes.size() - pos) throw FormatError("checkpoint: truncated manifest");
  const auto manifest_text = bytes.substr(pos, manifest_len);
  pos += manifest_len;
  const auto blob_len = get<std::uint64_t>(bytes, pos);
  if (blob_len > bytes.size() - pos) throw FormatError("checkpoint: truncated tensor data");
  const auto blob = bytes.substr(pos, blob_len);
  pos += blob_len;
  const std::size_t body_end = pos;
  const auto stored = get<std::uint32_t>(bytes, pos);
  if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes after checksum");
  if (crc(bytes.substr(0, body_end)) != stored) throw ChecksumError("checkpoint: checksum mismatch, file is corrupted");
  ParsedCheckpoint out;
  try {
    out.manifest = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  out.blob = blob;
  return out;
}

}  // namespace

template <typename T>
std::string checkpoint_bytes(const QeModel<T>& model) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["dtype"] = to_string(precision_of<T>());
  manifest["config"] = model.config;
  auto stats = nlohmann::json::object();
  for (const auto& [lang, s] : model.norm_stats.per_lang) stats[lang] = {{"mean", s.mean}, {"std", s.std}};
  manifest["norm_stats"] = stats;
  manifest["vocab"] = model.vocab.tokens();
  manifest["threshold"] = model.threshold ? nlohmann::json(*model.threshold) : nlohmann::json();
  manifest["retention"] = model.retention ? nlohmann::json(model.retention->keep) : nlohmann::json();
  manifest["provenance"] = model.provenance;

  std::string blob;
  auto index = nlohmann::json::array();
  for (const auto& [name, t] : model.named_parameters()) {
    const std::size_t nbytes = t->size() * sizeof(T);
    index.push_back({{"name", name},
                     {"shape", t->shape()},
                     {"dtype", to_string(precision_of<T>())},
                     {"offset", blob.size()},
                     {"nbytes", nbytes}});
    blob.append(reinterpret_cast<const char*>(t->ptr()), nbytes);
  }
  manifest["tensors"] = std::move(index);

  const std::string manifest_text = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, manifest_text.size());
  out += manifest_text;
  put<std::uint64_t>(out, blob.size());
  out += blob;
  put<std::uint32_t>(out, crc(out));
  return out;
}

template <typename T>
QeModel<T> checkpoint_from_bytes(std::string_view bytes, std::optional<HeadMode> expected_mode) {
  const auto parsed = parse_framing(bytes);
  const auto& m = parsed.manifest;
  try {
    const auto dtype = m.at("dtype").get<std::string>();
    if (dtype != to_string(precision_of<T>())) {
      throw FormatError("checkpoint: stored precision " + dtype + " does not match requested " +
                        to_string(precision_of<T>()));
    }
    const auto config = m.at("config").get<ModelConfig>();
    if (expected_mode && config.head_mode != *expected_mode) {
      throw ModeError("checkpoint holds a " + to_string(config.head_mode) + " model, but a " +
                      to_string(*expected_mode) + " model is required");
    }
    auto model = QeModel<T>::init(config);
    for (const auto& item : m.at("norm_stats").items()) {
      const nlohmann::json& s = item.value();
      model.norm_stats.per_lang[item.key()] = LangStats{s.at("mean").get<double>(), s.at("std").get<double>()};
    }
    model.vocab = Vocab(m.at("vocab").get<std::vector<std::string>>());
    if (!m.at("threshold").is_null()) model.threshold = m.at("threshold").get<double>();
    if (!m.at("retention").is_null()) model.retention = RetentionSchedule{m.at("retention").get<std::vector<std::size_t>>()};
    model.provenance = m.at("provenance");

    std::map<std::string, const nlohmann::json*> index;
    for (const auto& entry : m.at("tensors")) index[entry.at("name").get<std::string>()] = &entry;
    auto params = model.named_parameters();
    if (index.size() != params.size()) throw FormatError("checkpoint: tensor count does not match the configuration");
    for (auto& [name, t] : params) {
      auto it = index.find(name);
      if (it == index.end()) throw FormatError("checkpoint: missing tensor " + name);
      const nlohmann::json& e = *it->second;
      if (e.at("shape").get<Shape>() != t->shape()) throw FormatError("checkpoint: shape mismatch for " + name);
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != t->size() * sizeof(T) || offset > parsed.blob.size() || nbytes > parsed.blob.size() - offset) {
        throw FormatError("checkpoint: bad byte range for " + name);
      }
      std::memcpy(t->ptr(), parsed.blob.data() + offset, nbytes);
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void save_checkpoint(const QeModel<T>& model, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_bytes(model));
}

template <typename T>
QeModel<T> load_checkpoint(const std::filesystem::path& path, std::optional<HeadMode> expected_mode) {
  return checkpoint_from_bytes<T>(read_file(path), expected_mode);
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_framing(bytes).manifest;
}

Precision checkpoint_precision(const std::filesystem::path& path) {
  return parse_precision(read_checkpoint_manifest(path).at("dtype").get<std::string>());
}

#define QELAB_INSTANTIATE(T)                                                                                      \
  template void adamw_step(std::span<T>, std::span<const T>, AdamState<T>&, const OptimizerConfig&, std::size_t); \
  template double dev_metric(const QeModel<T>&, std::span<const SentencePair>, double, const ForwardOptions<T>&); \
  template TrainHistory train(QeModel<T>&, const Splits&, const TrainConfig&, const OptimizerConfig&,            \
                              const TrainHooks<T>&);                                                              \
  template std::string checkpoint_bytes(const QeModel<T>&);                                                       \
  template QeModel<T> checkpoint_from_bytes(std::string_view, std::optional<HeadMode>);                           \
  template void save_checkpoint(const QeModel<T>&, const std::filesystem::path&);                                 \
  template QeModel<T> load_checkpoint(const std::filesystem::path&, std::optional<HeadMode>);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
