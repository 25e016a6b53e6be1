// SPDX-License-Identifier: Apache-2.0
#include "qelab/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "qelab/errors.hpp"

namespace qelab {

namespace {

constexpr double kLayerNormEps = 1e-5;

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> linear_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return normal_tensor<T>(Shape{fan_in, fan_out}, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), rng);
}

template <typename T>
Tensor<T> filled(std::size_t n, T value) {
  return Tensor<T>(Shape{n}, value, true);
}

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw ConfigError(std::string("missing required field '") + key + "'");
  }
  return j.at(key);
}

}  // namespace

std::string to_string(HeadMode mode) {
  return mode == HeadMode::regression ? "regression" : "classification";
}

std::string to_string(Precision precision) { return precision == Precision::f64 ? "f64" : "f32"; }

HeadMode parse_head_mode(const std::string& s) {
  if (s == "regression" || s == "reg") return HeadMode::regression;
  if (s == "classification" || s == "cls") return HeadMode::classification;
  throw ConfigError("unknown head mode '" + s + "' (expected reg or cls)");
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

void ModelConfig::validate(bool allow_empty_stack) const {
  if (vocab_size < 5) throw ConfigError("model: vocab_size must be >= 5");
  if (max_positions < 3) throw ConfigError("model: max_positions must be >= 3");
  if (d_model < 2) throw ConfigError("model: d_model must be >= 2");
  if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (d_ff == 0 || head_hidden == 0) throw ConfigError("model: d_ff and head_hidden must be positive");
  if (n_layers == 0 && !allow_empty_stack) throw ConfigError("model: n_layers must be >= 1");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},   {"max_positions", c.max_positions},
                     {"d_model", c.d_model},         {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},               {"n_layers", c.n_layers},
                     {"head_hidden", c.head_hidden}, {"head_mode", to_string(c.head_mode)},
                     {"precision", to_string(c.precision)}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = require(j, "vocab_size").get<std::size_t>();
  c.max_positions = require(j, "max_positions").get<std::size_t>();
  c.d_model = require(j, "d_model").get<std::size_t>();
  c.n_heads = require(j, "n_heads").get<std::size_t>();
  c.d_ff = require(j, "d_ff").get<std::size_t>();
  c.n_layers = require(j, "n_layers").get<std::size_t>();
  c.head_hidden = require(j, "head_hidden").get<std::size_t>();
  if (j.contains("head_mode")) c.head_mode = parse_head_mode(j.at("head_mode").get<std::string>());
  if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

EncodedInput encode_pair(std::span<const std::int32_t> src, std::span<const std::int32_t> mt,
                         const ModelConfig& config, std::size_t pad_to) {
  const std::size_t budget = config.max_positions - 3;
  std::size_t ls = src.size();
  std::size_t lm = mt.size();
  if (ls + lm > budget) {
    std::size_t& longer = ls > lm ? ls : lm;
    std::size_t& shorter = ls > lm ? lm : ls;
    const std::size_t excess = ls + lm - budget;
    const std::size_t cut = std::min(excess, longer);
    longer -= cut;
    shorter -= excess - cut;
  }
  EncodedInput out;
  out.input_ids.reserve(std::max(ls + lm + 3, pad_to));
  out.input_ids.push_back(kClsId);
  out.input_ids.insert(out.input_ids.end(), src.begin(), src.begin() + static_cast<std::ptrdiff_t>(ls));
  out.input_ids.push_back(kSepId);
  out.input_ids.insert(out.input_ids.end(), mt.begin(), mt.begin() + static_cast<std::ptrdiff_t>(lm));
  out.input_ids.push_back(kSepId);
  out.attention_mask.assign(out.input_ids.size(), 1);
  const std::size_t target = std::min(pad_to, config.max_positions);
  while (out.input_ids.size() < target) {
    out.input_ids.push_back(kPadId);
    out.attention_mask.push_back(0);
  }
  return out;
}

EncodedBatch make_batch(std::span<const EncodedInput* const> inputs) {
  EncodedBatch b;
  b.batch = inputs.size();
  for (const auto* in : inputs) b.seq = std::max(b.seq, in->length());
  b.ids.assign(b.batch * b.seq, kPadId);
  b.mask.assign(b.batch * b.seq, 0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::copy(inputs[i]->input_ids.begin(), inputs[i]->input_ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
    std::copy(inputs[i]->attention_mask.begin(), inputs[i]->attention_mask.end(),
              b.mask.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
  }
  return b;
}

EncodedBatch make_batch(const EncodedInput& input) {
  const EncodedInput* one[] = {&input};
  return make_batch(std::span<const EncodedInput* const>(one));
}

// ---------------------------------------------------------------------------

template <typename T>
EncoderLayer<T> EncoderLayer<T>::init(std::size_t d, std::size_t d_ff, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EncoderLayer l;
  l.wq = linear_weight<T>(d, d, rng);
  l.bq = filled<T>(d, 0);
  l.wk = linear_weight<T>(d, d, rng);
  l.bk = filled<T>(d, 0);
  l.wv = linear_weight<T>(d, d, rng);
  l.bv = filled<T>(d, 0);
  l.wo = linear_weight<T>(d, d, rng);
  l.bo = filled<T>(d, 0);
  l.ffn_in_w = linear_weight<T>(d, d_ff, rng);
  l.ffn_in_b = filled<T>(d_ff, 0);
  l.ffn_out_w = linear_weight<T>(d_ff, d, rng);
  l.ffn_out_b = filled<T>(d, 0);
  l.ln1_gamma = filled<T>(d, 1);
  l.ln1_beta = filled<T>(d, 0);
  l.ln2_gamma = filled<T>(d, 1);
  l.ln2_beta = filled<T>(d, 0);
  return l;
}

template <typename T>
EncoderLayer<T> EncoderLayer<T>::clone() const {
  EncoderLayer c = *this;
  for (auto& [name, t] : c.named_parameters("")) *t = t->clone();
  return c;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> EncoderLayer<T>::named_parameters(const std::string& p) {
  return {{p + "attn.wq", &wq},          {p + "attn.bq", &bq},          {p + "attn.wk", &wk},
          {p + "attn.bk", &bk},          {p + "attn.wv", &wv},          {p + "attn.bv", &bv},
          {p + "attn.wo", &wo},          {p + "attn.bo", &bo},          {p + "ffn.in_w", &ffn_in_w},
          {p + "ffn.in_b", &ffn_in_b},   {p + "ffn.out_w", &ffn_out_w}, {p + "ffn.out_b", &ffn_out_b},
          {p + "ln1.gamma", &ln1_gamma}, {p + "ln1.beta", &ln1_beta},   {p + "ln2.gamma", &ln2_gamma},
          {p + "ln2.beta", &ln2_beta}};
}

template <typename T>
std::size_t EncoderLayer<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : const_cast<EncoderLayer*>(this)->named_parameters("")) n += t->size();
  return n;
}

template <typename T>
QeModel<T> QeModel<T>::init(const ModelConfig& config) {
  config.validate(true);
  if (config.precision != precision_of<T>()) {
    throw ConfigError("model: precision " + to_string(config.precision) + " does not match the instantiated type");
  }
  std::mt19937_64 rng(config.seed);
  QeModel m;
  m.config = config;
  const std::size_t d = config.d_model;
  m.token_embedding = normal_tensor<T>(Shape{config.vocab_size, d}, 0.02, rng);
  m.position_embedding = normal_tensor<T>(Shape{config.max_positions, d}, 0.02, rng);
  m.embed_ln_gamma = filled<T>(d, 1);
  m.embed_ln_beta = filled<T>(d, 0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    m.layers.push_back(EncoderLayer<T>::init(d, config.d_ff, rng()));
  }
  m.head_w1 = linear_weight<T>(d, config.head_hidden, rng);
  m.head_b1 = filled<T>(config.head_hidden, 0);
  m.head_w2 = linear_weight<T>(config.head_hidden, 1, rng);
  m.head_b2 = filled<T>(1, 0);
  return m;
}

template <typename T>
QeModel<T> QeModel<T>::clone() const {
  QeModel c = *this;
  for (auto& [name, t] : c.named_parameters()) *t = t->clone();
  return c;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> QeModel<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out{{"embedding.token", &token_embedding},
                                                      {"embedding.position", &position_embedding},
                                                      {"embedding.ln.gamma", &embed_ln_gamma},
                                                      {"embedding.ln.beta", &embed_ln_beta}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto named = layers[l].named_parameters("layers." + std::to_string(l) + ".");
    out.insert(out.end(), named.begin(), named.end());
  }
  out.insert(out.end(), {{"head.w1", &head_w1}, {"head.b1", &head_b1}, {"head.w2", &head_w2}, {"head.b2", &head_b2}});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> QeModel<T>::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [name, t] : const_cast<QeModel*>(this)->named_parameters()) out.emplace_back(name, t);
  return out;
}

template <typename T>
EncodedInput QeModel<T>::encode(const SentencePair& pair, std::size_t pad_to) const {
  const auto src = vocab.encode(pair.src);
  const auto mt = vocab.encode(pair.mt);
  return encode_pair(src, mt, config, pad_to);
}

template <typename T>
SoftExtractionMask<T> SoftExtractionMask<T>::ones(std::size_t n_layers, std::size_t slots) {
  SoftExtractionMask m;
  for (std::size_t l = 0; l < n_layers; ++l) m.masks.emplace_back(Shape{slots}, T(1), true);
  return m;
}

// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> token_significance(std::span<const T> probs, std::span<const std::uint8_t> mask, std::size_t batch,
                                  std::size_t heads, std::size_t seq) {
  std::vector<T> sig(batch * seq, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* p = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        if (!mask[b * seq + i]) continue;
        for (std::size_t j = 0; j < seq; ++j) sig[b * seq + j] += p[i * seq + j];
      }
    }
  }
  return sig;
}

namespace {

template <typename T>
Tensor<T> encoder_layer_forward(const EncoderLayer<T>& l, const Tensor<T>& h, std::span<const std::uint8_t> mask,
                                std::size_t n_heads, std::vector<T>* probs) {
  const T eps = static_cast<T>(kLayerNormEps);
  auto q = add_bias(matmul(h, l.wq), l.bq);
  auto k = add_bias(matmul(h, l.wk), l.bk);
  auto v = add_bias(matmul(h, l.wv), l.bv);
  auto ctx = attention(q, k, v, mask, n_heads, probs);
  auto attn_out = add_bias(matmul(ctx, l.wo), l.bo);
  auto h1 = layer_norm(add(h, attn_out), l.ln1_gamma, l.ln1_beta, eps);
  auto inner = gelu(add_bias(matmul(h1, l.ffn_in_w), l.ffn_in_b));
  auto ffn_out = add_bias(matmul(inner, l.ffn_out_w), l.ffn_out_b);
  return layer_norm(add(h1, ffn_out), l.ln2_gamma, l.ln2_beta, eps);
}

// Positions of row b ordered by retention priority: CLS, then real tokens by
// descending significance (ties by position), then padding.
template <typename T>
std::vector<std::int32_t> rank_positions(std::span<const T> sig, std::span<const std::uint8_t> mask, std::size_t b,
                                         std::size_t seq) {
  std::vector<std::int32_t> order(seq);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t x, std::int32_t y) {
    if ((x == 0) != (y == 0)) return x == 0;
    const bool rx = mask[b * seq + x], ry = mask[b * seq + y];
    if (rx != ry) return rx;
    return sig[b * seq + x] > sig[b * seq + y];
  });
  return order;
}

}  // namespace

template <typename T>
ForwardResult<T> forward_batch(const QeModel<T>& model, const EncodedBatch& batch, const ForwardOptions<T>& options) {
  const auto& c = model.config;
  const std::size_t B = batch.batch;
  const std::size_t d = c.d_model;
  if (batch.seq > c.max_positions) {
    throw UsageError("forward: sequence length " + std::to_string(batch.seq) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  }
  if (B == 0 || batch.seq == 0) throw UsageError("forward: empty batch");
  const RetentionSchedule* schedule = options.schedule;
  if (!schedule && options.use_model_retention && model.retention) schedule = &*model.retention;
  if (schedule && schedule->keep.size() != model.layers.size()) {
    throw UsageError("forward: retention schedule has " + std::to_string(schedule->keep.size()) +
                     " entries for " + std::to_string(model.layers.size()) + " layers");
  }
  if (options.soft && options.soft->masks.size() != model.layers.size()) {
    throw UsageError("forward: soft extraction mask count does not match layer count");
  }
  ForwardTimings* timings = options.timings;
  if (timings) timings->layer_ms.assign(model.layers.size(), 0.0);

  auto t0 = Clock::now();
  std::size_t width = batch.seq;
  std::vector<std::int32_t> positions(B * width);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % width);
  auto h = layer_norm(add(embedding(model.token_embedding, batch.ids, Shape{B, width}),
                          embedding(model.position_embedding, positions, Shape{B, width})),
                      model.embed_ln_gamma, model.embed_ln_beta, static_cast<T>(kLayerNormEps));
  if (timings) timings->embedding_ms = elapsed_ms(t0);

  std::vector<std::uint8_t> mask = batch.mask;
  ForwardResult<T> result;
  std::vector<T> probs;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto tl = Clock::now();
    const bool prune = schedule && schedule->keep[l] < width;
    const bool need_sig = prune || options.soft;
    h = encoder_layer_forward(model.layers[l], h, mask, c.n_heads, need_sig ? &probs : nullptr);
    if (need_sig) {
      const auto sig = token_significance<T>(probs, mask, B, c.n_heads, width);
      if (options.soft) {
        std::vector<std::int32_t> slot(B * width, -1);
        for (std::size_t b = 0; b < B; ++b) {
          const auto order = rank_positions<T>(sig, mask, b, width);
          for (std::size_t r = 0; r < width; ++r) {
            if (mask[b * width + order[r]]) slot[b * width + order[r]] = static_cast<std::int32_t>(r);
          }
        }
        h = slot_scale(h, options.soft->masks[l], slot);
      }
      if (prune) {
        const std::size_t keep = std::max<std::size_t>(1, schedule->keep[l]);
        std::vector<std::int32_t> index(B * keep);
        std::vector<std::uint8_t> kept_mask(B * keep);
        for (std::size_t b = 0; b < B; ++b) {
          auto order = rank_positions<T>(sig, mask, b, width);
          order.resize(keep);
          std::sort(order.begin(), order.end());
          for (std::size_t i = 0; i < keep; ++i) {
            index[b * keep + i] = order[i];
            kept_mask[b * keep + i] = mask[b * width + order[i]];
          }
        }
        h = gather_rows(h, index, keep);
        mask = std::move(kept_mask);
        width = keep;
      }
    }
    result.layer_widths.push_back(width);
    if (timings) timings->layer_ms[l] = elapsed_ms(tl);
  }

  auto th = Clock::now();
  const std::vector<std::int32_t> cls_index(B, 0);
  auto cls = reshape(gather_rows(h, cls_index, 1), Shape{B, d});
  auto hidden = tanh(add_bias(matmul(cls, model.head_w1), model.head_b1));
  result.output = reshape(add_bias(matmul(hidden, model.head_w2), model.head_b2), Shape{B});
  if (timings) timings->head_ms = elapsed_ms(th);
  result.final_hidden = h;
  result.final_mask = std::move(mask);
  return result;
}

template <typename T>
T forward(const QeModel<T>& model, const EncodedInput& input, const ForwardOptions<T>& options) {
  if (input.length() > model.config.max_positions) {
    throw UsageError("forward: input of " + std::to_string(input.length()) + " tokens exceeds max_positions " +
                     std::to_string(model.config.max_positions));
  }
  return forward_batch(model, make_batch(input), options).output[0];
}

template <typename T>
ParamCounts count_params(const QeModel<T>& model) {
  ParamCounts pc;
  pc.embedding = model.token_embedding.size() + model.position_embedding.size() + model.embed_ln_gamma.size() +
                 model.embed_ln_beta.size();
  pc.n_layers = model.layers.size();
  std::size_t encoder = 0;
  for (const auto& l : model.layers) encoder += l.param_count();
  pc.per_encoder_layer = model.layers.empty() ? expected_param_counts(model.config).per_encoder_layer
                                              : model.layers.front().param_count();
  pc.head = model.head_w1.size() + model.head_b1.size() + model.head_w2.size() + model.head_b2.size();
  pc.total = pc.embedding + encoder + pc.head;
  return pc;
}

ParamCounts expected_param_counts(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  ParamCounts pc;
  pc.embedding = c.vocab_size * d + c.max_positions * d + 2 * d;
  pc.per_encoder_layer = 4 * (d * d + d) + (d * c.d_ff + c.d_ff) + (c.d_ff * d + d) + 4 * d;
  pc.n_layers = c.n_layers;
  pc.head = d * c.head_hidden + c.head_hidden + c.head_hidden + 1;
  pc.total = pc.embedding + c.n_layers * pc.per_encoder_layer + pc.head;
  return pc;
}

#define QELAB_INSTANTIATE(T)                                                                                 \
  template struct EncoderLayer<T>;                                                                           \
  template struct QeModel<T>;                                                                                \
  template struct SoftExtractionMask<T>;                                                                     \
  template ForwardResult<T> forward_batch(const QeModel<T>&, const EncodedBatch&, const ForwardOptions<T>&); \
  template T forward(const QeModel<T>&, const EncodedInput&, const ForwardOptions<T>&);                      \
  template std::vector<T> token_significance(std::span<const T>, std::span<const std::uint8_t>, std::size_t, \
                                             std::size_t, std::size_t);                                      \
  template ParamCounts count_params(const QeModel<T>&);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
