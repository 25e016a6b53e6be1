// SPDX-License-Identifier: Apache-2.0
//
// Sentence-pair quality-estimation model: token + learned position
// embeddings, a stack of post-norm self-attention encoder layers, and an MLP
// head on the final CLS vector that emits either a z-space regression score
// or a single classification logit.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "qelab/corpus.hpp"
#include "qelab/tensor.hpp"

namespace qelab {

enum class HeadMode { regression, classification };
enum class Precision { f32, f64 };

std::string to_string(HeadMode mode);
std::string to_string(Precision precision);
HeadMode parse_head_mode(const std::string& s);
Precision parse_precision(const std::string& s);

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == sizeof(double) ? Precision::f64 : Precision::f32;
}

struct ModelConfig {
  std::size_t vocab_size = 1000;
  std::size_t max_positions = 128;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t n_layers = 4;
  std::size_t head_hidden = 64;
  HeadMode head_mode = HeadMode::regression;
  Precision precision = Precision::f32;
  std::uint64_t seed = 1;

  // Throws ConfigError naming the violated constraint. n_layers == 0 is
  // accepted only when allow_empty_stack is set (parameter accounting tests).
  void validate(bool allow_empty_stack = false) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// [CLS] src [SEP] mt [SEP], optionally padded. Position 0 is always CLS.
struct EncodedInput {
  std::vector<std::int32_t> input_ids;
  std::vector<std::uint8_t> attention_mask;

  std::size_t length() const { return input_ids.size(); }
};

// Truncates to max_positions by removing the whole excess from the longer
// segment (ties trim the translation), then from the other segment if the
// longer one runs out. CLS and both SEPs are kept. Pads to pad_to when larger.
EncodedInput encode_pair(std::span<const std::int32_t> src, std::span<const std::int32_t> mt,
                         const ModelConfig& config, std::size_t pad_to = 0);

struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;     // batch * seq
  std::vector<std::uint8_t> mask;    // batch * seq
};

EncodedBatch make_batch(std::span<const EncodedInput* const> inputs);
EncodedBatch make_batch(const EncodedInput& input);

// Number of tokens each encoder layer passes on. Non-increasing, >= 1.
struct RetentionSchedule {
  std::vector<std::size_t> keep;
};

template <typename T>
struct EncoderLayer {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

  static EncoderLayer init(std::size_t d_model, std::size_t d_ff, std::uint64_t seed);
  EncoderLayer clone() const;
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(const std::string& prefix);
  std::size_t param_count() const;
};

template <typename T>
struct QeModel {
  ModelConfig config;
  Tensor<T> token_embedding;     // [V, d]
  Tensor<T> position_embedding;  // [P, d]
  Tensor<T> embed_ln_gamma, embed_ln_beta;
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> head_w1, head_b1, head_w2, head_b2;  // [d, hh], [hh], [hh, 1], [1]

  NormStats norm_stats;
  Vocab vocab;
  // Acceptability threshold a classification head was trained for.
  std::optional<double> threshold;
  // Hard token retention applied during forward when present.
  std::optional<RetentionSchedule> retention;
  // Compression plans applied to produce this model, oldest first.
  nlohmann::json provenance = nlohmann::json::array();

  static QeModel init(const ModelConfig& config);
  QeModel clone() const;

  // Stable names: "embedding.token", "layers.3.attn.wq", "head.w1", ...
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const;

  EncodedInput encode(const SentencePair& pair, std::size_t pad_to = 0) const;
};

// Per-layer learnable extraction factors over rank-sorted token slots.
template <typename T>
struct SoftExtractionMask {
  std::vector<Tensor<T>> masks;  // one [max_positions] tensor per layer

  static SoftExtractionMask ones(std::size_t n_layers, std::size_t slots);
};

// Wall-clock milliseconds per forward section.
struct ForwardTimings {
  double embedding_ms = 0;
  std::vector<double> layer_ms;
  double head_ms = 0;
};

template <typename T>
struct ForwardOptions {
  // Overrides model.retention when set.
  const RetentionSchedule* schedule = nullptr;
  bool use_model_retention = true;
  const SoftExtractionMask<T>* soft = nullptr;
  ForwardTimings* timings = nullptr;
};

template <typename T>
struct ForwardResult {
  Tensor<T> output;                    // [B] score or logit
  Tensor<T> final_hidden;              // [B, S', d]
  std::vector<std::uint8_t> final_mask;  // B * S'
  std::vector<std::size_t> layer_widths;
};

template <typename T>
ForwardResult<T> forward_batch(const QeModel<T>& model, const EncodedBatch& batch,
                               const ForwardOptions<T>& options = {});

// Single-pair prediction. Throws UsageError when the input exceeds P.
template <typename T>
T forward(const QeModel<T>& model, const EncodedInput& input, const ForwardOptions<T>& options = {});

// Token significance: attention probability received by each key, summed
// over heads and over real query positions. probs is [B, heads, S, S].
template <typename T>
std::vector<T> token_significance(std::span<const T> probs, std::span<const std::uint8_t> mask,
                                  std::size_t batch, std::size_t heads, std::size_t seq);

struct ParamCounts {
  std::size_t embedding = 0;
  std::size_t per_encoder_layer = 0;
  std::size_t n_layers = 0;
  std::size_t head = 0;
  std::size_t total = 0;
};

template <typename T>
ParamCounts count_params(const QeModel<T>& model);

// Closed-form counts for a configuration.
ParamCounts expected_param_counts(const ModelConfig& config);

}  // namespace qelab
