// SPDX-License-Identifier: Apache-2.0
//
// Layer pruning, token pruning and module replacement. Every technique
// returns a new model; the input model is never modified.
#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "qelab/corpus.hpp"
#include "qelab/model.hpp"
#include "qelab/trainer.hpp"

namespace qelab {

struct LayerPrunePlan {
  std::size_t n_drop = 0;
};

struct TokenPrunePlan {
  double lambda = 0;
  std::size_t soft_epochs = 3;
  std::size_t retrain_epochs = 3;
  double mask_lr = 1e-2;
};

struct ModuleReplacePlan {
  std::size_t n_replace = 2;
};

using CompressionPlan = std::variant<LayerPrunePlan, TokenPrunePlan, ModuleReplacePlan>;

// "layer-prune", "token-prune" or "module-replace".
std::string technique_name(const CompressionPlan& plan);
// N for the pruning/replacement plans, lambda for token pruning.
double plan_param(const CompressionPlan& plan);
// Throws ConfigError when the plan is invalid for a stack of n_layers.
void validate_plan(const CompressionPlan& plan, std::size_t n_layers);

void to_json(nlohmann::json& j, const CompressionPlan& plan);
void from_json(const nlohmann::json& j, CompressionPlan& plan);

inline const std::vector<std::size_t> kLayerPrune24Preset = {3, 6, 9, 12, 15, 18, 21, 23};
inline const std::vector<std::size_t> kModuleReplace24Preset = {2, 6, 12, 18, 23, 24};

// Levels for a 24-layer model scaled by n_layers / 24, rounded, clamped to the valid range
// and deduplicated in ascending order.
std::vector<std::size_t> layer_prune_preset(std::size_t n_layers);
std::vector<std::size_t> module_replace_preset(std::size_t n_layers);

// ---------------------------------------------------------------------------
// Layer pruning

// Drops the top n_drop encoder layers. Remaining tensors keep their values.
template <typename T>
QeModel<T> prune_layers(const QeModel<T>& model, std::size_t n_drop);

// ---------------------------------------------------------------------------
// Module replacement

// Student with the teacher's first L - n_replace layers (copied) followed by
// one target layer. The target is seed-initialised unless target_init is
// given. n_replace == 1 is accepted here for constructed identity checks.
template <typename T>
QeModel<T> build_student(const QeModel<T>& teacher, std::size_t n_replace, std::uint64_t seed,
                         const EncoderLayer<T>* target_init = nullptr);

// Names of every student parameter outside the final (target) layer.
template <typename T>
std::set<std::string> non_target_parameter_names(const QeModel<T>& student);

// Mean squared difference between the student's and the teacher's final
// encoder states over non-PAD positions and d_model. Teacher is a constant.
template <typename T>
Tensor<T> hidden_state_mse(const QeModel<T>& teacher, const EncodedBatch& batch, const ForwardResult<T>& student);

struct ReplaceOptions {
  TrainConfig train;
  OptimizerConfig optimizer = OptimizerConfig::synthetic_preset();
  std::uint64_t seed = 1;
};

template <typename T>
struct CompressionResult {
  QeModel<T> model;
  TrainHistory history;
};

// Trains only the target layer on hidden-state MSE plus the task objective.
template <typename T>
CompressionResult<T> replace_modules(const QeModel<T>& teacher, std::size_t n_replace, const Splits& data,
                                     const ReplaceOptions& options);

// ---------------------------------------------------------------------------
// Token pruning

struct SoftExtractionOptions {
  TrainConfig train;
  // Plain gradient step size for the masks.
  double mask_lr = 1e-2;
};

template <typename T>
struct SoftExtractionResult {
  SoftExtractionMask<T> masks;
  TrainHistory history;
};

// Learns per-layer masks over significance-ranked slots with the model
// frozen. Loss is the task objective plus lambda times the mask sum; after
// each step masks are clamped to [0, 1] and the CLS slot is pinned to 1.
template <typename T>
SoftExtractionResult<T> train_soft_extraction(const QeModel<T>& model, double lambda, const Splits& data,
                                              const SoftExtractionOptions& options);

// K_l = max(1, round(sum_l)), then K_l = min(K_l, K_{l-1}), each capped at
// `cap` (typically the longest input the schedule will see).
RetentionSchedule schedule_from_sums(std::span<const double> sums,
                                     std::size_t cap = std::numeric_limits<std::size_t>::max());

// Sums only the first `cap` slots of each mask.
template <typename T>
RetentionSchedule extract_retention_schedule(const SoftExtractionMask<T>& masks,
                                             std::size_t cap = std::numeric_limits<std::size_t>::max());

// Forward with hard top-K retention at every layer.
template <typename T>
T prune_tokens_forward(const QeModel<T>& model, const RetentionSchedule& schedule, const EncodedInput& input);

// ---------------------------------------------------------------------------
// Full pipelines on an already fine-tuned model.

struct CompressOptions {
  // Fine-tuning after layer pruning and hard-retention retraining.
  TrainConfig finetune;
  OptimizerConfig optimizer = OptimizerConfig::synthetic_preset();
  std::uint64_t seed = 1;
};

// Applies the plan, fine-tunes, and appends the plan to the provenance.
template <typename T>
CompressionResult<T> compress(const QeModel<T>& model, const CompressionPlan& plan, const Splits& data,
                              const CompressOptions& options);

}  // namespace qelab
