// SPDX-License-Identifier: Apache-2.0
//
// Objectives, AdamW, the minibatch training loop and checkpoint files.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "qelab/corpus.hpp"
#include "qelab/model.hpp"
#include "qelab/tensor.hpp"

namespace qelab {

struct OptimizerConfig {
  double learning_rate = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  // Randomly initialised toy models barely move at 1e-6.
  static OptimizerConfig synthetic_preset();
  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

enum class Objective { mse, bce };

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  std::uint64_t seed = 1;
  Objective objective = Objective::mse;
  // Acceptability threshold for bce labels.
  double threshold = 51.0;
  // Parameter names (see QeModel::named_parameters) that receive no update.
  std::set<std::string> freeze;
  // Restore the parameters of the best dev epoch at the end.
  bool select_best = true;
  bool verbose = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

Objective objective_for(HeadMode mode);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double dev_metric = 0;  // Pearson (regression) or F1 (classification); NaN when undefined
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch produced a finite dev metric
  bool stopped_early = false;
};

void to_json(nlohmann::json& j, const TrainHistory& h);

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
};

// One AdamW update at 1-based step t: decoupled decay param *= (1 - lr*wd),
// then the bias-corrected adaptive step.
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, const OptimizerConfig& cfg,
                std::size_t t);

// Extension points used by the compression techniques.
template <typename T>
struct TrainHooks {
  ForwardOptions<T> forward;
  // Added to the task objective for every batch.
  std::function<Tensor<T>(const EncodedBatch&, const ForwardResult<T>&)> extra_loss;
  // Trainable tensors that do not belong to the model.
  std::vector<std::pair<std::string, Tensor<T>*>> extra_params;
  // When positive, extra_params take plain gradient steps of this size
  // instead of AdamW updates.
  double extra_sgd_lr = 0;
  // Runs after every optimizer step.
  std::function<void()> after_step;
};

// Minibatch training with seeded per-epoch shuffling and dev-based early
// stopping. Regression targets are z-scores under model.norm_stats, which
// are computed from the training split when empty. Mutates `model` in place.
template <typename T>
TrainHistory train(QeModel<T>& model, const Splits& splits, const TrainConfig& train_cfg,
                   const OptimizerConfig& opt_cfg, const TrainHooks<T>& hooks = {});

// Dev-selection metric for the model's head mode.
template <typename T>
double dev_metric(const QeModel<T>& model, std::span<const SentencePair> pairs, double threshold,
                  const ForwardOptions<T>& options = {});

// ---------------------------------------------------------------------------
// Checkpoints: magic, format version, JSON manifest (config, stats, vocab,
// tensor index), raw little-endian tensor bytes, crc32 trailer.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::string checkpoint_bytes(const QeModel<T>& model);

template <typename T>
QeModel<T> checkpoint_from_bytes(std::string_view bytes, std::optional<HeadMode> expected_mode = std::nullopt);

template <typename T>
void save_checkpoint(const QeModel<T>& model, const std::filesystem::path& path);

template <typename T>
QeModel<T> load_checkpoint(const std::filesystem::path& path, std::optional<HeadMode> expected_mode = std::nullopt);

// Manifest of a checkpoint file after validating framing and checksum.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);
Precision checkpoint_precision(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace qelab
