// SPDX-License-Identifier: Apache-2.0
#include "qelab/compressor.hpp"

#include <algorithm>
#include <cmath>

#include "qelab/errors.hpp"

namespace qelab {

namespace {

template <typename... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <typename... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

std::vector<std::size_t> scale_preset(const std::vector<std::size_t>& levels, std::size_t n_layers, std::size_t lo,
                                      std::size_t hi) {
  std::vector<std::size_t> out;
  if (lo > hi) return out;
  for (std::size_t v : levels) {
    const auto scaled = static_cast<std::size_t>(std::llround(static_cast<double>(v) * n_layers / 24.0));
    out.push_back(std::clamp(scaled, lo, hi));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

std::string technique_name(const CompressionPlan& plan) {
  return std::visit(Overloaded{[](const LayerPrunePlan&) { return std::string("layer-prune"); },
                               [](const TokenPrunePlan&) { return std::string("token-prune"); },
                               [](const ModuleReplacePlan&) { return std::string("module-replace"); }},
                    plan);
}

double plan_param(const CompressionPlan& plan) {
  return std::visit(Overloaded{[](const LayerPrunePlan& p) { return static_cast<double>(p.n_drop); },
                               [](const TokenPrunePlan& p) { return p.lambda; },
                               [](const ModuleReplacePlan& p) { return static_cast<double>(p.n_replace); }},
                    plan);
}

void validate_plan(const CompressionPlan& plan, std::size_t n_layers) {
  std::visit(Overloaded{[&](const LayerPrunePlan& p) {
                          if (p.n_drop >= n_layers) {
                            throw ConfigError("layer-prune: n_drop " + std::to_string(p.n_drop) +
                                              " must be < n_layers " + std::to_string(n_layers));
                          }
                        },
                        [](const TokenPrunePlan& p) {
                          if (!(p.lambda >= 0)) throw ConfigError("token-prune: lambda must be >= 0");
                          if (!(p.mask_lr > 0)) throw ConfigError("token-prune: mask_lr must be > 0");
                        },
                        [&](const ModuleReplacePlan& p) {
                          if (p.n_replace < 2 || p.n_replace > n_layers) {
                            throw ConfigError("module-replace: n_replace " + std::to_string(p.n_replace) +
                                              " must lie in [2, " + std::to_string(n_layers) + "]");
                          }
                        }},
             plan);
}

void to_json(nlohmann::json& j, const CompressionPlan& plan) {
  j = std::visit(Overloaded{[](const LayerPrunePlan& p) {
                              return nlohmann::json{{"technique", "layer-prune"}, {"n_drop", p.n_drop}};
                            },
                            [](const TokenPrunePlan& p) {
                              return nlohmann::json{{"technique", "token-prune"},
                                                    {"lambda", p.lambda},
                                                    {"soft_epochs", p.soft_epochs},
                                                    {"retrain_epochs", p.retrain_epochs},
                                                    {"mask_lr", p.mask_lr}};
                            },
                            [](const ModuleReplacePlan& p) {
                              return nlohmann::json{{"technique", "module-replace"}, {"n_replace", p.n_replace}};
                            }},
                 plan);
}

void from_json(const nlohmann::json& j, CompressionPlan& plan) {
  if (!j.contains("technique")) throw ConfigError("compression plan: missing required field 'technique'");
  const auto technique = j.at("technique").get<std::string>();
  const auto need = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw ConfigError(technique + " plan: missing required field '" + key + "'");
    return j.at(key);
  };
  if (technique == "layer-prune") {
    plan = LayerPrunePlan{need("n_drop").get<std::size_t>()};
  } else if (technique == "module-replace") {
    plan = ModuleReplacePlan{need("n_replace").get<std::size_t>()};
  } else if (technique == "token-prune") {
    TokenPrunePlan p;
    p.lambda = need("lambda").get<double>();
    p.soft_epochs = j.value("soft_epochs", p.soft_epochs);
    p.retrain_epochs = j.value("retrain_epochs", p.retrain_epochs);
    p.mask_lr = j.value("mask_lr", p.mask_lr);
    plan = p;
  } else {
    throw ConfigError("unknown compression technique '" + technique + "'");
  }
}

std::vector<std::size_t> layer_prune_preset(std::size_t n_layers) {
  if (n_layers < 2) return {};
  return scale_preset(kLayerPrune24Preset, n_layers, 1, n_layers - 1);
}

std::vector<std::size_t> module_replace_preset(std::size_t n_layers) {
  return scale_preset(kModuleReplace24Preset, n_layers, 2, n_layers);
}

// ---------------------------------------------------------------------------

template <typename T>
QeModel<T> prune_layers(const QeModel<T>& model, std::size_t n_drop) {
  const std::size_t L = model.layers.size();
  if (n_drop >= L) {
    throw UsageError("prune_layers: cannot drop " + std::to_string(n_drop) + " of " + std::to_string(L) + " layers");
  }
  auto out = model.clone();
  out.layers.resize(L - n_drop);
  out.config.n_layers = L - n_drop;
  if (out.retention) out.retention->keep.resize(L - n_drop);
  return out;
}

template <typename T>
QeModel<T> build_student(const QeModel<T>& teacher, std::size_t n_replace, std::uint64_t seed,
                         const EncoderLayer<T>* target_init) {
  const std::size_t L = teacher.layers.size();
  if (n_replace < 1 || n_replace > L) {
    throw UsageError("build_student: n_replace " + std::to_string(n_replace) + " outside [1, " + std::to_string(L) +
                     "]");
  }
  auto student = teacher.clone();
  student.layers.resize(L - n_replace);
  student.layers.push_back(target_init ? target_init->clone()
                                       : EncoderLayer<T>::init(teacher.config.d_model, teacher.config.d_ff, seed));
  student.config.n_layers = student.layers.size();
  student.retention.reset();
  return student;
}

template <typename T>
std::set<std::string> non_target_parameter_names(const QeModel<T>& student) {
  const std::string target = "layers." + std::to_string(student.layers.size() - 1) + ".";
  std::set<std::string> out;
  for (const auto& [name, t] : student.named_parameters()) {
    if (name.rfind(target, 0) != 0) out.insert(name);
  }
  return out;
}

template <typename T>
Tensor<T> hidden_state_mse(const QeModel<T>& teacher, const EncodedBatch& batch, const ForwardResult<T>& student) {
  Tensor<T> target;
  {
    NoGradScope<T> no_grad;
    ForwardOptions<T> opts;
    opts.use_model_retention = false;
    target = forward_batch(teacher, batch, opts).final_hidden;
  }
  return masked_mse(student.final_hidden, target, student.final_mask);
}

template <typename T>
CompressionResult<T> replace_modules(const QeModel<T>& teacher, std::size_t n_replace, const Splits& data,
                                     const ReplaceOptions& options) {
  validate_plan(ModuleReplacePlan{n_replace}, teacher.layers.size());
  CompressionResult<T> out{build_student(teacher, n_replace, options.seed), {}};
  auto cfg = options.train;
  cfg.objective = objective_for(teacher.config.head_mode);
  if (teacher.threshold) cfg.threshold = *teacher.threshold;
  const auto frozen = non_target_parameter_names(out.model);
  cfg.freeze.insert(frozen.begin(), frozen.end());

  TrainHooks<T> hooks;
  hooks.forward.use_model_retention = false;
  hooks.extra_loss = [&teacher](const EncodedBatch& batch, const ForwardResult<T>& res) {
    return hidden_state_mse(teacher, batch, res);
  };
  out.history = train(out.model, data, cfg, options.optimizer, hooks);
  out.model.provenance.push_back(nlohmann::json(CompressionPlan{ModuleReplacePlan{n_replace}}));
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
SoftExtractionResult<T> train_soft_extraction(const QeModel<T>& model, double lambda, const Splits& data,
                                              const SoftExtractionOptions& options) {
  if (!(lambda >= 0)) throw UsageError("train_soft_extraction: lambda must be >= 0");
  auto frozen_model = model.clone();
  SoftExtractionResult<T> out{SoftExtractionMask<T>::ones(model.layers.size(), model.config.max_positions), {}};

  auto cfg = options.train;
  cfg.objective = objective_for(model.config.head_mode);
  if (model.threshold) cfg.threshold = *model.threshold;
  cfg.select_best = false;
  for (const auto& [name, t] : frozen_model.named_parameters()) cfg.freeze.insert(name);

  OptimizerConfig opt;
  opt.learning_rate = options.mask_lr;
  opt.weight_decay = 0;

  auto& masks = out.masks.masks;
  TrainHooks<T> hooks;
  hooks.forward.soft = &out.masks;
  hooks.extra_sgd_lr = options.mask_lr;
  hooks.forward.use_model_retention = false;
  for (std::size_t l = 0; l < masks.size(); ++l) hooks.extra_params.emplace_back("mask." + std::to_string(l), &masks[l]);
  hooks.extra_loss = [&masks, lambda](const EncodedBatch&, const ForwardResult<T>&) {
    Tensor<T> total = sum(masks.front());
    for (std::size_t l = 1; l < masks.size(); ++l) total = add(total, sum(masks[l]));
    return scale(total, static_cast<T>(lambda));
  };
  hooks.after_step = [&masks]() {
    for (auto& m : masks) {
      for (auto& v : m.data()) v = std::clamp(v, T(0), T(1));
      m[0] = T(1);
    }
  };
  out.history = train(frozen_model, data, cfg, opt, hooks);
  for (auto& m : masks) m.clear_grad();
  return out;
}

RetentionSchedule schedule_from_sums(std::span<const double> sums, std::size_t cap) {
  RetentionSchedule s;
  for (double v : sums) {
    auto k = static_cast<std::size_t>(std::max<long long>(1, std::llround(v)));
    k = std::min(k, std::max<std::size_t>(1, cap));
    if (!s.keep.empty()) k = std::min(k, s.keep.back());
    s.keep.push_back(k);
  }
  return s;
}

template <typename T>
RetentionSchedule extract_retention_schedule(const SoftExtractionMask<T>& masks, std::size_t cap) {
  std::vector<double> sums;
  for (const auto& m : masks.masks) {
    double s = 0;
    const std::size_t n = std::min(cap, m.size());
    for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(m[j]);
    sums.push_back(s);
  }
  return schedule_from_sums(sums, cap);
}

template <typename T>
T prune_tokens_forward(const QeModel<T>& model, const RetentionSchedule& schedule, const EncodedInput& input) {
  ForwardOptions<T> opts;
  opts.schedule = &schedule;
  return forward(model, input, opts);
}

// ---------------------------------------------------------------------------

template <typename T>
CompressionResult<T> compress(const QeModel<T>& model, const CompressionPlan& plan, const Splits& data,
                              const CompressOptions& options) {
  validate_plan(plan, model.layers.size());
  auto cfg = options.finetune;
  cfg.seed = options.seed;
  cfg.objective = objective_for(model.config.head_mode);
  if (model.threshold) cfg.threshold = *model.threshold;

  if (const auto* p = std::get_if<LayerPrunePlan>(&plan)) {
    CompressionResult<T> out{prune_layers(model, p->n_drop), {}};
    if (p->n_drop > 0) out.history = train(out.model, data, cfg, options.optimizer);
    out.model.provenance.push_back(nlohmann::json(plan));
    return out;
  }
  if (const auto* p = std::get_if<ModuleReplacePlan>(&plan)) {
    return replace_modules(model, p->n_replace, data, ReplaceOptions{cfg, options.optimizer, options.seed});
  }
  const auto& p = std::get<TokenPrunePlan>(plan);
  SoftExtractionOptions soft_opts{cfg, p.mask_lr};
  soft_opts.train.max_epochs = p.soft_epochs;
  const auto soft = train_soft_extraction(model, p.lambda, data, soft_opts);
  std::size_t longest = 1;
  for (const auto& pair : data.train) longest = std::max(longest, model.encode(pair).length());
  const auto schedule = extract_retention_schedule(soft.masks, longest);

  CompressionResult<T> out{model.clone(), {}};
  out.model.retention = schedule;
  auto retrain = cfg;
  retrain.max_epochs = p.retrain_epochs;
  if (retrain.max_epochs > 0) out.history = train(out.model, data, retrain, options.optimizer);
  auto record = nlohmann::json(plan);
  record["schedule"] = schedule.keep;
  out.model.provenance.push_back(std::move(record));
  return out;
}

#define QELAB_INSTANTIATE(T)                                                                                   \
  template QeModel<T> prune_layers(const QeModel<T>&, std::size_t);                                            \
  template QeModel<T> build_student(const QeModel<T>&, std::size_t, std::uint64_t, const EncoderLayer<T>*);    \
  template std::set<std::string> non_target_parameter_names(const QeModel<T>&);                                \
  template Tensor<T> hidden_state_mse(const QeModel<T>&, const EncodedBatch&, const ForwardResult<T>&);        \
  template CompressionResult<T> replace_modules(const QeModel<T>&, std::size_t, const Splits&,                 \
                                                const ReplaceOptions&);                                        \
  template SoftExtractionResult<T> train_soft_extraction(const QeModel<T>&, double, const Splits&,             \
                                                         const SoftExtractionOptions&);                        \
  template RetentionSchedule extract_retention_schedule(const SoftExtractionMask<T>&, std::size_t);            \
  template T prune_tokens_forward(const QeModel<T>&, const RetentionSchedule&, const EncodedInput&);           \
  template CompressionResult<T> compress(const QeModel<T>&, const CompressionPlan&, const Splits&,             \
                                         const CompressOptions&);

QELAB_INSTANTIATE(float)
QELAB_INSTANTIATE(double)

#undef QELAB_INSTANTIATE

}  // namespace qelab
