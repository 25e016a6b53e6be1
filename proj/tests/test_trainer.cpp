// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "doctest.h"

#include "helpers.hpp"
#include "qelab/errors.hpp"
#include "qelab/trainer.hpp"

using namespace qelab;
using qelab::testing::temp_dir;
using qelab::testing::tiny_model;
using qelab::testing::tiny_splits;

namespace {

template <typename T>
bool same_bytes(const QeModel<T>& a, const QeModel<T>& b) {
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || pa[i].second->shape() != pb[i].second->shape()) return false;
    if (std::memcmp(pa[i].second->ptr(), pb[i].second->ptr(), pa[i].second->size() * sizeof(T)) != 0) return false;
  }
  return true;
}

TrainConfig quick_train(std::size_t epochs, Objective objective = Objective::mse) {
  TrainConfig c;
  c.batch_size = 16;
  c.max_epochs = epochs;
  c.patience = epochs;
  c.seed = 5;
  c.objective = objective;
  return c;
}

}  // namespace

TEST_CASE("mse and bce examples") {
  auto p = Tensor<double>(Shape{2}, {0.0, 0.0});
  const std::vector<double> t{1, 3};
  CHECK(mse_loss(p, std::span<const double>(t)).item() == 5.0);
  const std::vector<double> same{0, 0};
  CHECK(mse_loss(p, std::span<const double>(same)).item() == 0.0);
  CHECK_THROWS_AS(mse_loss(p, std::span<const double>(std::vector<double>{1.0})), DimensionError);

  const std::vector<double> one{1}, zero{0};
  CHECK(bce_with_logits(Tensor<double>(Shape{1}, {0.0}), std::span<const double>(one)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_with_logits(Tensor<double>(Shape{1}, {0.0}), std::span<const double>(zero)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_with_logits(Tensor<double>(Shape{1}, {50.0}), std::span<const double>(one)).item() < 1e-20);
  const double big = bce_with_logits(Tensor<double>(Shape{1}, {-1000.0}), std::span<const double>(one)).item();
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(1000.0).epsilon(1e-12));
  const double neg = bce_with_logits(Tensor<double>(Shape{1}, {1e4}), std::span<const double>(zero)).item();
  CHECK(neg == doctest::Approx(1e4));
}

TEST_CASE("losses are nonnegative") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0, 20);
  std::bernoulli_distribution coin;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> z(7), y(7), l(7);
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = nd(rng);
      y[k] = nd(rng);
      l[k] = coin(rng);
    }
    const Tensor<double> zt(Shape{7}, z);
    CHECK(mse_loss(zt, std::span<const double>(y)).item() >= 0);
    CHECK(bce_with_logits(zt, std::span<const double>(l)).item() >= 0);
  }
}

TEST_CASE("adamw_step closed forms") {
  OptimizerConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 0;

  std::vector<double> p{0.5, -2.0, 3.0};
  const std::vector<double> zero(3, 0.0);
  AdamState<double> st;
  adamw_step<double>(p, zero, st, cfg, 1);
  CHECK(p == std::vector<double>{0.5, -2.0, 3.0});

  std::vector<double> q{0.5, -2.0, 3.0};
  const std::vector<double> ones(3, 1.0);
  AdamState<double> s1;
  adamw_step<double>(q, ones, s1, cfg, 1);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  const double step = cfg.learning_rate / (1.0 + cfg.eps);
  CHECK(q[0] == doctest::Approx(0.5 - step).epsilon(1e-15));
  CHECK(q[1] == doctest::Approx(-2.0 - step).epsilon(1e-15));

  cfg.weight_decay = 0.1;
  std::vector<double> r{0.5, -2.0, 3.0};
  AdamState<double> s2;
  for (std::size_t t = 1; t <= 3; ++t) adamw_step<double>(r, zero, s2, cfg, t);
  const double f = 1.0 - cfg.learning_rate * cfg.weight_decay;
  CHECK(r[0] == 0.5 * f * f * f);
  CHECK(r[1] == -2.0 * f * f * f);

  CHECK_THROWS_AS(adamw_step<double>(r, std::vector<double>(2, 0.0), s2, cfg, 4), DimensionError);
  CHECK_THROWS_AS(adamw_step<double>(r, zero, s2, cfg, 0), UsageError);
}

TEST_CASE("optimizer and train config validation") {
  OptimizerConfig o;
  CHECK(o.learning_rate == 1e-6);
  o.learning_rate = 0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  o = OptimizerConfig{};
  o.beta2 = 1;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  CHECK(OptimizerConfig::synthetic_preset().learning_rate > 1e-6);

  TrainConfig t;
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.patience = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);

  TrainConfig j = quick_train(4, Objective::bce);
  j.freeze = {"head.w1"};
  const nlohmann::json js = j;
  const auto back = js.get<TrainConfig>();
  CHECK(back.max_epochs == 4);
  CHECK(back.objective == Objective::bce);
  CHECK(back.freeze == j.freeze);
}

TEST_CASE("training reduces the loss on a learnable set") {
  const auto data = tiny_splits(200);
  auto m = tiny_model<float>(data, 4);
  const auto h = train(m, data, quick_train(3), OptimizerConfig::synthetic_preset());
  REQUIRE(h.epochs.size() == 3);
  CHECK(h.epochs[1].train_loss < h.epochs[0].train_loss);
  CHECK(h.epochs[2].train_loss < h.epochs[1].train_loss);
  CHECK(h.best_epoch >= 1);
  CHECK(h.best_epoch <= 3);
  CHECK(m.norm_stats.contains(data.train.front().lang_pair));
}

TEST_CASE("training is deterministic for a seed") {
  const auto data = tiny_splits(80);
  auto a = tiny_model<float>(data);
  auto b = tiny_model<float>(data);
  const auto ha = train(a, data, quick_train(2), OptimizerConfig::synthetic_preset());
  const auto hb = train(b, data, quick_train(2), OptimizerConfig::synthetic_preset());
  REQUIRE(ha.epochs.size() == hb.epochs.size());
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    CHECK(ha.epochs[i].train_loss == hb.epochs[i].train_loss);
    CHECK(ha.epochs[i].dev_metric == hb.epochs[i].dev_metric);
  }
  CHECK(same_bytes(a, b));
}

TEST_CASE("frozen parameters do not move") {
  const auto data = tiny_splits(80);
  auto m = tiny_model<float>(data);
  const auto before = m.clone();

  auto all = quick_train(2);
  for (const auto& [name, t] : m.named_parameters()) all.freeze.insert(name);
  train(m, data, all, OptimizerConfig::synthetic_preset());
  CHECK(same_bytes(m, before));

  auto some = quick_train(2);
  some.select_best = false;
  some.freeze = {"embedding.token", "layers.0.attn.wq", "head.b2"};
  auto n = before.clone();
  train(n, data, some, OptimizerConfig::synthetic_preset());
  const auto pn = n.named_parameters();
  const auto pb = before.named_parameters();
  bool moved = false;
  for (std::size_t i = 0; i < pn.size(); ++i) {
    const bool equal =
        std::memcmp(pn[i].second->ptr(), pb[i].second->ptr(), pn[i].second->size() * sizeof(float)) == 0;
    if (some.freeze.count(pn[i].first)) CHECK(equal);
    moved |= !equal;
  }
  CHECK(moved);
}

TEST_CASE("train rejects bad inputs") {
  auto data = tiny_splits(40);
  auto m = tiny_model<float>(data);
  CHECK_THROWS_AS(train(m, data, quick_train(1, Objective::bce), OptimizerConfig::synthetic_preset()), ModeError);
  auto cls = tiny_model<float>(data, 2, HeadMode::classification);
  CHECK_THROWS_AS(train(cls, data, quick_train(1), OptimizerConfig::synthetic_preset()), ModeError);
  data.train.clear();
  CHECK_THROWS_AS(train(m, data, quick_train(1), OptimizerConfig::synthetic_preset()), DataError);
}

TEST_CASE("classification training records its threshold") {
  const auto data = tiny_splits(80);
  auto m = tiny_model<float>(data, 1, HeadMode::classification);
  auto cfg = quick_train(2, Objective::bce);
  cfg.threshold = 70;
  const auto h = train(m, data, cfg, OptimizerConfig::synthetic_preset());
  CHECK(h.epochs.size() == 2);
  REQUIRE(m.threshold.has_value());
  CHECK(*m.threshold == 70);
  for (const auto& e : h.epochs) CHECK(e.train_loss >= 0);
}

TEST_CASE("checkpoint round trip and failure modes") {
  const auto dir = temp_dir("checkpoint");
  const auto data = tiny_splits(60);
  auto m = tiny_model<double>(data);
  qelab::testing::scramble(m, 12);
  m.norm_stats = z_normalize(data.train).second;
  const auto path = dir / "m.ckpt";
  save_checkpoint(m, path);

  const auto back = load_checkpoint<double>(path);
  CHECK(same_bytes(m, back));
  CHECK(count_params(back).total == count_params(m).total);
  CHECK(back.vocab.size() == m.vocab.size());
  const auto& lang = data.train.front().lang_pair;
  CHECK(back.norm_stats.at(lang).mean == m.norm_stats.at(lang).mean);
  CHECK(back.norm_stats.at(lang).std == m.norm_stats.at(lang).std);
  CHECK(checkpoint_bytes(back) == checkpoint_bytes(m));
  CHECK(checkpoint_precision(path) == Precision::f64);
  CHECK(read_checkpoint_manifest(path).contains("config"));

  CHECK_THROWS_AS(load_checkpoint<double>(path, HeadMode::classification), ModeError);
  CHECK_THROWS_AS(load_checkpoint<float>(path), FormatError);

  const auto bytes = checkpoint_bytes(m);
  auto corrupt = bytes;
  corrupt[bytes.size() / 2] = static_cast<char>(corrupt[bytes.size() / 2] ^ 0x5a);
  CHECK_THROWS_AS(checkpoint_from_bytes<double>(corrupt), ChecksumError);
  CHECK_THROWS_AS(checkpoint_from_bytes<double>(bytes.substr(0, bytes.size() - 9)), FormatError);
  CHECK_THROWS_AS(checkpoint_from_bytes<double>(bytes.substr(0, 6)), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(checkpoint_from_bytes<double>(magic), FormatError);
  auto version = bytes;
  version[8] = static_cast<char>(kCheckpointVersion + 1);
  CHECK_THROWS_AS(checkpoint_from_bytes<double>(version), FormatError);
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "missing.ckpt"), DataError);
}
