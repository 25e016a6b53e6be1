// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"

#include "helpers.hpp"
#include "qelab/errors.hpp"
#include "qelab/model.hpp"
#include "qelab/trainer.hpp"

using namespace qelab;
using namespace qelab::testing;

namespace {

std::vector<std::int32_t> ids_of(const Vocab& v, const std::string& text) { return v.encode(text); }

template <typename T>
std::vector<const EncodedInput*> pointers(const std::vector<EncodedInput>& inputs) {
  std::vector<const EncodedInput*> out;
  for (const auto& e : inputs) out.push_back(&e);
  return out;
}

// Loss of the whole model on a fixed batch; used for the finite-difference
// oracle below.
template <typename T>
T batch_loss(const QeModel<T>& model, const EncodedBatch& batch, const std::vector<T>& target,
             const ForwardOptions<T>& opts) {
  auto r = forward_batch(model, batch, opts);
  if (model.config.head_mode == HeadMode::regression) return mse_loss(r.output, std::span<const T>(target)).item();
  return bce_with_logits(r.output, std::span<const T>(target)).item();
}

// Largest per-tensor relative deviation between the tape gradient and central
// differences: max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-4). The
// floor keeps tensors whose exact gradient is zero (the key bias, whose shift
// cancels in the softmax) from dividing round-off by round-off.
double max_relative_error(QeModel<double>& model, const EncodedBatch& batch, const std::vector<double>& target,
                          SoftExtractionMask<double>* soft = nullptr, double h = 1e-5) {
  ForwardOptions<double> opts;
  opts.soft = soft;
  std::vector<std::pair<std::string, Tensor<double>*>> params = model.named_parameters();
  if (soft) {
    for (std::size_t l = 0; l < soft->masks.size(); ++l) params.emplace_back("mask." + std::to_string(l), &soft->masks[l]);
  }
  for (auto& [n, t] : params) t->clear_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto r = forward_batch(model, batch, opts);
    auto loss = model.config.head_mode == HeadMode::regression
                    ? mse_loss(r.output, std::span<const double>(target))
                    : bce_with_logits(r.output, std::span<const double>(target));
    tape.backward(loss);
  }
  double worst = 0;
  for (auto& [name, t] : params) {
    REQUIRE(t->has_grad());
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    double diff = 0, scale = 1e-4;
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double keep = (*t)[i];
      (*t)[i] = keep + h;
      const double up = batch_loss(model, batch, target, opts);
      (*t)[i] = keep - h;
      const double down = batch_loss(model, batch, target, opts);
      (*t)[i] = keep;
      const double numeric = (up - down) / (2 * h);
      diff = std::max(diff, std::abs(analytic[i] - numeric));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    }
    const double rel = diff / scale;
    if (rel > 1e-6) MESSAGE(name << " relative error " << rel << " scale " << scale);
    worst = std::max(worst, rel);
  }
  return worst;
}

EncodedBatch padded_batch(const QeModel<double>& model, const Splits& data, std::size_t n) {
  std::vector<EncodedInput> inputs;
  for (std::size_t i = 0; i < n; ++i) inputs.push_back(model.encode(data.train[i]));
  return make_batch(pointers<double>(inputs));
}

}  // namespace

TEST_CASE("encode_pair layout") {
  Vocab v({"a", "b", "c"});
  auto cfg = tiny_config<float>();
  const auto e = encode_pair(ids_of(v, "a b"), ids_of(v, "c"), cfg);
  CHECK(e.input_ids == std::vector<std::int32_t>{kClsId, v.id("a"), v.id("b"), kSepId, v.id("c"), kSepId});
  CHECK(e.attention_mask == std::vector<std::uint8_t>(6, 1));

  const auto empty = encode_pair({}, {}, cfg);
  CHECK(empty.input_ids == std::vector<std::int32_t>{kClsId, kSepId, kSepId});

  const auto padded = encode_pair(ids_of(v, "a"), ids_of(v, "b"), cfg, 8);
  CHECK(padded.length() == 8);
  CHECK(padded.input_ids.back() == kPadId);
  CHECK(padded.attention_mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0, 0, 0});
}

TEST_CASE("encode_pair truncates the longer segment first") {
  auto cfg = tiny_config<float>();
  cfg.max_positions = 20;
  // 27 content tokens + 3 specials = P + 10.
  const std::vector<std::int32_t> src(17, 4), mt(10, 5);
  const auto e = encode_pair(src, mt, cfg);
  CHECK(e.length() == 20);
  CHECK(std::count(e.input_ids.begin(), e.input_ids.end(), 4) == 7);
  CHECK(std::count(e.input_ids.begin(), e.input_ids.end(), 5) == 10);
  CHECK(e.input_ids.front() == kClsId);
  CHECK(std::count(e.input_ids.begin(), e.input_ids.end(), kSepId) == 2);
  CHECK(e.input_ids.back() == kSepId);

  const std::vector<std::int32_t> eq(15, 4), eq2(15, 5);
  const auto t = encode_pair(eq, eq2, cfg);
  CHECK(std::count(t.input_ids.begin(), t.input_ids.end(), 4) == 15);
  CHECK(std::count(t.input_ids.begin(), t.input_ids.end(), 5) == 2);

  const std::vector<std::int32_t> long_src(20, 4), long_mt(19, 5);
  const auto o = encode_pair(long_src, long_mt, cfg);
  CHECK(o.length() == 20);
  CHECK(std::count(o.input_ids.begin(), o.input_ids.end(), 4) == 0);
  CHECK(std::count(o.input_ids.begin(), o.input_ids.end(), 5) == 17);
}

TEST_CASE("config validation") {
  auto c = tiny_config<float>();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config<float>();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(c.validate(true));
  c = tiny_config<float>();
  c.vocab_size = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(QeModel<double>::init(tiny_config<float>()), ConfigError);
}

TEST_CASE("parameter accounting on the reference configuration") {
  auto cfg = reference_config();
  const auto m = QeModel<float>::init(cfg);
  const auto pc = count_params(m);
  CHECK(pc.embedding == 72320);
  CHECK(pc.per_encoder_layer == 49984);
  CHECK(pc.head == 4225);
  CHECK(pc.total == 276481);

  // Element counts of the owned tensors, summed independently.
  std::size_t total = 0;
  for (const auto& [name, t] : m.named_parameters()) total += t->size();
  CHECK(total == pc.total);
  const std::size_t d = 64, ff = 256;
  CHECK(pc.per_encoder_layer == 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d);
  const auto closed = expected_param_counts(cfg);
  CHECK(closed.total == pc.total);

  cfg.n_layers = 0;
  const auto empty = QeModel<float>::init(cfg);
  const auto pe = count_params(empty);
  CHECK(pe.total == pe.embedding + pe.head);
  CHECK(pe.total == 72320 + 4225);
}

TEST_CASE("forward contracts") {
  const auto data = tiny_splits(40);
  auto m = tiny_model<float>(data);
  const auto x = m.encode(data.train[0]);

  SUBCASE("constant head") {
    for (auto& v : m.head_w2.data()) v = 0;
    m.head_b2[0] = 1.25f;
    for (const auto& p : data.test) CHECK(forward(m, m.encode(p)) == 1.25f);
  }
  SUBCASE("determinism") {
    const auto m2 = tiny_model<float>(data);
    CHECK(forward(m, x) == forward(m2, x));
    CHECK(forward(m, x) == forward(m, x));
  }
  SUBCASE("padding content is ignored") {
    scramble(m, 3);
    std::mt19937 rng(1);
    for (std::size_t i = 0; i < 10; ++i) {
      auto e = m.encode(data.test[i], m.config.max_positions);
      const float base = forward(m, e);
      for (std::size_t j = 0; j < e.length(); ++j) {
        if (!e.attention_mask[j]) e.input_ids[j] = static_cast<std::int32_t>(rng() % m.config.vocab_size);
      }
      CHECK(std::abs(forward(m, e) - base) <= 1e-6f);
    }
  }
  SUBCASE("batched equals single") {
    scramble(m, 4);
    std::vector<EncodedInput> inputs;
    for (std::size_t i = 0; i < 5; ++i) inputs.push_back(m.encode(data.test[i]));
    const auto r = forward_batch(m, make_batch(pointers<float>(inputs)));
    for (std::size_t i = 0; i < 5; ++i) CHECK(r.output[i] == doctest::Approx(forward(m, inputs[i])).epsilon(1e-5));
  }
  SUBCASE("inputs longer than P are rejected") {
    EncodedInput big;
    big.input_ids.assign(m.config.max_positions + 1, kClsId);
    big.attention_mask.assign(m.config.max_positions + 1, 1);
    CHECK_THROWS_AS(forward(m, big), UsageError);
  }
}

TEST_CASE("classification probability stays inside (0, 1)") {
  const auto data = tiny_splits(40);
  auto m = tiny_model<double>(data, 2, HeadMode::classification);
  scramble(m, 8, 0.5);
  for (const auto& p : data.test) {
    const double z = forward(m, m.encode(p));
    REQUIRE(std::isfinite(z));
    const double prob = 1 / (1 + std::exp(-z));
    CHECK(prob > 0);
    CHECK(prob < 1);
  }
}

TEST_CASE("model gradients match central differences") {
  const auto data = tiny_splits(40);
  SUBCASE("regression") {
    auto m = tiny_model<double>(data);
    scramble(m, 21);
    const auto batch = padded_batch(m, data, 3);
    CHECK(max_relative_error(m, batch, {0.5, -1.0, 1.5}) <= 1e-6);
  }
  SUBCASE("classification") {
    auto m = tiny_model<double>(data, 1, HeadMode::classification);
    scramble(m, 22);
    const auto batch = padded_batch(m, data, 3);
    CHECK(max_relative_error(m, batch, {1.0, 0.0, 1.0}) <= 1e-6);
  }
  SUBCASE("with soft extraction masks") {
    auto m = tiny_model<double>(data);
    scramble(m, 23);
    auto soft = SoftExtractionMask<double>::ones(m.layers.size(), m.config.max_positions);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.5, 1.0);
    for (auto& mask : soft.masks) {
      for (auto& v : mask.data()) v = u(rng);
    }
    const auto batch = padded_batch(m, data, 2);
    CHECK(max_relative_error(m, batch, {0.3, -0.7}, &soft) <= 1e-6);
  }
}

TEST_CASE("token significance sums attention received over heads and real queries") {
  // B=1, heads=2, S=3; third position is padding.
  const std::vector<double> probs = {0.5, 0.5, 0.0, 0.2, 0.8, 0.0, 0.3, 0.3, 0.4,
                                     0.1, 0.9, 0.0, 0.6, 0.4, 0.0, 0.3, 0.3, 0.4};
  const std::vector<std::uint8_t> mask = {1, 1, 0};
  const auto sig = token_significance<double>(probs, mask, 1, 2, 3);
  CHECK(sig[0] == doctest::Approx(0.5 + 0.2 + 0.1 + 0.6));
  CHECK(sig[1] == doctest::Approx(0.5 + 0.8 + 0.9 + 0.4));
  CHECK(sig[2] == 0);
}

TEST_CASE("model json config round-trips") {
  auto c = tiny_config<double>(3, 16, HeadMode::classification);
  nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  CHECK(back.n_layers == 3);
  CHECK(back.head_mode == HeadMode::classification);
  CHECK(back.precision == Precision::f64);
  j.erase("d_model");
  try {
    (void)j.get<ModelConfig>();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("d_model") != std::string::npos);
  }
}
