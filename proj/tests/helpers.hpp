// SPDX-License-Identifier: Apache-2.0
//
// Small models and corpora shared by the unit tests.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "qelab/corpus.hpp"
#include "qelab/model.hpp"

namespace qelab::testing {

template <typename T>
ModelConfig tiny_config(std::size_t n_layers = 2, std::size_t d = 16, HeadMode mode = HeadMode::regression) {
  ModelConfig c;
  c.vocab_size = 64;
  c.max_positions = 40;
  c.d_model = d;
  c.n_heads = 4;
  c.d_ff = 2 * d;
  c.n_layers = n_layers;
  c.head_hidden = d;
  c.head_mode = mode;
  c.precision = precision_of<T>();
  c.seed = 7;
  return c;
}

inline ModelConfig reference_config() {
  ModelConfig c;  // V=1000, P=128, d=64, h=4, d_ff=256, L=4, head_hidden=64
  return c;
}

inline SynthSpec tiny_spec(std::size_t n_train = 120, std::uint64_t seed = 3, std::size_t n_languages = 1) {
  auto s = SynthSpec::with_languages(n_languages, 24);
  s.n_train = n_train;
  s.n_dev = 30;
  s.n_test = 40;
  s.min_len = 3;
  s.max_len = 8;
  s.seed = seed;
  return s;
}

inline Splits tiny_splits(std::size_t n_train = 120, std::uint64_t seed = 3) {
  return synthesize_corpus(tiny_spec(n_train, seed)).begin()->second;
}

// Model over the vocabulary of `data`.
template <typename T>
QeModel<T> tiny_model(const Splits& data, std::size_t n_layers = 2, HeadMode mode = HeadMode::regression,
                      std::size_t d = 16) {
  auto m = QeModel<T>::init(tiny_config<T>(n_layers, d, mode));
  m.vocab = build_vocab(data.train, m.config.vocab_size);
  return m;
}

// Redraws every parameter so that activations leave the near-linear regime
// of the default initialisation.
template <typename T>
void scramble(QeModel<T>& model, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& [name, t] : model.named_parameters()) {
    const bool gain = name.find("gamma") != std::string::npos;
    for (auto& v : t->data()) v = static_cast<T>((gain ? 1.0 : 0.0) + nd(rng));
  }
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("qelab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace qelab::testing
