// SPDX-License-Identifier: Apache-2.0
//
// Sentence-pair data: MLQE-PE style TSV ingestion, per-direction DA score
// normalisation, acceptability labels, vocabularies and a synthetic corpus
// whose quality labels are an exact function of each pair.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace qelab {

struct SentencePair {
  std::string src;
  std::string mt;
  std::string lang_pair;
  double da_mean = 0.0;  // raw direct-assessment score, 0..100
  double da_z = 0.0;     // (da_mean - mu) / sigma with training-split stats
};

struct Splits {
  std::vector<SentencePair> train;
  std::vector<SentencePair> dev;
  std::vector<SentencePair> test;
};

// Per-language-direction statistics of training DA scores.
struct LangStats {
  double mean = 0.0;
  double std = 1.0;
};

struct NormStats {
  std::map<std::string, LangStats> per_lang;

  const LangStats& at(const std::string& lang) const;
  bool contains(const std::string& lang) const { return per_lang.count(lang) != 0; }
};

struct QualityThreshold {
  double raw_value = 51.0;
};

inline constexpr QualityThreshold kThreshold51{51.0};
inline constexpr QualityThreshold kThreshold70{70.0};

enum class Acceptability { not_acceptable, acceptable };

// acceptable iff da_mean >= threshold.
Acceptability binarize(double da_mean, QualityThreshold threshold);
inline bool is_acceptable(double da_mean, QualityThreshold threshold) {
  return binarize(da_mean, threshold) == Acceptability::acceptable;
}

// ---------------------------------------------------------------------------
// TSV

// Names the source / translation / mean-DA / z-DA columns. With has_header
// the entries are header names; otherwise they are zero-based column indices
// written as decimal strings. An empty z column means "not present".
struct ColumnMap {
  std::string src = "original";
  std::string mt = "translation";
  std::string mean = "mean";
  std::string z = "z_mean";
  bool has_header = true;

  // Layout used by headerless files emitted without names:
  // index, original, translation, mean, z_mean.
  static ColumnMap positional();
};

std::vector<SentencePair> load_mlqepe_tsv(const std::filesystem::path& path, const ColumnMap& columns,
                                          const std::string& lang_pair);

// Writes pairs with header "index original translation mean z_mean".
void write_tsv(const std::filesystem::path& path, std::span<const SentencePair> pairs);

// ---------------------------------------------------------------------------
// Normalisation

// Computes per-language population mean/std when `stats` is empty, otherwise
// reuses them. Sets da_z on every pair. Throws DataError when a language has
// zero spread or is missing from the supplied stats.
std::pair<std::vector<SentencePair>, NormStats> z_normalize(std::span<const SentencePair> pairs,
                                                            const std::optional<NormStats>& stats = std::nullopt);

// Maps a z-space value back to the raw DA scale of `lang`.
double denormalize(double z, const NormStats& stats, const std::string& lang);

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;
inline constexpr std::int32_t kSepId = 3;
inline constexpr std::size_t kNumSpecials = 4;

// Lowercased whitespace tokenisation.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
 public:
  Vocab();
  explicit Vocab(std::vector<std::string> tokens);

  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int32_t> encode(std::string_view text) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// Specials {PAD, UNK, CLS, SEP} followed by the most frequent tokens of all
// source and translation texts; equal counts are ordered lexicographically.
Vocab build_vocab(std::span<const SentencePair> corpus, std::size_t max_size);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthLanguage {
  std::string tag;
  std::size_t band_begin = 0;  // token indices [band_begin, band_end)
  std::size_t band_end = 0;
};

struct SynthSpec {
  std::size_t n_train = 5000;
  std::size_t n_dev = 500;
  std::size_t n_test = 1000;
  std::vector<SynthLanguage> languages;
  std::size_t min_len = 5;
  std::size_t max_len = 15;
  double min_corruption = 0.0;
  double max_corruption = 0.8;
  double noise_sigma = 2.0;
  // Fraction of each band reserved for substitutes; sources draw from the
  // rest. With 0, substitutes are any band token absent from the source.
  double substitution_share = 0.25;
  std::uint64_t seed = 1;

  // `n_languages` directions "syn0", "syn1", ... with disjoint bands of
  // `band_size` tokens each.
  static SynthSpec with_languages(std::size_t n_languages, std::size_t band_size = 120);
};

// Surface form of synthetic token `index`.
std::string synth_token(std::size_t index);

// Per language: seeded source sentences from the language's band; each
// source token is independently corrupted with the pair's target rate,
// either substituted (2/3) by a token absent from the source (see
// substitution_share) or deleted (1/3). da_mean = clamp(100 * (1 - realised rate) + noise, 0, 100).
// Pairs are unique across the whole run and partitioned into splits after a
// seeded shuffle. da_z is normalised with the train split's statistics and
// left at 0 when every train score is identical.
std::map<std::string, Splits> synthesize_corpus(const SynthSpec& spec);

// Concatenates every language's splits and shuffles each with `seed`.
Splits concat_multilingual(const std::map<std::string, Splits>& per_lang, std::uint64_t seed);

// Pairs of `pairs` tagged with `lang`.
std::vector<SentencePair> filter_lang(std::span<const SentencePair> pairs, const std::string& lang);

std::vector<std::string> languages_of(std::span<const SentencePair> pairs);

}  // namespace qelab
