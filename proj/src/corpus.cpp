// SPDX-License-Identifier: Apache-2.0
#include "qelab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "qelab/errors.hpp"

namespace qelab {

const LangStats& NormStats::at(const std::string& lang) const {
  auto it = per_lang.find(lang);
  if (it == per_lang.end()) throw DataError("no normalisation statistics for language '" + lang + "'");
  return it->second;
}

Acceptability binarize(double da_mean, QualityThreshold threshold) {
  return da_mean >= threshold.raw_value ? Acceptability::acceptable : Acceptability::not_acceptable;
}

ColumnMap ColumnMap::positional() {
  ColumnMap m;
  m.src = "1";
  m.mt = "2";
  m.mean = "3";
  m.z = "4";
  m.has_header = false;
  return m;
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::size_t resolve_column(const std::string& key, const std::vector<std::string_view>& header,
                           bool has_header, const std::string& role) {
  if (has_header) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == key) return i;
    }
    throw ConfigError("column map: " + role + " column '" + key + "' not found in header");
  }
  std::size_t idx = 0;
  auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), idx);
  if (ec != std::errc{} || ptr != key.data() + key.size()) {
    throw ConfigError("column map: " + role + " column '" + key + "' is not an index (file has no header)");
  }
  return idx;
}

}  // namespace

std::vector<SentencePair> load_mlqepe_tsv(const std::filesystem::path& path, const ColumnMap& columns,
                                          const std::string& lang_pair) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> header;
  std::string header_line;
  if (columns.has_header) {
    if (!std::getline(in, header_line)) throw DataError(path.string() + ": empty file, expected a header row");
    ++line_no;
    if (!header_line.empty() && header_line.back() == '\r') header_line.pop_back();
    header = split_tabs(header_line);
  }
  const std::size_t c_src = resolve_column(columns.src, header, columns.has_header, "source");
  const std::size_t c_mt = resolve_column(columns.mt, header, columns.has_header, "translation");
  const std::size_t c_mean = resolve_column(columns.mean, header, columns.has_header, "mean");
  const std::optional<std::size_t> c_z =
      columns.z.empty() ? std::nullopt
                        : std::optional(resolve_column(columns.z, header, columns.has_header, "z"));
  const std::size_t needed = std::max({c_src, c_mt, c_mean, c_z.value_or(0)}) + 1;
  if (columns.has_header && needed > header.size()) {
    throw ConfigError(path.string() + ": header has fewer columns than the column map requires");
  }

  std::vector<SentencePair> pairs;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() < needed) {
      if (!columns.has_header && pairs.empty()) {
        throw ConfigError(where + ": row has " + std::to_string(fields.size()) +
                          " columns, column map needs " + std::to_string(needed));
      }
      throw DataError(where + ": expected at least " + std::to_string(needed) + " columns, got " +
                      std::to_string(fields.size()));
    }
    SentencePair p;
    p.src = std::string(fields[c_src]);
    p.mt = std::string(fields[c_mt]);
    p.lang_pair = lang_pair;
    const auto mean = parse_double(fields[c_mean]);
    if (!mean) throw DataError(where + ": unparseable mean DA score '" + std::string(fields[c_mean]) + "'");
    if (*mean < 0.0 || *mean > 100.0) {
      throw DataError(where + ": mean DA score " + std::string(fields[c_mean]) + " outside [0, 100]");
    }
    p.da_mean = *mean;
    if (c_z) {
      const auto z = parse_double(fields[*c_z]);
      if (!z) throw DataError(where + ": unparseable z score '" + std::string(fields[*c_z]) + "'");
      p.da_z = *z;
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void write_tsv(const std::filesystem::path& path, std::span<const SentencePair> pairs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + tmp);
    out << "index\toriginal\ttranslation\tmean\tz_mean\n";
    out.precision(17);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      out << i << '\t' << pairs[i].src << '\t' << pairs[i].mt << '\t' << pairs[i].da_mean << '\t'
          << pairs[i].da_z << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

std::pair<std::vector<SentencePair>, NormStats> z_normalize(std::span<const SentencePair> pairs,
                                                            const std::optional<NormStats>& stats) {
  NormStats used;
  if (stats) {
    used = *stats;
  } else {
    std::map<std::string, std::vector<double>> by_lang;
    for (const auto& p : pairs) by_lang[p.lang_pair].push_back(p.da_mean);
    for (const auto& [lang, scores] : by_lang) {
      double mean = 0;
      for (double s : scores) mean += s;
      mean /= static_cast<double>(scores.size());
      double var = 0;
      for (double s : scores) var += (s - mean) * (s - mean);
      var /= static_cast<double>(scores.size());
      if (!(var > 0.0)) {
        throw DataError("z_normalize: degenerate scores for '" + lang + "' (zero standard deviation)");
      }
      used.per_lang[lang] = LangStats{mean, std::sqrt(var)};
    }
  }
  std::vector<SentencePair> out(pairs.begin(), pairs.end());
  for (auto& p : out) {
    const auto& s = used.at(p.lang_pair);
    if (!(s.std > 0.0)) throw DataError("z_normalize: non-positive std for '" + p.lang_pair + "'");
    p.da_z = (p.da_mean - s.mean) / s.std;
  }
  return {std::move(out), std::move(used)};
}

double denormalize(double z, const NormStats& stats, const std::string& lang) {
  const auto& s = stats.at(lang);
  return z * s.std + s.mean;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> tokens) {
  const std::vector<std::string> specials{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  if (tokens.size() < kNumSpecials || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    tokens.insert(tokens.begin(), specials.begin(), specials.end());
  }
  tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
}

std::int32_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

std::vector<std::int32_t> Vocab::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

Vocab build_vocab(std::span<const SentencePair> corpus, std::size_t max_size) {
  if (max_size < kNumSpecials + 1) throw ConfigError("build_vocab: max_size must be >= 5");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& p : corpus) {
    for (auto& t : tokenize(p.src)) ++counts[t];
    for (auto& t : tokenize(p.mt)) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (const auto& [tok, n] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(tok);
  }
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------

SynthSpec SynthSpec::with_languages(std::size_t n_languages, std::size_t band_size) {
  SynthSpec spec;
  for (std::size_t i = 0; i < n_languages; ++i) {
    spec.languages.push_back(SynthLanguage{"syn" + std::to_string(i), i * band_size, (i + 1) * band_size});
  }
  return spec;
}

std::string synth_token(std::size_t index) { return "w" + std::to_string(index); }

namespace {

std::string join(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += synth_token(ids[i]);
  }
  return out;
}

std::vector<SentencePair> synthesize_language(const SynthSpec& spec, const SynthLanguage& lang,
                                              std::size_t lang_index, std::set<std::pair<std::string, std::string>>& seen) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(lang_index)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
  const std::size_t band = lang.band_end - lang.band_begin;
  const auto reserved = static_cast<std::size_t>(std::llround(spec.substitution_share * static_cast<double>(band)));
  const std::size_t src_end = lang.band_end - reserved;
  std::uniform_int_distribution<std::size_t> tok_dist(lang.band_begin, src_end - 1);
  std::uniform_int_distribution<std::size_t> sub_dist(reserved ? src_end : lang.band_begin, lang.band_end - 1);
  std::uniform_real_distribution<double> rate_dist(spec.min_corruption, spec.max_corruption);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);

  const std::size_t total = spec.n_train + spec.n_dev + spec.n_test;
  std::vector<SentencePair> out;
  out.reserve(total);
  std::size_t attempts = 0;
  while (out.size() < total) {
    if (++attempts > 100 * total + 1000) {
      throw ConfigError("synthesize_corpus: cannot draw " + std::to_string(total) + " distinct pairs for '" +
                        lang.tag + "'; widen the band or length range");
    }
    const std::size_t n = len_dist(rng);
    std::vector<std::size_t> src(n);
    for (auto& t : src) t = tok_dist(rng);
    const std::unordered_set<std::size_t> present(src.begin(), src.end());

    const double target_rate = rate_dist(rng);
    std::vector<std::size_t> mt;
    std::size_t events = 0;
    for (std::size_t t : src) {
      if (unit(rng) >= target_rate) {
        mt.push_back(t);
        continue;
      }
      ++events;
      if (unit(rng) < 2.0 / 3.0) {
        std::size_t sub = sub_dist(rng);
        while (present.count(sub)) sub = sub_dist(rng);
        mt.push_back(sub);
      }
    }
    double da = 100.0 * static_cast<double>(n - events) / static_cast<double>(n);
    if (spec.noise_sigma > 0) da += noise(rng);
    da = std::clamp(da, 0.0, 100.0);

    SentencePair p;
    p.src = join(src);
    p.mt = join(mt);
    p.lang_pair = lang.tag;
    p.da_mean = da;
    if (!seen.emplace(p.src, p.mt).second) continue;
    out.push_back(std::move(p));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace

std::map<std::string, Splits> synthesize_corpus(const SynthSpec& spec) {
  if (spec.languages.empty()) throw ConfigError("synthesize_corpus: no languages configured");
  if (spec.min_len < 1 || spec.min_len > spec.max_len) throw ConfigError("synthesize_corpus: invalid length range");
  if (spec.min_corruption < 0 || spec.max_corruption > 1 || spec.min_corruption > spec.max_corruption) {
    throw ConfigError("synthesize_corpus: corruption range must lie within [0, 1]");
  }
  if (spec.noise_sigma < 0) throw ConfigError("synthesize_corpus: noise sigma must be >= 0");
  if (spec.substitution_share < 0 || spec.substitution_share >= 1) {
    throw ConfigError("synthesize_corpus: substitution_share must lie in [0, 1)");
  }
  if (spec.n_train == 0) throw ConfigError("synthesize_corpus: n_train must be >= 1");
  for (const auto& lang : spec.languages) {
    if (lang.band_end <= lang.band_begin) throw ConfigError("synthesize_corpus: empty vocab band for '" + lang.tag + "'");
    const std::size_t band = lang.band_end - lang.band_begin;
    const auto reserved = static_cast<std::size_t>(std::llround(spec.substitution_share * static_cast<double>(band)));
    if (spec.substitution_share > 0 && (reserved < 1 || reserved >= band)) {
      throw ConfigError("synthesize_corpus: substitution_share leaves no source or substitute tokens for '" + lang.tag +
                        "'");
    }
    if (reserved == 0 && band <= spec.max_len) {
      throw ConfigError("synthesize_corpus: vocab band for '" + lang.tag +
                        "' must exceed max_len so substitutes absent from the source exist");
    }
  }
  std::set<std::pair<std::string, std::string>> seen;
  std::map<std::string, Splits> out;
  for (std::size_t i = 0; i < spec.languages.size(); ++i) {
    const auto& lang = spec.languages[i];
    auto pairs = synthesize_language(spec, lang, i, seen);
    Splits s;
    auto it = pairs.begin();
    s.train.assign(it, it + static_cast<std::ptrdiff_t>(spec.n_train));
    it += static_cast<std::ptrdiff_t>(spec.n_train);
    s.dev.assign(it, it + static_cast<std::ptrdiff_t>(spec.n_dev));
    it += static_cast<std::ptrdiff_t>(spec.n_dev);
    s.test.assign(it, pairs.end());
    const auto [lo, hi] = std::minmax_element(s.train.begin(), s.train.end(),
                                              [](const SentencePair& a, const SentencePair& b) { return a.da_mean < b.da_mean; });
    if (lo != s.train.end() && lo->da_mean != hi->da_mean) {
      auto [train_z, stats] = z_normalize(s.train);
      s.train = std::move(train_z);
      s.dev = z_normalize(s.dev, stats).first;
      s.test = z_normalize(s.test, stats).first;
    }
    out.emplace(lang.tag, std::move(s));
  }
  return out;
}

Splits concat_multilingual(const std::map<std::string, Splits>& per_lang, std::uint64_t seed) {
  if (per_lang.empty()) throw UsageError("concat_multilingual: empty language list");
  Splits out;
  for (const auto& [lang, s] : per_lang) {
    out.train.insert(out.train.end(), s.train.begin(), s.train.end());
    out.dev.insert(out.dev.end(), s.dev.begin(), s.dev.end());
    out.test.insert(out.test.end(), s.test.begin(), s.test.end());
  }
  std::mt19937_64 rng(seed);
  std::shuffle(out.train.begin(), out.train.end(), rng);
  std::shuffle(out.dev.begin(), out.dev.end(), rng);
  std::shuffle(out.test.begin(), out.test.end(), rng);
  return out;
}

std::vector<SentencePair> filter_lang(std::span<const SentencePair> pairs, const std::string& lang) {
  std::vector<SentencePair> out;
  for (const auto& p : pairs) {
    if (p.lang_pair == lang) out.push_back(p);
  }
  return out;
}

std::vector<std::string> languages_of(std::span<const SentencePair> pairs) {
  std::set<std::string> langs;
  for (const auto& p : pairs) langs.insert(p.lang_pair);
  return {langs.begin(), langs.end()};
}

}  // namespace qelab
