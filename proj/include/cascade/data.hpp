#pragma once

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cascade/encoder.hpp"
#include "cascade/errors.hpp"
#include "cascade/random.hpp"

namespace cascade::data {

struct RankingExample {
  std::string question_id;
  std::vector<std::int32_t> question;
  std::vector<std::int32_t> candidate;
  int label = 0;

  bool operator==(const RankingExample&) const = default;
};

/// Candidates of one question; the unit of cascaded inference.
struct QuestionGroup {
  std::string question_id;
  std::vector<RankingExample> examples;

  std::size_t size() const { return examples.size(); }
  std::size_t positives() const {
    std::size_t n = 0;
    for (const auto& e : examples) n += (e.label != 0);
    return n;
  }
  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(e.label);
    return out;
  }

  bool operator==(const QuestionGroup&) const = default;
};

using Dataset = std::vector<QuestionGroup>;

struct DatasetStats {
  std::size_t questions = 0;
  double mean_candidates = 0.0;
  double mean_positives = 0.0;
};

inline DatasetStats stats(const Dataset& ds) {
  DatasetStats s;
  s.questions = ds.size();
  if (ds.empty()) return s;
  std::size_t cands = 0, pos = 0;
  for (const auto& g : ds) {
    cands += g.size();
    pos += g.positives();
  }
  s.mean_candidates = static_cast<double>(cands) / static_cast<double>(ds.size());
  s.mean_positives = static_cast<double>(pos) / static_cast<double>(ds.size());
  return s;
}

/// Token batch of `[CLS] question [SEP] candidate` for the given examples.
inline TokenBatch make_batch(std::span<const RankingExample> examples, std::size_t max_seq_len) {
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(examples.size());
  for (const auto& e : examples) seqs.push_back(make_sequence(e.question, e.candidate, max_seq_len));
  return TokenBatch::pack(seqs);
}

inline TokenBatch make_batch(const QuestionGroup& group, std::size_t max_seq_len) {
  return make_batch(std::span<const RankingExample>(group.examples), max_seq_len);
}

namespace detail {

inline bool has_suffix(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline std::string read_file(const std::string& path) {
  if (has_suffix(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw UsageError("cannot open " + path);
    std::string out;
    char buf[1 << 15];
    int n;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw DataError("corrupt gzip stream in " + path);
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  if (has_suffix(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (f == nullptr) throw UsageError("cannot write " + path);
    const int written = gzwrite(f, content.data(), static_cast<unsigned>(content.size()));
    gzclose(f);
    if (written != static_cast<int>(content.size())) throw UsageError("short write to " + path);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out << content;
  if (!out) throw UsageError("short write to " + path);
}

inline std::vector<std::int32_t> parse_tokens(std::string_view field, std::size_t line) {
  std::vector<std::int32_t> ids;
  std::size_t i = 0;
  while (i < field.size()) {
    if (field[i] == ' ') {
      ++i;
      continue;
    }
    std::int32_t v = 0;
    const auto [end, ec] = std::from_chars(field.data() + i, field.data() + field.size(), v);
    if (ec != std::errc() || v < 0 || (end != field.data() + field.size() && *end != ' ')) {
      throw DataError("line " + std::to_string(line) + ": bad token id in '" +
                      std::string(field) + "'");
    }
    ids.push_back(v);
    i = static_cast<std::size_t>(end - field.data());
  }
  return ids;
}

inline std::string join_tokens(const std::vector<std::int32_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

}  // namespace detail

/// Parses `question_id \t label \t question ids \t candidate ids` rows and
/// groups them by question id in order of first appearance.
inline Dataset parse_tsv(std::string_view text) {
  Dataset groups;
  std::unordered_map<std::string, std::size_t> index;
  std::size_t line_no = 0;
  std::size_t rows = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4) {
      throw DataError("line " + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    if (fields[0].empty()) throw DataError("line " + std::to_string(line_no) + ": empty question id");
    if (fields[1] != "0" && fields[1] != "1") {
      throw DataError("line " + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                      std::string(fields[1]) + "'");
    }
    RankingExample ex;
    ex.question_id = std::string(fields[0]);
    ex.label = fields[1] == "1" ? 1 : 0;
    ex.question = detail::parse_tokens(fields[2], line_no);
    ex.candidate = detail::parse_tokens(fields[3], line_no);
    if (ex.candidate.empty()) {
      throw DataError("line " + std::to_string(line_no) + ": empty candidate");
    }
    auto [it, inserted] = index.try_emplace(ex.question_id, groups.size());
    if (inserted) groups.push_back({ex.question_id, {}});
    groups[it->second].examples.push_back(std::move(ex));
    ++rows;
  }
  if (rows == 0) throw DataError("dataset has no rows");
  return groups;
}

inline std::string format_tsv(const Dataset& ds) {
  std::string out;
  for (const auto& g : ds) {
    for (const auto& e : g.examples) {
      out += e.question_id;
      out += '\t';
      out += e.label ? '1' : '0';
      out += '\t';
      out += detail::join_tokens(e.question);
      out += '\t';
      out += detail::join_tokens(e.candidate);
      out += '\n';
    }
  }
  return out;
}

/// Reads a dataset; paths ending in .gz are decompressed.
inline Dataset read_tsv(const std::string& path) {
  try {
    return parse_tsv(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void write_tsv(const std::string& path, const Dataset& ds) {
  detail::write_file(path, format_tsv(ds));
}

/// Checks token ids and sequence lengths against a model's limits.
inline void validate_for_model(const Dataset& ds, std::size_t vocab_size, std::size_t max_seq_len) {
  for (const auto& g : ds) {
    for (const auto& e : g.examples) {
      for (auto ids : {&e.question, &e.candidate}) {
        for (std::int32_t id : *ids) {
          if (static_cast<std::size_t>(id) >= vocab_size) {
            throw DataError("question " + g.question_id + ": token id " + std::to_string(id) +
                            " outside vocabulary of " + std::to_string(vocab_size));
          }
        }
      }
      if (e.question.size() + e.candidate.size() + 2 > max_seq_len) {
        throw DataError("question " + g.question_id + ": sequence longer than max_seq_len " +
                        std::to_string(max_seq_len));
      }
    }
  }
}

// Synthetic answer-selection corpus.
//
// Vocabulary layout: reserved ids, then n_topics disjoint topic sets of
// topic_size tokens, then filler tokens. A question shows all tokens of its
// topic plus question_filler filler tokens. A candidate is relevant when it
// contains at least min_shared tokens of the question's topic. Negatives carry
// fewer than min_shared own-topic tokens plus tokens of another topic, so
// topical content alone does not separate the classes. With probability
// `noise` each candidate filler slot copies one of the question's filler
// tokens, which misleads a raw token-overlap ranker without changing labels.
struct SyntheticConfig {
  std::size_t n_questions = 200;
  std::size_t cands_per_q = 32;
  std::size_t positives_per_q = 4;
  std::size_t vocab_size = 1024;
  double noise = 0.2;
  std::uint64_t seed = 13;
  std::size_t n_topics = 4;
  std::size_t topic_size = 4;
  std::size_t min_shared = 2;
  std::size_t question_filler = 4;
  std::size_t candidate_len = 8;

  std::size_t topic_begin() const { return static_cast<std::size_t>(tokens::kFirstRegular); }
  std::size_t filler_begin() const { return topic_begin() + n_topics * topic_size; }

  void validate() const {
    if (n_questions == 0 || cands_per_q == 0) throw ConfigError("empty synthetic dataset requested");
    if (positives_per_q > cands_per_q) {
      throw ConfigError("positives_per_q exceeds cands_per_q");
    }
    if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("noise must lie in [0, 1]");
    if (n_topics < 2) throw ConfigError("need at least two topics");
    if (min_shared == 0 || min_shared > topic_size) {
      throw ConfigError("min_shared must lie in [1, topic_size]");
    }
    if (candidate_len < 2 * topic_size) {
      throw ConfigError("candidate_len must hold two topic sets");
    }
    const std::size_t needed = filler_begin() + 2 * (question_filler + candidate_len);
    if (vocab_size < needed) {
      throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small for " +
                        std::to_string(n_topics) + " disjoint topics of " +
                        std::to_string(topic_size) + " tokens plus filler (need " +
                        std::to_string(needed) + ")");
    }
  }
};

namespace detail {

inline std::vector<std::int32_t> topic_tokens(const SyntheticConfig& cfg, std::size_t topic) {
  std::vector<std::int32_t> out(cfg.topic_size);
  for (std::size_t j = 0; j < cfg.topic_size; ++j) {
    out[j] = static_cast<std::int32_t>(cfg.topic_begin() + topic * cfg.topic_size + j);
  }
  return out;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

inline std::vector<std::int32_t> sample_without_replacement(std::vector<std::int32_t> pool,
                                                            std::size_t k, Rng& rng) {
  shuffle(pool, rng);
  pool.resize(k);
  return pool;
}

inline std::int32_t fresh_filler(const SyntheticConfig& cfg, const std::set<std::int32_t>& avoid,
                                 Rng& rng) {
  const std::size_t span = cfg.vocab_size - cfg.filler_begin();
  while (true) {
    const auto id = static_cast<std::int32_t>(cfg.filler_begin() + rng.below(span));
    if (!avoid.contains(id)) return id;
  }
}

}  // namespace detail

/// Number of candidate tokens from the question's topic: the generative rule
/// recomputed from visible tokens (topic tokens are identifiable by id range).
inline std::size_t shared_topic_tokens(const RankingExample& e, const SyntheticConfig& cfg) {
  std::set<std::int32_t> topical;
  for (std::int32_t id : e.question) {
    if (static_cast<std::size_t>(id) >= cfg.topic_begin() &&
        static_cast<std::size_t>(id) < cfg.filler_begin()) {
      topical.insert(id);
    }
  }
  std::set<std::int32_t> hit;
  for (std::int32_t id : e.candidate) {
    if (topical.contains(id)) hit.insert(id);
  }
  return hit.size();
}

inline int synthetic_rule_label(const RankingExample& e, const SyntheticConfig& cfg) {
  return shared_topic_tokens(e, cfg) >= cfg.min_shared ? 1 : 0;
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Dataset ds;
  ds.reserve(cfg.n_questions);
  const int width = static_cast<int>(std::to_string(cfg.n_questions).size());
  for (std::size_t q = 0; q < cfg.n_questions; ++q) {
    std::string qid = std::to_string(q + 1);
    qid = "q" + std::string(static_cast<std::size_t>(width) - qid.size(), '0') + qid;

    const std::size_t topic = rng.below(cfg.n_topics);
    const auto own = detail::topic_tokens(cfg, topic);
    std::set<std::int32_t> question_filler;
    while (question_filler.size() < cfg.question_filler) {
      question_filler.insert(detail::fresh_filler(cfg, question_filler, rng));
    }
    std::vector<std::int32_t> question(own);
    question.insert(question.end(), question_filler.begin(), question_filler.end());
    detail::shuffle(question, rng);
    const std::vector<std::int32_t> filler_pool(question_filler.begin(), question_filler.end());

    std::vector<int> labels(cfg.cands_per_q, 0);
    std::fill_n(labels.begin(), cfg.positives_per_q, 1);
    detail::shuffle(labels, rng);

    QuestionGroup group{qid, {}};
    for (int label : labels) {
      std::vector<std::int32_t> cand;
      const std::size_t spread = cfg.topic_size - cfg.min_shared + 1;
      if (label) {
        const std::size_t shared = cfg.min_shared + rng.below(spread);
        cand = detail::sample_without_replacement(own, shared, rng);
      } else {
        const std::size_t shared = rng.below(cfg.min_shared);
        cand = detail::sample_without_replacement(own, shared, rng);
        std::size_t other = rng.below(cfg.n_topics - 1);
        if (other >= topic) ++other;
        const std::size_t borrowed = cfg.min_shared + rng.below(spread);
        const auto foreign = detail::sample_without_replacement(
            detail::topic_tokens(cfg, other), borrowed, rng);
        cand.insert(cand.end(), foreign.begin(), foreign.end());
      }
      while (cand.size() < cfg.candidate_len) {
        if (!filler_pool.empty() && rng.uniform() < cfg.noise) {
          cand.push_back(filler_pool[rng.below(filler_pool.size())]);
        } else {
          cand.push_back(detail::fresh_filler(cfg, question_filler, rng));
        }
      }
      detail::shuffle(cand, rng);
      group.examples.push_back({qid, question, std::move(cand), label});
    }
    ds.push_back(std::move(group));
  }
  return ds;
}

struct Splits {
  Dataset train;
  Dataset dev;
  Dataset test;
};

/// Splits by question. Fractions must sum to 1; any split with a positive
/// fraction must receive at least one question.
inline Splits split(const Dataset& ds, double train_fraction, double dev_fraction,
                    double test_fraction, std::uint64_t seed) {
  const double fractions[] = {train_fraction, dev_fraction, test_fraction};
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
  }
  if (std::abs(train_fraction + dev_fraction + test_fraction - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  detail::shuffle(order, rng);
  const auto count = [n](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  std::size_t n_train = std::min(count(train_fraction), n);
  std::size_t n_dev = std::min(count(dev_fraction), n - n_train);
  if (test_fraction == 0.0) {
    // Rounding leftovers go to the last split that accepts data.
    if (dev_fraction > 0.0) {
      n_dev = n - n_train;
    } else {
      n_train = n;
      n_dev = 0;
    }
  }
  const std::size_t n_test = n - n_train - n_dev;
  const std::size_t counts[] = {n_train, n_dev, n_test};
  const char* names[] = {"train", "dev", "test"};
  for (int i = 0; i < 3; ++i) {
    if (fractions[i] > 0.0 && counts[i] == 0) {
      throw ConfigError(std::string(names[i]) + " split receives no question");
    }
  }
  std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                             order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  std::vector<std::size_t> c(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev),
                             order.end());
  Splits out;
  for (auto [idx, dst] : {std::pair{&a, &out.train}, std::pair{&b, &out.dev},
                          std::pair{&c, &out.test}}) {
    std::sort(idx->begin(), idx->end());
    for (std::size_t i : *idx) dst->push_back(ds[i]);
  }
  return out;
}

}  // namespace cascade::data
