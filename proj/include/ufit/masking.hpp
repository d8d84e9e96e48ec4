#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ufit/common.hpp"
#include "ufit/corpus.hpp"
#include "ufit/stopwords.hpp"

namespace ufit {

// Sigmoid length temperature: dampens short samples, emphasizes long ones.
inline double temperature(double length, double tau_hat) {
  if (length < 1 || tau_hat < 1)
    throw std::invalid_argument("temperature: length and tau_hat must be >= 1");
  return 1.0 / (1.0 + std::exp(-(length - tau_hat) / std::sqrt(tau_hat)));
}

// Median sample length of a proxy's members.
inline double median_length(const std::vector<int>& lengths) {
  if (lengths.empty()) throw std::invalid_argument("median_length: no lengths");
  std::vector<int> v = lengths;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TemperatureStats {
  std::map<int, double> tau_hat;  // proxy id -> median member length
};

struct ScoredWord {
  std::string word;
  double score = 0;

  bool operator==(const ScoredWord&) const = default;
};

struct WordScoreOptions {
  int min_word_len = 3;
  bool exclude_stopwords = true;
};

// Length-tempered attention mass per word, summed over the member samples.
// Token attentions must already be softmax-normalized per sample.
inline std::vector<ScoredWord> word_attention_scores(const std::vector<TokenSeq>& members,
                                                     const std::vector<Vec>& attentions,
                                                     double tau_hat, const Vocabulary& vocab,
                                                     const WordScoreOptions& opt = {}) {
  if (members.size() != attentions.size())
    throw std::invalid_argument("word_attention_scores: one attention vector per member required");
  std::map<std::string, double> score;
  for (size_t i = 0; i < members.size(); ++i) {
    const auto& seq = members[i];
    const Vec& attn = attentions[i];
    if (attn.size() != seq.length())
      throw std::invalid_argument("word_attention_scores: attention length mismatch");
    const double tau = temperature(seq.length(), tau_hat);
    for (int j = 0; j < seq.length(); ++j) {
      const int id = seq.ids[static_cast<size_t>(j)];
      if (Vocabulary::reserved(id)) continue;
      const std::string& w = vocab.word(id);
      if (static_cast<int>(w.size()) < opt.min_word_len) continue;
      if (opt.exclude_stopwords && stopwords().count(w)) continue;
      score[w] += tau * attn(j);
    }
  }
  std::vector<ScoredWord> ranked;
  ranked.reserve(score.size());
  for (const auto& [w, s] : score) ranked.push_back(ScoredWord{w, s});
  std::stable_sort(ranked.begin(), ranked.end(), [](const ScoredWord& a, const ScoredWord& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.word < b.word;
  });
  return ranked;
}

struct KeywordTable {
  // proxy id -> ranked top-k (word, score)
  std::map<int, std::vector<ScoredWord>> per_proxy;
  // proxy id -> label class
  std::map<int, int> proxy_class;
  // label class -> union of its proxies' top-1 keywords
  std::map<int, std::set<std::string>> class_keywords;

  std::set<std::string> all_keywords() const {
    std::set<std::string> all;
    for (const auto& [cls, words] : class_keywords) all.insert(words.begin(), words.end());
    return all;
  }
  bool empty() const {
    for (const auto& [cls, words] : class_keywords)
      if (!words.empty()) return false;
    return true;
  }
};

// Class mask set = union over the class's proxies of each proxy's top-1 word.
inline KeywordTable aggregate_keywords(const std::map<int, std::vector<ScoredWord>>& proxy_scores,
                                       const std::map<int, int>& proxy_class, int top_k = 10) {
  KeywordTable table;
  table.proxy_class = proxy_class;
  for (const auto& [pid, ranked] : proxy_scores) {
    auto top = ranked;
    if (static_cast<int>(top.size()) > top_k) top.resize(static_cast<size_t>(top_k));
    table.per_proxy[pid] = std::move(top);
    const int cls = proxy_class.at(pid);
    table.class_keywords.try_emplace(cls);
    if (!ranked.empty()) table.class_keywords[cls].insert(ranked[0].word);
  }
  return table;
}

inline std::unordered_set<int> keyword_token_ids(const std::set<std::string>& words,
                                                 const Vocabulary& vocab) {
  std::unordered_set<int> ids;
  for (const auto& w : words) {
    const int id = vocab.id(w);
    if (!Vocabulary::reserved(id)) ids.insert(id);
  }
  return ids;
}

struct MaskedSample {
  TokenSeq tokens;
  std::vector<int> positions;  // ascending
  std::vector<int> truth;      // original ids at positions
};

// Masks every keyword occurrence, then random extra positions until the
// masked fraction reaches p_mlm (overshoot at most one token).
inline MaskedSample semantic_mask(const TokenSeq& seq, const std::unordered_set<int>& keyword_ids,
                                  double p_mlm, Rng& rng) {
  MaskedSample out;
  out.tokens = seq;
  const int n = seq.length();
  std::vector<int> candidates;
  for (int j = 1; j < n; ++j) {
    if (keyword_ids.count(seq.ids[static_cast<size_t>(j)])) {
      out.positions.push_back(j);
    } else {
      candidates.push_back(j);
    }
  }
  rng.shuffle(candidates);
  size_t next = 0;
  while (static_cast<double>(out.positions.size()) / n < p_mlm && next < candidates.size())
    out.positions.push_back(candidates[next++]);

  std::sort(out.positions.begin(), out.positions.end());
  for (int pos : out.positions) {
    out.truth.push_back(seq.ids[static_cast<size_t>(pos)]);
    out.tokens.ids[static_cast<size_t>(pos)] = Vocabulary::kMask;
  }
  return out;
}

// Masks everything except keywords (and CLS).
inline TokenSeq context_mask(const TokenSeq& seq, const std::unordered_set<int>& keyword_ids) {
  TokenSeq out = seq;
  for (int j = 1; j < seq.length(); ++j)
    if (!keyword_ids.count(seq.ids[static_cast<size_t>(j)]))
      out.ids[static_cast<size_t>(j)] = Vocabulary::kMask;
  return out;
}

// ---------------------------------------------------------------------------
// Exports: TSV of ranked keywords, JSON of per-class mask sets.
// ---------------------------------------------------------------------------

inline void save_keyword_tsv(const KeywordTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write keyword file: " + path);
  out << "proxy\tclass\trank\tword\tscore\n";
  char buf[64];
  for (const auto& [pid, ranked] : table.per_proxy) {
    int rank = 1;
    for (const auto& sw : ranked) {
      std::snprintf(buf, sizeof(buf), "%.17g", sw.score);
      out << pid << '\t' << table.proxy_class.at(pid) << '\t' << rank++ << '\t' << sw.word
          << '\t' << buf << '\n';
    }
  }
}

inline void save_mask_sets(const KeywordTable& table, const std::string& path) {
  nlohmann::ordered_json j;
  for (const auto& [cls, words] : table.class_keywords)
    j[std::to_string(cls)] = std::vector<std::string>(words.begin(), words.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write mask set file: " + path);
  out << j.dump(2) << '\n';
}

inline nlohmann::ordered_json keyword_table_to_json(const KeywordTable& table) {
  nlohmann::ordered_json j;
  auto& proxies = j["per_proxy"] = nlohmann::ordered_json::array();
  for (const auto& [pid, ranked] : table.per_proxy) {
    nlohmann::ordered_json pj;
    pj["proxy"] = pid;
    pj["class"] = table.proxy_class.at(pid);
    auto& words = pj["words"] = nlohmann::ordered_json::array();
    for (const auto& sw : ranked) words.push_back({{"word", sw.word}, {"score", sw.score}});
    proxies.push_back(std::move(pj));
  }
  auto& classes = j["class_keywords"] = nlohmann::ordered_json::object();
  for (const auto& [cls, wordset] : table.class_keywords)
    classes[std::to_string(cls)] = std::vector<std::string>(wordset.begin(), wordset.end());
  return j;
}

inline KeywordTable keyword_table_from_json(const nlohmann::json& j) {
  KeywordTable table;
  for (const auto& pj : j.at("per_proxy")) {
    const int pid = pj.at("proxy").get<int>();
    table.proxy_class[pid] = pj.at("class").get<int>();
    std::vector<ScoredWord> ranked;
    for (const auto& wj : pj.at("words"))
      ranked.push_back(ScoredWord{wj.at("word").get<std::string>(), wj.at("score").get<double>()});
    table.per_proxy[pid] = std::move(ranked);
  }
  for (const auto& [cls, words] : j.at("class_keywords").items()) {
    auto& set = table.class_keywords[std::stoi(cls)];
    for (const auto& w : words) set.insert(w.get<std::string>());
  }
  return table;
}

}  // namespace ufit
