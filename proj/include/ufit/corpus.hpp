#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ufit/common.hpp"

namespace ufit {

struct Sample {
  std::string text;
  int label = 0;
  std::string campaign;
  long position = 0;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 0;
  std::vector<std::string> campaign_order;

  bool operator==(const Dataset&) const = default;
  size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

// Word-level vocabulary with fixed reserved ids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;
  static constexpr int kCls = 2;
  static constexpr int kMask = 3;
  static constexpr int kFirstWord = 4;

  Vocabulary() : id_to_word_{"<pad>", "<unk>", "<cls>", "<mask>"} {}

  int add_word(const std::string& w) {
    const int id = static_cast<int>(id_to_word_.size());
    id_to_word_.push_back(w);
    word_to_id_.emplace(w, id);
    return id;
  }

  int id(const std::string& w) const {
    auto it = word_to_id_.find(w);
    return it == word_to_id_.end() ? kUnknown : it->second;
  }

  const std::string& word(int id) const { return id_to_word_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(id_to_word_.size()); }
  static bool reserved(int id) { return id < kFirstWord; }

  uint64_t hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& w : id_to_word_) {
      h = fnv1a64(w, h);
      h = fnv1a64(std::string_view("\n"), h);
    }
    return h;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
    for (const auto& w : id_to_word_) out << w << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    int idx = 0;
    while (std::getline(in, line)) {
      if (idx < kFirstWord) {
        if (line != v.id_to_word_[static_cast<size_t>(idx)])
          throw std::runtime_error("vocabulary file corrupt: bad reserved token at line " +
                                   std::to_string(idx + 1));
      } else {
        v.add_word(line);
      }
      ++idx;
    }
    return v;
  }

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
};

struct TokenSeq {
  std::vector<int> ids;  // first is always CLS

  int length() const { return static_cast<int>(ids.size()); }
  bool operator==(const TokenSeq&) const = default;
};

namespace detail {

inline bool is_split_char(char32_t cp) {
  if (cp < 128) {
    const auto ch = static_cast<unsigned char>(cp);
    return std::isspace(ch) || std::ispunct(ch);
  }
  // common non-ASCII whitespace
  switch (cp) {
    case 0x00A0: case 0x1680: case 0x2028: case 0x2029: case 0x202F:
    case 0x205F: case 0x3000: case 0x200B:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

// Decode one UTF-8 code point; malformed bytes are kept as-is (latin-1 style).
inline char32_t next_codepoint(const std::string& s, size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) { ++i; return b0; }
  int len = b0 >= 0xF0 ? 4 : b0 >= 0xE0 ? 3 : b0 >= 0xC0 ? 2 : 1;
  if (i + static_cast<size_t>(len) > s.size()) len = 1;
  if (len == 1) { ++i; return b0; }
  char32_t cp = b0 & (0x7F >> len);
  for (int k = 1; k < len; ++k) {
    const auto bk = static_cast<unsigned char>(s[i + static_cast<size_t>(k)]);
    if ((bk & 0xC0) != 0x80) { ++i; return b0; }
    cp = (cp << 6) | (bk & 0x3F);
  }
  i += static_cast<size_t>(len);
  return cp;
}

template <typename F>
void for_each_word(const std::string& text, F&& fn) {
  std::string word;
  size_t i = 0;
  while (i < text.size()) {
    const size_t start = i;
    const char32_t cp = next_codepoint(text, i);
    if (is_split_char(cp)) {
      if (!word.empty()) { fn(word); word.clear(); }
    } else {
      for (size_t k = start; k < i; ++k) {
        char ch = text[k];
        if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
        word.push_back(ch);
      }
    }
  }
  if (!word.empty()) fn(word);
}

}  // namespace detail

inline Vocabulary build_vocab(const Dataset& data, long min_freq) {
  if (data.empty()) throw std::invalid_argument("build_vocab: empty dataset");
  std::unordered_map<std::string, long> freq;
  for (const auto& s : data.samples)
    detail::for_each_word(s.text, [&](const std::string& w) { ++freq[w]; });

  std::vector<std::pair<std::string, long>> kept;
  for (const auto& [w, f] : freq)
    if (f >= min_freq) kept.emplace_back(w, f);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const auto& [w, f] : kept) v.add_word(w);
  return v;
}

inline TokenSeq tokenize(const std::string& text, const Vocabulary& vocab, int max_len = 64) {
  TokenSeq seq;
  seq.ids.push_back(Vocabulary::kCls);
  detail::for_each_word(text, [&](const std::string& w) {
    if (seq.length() < max_len) seq.ids.push_back(vocab.id(w));
  });
  return seq;
}

// ---------------------------------------------------------------------------
// Synthetic campaign generator
// ---------------------------------------------------------------------------

struct SynthConfig {
  int num_campaigns = 3;
  int samples_per_campaign = 400;
  int num_classes = 2;
  // strong_keywords[campaign][class] -> campaign-specific signal words
  std::vector<std::vector<std::vector<std::string>>> strong_keywords;
  // weak_pools[class] -> class-correlated words shared by every campaign
  std::vector<std::vector<std::string>> weak_pools;
  std::vector<std::string> noise_pool;
  double strong_prob = 0.9;
  double weak_prob = 0.6;
  int weak_slots = 2;
  int len_min = 8;
  int len_max = 18;
  uint64_t seed = 0;
};

// Fills keyword/pool defaults for the given campaign x class grid.
inline SynthConfig default_synth_config(int campaigns, int per_campaign, uint64_t seed,
                                        int classes = 2) {
  SynthConfig cfg;
  cfg.num_campaigns = campaigns;
  cfg.samples_per_campaign = per_campaign;
  cfg.num_classes = classes;
  cfg.seed = seed;
  for (int c = 0; c < campaigns; ++c) {
    std::vector<std::vector<std::string>> per_class;
    for (int y = 0; y < classes; ++y)
      per_class.push_back({"signal" + std::to_string(c) + "x" + std::to_string(y)});
    cfg.strong_keywords.push_back(std::move(per_class));
  }
  for (int y = 0; y < classes; ++y) {
    std::vector<std::string> pool;
    for (int i = 0; i < 6; ++i)
      pool.push_back("theme" + std::to_string(y) + "w" + std::to_string(i));
    cfg.weak_pools.push_back(std::move(pool));
  }
  for (int i = 0; i < 120; ++i) cfg.noise_pool.push_back("filler" + std::to_string(i));
  return cfg;
}

inline void validate(const SynthConfig& cfg) {
  if (cfg.num_campaigns < 1 || cfg.samples_per_campaign < 1)
    throw std::invalid_argument("synth config: campaigns and samples must be positive");
  if (cfg.num_classes < 2) throw std::invalid_argument("synth config: num_classes must be >= 2");
  if (static_cast<int>(cfg.strong_keywords.size()) != cfg.num_campaigns)
    throw std::invalid_argument("synth config: strong_keywords must list every campaign");
  if (static_cast<int>(cfg.weak_pools.size()) != cfg.num_classes)
    throw std::invalid_argument("synth config: weak_pools must list every class");
  if (cfg.noise_pool.empty()) throw std::invalid_argument("synth config: noise_pool empty");
  if (cfg.len_min < 3 || cfg.len_max < cfg.len_min)
    throw std::invalid_argument("synth config: bad sentence length range");

  // strong-signal sets must be pairwise disjoint across campaigns
  std::vector<std::set<std::string>> per_campaign;
  for (const auto& classes : cfg.strong_keywords) {
    std::set<std::string> merged;
    for (const auto& words : classes) merged.insert(words.begin(), words.end());
    per_campaign.push_back(std::move(merged));
  }
  for (size_t a = 0; a < per_campaign.size(); ++a)
    for (size_t b = a + 1; b < per_campaign.size(); ++b)
      for (const auto& w : per_campaign[a])
        if (per_campaign[b].count(w))
          throw std::invalid_argument("synth config: strong keyword '" + w +
                                      "' shared by campaigns " + std::to_string(a) + " and " +
                                      std::to_string(b));
}

inline Dataset generate_synthetic_campaigns(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  Dataset data;
  data.num_classes = cfg.num_classes;

  for (int c = 0; c < cfg.num_campaigns; ++c) {
    const std::string tag = "campaign" + std::to_string(c);
    data.campaign_order.push_back(tag);

    // balanced labels, shuffled within the campaign
    std::vector<int> labels;
    for (int s = 0; s < cfg.samples_per_campaign; ++s)
      labels.push_back(s % cfg.num_classes);
    rng.shuffle(labels);

    for (int s = 0; s < cfg.samples_per_campaign; ++s) {
      const int y = labels[static_cast<size_t>(s)];
      const int len = cfg.len_min + rng.uniform_int(cfg.len_max - cfg.len_min + 1);
      std::vector<std::string> words(static_cast<size_t>(len));
      for (auto& w : words)
        w = cfg.noise_pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(cfg.noise_pool.size())))];

      std::vector<char> taken(static_cast<size_t>(len), 0);
      auto plant = [&](const std::string& w) {
        std::vector<int> free;
        for (int j = 0; j < len; ++j)
          if (!taken[static_cast<size_t>(j)]) free.push_back(j);
        if (free.empty()) return;
        const int pos = free[static_cast<size_t>(rng.uniform_int(static_cast<int>(free.size())))];
        words[static_cast<size_t>(pos)] = w;
        taken[static_cast<size_t>(pos)] = 1;
      };

      for (const auto& kw : cfg.strong_keywords[static_cast<size_t>(c)][static_cast<size_t>(y)])
        if (rng.uniform() < cfg.strong_prob) plant(kw);
      const auto& pool = cfg.weak_pools[static_cast<size_t>(y)];
      for (int slot = 0; slot < cfg.weak_slots; ++slot)
        if (rng.uniform() < cfg.weak_prob)
          plant(pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);

      std::string text;
      for (size_t j = 0; j < words.size(); ++j) {
        if (j) text += ' ';
        text += words[j];
      }
      data.samples.push_back(Sample{std::move(text), y, tag, c});
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Limited incremental split: train on campaigns 0..k, test on k+1 only.
// ---------------------------------------------------------------------------

struct IncrementalSplit {
  Dataset train;
  Dataset test;
};

inline Dataset subset_by_campaigns(const Dataset& data, const std::vector<std::string>& tags) {
  Dataset out;
  out.num_classes = data.num_classes;
  out.campaign_order = tags;
  std::set<std::string> keep(tags.begin(), tags.end());
  for (const auto& s : data.samples)
    if (keep.count(s.campaign)) out.samples.push_back(s);
  return out;
}

inline IncrementalSplit split_incremental(const Dataset& data, int k) {
  const int n = static_cast<int>(data.campaign_order.size());
  if (k < 0 || k + 1 >= n)
    throw std::invalid_argument("split_incremental: k=" + std::to_string(k) +
                                " out of range for " + std::to_string(n) + " campaigns");
  std::vector<std::string> train_tags(data.campaign_order.begin(),
                                      data.campaign_order.begin() + k + 1);
  std::vector<std::string> test_tags{data.campaign_order[static_cast<size_t>(k + 1)]};
  return IncrementalSplit{subset_by_campaigns(data, train_tags),
                          subset_by_campaigns(data, test_tags)};
}

// ---------------------------------------------------------------------------
// JSONL dataset files: one object per line with text, label, campaign, position.
// ---------------------------------------------------------------------------

inline void save_jsonl(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  for (const auto& s : data.samples) {
    nlohmann::ordered_json j;
    j["text"] = s.text;
    j["label"] = s.label;
    j["campaign"] = s.campaign;
    j["position"] = s.position;
    out << j.dump() << '\n';
  }
}

inline Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset file: " + path);
  Dataset data;
  std::string line;
  long line_no = 0;

  struct CampaignMeta {
    long min_pos;
    size_t first_seen;
  };
  std::map<std::string, CampaignMeta> campaigns;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed JSON: " + e.what());
    }
    auto need = [&](const char* field) -> const nlohmann::json& {
      if (!j.contains(field))
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": missing field '" + field + "'");
      return j.at(field);
    };
    Sample s;
    const auto& jt = need("text");
    if (!jt.is_string())
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": field 'text' must be a string");
    s.text = jt.get<std::string>();
    const auto& jl = need("label");
    if (!jl.is_number_integer() || jl.get<long>() < 0)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": field 'label' must be a non-negative integer");
    s.label = jl.get<int>();
    const auto& jc = need("campaign");
    if (!jc.is_string())
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": field 'campaign' must be a string");
    s.campaign = jc.get<std::string>();
    const auto& jp = need("position");
    if (!jp.is_number_integer() || jp.get<long>() < 0)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": field 'position' must be a non-negative integer");
    s.position = jp.get<long>();

    std::string trimmed = s.text;
    trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
    if (trimmed.empty())
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": field 'text' is empty");

    data.num_classes = std::max(data.num_classes, s.label + 1);
    auto [it, inserted] = campaigns.try_emplace(s.campaign, CampaignMeta{s.position, data.samples.size()});
    if (!inserted) it->second.min_pos = std::min(it->second.min_pos, s.position);
    data.samples.push_back(std::move(s));
  }
  if (data.samples.empty()) throw std::runtime_error(path + ": dataset file has no records");
  if (data.num_classes < 2)
    throw std::runtime_error(path + ": dataset must contain at least 2 label classes");

  std::vector<std::pair<CampaignMeta, std::string>> order;
  for (const auto& [tag, meta] : campaigns) order.emplace_back(meta, tag);
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.first.min_pos != b.first.min_pos) return a.first.min_pos < b.first.min_pos;
    return a.first.first_seen < b.first.first_seen;
  });
  for (auto& [meta, tag] : order) data.campaign_order.push_back(std::move(tag));
  return data;
}

// SynthConfig file: flat JSON object, documented in the README.
inline SynthConfig load_synth_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": malformed JSON: " + std::string(e.what()));
  }
  if (!j.contains("seed")) throw std::runtime_error(path + ": missing key 'seed'");

  SynthConfig cfg = default_synth_config(j.value("num_campaigns", 3),
                                         j.value("samples_per_campaign", 400),
                                         j.at("seed").get<uint64_t>(),
                                         j.value("num_classes", 2));
  if (j.contains("strong_keywords"))
    cfg.strong_keywords = j.at("strong_keywords").get<std::vector<std::vector<std::vector<std::string>>>>();
  if (j.contains("weak_pools"))
    cfg.weak_pools = j.at("weak_pools").get<std::vector<std::vector<std::string>>>();
  if (j.contains("noise_pool"))
    cfg.noise_pool = j.at("noise_pool").get<std::vector<std::string>>();
  cfg.strong_prob = j.value("strong_prob", cfg.strong_prob);
  cfg.weak_prob = j.value("weak_prob", cfg.weak_prob);
  cfg.weak_slots = j.value("weak_slots", cfg.weak_slots);
  cfg.len_min = j.value("len_min", cfg.len_min);
  cfg.len_max = j.value("len_max", cfg.len_max);
  return cfg;
}

}  // namespace ufit
