#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "ufit/corpus.hpp"

using namespace ufit;
namespace fs = std::filesystem;

namespace {

Dataset tiny(const std::vector<std::string>& texts) {
  Dataset d;
  d.num_classes = 2;
  d.campaign_order = {"c0"};
  for (size_t i = 0; i < texts.size(); ++i)
    d.samples.push_back(Sample{texts[i], static_cast<int>(i % 2), "c0", 0});
  return d;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("ufit_corpus_" + name);
}

}  // namespace

TEST_CASE("build_vocab keeps words at min_freq and orders by frequency then word", "[corpus]") {
  const Dataset d = tiny({"a a b", "a c"});
  const Vocabulary v2 = build_vocab(d, 2);
  CHECK(v2.size() == Vocabulary::kFirstWord + 1);
  CHECK(v2.id("a") == Vocabulary::kFirstWord);
  CHECK(v2.id("b") == Vocabulary::kUnknown);
  CHECK(v2.id("c") == Vocabulary::kUnknown);

  const Vocabulary v1 = build_vocab(d, 1);
  CHECK(v1.size() == Vocabulary::kFirstWord + 3);
  CHECK(v1.id("a") == Vocabulary::kFirstWord);      // freq 3
  CHECK(v1.id("b") == Vocabulary::kFirstWord + 1);  // freq 1, 'b' < 'c'
  CHECK(v1.id("c") == Vocabulary::kFirstWord + 2);
}

TEST_CASE("build_vocab rejects an empty dataset", "[corpus]") {
  CHECK_THROWS_AS(build_vocab(Dataset{}, 1), std::invalid_argument);
}

TEST_CASE("tokenize lowercases, splits punctuation, maps OOV", "[corpus]") {
  const Dataset d = tiny({"covid is fake zzz"});
  const Vocabulary v = build_vocab(d, 1);

  const TokenSeq t = tokenize("COVID is FAKE!", v);
  REQUIRE(t.length() == 4);
  CHECK(t.ids[0] == Vocabulary::kCls);
  CHECK(t.ids[1] == v.id("covid"));
  CHECK(t.ids[2] == v.id("is"));
  CHECK(t.ids[3] == v.id("fake"));

  const TokenSeq unk = tokenize("qqq-unknown", v);
  REQUIRE(unk.length() == 3);  // hyphen splits into two words
  CHECK(unk.ids[1] == Vocabulary::kUnknown);
  CHECK(unk.ids[2] == Vocabulary::kUnknown);

  const TokenSeq empty = tokenize("", v);
  REQUIRE(empty.length() == 1);
  CHECK(empty.ids[0] == Vocabulary::kCls);
}

TEST_CASE("tokenize truncates to max length and is idempotent on clean text", "[corpus]") {
  const Dataset d = tiny({"w0 w1 w2 w3 w4 w5 w6 w7"});
  const Vocabulary v = build_vocab(d, 1);
  const TokenSeq t = tokenize("w0 w1 w2 w3 w4 w5 w6 w7", v, 4);
  CHECK(t.length() == 4);

  // rebuilding the text from tokens and re-tokenizing is a fixed point
  std::string rebuilt;
  for (int i = 1; i < t.length(); ++i) {
    if (i > 1) rebuilt += ' ';
    rebuilt += v.word(t.ids[static_cast<size_t>(i)]);
  }
  CHECK(tokenize(rebuilt, v, 4).ids == t.ids);
}

TEST_CASE("synthetic generation is balanced, tagged, and seeded", "[corpus]") {
  SynthConfig cfg = default_synth_config(3, 200, 11);
  const Dataset a = generate_synthetic_campaigns(cfg);
  const Dataset b = generate_synthetic_campaigns(cfg);
  CHECK(a == b);

  CHECK(a.samples.size() == 600);
  CHECK(a.campaign_order.size() == 3);
  CHECK(a.num_classes == 2);
  std::map<std::string, std::map<int, int>> counts;
  for (const auto& s : a.samples) counts[s.campaign][s.label]++;
  for (const auto& [tag, by_label] : counts) {
    CHECK(by_label.at(0) == 100);
    CHECK(by_label.at(1) == 100);
  }
}

TEST_CASE("strong keywords never leak across campaigns", "[corpus]") {
  SynthConfig cfg = default_synth_config(3, 150, 5);
  const Dataset d = generate_synthetic_campaigns(cfg);
  for (int c = 0; c < cfg.num_campaigns; ++c) {
    std::set<std::string> own;
    for (const auto& words : cfg.strong_keywords[static_cast<size_t>(c)])
      own.insert(words.begin(), words.end());
    for (const auto& s : d.samples) {
      if (s.campaign == d.campaign_order[static_cast<size_t>(c)]) continue;
      for (const auto& kw : own)
        CHECK(s.text.find(kw) == std::string::npos);
    }
  }
}

TEST_CASE("overlapping strong keyword sets are rejected", "[corpus]") {
  SynthConfig cfg = default_synth_config(2, 10, 1);
  cfg.strong_keywords[1][0] = cfg.strong_keywords[0][0];
  CHECK_THROWS_AS(generate_synthetic_campaigns(cfg), std::invalid_argument);
}

TEST_CASE("split_incremental partitions campaigns", "[corpus]") {
  const Dataset d = generate_synthetic_campaigns(default_synth_config(4, 40, 3));
  const auto s1 = split_incremental(d, 1);
  CHECK(s1.train.campaign_order == std::vector<std::string>{"campaign0", "campaign1"});
  CHECK(s1.test.campaign_order == std::vector<std::string>{"campaign2"});
  CHECK(s1.train.samples.size() == 80);
  CHECK(s1.test.samples.size() == 40);

  const auto s0 = split_incremental(d, 0);
  CHECK(s0.train.campaign_order == std::vector<std::string>{"campaign0"});
  CHECK(s0.test.campaign_order == std::vector<std::string>{"campaign1"});

  CHECK_THROWS_AS(split_incremental(d, 3), std::invalid_argument);
  CHECK_THROWS_AS(split_incremental(d, -1), std::invalid_argument);

  // no campaign tag appears on both sides; test holds exactly one tag
  std::set<std::string> train_tags, test_tags;
  for (const auto& s : s1.train.samples) train_tags.insert(s.campaign);
  for (const auto& s : s1.test.samples) test_tags.insert(s.campaign);
  CHECK(test_tags.size() == 1);
  for (const auto& tag : test_tags) CHECK_FALSE(train_tags.count(tag));
}

TEST_CASE("jsonl round-trip is the identity", "[corpus]") {
  const Dataset d = generate_synthetic_campaigns(default_synth_config(3, 30, 17));
  const auto path = temp_file("roundtrip.jsonl");
  save_jsonl(d, path.string());
  const Dataset back = load_jsonl(path.string());
  CHECK(back == d);
  fs::remove(path);
}

TEST_CASE("jsonl loader reports line numbers and field names", "[corpus]") {
  const auto path = temp_file("bad.jsonl");
  {
    std::ofstream out(path);
    out << R"({"text":"ok","label":0,"campaign":"c","position":0})" << "\n";
    out << R"({"text":"missing","campaign":"c","position":0})" << "\n";
  }
  try {
    load_jsonl(path.string());
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find(":2") != std::string::npos);
    CHECK(msg.find("label") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("jsonl loader infers classes as max label + 1", "[corpus]") {
  const auto path = temp_file("labels.jsonl");
  {
    std::ofstream out(path);
    out << R"({"text":"a","label":0,"campaign":"c","position":0})" << "\n";
    out << R"({"text":"b","label":1,"campaign":"c","position":0})" << "\n";
  }
  CHECK(load_jsonl(path.string()).num_classes == 2);
  fs::remove(path);
}
