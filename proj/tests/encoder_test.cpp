#include <catch2/catch_amalgamated.hpp>

#include "ufit/encoder.hpp"

using namespace ufit;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.num_blocks = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 16;
  return cfg;
}

ModelParams small_model(uint64_t seed, int vocab = 30, int classes = 2) {
  Rng rng(seed);
  return ModelParams::init(small_cfg(), vocab, classes, {1, 1}, rng);
}

TokenSeq seq_of(std::initializer_list<int> ids) {
  TokenSeq s;
  s.ids.assign(ids);
  return s;
}

}  // namespace

TEST_CASE("token attentions are a probability distribution", "[encoder]") {
  const ModelParams p = small_model(1);
  for (int len = 1; len <= 6; ++len) {
    TokenSeq s;
    s.ids.push_back(Vocabulary::kCls);
    for (int j = 1; j < len; ++j) s.ids.push_back(4 + j);
    const EncoderOutput out = forward_sample(p, s);
    REQUIRE(out.token_attention.size() == len);
    CHECK(out.token_attention.minCoeff() >= 0.0);
    CHECK(out.token_attention.sum() == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("forward of a batch equals per-sample forward", "[encoder]") {
  const ModelParams p = small_model(2);
  std::vector<TokenSeq> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(seq_of({2, 4 + i, 5, 6 + i}));
  const auto outs = forward(p, batch);
  const EncoderOutput solo = forward_sample(p, batch[3]);
  CHECK((outs[3].pooled - solo.pooled).norm() == 0.0);
  CHECK((outs[3].class_logits - solo.class_logits).norm() == 0.0);
}

TEST_CASE("zeroed attention projections give uniform token attention", "[encoder]") {
  ModelParams p = small_model(3);
  for (auto& b : p.blocks) {
    b.wq.setZero();
    b.wk.setZero();
  }
  const TokenSeq s = seq_of({2, 5, 6, 7, 8});
  const EncoderOutput out = forward_sample(p, s);
  for (int j = 0; j < out.token_attention.size(); ++j)
    CHECK(out.token_attention(j) == Catch::Approx(1.0 / 5.0).margin(1e-12));
}

TEST_CASE("embed equals the pooled forward output", "[encoder]") {
  const ModelParams p = small_model(4);
  const TokenSeq s = seq_of({2, 9, 10, 11});
  CHECK((embed(p, s) - forward_sample(p, s).pooled).norm() == 0.0);
  CHECK(embed(p, s).size() == p.cfg.d_model);
  CHECK((embed(p, s) - embed(p, s)).norm() == 0.0);
}

TEST_CASE("batch order permutation permutes outputs identically", "[encoder]") {
  const ModelParams p = small_model(5);
  std::vector<TokenSeq> batch{seq_of({2, 4, 5}), seq_of({2, 6}), seq_of({2, 7, 8, 9})};
  std::vector<TokenSeq> rev(batch.rbegin(), batch.rend());
  const auto a = forward(p, batch);
  const auto b = forward(p, rev);
  for (size_t i = 0; i < batch.size(); ++i)
    CHECK((a[i].pooled - b[batch.size() - 1 - i].pooled).norm() == 0.0);
}

TEST_CASE("forward validates inputs", "[encoder]") {
  const ModelParams p = small_model(6);
  TokenSeq too_long;
  too_long.ids.assign(17, 4);
  CHECK_THROWS_AS(forward_sample(p, too_long), std::invalid_argument);
  CHECK_THROWS_AS(forward_sample(p, seq_of({2, 99})), std::invalid_argument);
  CHECK_THROWS_AS(forward_sample(p, TokenSeq{}), std::invalid_argument);
}

TEST_CASE("masked positions produce mlm logits rows", "[encoder]") {
  const ModelParams p = small_model(7);
  const TokenSeq s = seq_of({2, 3, 5, 3});
  const EncoderOutput out = forward_sample(p, s, {1, 3});
  REQUIRE(out.mlm_logits.rows() == 2);
  CHECK(out.mlm_logits.cols() == p.vocab_size);
}
