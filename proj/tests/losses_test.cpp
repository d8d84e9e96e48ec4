#include <catch2/catch_amalgamated.hpp>

#include "ufit/losses.hpp"

using namespace ufit;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<long>(xs.size()));
  long i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Vec random_simplex(Rng& rng, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = -std::log(std::max(rng.uniform(), 1e-12));
  return v / v.sum();
}

}  // namespace

TEST_CASE("mlm loss: one-hot limit, uniform value, empty convention", "[losses]") {
  Mat confident(1, 100);
  confident.setConstant(-1000.0);
  confident(0, 7) = 1000.0;
  CHECK(mlm_loss(confident, {7}) == Catch::Approx(0.0).margin(1e-12));

  Mat uniform = Mat::Zero(1, 100);
  CHECK(mlm_loss(uniform, {13}) == Catch::Approx(std::log(100.0)).epsilon(1e-12));

  CHECK(mlm_loss(Mat(), {}) == 0.0);
}

TEST_CASE("kl-to-uniform: zero at uniform, hand value, clamped at degenerate", "[losses]") {
  CHECK(kl_uniform_loss(vec({0.5, 0.5}), 2) == Catch::Approx(0.0).margin(1e-15));

  const double expected = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  CHECK(kl_uniform_loss(vec({0.75, 0.25}), 2) == Catch::Approx(expected).epsilon(1e-12));
  CHECK(expected == Catch::Approx(0.14384).margin(5e-6));

  const double degen = kl_uniform_loss(vec({1.0, 0.0}), 2);
  CHECK(std::isfinite(degen));
  CHECK(degen > 10.0);  // ~ 0.5 ln(0.5e12)
}

TEST_CASE("softtriple similarity: single center, identical centers, tanh case", "[losses]") {
  Vec x = vec({1.0, 0.0});
  Mat w(2, 1);
  w << 0.6, 0.8;
  CHECK(softtriple_similarity(x, w) == Catch::Approx(0.6).epsilon(1e-12));

  Mat same(2, 3);
  same.col(0) = vec({0.6, 0.8});
  same.col(1) = vec({0.6, 0.8});
  same.col(2) = vec({0.6, 0.8});
  CHECK(softtriple_similarity(x, same) == Catch::Approx(0.6).epsilon(1e-12));

  // inner products (1, -1) reduce to tanh(1)
  Mat pm(2, 2);
  pm.col(0) = vec({1.0, 0.0});
  pm.col(1) = vec({-1.0, 0.0});
  CHECK(softtriple_similarity(x, pm) == Catch::Approx(std::tanh(1.0)).epsilon(1e-12));
}

TEST_CASE("softtriple loss hand values", "[losses]") {
  SoftTripleParams p;  // lambda 20, delta 0.01

  const double confident = softtriple_loss_from_similarities(vec({0.9, 0.1}), 0, p);
  CHECK(confident == Catch::Approx(std::log(1.0 + std::exp(2.0 - 17.8))).epsilon(1e-9));

  const double tie = softtriple_loss_from_similarities(vec({0.5, 0.5}), 0, p);
  CHECK(tie == Catch::Approx(std::log(1.0 + std::exp(0.2))).epsilon(1e-12));
}

TEST_CASE("softtriple with k=1 delta=0 is scaled softmax cross-entropy", "[losses]") {
  Rng rng(99);
  SoftTripleParams p;
  p.delta_margin = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int C = 2 + rng.uniform_int(4);
    Vec s(C);
    for (int c = 0; c < C; ++c) s(c) = rng.uniform(-1.0, 1.0);
    const int y = rng.uniform_int(C);
    const double loss = softtriple_loss_from_similarities(s, y, p);
    const Vec probs = softmax(p.lambda_scale * s);
    CHECK(loss == Catch::Approx(-std::log(probs(y))).margin(1e-10));
  }
}

TEST_CASE("symmetrized KL: hand value, symmetry, non-negativity, identity", "[losses]") {
  const Vec p = vec({0.9, 0.1});
  const Vec q = vec({0.6, 0.4});
  CHECK(d_kl(p, q) == Catch::Approx(0.22629).margin(5e-6));
  CHECK(d_kl(q, p) == Catch::Approx(0.31124).margin(5e-6));
  CHECK(d_skl(p, q) == Catch::Approx(0.53753).margin(1e-5));

  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + rng.uniform_int(5);
    const Vec a = random_simplex(rng, n);
    const Vec b = random_simplex(rng, n);
    const double ab = d_skl(a, b);
    CHECK(ab >= 0.0);
    CHECK(ab == Catch::Approx(d_skl(b, a)).margin(1e-14));
    CHECK(d_skl(a, a) == 0.0);
  }
}

TEST_CASE("intra-proxy smoothing: identical, hand pair, no partners", "[losses]") {
  const Vec p = vec({0.9, 0.1});
  const Vec q = vec({0.6, 0.4});

  CHECK(intra_proxy_smooth_loss({p, p, p}, {0, 0, 0}) == 0.0);

  // one proxy pair: each anchor's max partner is the other
  const double pair = intra_proxy_smooth_loss({p, q}, {4, 4});
  CHECK(pair == Catch::Approx(0.53753).margin(1e-5));

  CHECK(intra_proxy_smooth_loss({p, q, p}, {0, 1, 2}) == 0.0);
}

TEST_CASE("loss composition is the weighted sum", "[losses]") {
  LossWeights w;  // 0.5, 0.5, 1.0
  CHECK(ft_loss(1.0, 0.4, 0.2, w) == Catch::Approx(1.3).epsilon(1e-15));
  CHECK(total_loss(1.3, 0.5, w) == Catch::Approx(1.8).epsilon(1e-15));
  CHECK(total_loss(ft_loss(0, 0, 0, w), 0, w) == 0.0);

  LossWeights zero{0, 0, 0};
  CHECK(ft_loss(0.7, 123.0, 456.0, zero) == Catch::Approx(0.7).epsilon(1e-15));
  CHECK(total_loss(0.7, 999.0, zero) == Catch::Approx(0.7).epsilon(1e-15));
}
