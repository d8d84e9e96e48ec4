#include <catch2/catch_amalgamated.hpp>

#include "grad_harness.hpp"

using namespace ufit;
using namespace ufit::testutil;

namespace {

ModelParams grad_model(Rng& rng, int blocks, const std::vector<int>& subcenters = {1, 1}) {
  return ModelParams::init(grad_cfg(blocks), 30, static_cast<int>(subcenters.size()), subcenters,
                           rng);
}

void check_spec(uint64_t seed, const SpecOptions& opt, double tol = 1e-4) {
  Rng rng(seed);
  const int blocks = 1 + static_cast<int>(seed % 2);
  std::vector<int> subcenters{1 + static_cast<int>(seed % 3), 2};
  ModelParams params = grad_model(rng, blocks, subcenters);
  const BatchLossSpec spec = random_spec(rng, params, 4, opt);
  const GradCheck res = finite_diff_check(params, spec);
  INFO("seed " << seed << " max_err " << res.max_err << " over " << res.checked << " coords");
  CHECK(res.max_err < tol);
}

}  // namespace

TEST_CASE("masked-token loss gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.mlm = true;
  for (uint64_t seed = 0; seed < 5; ++seed) check_spec(100 + seed, opt);
}

TEST_CASE("kl-to-uniform gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.kl = true;
  for (uint64_t seed = 0; seed < 5; ++seed) check_spec(200 + seed, opt);
}

TEST_CASE("softtriple gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.task = true;
  opt.task_kind = TaskKind::soft_triple;
  for (uint64_t seed = 0; seed < 5; ++seed) check_spec(300 + seed, opt);
}

TEST_CASE("intra-proxy smoothing gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.task = true;  // smoothing alone has no anchor structure worth testing
  opt.smooth = true;
  for (uint64_t seed = 0; seed < 5; ++seed) check_spec(400 + seed, opt);
}

TEST_CASE("fine-tune composite gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.task = true;
  opt.mlm = true;
  opt.kl = true;
  for (uint64_t seed = 0; seed < 5; ++seed) check_spec(500 + seed, opt);
}

TEST_CASE("complete objective gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.task = true;
  opt.task_kind = TaskKind::soft_triple;
  opt.proxy_classifier = true;
  opt.mlm = true;
  opt.kl = true;
  opt.smooth = true;
  for (uint64_t seed = 0; seed < 5; ++seed) check_spec(600 + seed, opt);
}

TEST_CASE("cross-entropy task gradients match finite differences", "[gradcheck]") {
  SpecOptions opt;
  opt.task = true;
  for (uint64_t seed = 0; seed < 3; ++seed) check_spec(700 + seed, opt);
}

TEST_CASE("a zero-weighted term contributes exactly nothing", "[gradcheck]") {
  Rng rng(42);
  ModelParams params = grad_model(rng, 2);

  SpecOptions with_kl;
  with_kl.task = true;
  with_kl.kl = true;
  Rng spec_rng(43);
  BatchLossSpec spec = random_spec(spec_rng, params, 4, with_kl);
  spec.weights.lambda_kl = 0;

  BatchLossSpec without = spec;
  for (auto& s : without.samples) s.in_kl = false;

  GradientSet ga = GradientSet::zeros_like(params);
  GradientSet gb = GradientSet::zeros_like(params);
  batch_backward(params, spec, ga);
  batch_backward(params, without, gb);

  std::vector<double> va, vb;
  for_each_grad_scalar(ga, [&](double& x) { va.push_back(x); });
  for_each_grad_scalar(gb, [&](double& x) { vb.push_back(x); });
  REQUIRE(va.size() == vb.size());
  for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
}

TEST_CASE("embedding gradients are computed even when the trainer freezes them", "[gradcheck]") {
  Rng rng(77);
  ModelParams params = grad_model(rng, 1);
  SpecOptions opt;
  opt.task = true;
  Rng spec_rng(78);
  const BatchLossSpec spec = random_spec(spec_rng, params, 4, opt);
  GradientSet g = GradientSet::zeros_like(params);
  batch_backward(params, spec, g);
  CHECK(g.tok_embed.cwiseAbs().maxCoeff() > 0.0);
  CHECK(g.pos_embed.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("kl gradient vanishes at the uniform prediction", "[gradcheck]") {
  // a model whose dense head outputs exactly equal logits
  Rng rng(88);
  ModelParams params = grad_model(rng, 1);
  params.cls_head.setZero();

  BatchLossSpec spec;
  spec.task = TaskKind::none;
  spec.weights = LossWeights{0, 1.0, 0};
  SampleLossSpec s;
  s.input = random_seq(rng, params.vocab_size);
  s.in_kl = true;
  spec.samples.push_back(s);

  CHECK(batch_loss(params, spec).kl == Catch::Approx(0.0).margin(1e-15));
  GradientSet g = GradientSet::zeros_like(params);
  batch_backward(params, spec, g);
  double max_abs = 0;
  for_each_grad_scalar(g, [&](double& x) { max_abs = std::max(max_abs, std::abs(x)); });
  CHECK(max_abs == Catch::Approx(0.0).margin(1e-15));
}
