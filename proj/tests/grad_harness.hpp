#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ufit/objective.hpp"

namespace ufit::testutil {

// Central finite differences over every parameter scalar. Error is relative
// to max(|analytic|, |fd|) with a 1e-6 floor so that coordinates whose true
// gradient is ~0 are judged on absolute agreement instead of FD noise.
struct GradCheck {
  double max_err = 0;
  long checked = 0;
};

inline GradCheck finite_diff_check(ModelParams& params, const BatchLossSpec& spec,
                                   double h = 1e-5) {
  GradientSet grads = GradientSet::zeros_like(params);
  batch_backward(params, spec, grads);

  std::vector<double> analytic;
  for_each_grad_scalar(grads, [&](double& x) { analytic.push_back(x); });

  GradCheck res;
  size_t idx = 0;
  for_each_param_scalar(params, [&](double& x) {
    const double orig = x;
    x = orig + h;
    const double lp = batch_loss(params, spec).total;
    x = orig - h;
    const double lm = batch_loss(params, spec).total;
    x = orig;
    const double fd = (lp - lm) / (2.0 * h);
    const double a = analytic[idx++];
    const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
    res.max_err = std::max(res.max_err, err);
    ++res.checked;
  });
  return res;
}

inline EncoderConfig grad_cfg(int blocks) {
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.num_blocks = blocks;
  cfg.d_ff = 12;
  cfg.max_seq_len = 12;
  return cfg;
}

inline TokenSeq random_seq(Rng& rng, int vocab, int min_len = 4, int max_len = 9) {
  TokenSeq s;
  s.ids.push_back(Vocabulary::kCls);
  const int n = min_len + rng.uniform_int(max_len - min_len + 1);
  for (int j = 1; j < n; ++j)
    s.ids.push_back(Vocabulary::kFirstWord + rng.uniform_int(vocab - Vocabulary::kFirstWord));
  return s;
}

// Mixed batch exercising the requested loss terms.
struct SpecOptions {
  bool task = false;
  TaskKind task_kind = TaskKind::cross_entropy;
  bool mlm = false;
  bool kl = false;
  bool smooth = false;
  bool proxy_classifier = false;
  LossWeights weights{0.5, 0.5, 1.0};
};

inline BatchLossSpec random_spec(Rng& rng, const ModelParams& params, int batch,
                                 const SpecOptions& opt) {
  BatchLossSpec spec;
  spec.task = opt.task ? opt.task_kind : TaskKind::none;
  spec.classifier_is_proxy = opt.proxy_classifier;
  spec.weights = opt.weights;
  if (!opt.mlm) spec.weights.lambda_mlm = 0;
  if (!opt.kl) spec.weights.lambda_kl = 0;
  if (!opt.smooth) spec.weights.lambda_smooth = 0;

  for (int i = 0; i < batch; ++i) {
    SampleLossSpec s;
    s.input = random_seq(rng, params.vocab_size);
    s.label = rng.uniform_int(params.num_classes);
    s.in_task = opt.task;
    if (opt.kl && i % 3 == 0) {
      s.in_kl = true;
      s.in_task = false;  // context-masked samples carry only the KL term
    }
    if (opt.mlm && !s.in_kl) {
      const int n = s.input.length();
      for (int jpos = 1; jpos < n; jpos += 2) {
        s.mask_positions.push_back(jpos);
        s.mask_truth.push_back(s.input.ids[static_cast<size_t>(jpos)]);
        s.input.ids[static_cast<size_t>(jpos)] = Vocabulary::kMask;
      }
    }
    if (opt.smooth && !s.in_kl) s.proxy_id = rng.uniform_int(2);
    spec.samples.push_back(std::move(s));
  }
  return spec;
}

}  // namespace ufit::testutil
