#pragma once

#include <vector>

#include "ufit/encoder.hpp"
#include "ufit/losses.hpp"
#include "ufit/parallel.hpp"

namespace ufit {

enum class TaskKind { none, cross_entropy, soft_triple };

struct SampleLossSpec {
  TokenSeq input;
  int label = -1;
  bool in_task = false;            // contributes the task term
  bool in_kl = false;              // contributes the KL-to-uniform term
  std::vector<int> mask_positions; // masked-reconstruction term
  std::vector<int> mask_truth;
  int proxy_id = -1;               // smoothing group; -1 = excluded
};

struct BatchLossSpec {
  TaskKind task = TaskKind::cross_entropy;
  bool classifier_is_proxy = false;  // f(x) from the SoftTriple head
  LossWeights weights;
  SoftTripleParams st;
  std::vector<SampleLossSpec> samples;
};

struct LossBreakdown {
  double task = 0, mlm = 0, kl = 0, smooth = 0;
  double total = 0;
};

namespace detail {

struct SampleWork {
  EncoderOutput out;
  ForwardCache cache;
  SoftTripleCache st;
  Vec f;          // class probabilities under the active classifier
  Vec d_logits;   // grad w.r.t. dense class logits
  Vec d_sim;      // grad w.r.t. SoftTriple similarities
  Mat d_mlm;      // grad w.r.t. masked-token logits
};

// d D_SKL(p, q) propagated to p's pre-softmax scores.
inline Vec d_skl_wrt_logits(const Vec& p, const Vec& q) {
  Vec v(p.size());
  for (int c = 0; c < p.size(); ++c) {
    const double pc = std::max(p(c), kProbFloor);
    const double qc = std::max(q(c), kProbFloor);
    v(c) = std::log(pc / qc) + 1.0 - qc / pc;
  }
  const double dot = v.dot(p);
  return p.array() * (v.array() - dot);
}

}  // namespace detail

// Evaluates the configured composite loss over a batch; when `grads` is
// non-null also accumulates exact gradients for every parameter tensor.
inline LossBreakdown batch_objective(const ModelParams& params, const BatchLossSpec& spec,
                                     GradientSet* grads, int jobs = 1) {
  const int n = static_cast<int>(spec.samples.size());
  if (n == 0) return {};
  const bool want_grads = grads != nullptr;
  const bool proxy_f = spec.classifier_is_proxy;
  const bool need_st = spec.task == TaskKind::soft_triple || proxy_f;

  std::vector<detail::SampleWork> work(static_cast<size_t>(n));

  // forward
  parallel_chunks(n, 8, jobs, [&](int begin, int end, int) {
    for (int i = begin; i < end; ++i) {
      auto& w = work[static_cast<size_t>(i)];
      const auto& s = spec.samples[static_cast<size_t>(i)];
      w.out = forward_sample(params, s.input, s.mask_positions, want_grads ? &w.cache : nullptr);
      if (need_st) w.st = softtriple_similarities(w.out.pooled, params.proxy);
      w.f = proxy_f ? softmax(spec.st.lambda_scale * w.st.similarities)
                    : softmax(w.out.class_logits);
      if (want_grads) {
        w.d_logits = Vec::Zero(w.out.class_logits.size());
        if (need_st) w.d_sim = Vec::Zero(w.st.similarities.size());
      }
    }
  });

  // loss terms and output gradients (serial; cheap next to forward/backward)
  LossBreakdown loss;
  int n_task = 0, n_kl = 0, n_mask = 0, n_smooth = 0;
  for (const auto& s : spec.samples) {
    if (s.in_task && spec.task != TaskKind::none) ++n_task;
    if (s.in_kl) ++n_kl;
    n_mask += static_cast<int>(s.mask_positions.size());
    if (s.proxy_id >= 0) ++n_smooth;
  }

  for (int i = 0; i < n; ++i) {
    auto& w = work[static_cast<size_t>(i)];
    const auto& s = spec.samples[static_cast<size_t>(i)];

    if (s.in_task && spec.task == TaskKind::cross_entropy) {
      const Vec p = softmax(w.out.class_logits);
      loss.task += -std::log(std::max(p(s.label), kProbFloor)) / n_task;
      if (want_grads) {
        Vec d = p / n_task;
        d(s.label) -= 1.0 / n_task;
        w.d_logits += d;
      }
    } else if (s.in_task && spec.task == TaskKind::soft_triple) {
      loss.task += softtriple_loss_from_similarities(w.st.similarities, s.label, spec.st) / n_task;
      if (want_grads) {
        Vec a = spec.st.lambda_scale * w.st.similarities;
        a(s.label) -= spec.st.lambda_scale * spec.st.delta_margin;
        Vec sigma = softmax(a);
        sigma(s.label) -= 1.0;
        w.d_sim += (spec.st.lambda_scale / n_task) * sigma;
      }
    }

    if (!s.mask_positions.empty()) {
      if (s.mask_truth.size() != s.mask_positions.size())
        throw std::invalid_argument("batch_objective: mask truth/position size mismatch");
      if (want_grads) w.d_mlm = Mat::Zero(w.out.mlm_logits.rows(), w.out.mlm_logits.cols());
      for (int r = 0; r < w.out.mlm_logits.rows(); ++r) {
        const Vec p = softmax(w.out.mlm_logits.row(r).transpose());
        const int truth = s.mask_truth[static_cast<size_t>(r)];
        loss.mlm += -std::log(std::max(p(truth), kProbFloor)) / n_mask;
        if (want_grads) {
          Vec d = (spec.weights.lambda_mlm / n_mask) * p;
          d(truth) -= spec.weights.lambda_mlm / n_mask;
          w.d_mlm.row(r) += d.transpose();
        }
      }
    }

    if (s.in_kl) {
      loss.kl += kl_uniform_loss(w.f, static_cast<int>(w.f.size())) / n_kl;
      if (want_grads) {
        // d D_KL(U || softmax(q)) / dq = f - U
        Vec d = w.f;
        d.array() -= 1.0 / static_cast<double>(w.f.size());
        d *= spec.weights.lambda_kl / n_kl;
        if (proxy_f) {
          w.d_sim += spec.st.lambda_scale * d;
        } else {
          w.d_logits += d;
        }
      }
    }
  }

  // intra-proxy smoothing: per anchor, worst same-proxy partner
  if (n_smooth > 0 && spec.weights.lambda_smooth != 0.0) {
    for (int i = 0; i < n; ++i) {
      const auto& si = spec.samples[static_cast<size_t>(i)];
      if (si.proxy_id < 0) continue;
      int worst = -1;
      double worst_d = 0.0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const auto& sj = spec.samples[static_cast<size_t>(j)];
        if (sj.proxy_id != si.proxy_id) continue;
        const double dv = d_skl(work[static_cast<size_t>(i)].f, work[static_cast<size_t>(j)].f);
        if (worst < 0 || dv > worst_d) {
          worst = j;
          worst_d = dv;
        }
      }
      if (worst < 0) continue;
      loss.smooth += worst_d / n_smooth;
      if (want_grads) {
        auto& wi = work[static_cast<size_t>(i)];
        auto& wj = work[static_cast<size_t>(worst)];
        const double scale = spec.weights.lambda_smooth / n_smooth;
        Vec di = scale * detail::d_skl_wrt_logits(wi.f, wj.f);
        Vec dj = scale * detail::d_skl_wrt_logits(wj.f, wi.f);
        if (proxy_f) {
          wi.d_sim += spec.st.lambda_scale * di;
          wj.d_sim += spec.st.lambda_scale * dj;
        } else {
          wi.d_logits += di;
          wj.d_logits += dj;
        }
      }
    }
  }

  loss.total = total_loss(ft_loss(loss.task, loss.mlm, loss.kl, spec.weights), loss.smooth,
                          spec.weights);
  if (!std::isfinite(loss.total))
    throw std::runtime_error("batch_objective: non-finite loss");
  if (!want_grads) return loss;

  // backward
  std::vector<GradientSet> partial;
  const int num_chunks = 8;
  partial.reserve(num_chunks);
  for (int c = 0; c < num_chunks; ++c) partial.push_back(GradientSet::zeros_like(params));

  parallel_chunks(n, num_chunks, jobs, [&](int begin, int end, int ci) {
    GradientSet& g = partial[static_cast<size_t>(ci)];
    for (int i = begin; i < end; ++i) {
      auto& w = work[static_cast<size_t>(i)];
      const auto& s = spec.samples[static_cast<size_t>(i)];
      OutputGrads og;
      og.mask_positions = s.mask_positions;
      if (w.d_mlm.size() > 0) og.d_mlm_logits = w.d_mlm;
      if (w.d_logits.size() > 0 && w.d_logits.squaredNorm() > 0) og.d_class_logits = w.d_logits;
      if (w.d_sim.size() > 0 && w.d_sim.squaredNorm() > 0) {
        Vec du = Vec::Zero(params.cfg.d_model);
        softtriple_chain(w.out.pooled, params.proxy, w.st, w.d_sim, du, g.proxy_w);
        og.d_pooled = du;
      }
      backward_sample(params, s.input, w.cache, og, g);
    }
  });
  for (const auto& g : partial) grads->add(g);
  return loss;
}

inline LossBreakdown batch_loss(const ModelParams& params, const BatchLossSpec& spec) {
  return batch_objective(params, spec, nullptr, 1);
}

inline LossBreakdown batch_backward(const ModelParams& params, const BatchLossSpec& spec,
                                    GradientSet& grads, int jobs = 1) {
  return batch_objective(params, spec, &grads, jobs);
}

// Class prediction under the checkpoint's active classifier.
inline int predict_class(const ModelParams& params, const TokenSeq& seq, bool proxy_classifier) {
  if (!proxy_classifier) {
    const Vec logits = params.cls_head.transpose() * embed(params, seq);
    int best = 0;
    logits.maxCoeff(&best);
    return best;
  }
  const auto st = softtriple_similarities(embed(params, seq), params.proxy);
  int best = 0;
  st.similarities.maxCoeff(&best);
  return best;
}

inline Vec class_probabilities(const ModelParams& params, const TokenSeq& seq,
                               bool proxy_classifier, const SoftTripleParams& st) {
  if (!proxy_classifier) return softmax(params.cls_head.transpose() * embed(params, seq));
  return softmax(st.lambda_scale * softtriple_similarities(embed(params, seq), params.proxy).similarities);
}

}  // namespace ufit
