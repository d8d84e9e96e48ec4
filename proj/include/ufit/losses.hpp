#pragma once

#include <vector>

#include "ufit/common.hpp"
#include "ufit/encoder.hpp"

namespace ufit {

constexpr double kProbFloor = 1e-12;

struct LossWeights {
  double lambda_mlm = 0.5;
  double lambda_kl = 0.5;
  double lambda_smooth = 1.0;
};

struct SoftTripleParams {
  double lambda_scale = 20.0;
  double delta_margin = 0.01;
};

// Mean cross-entropy over masked positions; zero positions yield 0.
inline double mlm_loss(const Mat& mlm_logits, const std::vector<int>& truth) {
  if (truth.empty()) return 0.0;
  if (mlm_logits.rows() != static_cast<int>(truth.size()))
    throw std::invalid_argument("mlm_loss: one logit row per masked position required");
  double total = 0.0;
  for (int r = 0; r < mlm_logits.rows(); ++r) {
    const Vec pr = softmax(mlm_logits.row(r).transpose());
    total -= std::log(std::max(pr(truth[static_cast<size_t>(r)]), kProbFloor));
  }
  return total / static_cast<double>(truth.size());
}

// D_KL(U(C) || f), f a probability simplex; probabilities clamped below.
inline double kl_uniform_loss(const Vec& f, int num_classes) {
  if (f.size() != num_classes) throw std::invalid_argument("kl_uniform_loss: wrong simplex size");
  const double u = 1.0 / static_cast<double>(num_classes);
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c)
    total += u * std::log(u / std::max(f(c), kProbFloor));
  return total;
}

inline double d_kl(const Vec& pa, const Vec& pb) {
  double total = 0.0;
  for (int c = 0; c < pa.size(); ++c) {
    const double a = std::max(pa(c), kProbFloor);
    const double b = std::max(pb(c), kProbFloor);
    total += a * std::log(a / b);
  }
  return total;
}

// symmetrized KL: D_KL(p||q) + D_KL(q||p)
inline double d_skl(const Vec& pa, const Vec& pb) { return d_kl(pa, pb) + d_kl(pb, pa); }

// ---------------------------------------------------------------------------
// SoftTriple: attention-weighted similarity to per-class sub-centers.
// ---------------------------------------------------------------------------

struct SoftTripleCache {
  Vec x_hat;                 // normalized embedding
  double u_norm = 0;
  std::vector<Vec> z;        // per class: sub-center inner products
  std::vector<Vec> alpha;    // per class: softmax over sub-centers
  Vec similarities;          // C
};

// Similarity of one embedding to one class's sub-centers. Columns of `w`
// are normalized internally so callers can hand raw parameters.
inline double softtriple_similarity(const Vec& embedding, const Mat& class_w) {
  const double un = std::max(embedding.norm(), kProbFloor);
  const Vec x_hat = embedding / un;
  Vec z(class_w.cols());
  for (int j = 0; j < class_w.cols(); ++j) {
    const double wn = std::max(class_w.col(j).norm(), kProbFloor);
    z(j) = x_hat.dot(class_w.col(j) / wn);
  }
  const Vec a = softmax(z);
  return a.dot(z);
}

inline SoftTripleCache softtriple_similarities(const Vec& embedding, const ProxyHead& head) {
  SoftTripleCache c;
  c.u_norm = std::max(embedding.norm(), kProbFloor);
  c.x_hat = embedding / c.u_norm;
  const int C = head.num_classes();
  c.z.resize(static_cast<size_t>(C));
  c.alpha.resize(static_cast<size_t>(C));
  c.similarities.resize(C);
  for (int cls = 0; cls < C; ++cls) {
    const int begin = head.class_begin[static_cast<size_t>(cls)];
    const int k = head.subcenters(cls);
    Vec z(k);
    for (int j = 0; j < k; ++j) {
      const Vec w = head.w.col(begin + j);
      z(j) = c.x_hat.dot(w / std::max(w.norm(), kProbFloor));
    }
    Vec a = softmax(z);
    c.similarities(cls) = a.dot(z);
    c.z[static_cast<size_t>(cls)] = std::move(z);
    c.alpha[static_cast<size_t>(cls)] = std::move(a);
  }
  return c;
}

inline double softtriple_loss_from_similarities(const Vec& s, int label,
                                                const SoftTripleParams& p) {
  Vec a = p.lambda_scale * s;
  a(label) -= p.lambda_scale * p.delta_margin;
  // -log softmax at the true class
  const double mx = a.maxCoeff();
  double lse = 0.0;
  for (int c = 0; c < a.size(); ++c) lse += std::exp(a(c) - mx);
  return -(a(label) - mx) + std::log(lse);
}

inline double softtriple_loss(const Vec& embedding, int label, const SoftTripleParams& p,
                              const ProxyHead& head) {
  return softtriple_loss_from_similarities(softtriple_similarities(embedding, head).similarities,
                                           label, p);
}

// Chains dL/dS back to the raw embedding and raw sub-center weights,
// through both unit normalizations and the sub-center softmax.
inline void softtriple_chain(const Vec& embedding, const ProxyHead& head,
                             const SoftTripleCache& c, const Vec& d_similarities, Vec& d_embedding,
                             Mat& d_proxy_w) {
  const int C = head.num_classes();
  Vec d_xhat = Vec::Zero(c.x_hat.size());
  for (int cls = 0; cls < C; ++cls) {
    const double ds = d_similarities(cls);
    if (ds == 0.0) continue;
    const int begin = head.class_begin[static_cast<size_t>(cls)];
    const int k = head.subcenters(cls);
    const Vec& z = c.z[static_cast<size_t>(cls)];
    const Vec& a = c.alpha[static_cast<size_t>(cls)];
    const double s = c.similarities(cls);
    for (int j = 0; j < k; ++j) {
      // dS/dz_j = alpha_j * (1 + z_j - S)
      const double dz = ds * a(j) * (1.0 + z(j) - s);
      const Vec w_raw = head.w.col(begin + j);
      const double wn = std::max(w_raw.norm(), kProbFloor);
      const Vec w_hat = w_raw / wn;
      d_xhat += dz * w_hat;
      d_proxy_w.col(begin + j) += dz * (c.x_hat - w_hat * (w_hat.dot(c.x_hat))) / wn;
    }
  }
  // through x_hat = u / ||u||
  d_embedding += (d_xhat - c.x_hat * (c.x_hat.dot(d_xhat))) / c.u_norm;
}

// ---------------------------------------------------------------------------
// Intra-proxy smoothing: per anchor, the largest symmetrized KL to a
// same-proxy partner in the batch, averaged over the batch.
// ---------------------------------------------------------------------------

inline double intra_proxy_smooth_loss(const std::vector<Vec>& probs,
                                      const std::vector<int>& proxy_ids) {
  if (probs.size() != proxy_ids.size())
    throw std::invalid_argument("intra_proxy_smooth_loss: one proxy id per sample required");
  const size_t n = probs.size();
  if (n == 0) return 0.0;
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double worst = 0.0;
    bool has_partner = false;
    for (size_t j = 0; j < n; ++j) {
      if (j == i || proxy_ids[j] != proxy_ids[i]) continue;
      const double dv = d_skl(probs[i], probs[j]);
      if (!has_partner || dv > worst) worst = dv;
      has_partner = true;
    }
    if (has_partner) total += worst;
  }
  return total / static_cast<double>(n);
}

inline double ft_loss(double task, double mlm, double kl, const LossWeights& w) {
  return task + w.lambda_mlm * mlm + w.lambda_kl * kl;
}

inline double total_loss(double ft, double smooth, const LossWeights& w) {
  return ft + w.lambda_smooth * smooth;
}

}  // namespace ufit
