#pragma once

#include <optional>
#include <vector>

#include "ufit/common.hpp"
#include "ufit/corpus.hpp"

namespace ufit {

struct EncoderConfig {
  int d_model = 32;
  int num_heads = 2;
  int num_blocks = 2;
  int d_ff = 64;
  int max_seq_len = 64;

  int head_dim() const { return d_model / num_heads; }
  void validate() const {
    if (d_model <= 0 || num_heads <= 0 || num_blocks <= 0 || d_ff <= 0 || max_seq_len <= 0)
      throw std::invalid_argument("encoder config: dimensions must be positive");
    if (d_model % num_heads != 0)
      throw std::invalid_argument("encoder config: d_model must be divisible by num_heads");
  }
};

struct AttentionBlock {
  Mat wq, wk, wv, wo;  // d x d, heads side by side in columns
  Mat w1;              // d x ff
  Vec b1;              // ff
  Mat w2;              // ff x d
  Vec b2;              // d
};

// SoftTriple sub-center weights: one column per sub-center, grouped by class.
struct ProxyHead {
  Mat w;                         // d x total sub-centers
  std::vector<int> class_begin;  // size C+1, column ranges per class

  int num_classes() const { return static_cast<int>(class_begin.size()) - 1; }
  int subcenters(int cls) const {
    return class_begin[static_cast<size_t>(cls) + 1] - class_begin[static_cast<size_t>(cls)];
  }

  void renormalize_columns() {
    for (int j = 0; j < w.cols(); ++j) {
      const double n = w.col(j).norm();
      if (n > 1e-12) w.col(j) /= n;
    }
  }
};

struct ModelParams {
  EncoderConfig cfg;
  int vocab_size = 0;
  int num_classes = 0;

  Mat tok_embed;  // V x d
  Mat pos_embed;  // Lmax x d
  std::vector<AttentionBlock> blocks;
  Mat mlm_head;  // d x V
  Mat cls_head;  // d x C
  ProxyHead proxy;

  static ModelParams init(const EncoderConfig& cfg, int vocab_size, int num_classes,
                          const std::vector<int>& subcenters_per_class, Rng& rng) {
    cfg.validate();
    if (vocab_size < Vocabulary::kFirstWord)
      throw std::invalid_argument("model init: vocabulary too small");
    if (num_classes < 2) throw std::invalid_argument("model init: need at least 2 classes");
    if (static_cast<int>(subcenters_per_class.size()) != num_classes)
      throw std::invalid_argument("model init: one sub-center count per class required");

    auto fill = [&rng](Mat& m, int r, int c) {
      m.resize(r, c);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-0.05, 0.05);
    };
    auto fillv = [&rng](Vec& v, int n) {
      v.resize(n);
      for (int i = 0; i < n; ++i) v(i) = rng.uniform(-0.05, 0.05);
    };

    ModelParams p;
    p.cfg = cfg;
    p.vocab_size = vocab_size;
    p.num_classes = num_classes;
    fill(p.tok_embed, vocab_size, cfg.d_model);
    fill(p.pos_embed, cfg.max_seq_len, cfg.d_model);
    p.blocks.resize(static_cast<size_t>(cfg.num_blocks));
    for (auto& b : p.blocks) {
      fill(b.wq, cfg.d_model, cfg.d_model);
      fill(b.wk, cfg.d_model, cfg.d_model);
      fill(b.wv, cfg.d_model, cfg.d_model);
      fill(b.wo, cfg.d_model, cfg.d_model);
      fill(b.w1, cfg.d_model, cfg.d_ff);
      fillv(b.b1, cfg.d_ff);
      fill(b.w2, cfg.d_ff, cfg.d_model);
      fillv(b.b2, cfg.d_model);
    }
    fill(p.mlm_head, cfg.d_model, vocab_size);
    fill(p.cls_head, cfg.d_model, num_classes);

    p.proxy.class_begin.assign(1, 0);
    int total = 0;
    for (int k : subcenters_per_class) {
      if (k < 1) throw std::invalid_argument("model init: sub-center counts must be >= 1");
      total += k;
      p.proxy.class_begin.push_back(total);
    }
    fill(p.proxy.w, cfg.d_model, total);
    p.proxy.renormalize_columns();
    return p;
  }

  // Re-draws the SoftTriple head with new per-class sub-center counts.
  void reset_proxy_head(const std::vector<int>& subcenters_per_class, Rng& rng) {
    if (static_cast<int>(subcenters_per_class.size()) != num_classes)
      throw std::invalid_argument("reset_proxy_head: one count per class required");
    proxy.class_begin.assign(1, 0);
    int total = 0;
    for (int k : subcenters_per_class) {
      if (k < 1) throw std::invalid_argument("reset_proxy_head: counts must be >= 1");
      total += k;
      proxy.class_begin.push_back(total);
    }
    proxy.w.resize(cfg.d_model, total);
    for (int i = 0; i < proxy.w.rows(); ++i)
      for (int j = 0; j < proxy.w.cols(); ++j) proxy.w(i, j) = rng.uniform(-0.05, 0.05);
    proxy.renormalize_columns();
  }
};

struct GradientSet {
  Mat tok_embed, pos_embed;
  struct BlockGrads {
    Mat wq, wk, wv, wo, w1, w2;
    Vec b1, b2;
  };
  std::vector<BlockGrads> blocks;
  Mat mlm_head, cls_head, proxy_w;

  static GradientSet zeros_like(const ModelParams& p) {
    GradientSet g;
    g.tok_embed = Mat::Zero(p.tok_embed.rows(), p.tok_embed.cols());
    g.pos_embed = Mat::Zero(p.pos_embed.rows(), p.pos_embed.cols());
    g.blocks.resize(p.blocks.size());
    for (size_t i = 0; i < p.blocks.size(); ++i) {
      const auto& b = p.blocks[i];
      auto& gb = g.blocks[i];
      gb.wq = Mat::Zero(b.wq.rows(), b.wq.cols());
      gb.wk = Mat::Zero(b.wk.rows(), b.wk.cols());
      gb.wv = Mat::Zero(b.wv.rows(), b.wv.cols());
      gb.wo = Mat::Zero(b.wo.rows(), b.wo.cols());
      gb.w1 = Mat::Zero(b.w1.rows(), b.w1.cols());
      gb.b1 = Vec::Zero(b.b1.size());
      gb.w2 = Mat::Zero(b.w2.rows(), b.w2.cols());
      gb.b2 = Vec::Zero(b.b2.size());
    }
    g.mlm_head = Mat::Zero(p.mlm_head.rows(), p.mlm_head.cols());
    g.cls_head = Mat::Zero(p.cls_head.rows(), p.cls_head.cols());
    g.proxy_w = Mat::Zero(p.proxy.w.rows(), p.proxy.w.cols());
    return g;
  }

  void add(const GradientSet& o) {
    tok_embed += o.tok_embed;
    pos_embed += o.pos_embed;
    for (size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].wq += o.blocks[i].wq;
      blocks[i].wk += o.blocks[i].wk;
      blocks[i].wv += o.blocks[i].wv;
      blocks[i].wo += o.blocks[i].wo;
      blocks[i].w1 += o.blocks[i].w1;
      blocks[i].b1 += o.blocks[i].b1;
      blocks[i].w2 += o.blocks[i].w2;
      blocks[i].b2 += o.blocks[i].b2;
    }
    mlm_head += o.mlm_head;
    cls_head += o.cls_head;
    proxy_w += o.proxy_w;
  }
};

enum class TensorKind { embedding, dense, proxy };

// Visits every (param, grad) tensor pair; used by the optimizer and tests.
template <typename FMat, typename FVec>
void for_each_tensor(ModelParams& p, GradientSet& g, FMat&& fm, FVec&& fv) {
  fm(p.tok_embed, g.tok_embed, TensorKind::embedding);
  fm(p.pos_embed, g.pos_embed, TensorKind::embedding);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    auto& gb = g.blocks[i];
    fm(b.wq, gb.wq, TensorKind::dense);
    fm(b.wk, gb.wk, TensorKind::dense);
    fm(b.wv, gb.wv, TensorKind::dense);
    fm(b.wo, gb.wo, TensorKind::dense);
    fm(b.w1, gb.w1, TensorKind::dense);
    fv(b.b1, gb.b1, TensorKind::dense);
    fm(b.w2, gb.w2, TensorKind::dense);
    fv(b.b2, gb.b2, TensorKind::dense);
  }
  fm(p.mlm_head, g.mlm_head, TensorKind::dense);
  fm(p.cls_head, g.cls_head, TensorKind::dense);
  fm(p.proxy.w, g.proxy_w, TensorKind::proxy);
}

// Flat scalar access over all parameters (finite-difference harness).
template <typename F>
void for_each_param_scalar(ModelParams& p, F&& fn) {
  auto mat = [&fn](Mat& m) {
    for (int j = 0; j < m.cols(); ++j)
      for (int i = 0; i < m.rows(); ++i) fn(m(i, j));
  };
  auto vec = [&fn](Vec& v) {
    for (int i = 0; i < v.size(); ++i) fn(v(i));
  };
  mat(p.tok_embed);
  mat(p.pos_embed);
  for (auto& b : p.blocks) {
    mat(b.wq); mat(b.wk); mat(b.wv); mat(b.wo);
    mat(b.w1); vec(b.b1); mat(b.w2); vec(b.b2);
  }
  mat(p.mlm_head);
  mat(p.cls_head);
  mat(p.proxy.w);
}

template <typename F>
void for_each_grad_scalar(GradientSet& g, F&& fn) {
  auto mat = [&fn](Mat& m) {
    for (int j = 0; j < m.cols(); ++j)
      for (int i = 0; i < m.rows(); ++i) fn(m(i, j));
  };
  auto vec = [&fn](Vec& v) {
    for (int i = 0; i < v.size(); ++i) fn(v(i));
  };
  mat(g.tok_embed);
  mat(g.pos_embed);
  for (auto& b : g.blocks) {
    mat(b.wq); mat(b.wk); mat(b.wv); mat(b.wo);
    mat(b.w1); vec(b.b1); mat(b.w2); vec(b.b2);
  }
  mat(g.mlm_head);
  mat(g.cls_head);
  mat(g.proxy_w);
}

struct EncoderOutput {
  Mat seq;              // n x d, final hidden states
  Vec pooled;           // d, CLS position
  Vec token_attention;  // n, non-negative, sums to 1
  Vec class_logits;     // C, dense head
  Mat mlm_logits;       // |mask| x V, rows follow mask_positions
  std::vector<int> mask_positions;
};

// Forward intermediates kept for the backward pass.
struct ForwardCache {
  struct BlockCache {
    Mat x_in;                // n x d
    std::vector<Mat> attn;   // per head, n x n, softmax rows
    std::vector<Mat> q, k, v;  // per head, n x dh
    Mat head_concat;         // n x d
    Mat x_mid;               // n x d, after attention residual
    Mat ff_act;              // n x ff, tanh(Z)
  };
  std::vector<BlockCache> blocks;
  Mat x_final;  // n x d
};

namespace detail {

inline void softmax_rows_inplace(Mat& m) {
  for (int i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

}  // namespace detail

inline EncoderOutput forward_sample(const ModelParams& p, const TokenSeq& seq,
                                    const std::vector<int>& mask_positions = {},
                                    ForwardCache* cache = nullptr) {
  const int n = seq.length();
  const int d = p.cfg.d_model;
  const int h = p.cfg.num_heads;
  const int dh = p.cfg.head_dim();
  if (n < 1) throw std::invalid_argument("forward: empty token sequence");
  if (n > p.cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence longer than max_seq_len");
  for (int id : seq.ids)
    if (id < 0 || id >= p.vocab_size)
      throw std::invalid_argument("forward: token id out of vocabulary range");

  Mat x(n, d);
  for (int j = 0; j < n; ++j)
    x.row(j) = p.tok_embed.row(seq.ids[static_cast<size_t>(j)]) + p.pos_embed.row(j);

  if (cache) cache->blocks.resize(p.blocks.size());
  const Mat* last_attn_heads = nullptr;
  std::vector<Mat> scratch_attn;

  for (size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const auto& b = p.blocks[bi];
    ForwardCache::BlockCache* bc = cache ? &cache->blocks[bi] : nullptr;
    if (bc) bc->x_in = x;

    Mat head_concat(n, d);
    scratch_attn.assign(static_cast<size_t>(h), Mat());
    if (bc) {
      bc->attn.resize(static_cast<size_t>(h));
      bc->q.resize(static_cast<size_t>(h));
      bc->k.resize(static_cast<size_t>(h));
      bc->v.resize(static_cast<size_t>(h));
    }
    for (int hi = 0; hi < h; ++hi) {
      const int c0 = hi * dh;
      Mat q = x * b.wq.middleCols(c0, dh);
      Mat k = x * b.wk.middleCols(c0, dh);
      Mat v = x * b.wv.middleCols(c0, dh);
      Mat a = q * k.transpose() / std::sqrt(static_cast<double>(dh));
      detail::softmax_rows_inplace(a);
      head_concat.middleCols(c0, dh) = a * v;
      if (bc) {
        bc->q[static_cast<size_t>(hi)] = std::move(q);
        bc->k[static_cast<size_t>(hi)] = std::move(k);
        bc->v[static_cast<size_t>(hi)] = std::move(v);
        bc->attn[static_cast<size_t>(hi)] = std::move(a);
      } else {
        scratch_attn[static_cast<size_t>(hi)] = std::move(a);
      }
    }
    Mat x_mid = x + head_concat * b.wo;
    Mat act = ((x_mid * b.w1).rowwise() + b.b1.transpose()).array().tanh();
    x = x_mid + ((act * b.w2).rowwise() + b.b2.transpose());

    if (bc) {
      bc->head_concat = std::move(head_concat);
      bc->x_mid = std::move(x_mid);
      bc->ff_act = std::move(act);
      if (bi + 1 == p.blocks.size()) last_attn_heads = bc->attn.data();
    } else if (bi + 1 == p.blocks.size()) {
      last_attn_heads = scratch_attn.data();
    }
  }

  EncoderOutput out;
  out.seq = x;
  out.pooled = x.row(0).transpose();

  // CLS-row attention averaged over heads, then softmax per sample
  Vec abar = Vec::Zero(n);
  for (int hi = 0; hi < h; ++hi) abar += last_attn_heads[hi].row(0).transpose();
  abar /= static_cast<double>(h);
  out.token_attention = softmax(abar);

  out.class_logits = p.cls_head.transpose() * out.pooled;

  out.mask_positions = mask_positions;
  if (!mask_positions.empty()) {
    out.mlm_logits.resize(static_cast<int>(mask_positions.size()), p.vocab_size);
    for (size_t r = 0; r < mask_positions.size(); ++r) {
      const int pos = mask_positions[r];
      if (pos < 0 || pos >= n) throw std::invalid_argument("forward: mask position out of range");
      out.mlm_logits.row(static_cast<int>(r)) = x.row(pos) * p.mlm_head;
    }
  }
  if (cache) cache->x_final = x;
  return out;
}

inline std::vector<EncoderOutput> forward(const ModelParams& p, const std::vector<TokenSeq>& batch) {
  std::vector<EncoderOutput> outs;
  outs.reserve(batch.size());
  for (const auto& seq : batch) outs.push_back(forward_sample(p, seq));
  return outs;
}

inline Vec embed(const ModelParams& p, const TokenSeq& seq) {
  return forward_sample(p, seq).pooled;
}

// Gradients of the loss w.r.t. this sample's encoder outputs.
struct OutputGrads {
  Vec d_pooled;       // d, may be empty
  Vec d_class_logits; // C, may be empty
  Mat d_mlm_logits;   // |mask| x V, may be empty
  std::vector<int> mask_positions;  // row r of d_mlm_logits belongs here
};

inline void backward_sample(const ModelParams& p, const TokenSeq& seq, const ForwardCache& cache,
                            const OutputGrads& og, GradientSet& g) {
  const int n = seq.length();
  const int d = p.cfg.d_model;
  const int h = p.cfg.num_heads;
  const int dh = p.cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dx = Mat::Zero(n, d);

  if (og.d_class_logits.size() > 0) {
    const Vec u = cache.x_final.row(0).transpose();
    g.cls_head += u * og.d_class_logits.transpose();
    dx.row(0) += (p.cls_head * og.d_class_logits).transpose();
  }
  if (og.d_pooled.size() > 0) dx.row(0) += og.d_pooled.transpose();
  if (og.d_mlm_logits.size() > 0) {
    for (int r = 0; r < og.d_mlm_logits.rows(); ++r) {
      const int pos = og.mask_positions[static_cast<size_t>(r)];
      g.mlm_head += cache.x_final.row(pos).transpose() * og.d_mlm_logits.row(r);
      dx.row(pos) += og.d_mlm_logits.row(r) * p.mlm_head.transpose();
    }
  }

  for (int bi = static_cast<int>(p.blocks.size()) - 1; bi >= 0; --bi) {
    const auto& b = p.blocks[static_cast<size_t>(bi)];
    const auto& bc = cache.blocks[static_cast<size_t>(bi)];
    auto& gb = g.blocks[static_cast<size_t>(bi)];

    // feed-forward with residual: x_out = x_mid + tanh(x_mid W1 + b1) W2 + b2
    const Mat& act = bc.ff_act;
    Mat d_act = dx * b.w2.transpose();
    gb.w2 += act.transpose() * dx;
    gb.b2 += dx.colwise().sum().transpose();
    Mat dz = d_act.array() * (1.0 - act.array().square());
    gb.w1 += bc.x_mid.transpose() * dz;
    gb.b1 += dz.colwise().sum().transpose();
    Mat dx_mid = dx + dz * b.w1.transpose();

    // attention with residual: x_mid = x_in + concat(heads) Wo
    gb.wo += bc.head_concat.transpose() * dx_mid;
    Mat d_concat = dx_mid * b.wo.transpose();
    Mat dx_in = dx_mid;  // residual path

    for (int hi = 0; hi < h; ++hi) {
      const int c0 = hi * dh;
      const Mat& a = bc.attn[static_cast<size_t>(hi)];
      const Mat& q = bc.q[static_cast<size_t>(hi)];
      const Mat& k = bc.k[static_cast<size_t>(hi)];
      const Mat& v = bc.v[static_cast<size_t>(hi)];
      Mat dhd = d_concat.middleCols(c0, dh);

      Mat da = dhd * v.transpose();
      Mat dv = a.transpose() * dhd;
      Mat ds(n, n);
      for (int i = 0; i < n; ++i) {
        const double dot = da.row(i).dot(a.row(i));
        ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
      }
      Mat dq = ds * k * scale;
      Mat dk = ds.transpose() * q * scale;

      gb.wq.middleCols(c0, dh) += bc.x_in.transpose() * dq;
      gb.wk.middleCols(c0, dh) += bc.x_in.transpose() * dk;
      gb.wv.middleCols(c0, dh) += bc.x_in.transpose() * dv;
      dx_in += dq * b.wq.middleCols(c0, dh).transpose();
      dx_in += dk * b.wk.middleCols(c0, dh).transpose();
      dx_in += dv * b.wv.middleCols(c0, dh).transpose();
    }
    dx = std::move(dx_in);
  }

  for (int j = 0; j < n; ++j) {
    g.tok_embed.row(seq.ids[static_cast<size_t>(j)]) += dx.row(j);
    g.pos_embed.row(j) += dx.row(j);
  }
}

}  // namespace ufit
