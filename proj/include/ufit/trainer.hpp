#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ufit/corpus.hpp"
#include "ufit/masking.hpp"
#include "ufit/objective.hpp"
#include "ufit/proxies.hpp"

namespace ufit {

enum class TrainMode { plain_ft, mask_only, smooth_only, ufit };
enum class StageTag { stage1_ft, stage2_mlm, stage3_ufit };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::plain_ft: return "plain_ft";
    case TrainMode::mask_only: return "mask_only";
    case TrainMode::smooth_only: return "smooth_only";
    case TrainMode::ufit: return "ufit";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "plain_ft") return TrainMode::plain_ft;
  if (s == "mask_only") return TrainMode::mask_only;
  if (s == "smooth_only") return TrainMode::smooth_only;
  if (s == "ufit") return TrainMode::ufit;
  throw std::invalid_argument("unknown mode '" + s +
                              "' (valid: plain_ft, mask_only, smooth_only, ufit)");
}

inline const char* to_string(StageTag t) {
  switch (t) {
    case StageTag::stage1_ft: return "STAGE1_FT";
    case StageTag::stage2_mlm: return "STAGE2_MLM";
    case StageTag::stage3_ufit: return "STAGE3_UFIT";
  }
  return "?";
}

struct TrainConfig {
  EncoderConfig encoder;
  int batch_size = 64;
  double base_lr = 1e-4;
  double warmup_start_lr = 1e-5;
  double decay_factor = 0.6;
  int decay_every_epochs = 2;
  int max_epochs = 10;
  int patience = 2;
  double embedding_lr_factor = 0.5;
  double context_mask_fraction = 0.25;
  double mlm_probability = 0.15;
  double val_fraction = 0.1;
  long min_freq = 1;
  TrainMode mode = TrainMode::ufit;
  uint64_t seed = 1;
  LossWeights weights;
  SoftTripleParams st;
  ProxyConfig proxy;
  int keyword_top_k = 10;
  bool freeze_proxy_assignments = false;
  int jobs = 4;

  void validate() const {
    encoder.validate();
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (base_lr <= 0 || warmup_start_lr <= 0)
      throw std::invalid_argument("train config: learning rates must be positive");
    if (!(decay_factor > 0 && decay_factor <= 1))
      throw std::invalid_argument("train config: decay_factor must lie in (0,1]");
    if (!(embedding_lr_factor > 0 && embedding_lr_factor <= 1))
      throw std::invalid_argument("train config: embedding_lr_factor must lie in (0,1]");
    if (max_epochs < 1 || patience < 1 || decay_every_epochs < 1)
      throw std::invalid_argument("train config: epoch counts must be positive");
    if (!(context_mask_fraction >= 0 && context_mask_fraction < 1))
      throw std::invalid_argument("train config: context_mask_fraction must lie in [0,1)");
    if (!(mlm_probability >= 0 && mlm_probability <= 1))
      throw std::invalid_argument("train config: mlm_probability must lie in [0,1]");
    if (!(val_fraction > 0 && val_fraction < 0.5))
      throw std::invalid_argument("train config: val_fraction must lie in (0,0.5)");
    if (weights.lambda_mlm < 0 || weights.lambda_kl < 0 || weights.lambda_smooth < 0)
      throw std::invalid_argument("train config: loss weights must be >= 0");
    if (jobs < 1) throw std::invalid_argument("train config: jobs must be >= 1");
    proxy.validate();
  }
};

// Warmup over the first half-epoch, then stepped decay.
inline double lr_schedule(long step, long steps_per_epoch, const TrainConfig& cfg) {
  if (step < 0 || steps_per_epoch < 1) throw std::invalid_argument("lr_schedule: bad arguments");
  const long warmup = std::max<long>(1, steps_per_epoch / 2);
  if (step < warmup)
    return cfg.warmup_start_lr +
           (cfg.base_lr - cfg.warmup_start_lr) * static_cast<double>(step) / static_cast<double>(warmup);
  const long epoch = step / steps_per_epoch;
  return cfg.base_lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every_epochs));
}

inline void sgd_step(ModelParams& params, GradientSet& grads, double lr, double embedding_factor,
                     bool renorm_proxy) {
  for_each_tensor(
      params, grads,
      [&](Mat& p, const Mat& g, TensorKind kind) {
        p -= (kind == TensorKind::embedding ? lr * embedding_factor : lr) * g;
      },
      [&](Vec& p, const Vec& g, TensorKind kind) {
        p -= (kind == TensorKind::embedding ? lr * embedding_factor : lr) * g;
      });
  if (renorm_proxy) params.proxy.renormalize_columns();
}

struct Checkpoint {
  StageTag stage = StageTag::stage1_ft;
  TrainMode mode = TrainMode::plain_ft;
  int epoch = 0;
  double val_accuracy = 0;
  SoftTripleParams st;
  ModelParams params;
  Vocabulary vocab;
  std::optional<ProxySet> proxies;
  std::optional<KeywordTable> keywords;

  bool classifier_is_proxy() const {
    return stage == StageTag::stage3_ufit &&
           (mode == TrainMode::ufit || mode == TrainMode::smooth_only);
  }
};

// ---------------------------------------------------------------------------
// Checkpoint file: versioned binary dump of every tensor plus the vocabulary
// hash; loading verifies the hash against the supplied vocabulary.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void put_u64(std::ostream& out, uint64_t v) { put_bytes(out, &v, 8); }
inline void put_i32(std::ostream& out, int32_t v) { put_bytes(out, &v, 4); }
inline void put_f64(std::ostream& out, double v) { put_bytes(out, &v, 8); }
inline void put_mat(std::ostream& out, const Mat& m) {
  put_i32(out, static_cast<int32_t>(m.rows()));
  put_i32(out, static_cast<int32_t>(m.cols()));
  put_bytes(out, m.data(), sizeof(double) * static_cast<size_t>(m.size()));
}
inline void put_vec(std::ostream& out, const Vec& v) {
  put_i32(out, static_cast<int32_t>(v.size()));
  put_bytes(out, v.data(), sizeof(double) * static_cast<size_t>(v.size()));
}
inline void put_str(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  put_bytes(out, s.data(), s.size());
}

inline void get_bytes(std::istream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint file truncated");
}
inline uint64_t get_u64(std::istream& in) { uint64_t v; get_bytes(in, &v, 8); return v; }
inline int32_t get_i32(std::istream& in) { int32_t v; get_bytes(in, &v, 4); return v; }
inline double get_f64(std::istream& in) { double v; get_bytes(in, &v, 8); return v; }
inline Mat get_mat(std::istream& in) {
  const int r = get_i32(in), c = get_i32(in);
  Mat m(r, c);
  get_bytes(in, m.data(), sizeof(double) * static_cast<size_t>(m.size()));
  return m;
}
inline Vec get_vec(std::istream& in) {
  const int n = get_i32(in);
  Vec v(n);
  get_bytes(in, v.data(), sizeof(double) * static_cast<size_t>(v.size()));
  return v;
}
inline std::string get_str(std::istream& in) {
  std::string s(get_u64(in), '\0');
  get_bytes(in, s.data(), s.size());
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  using namespace detail;
  out.write("UFITCKP1", 8);
  put_u64(out, ckpt.vocab.hash());
  put_i32(out, static_cast<int32_t>(ckpt.stage));
  put_i32(out, static_cast<int32_t>(ckpt.mode));
  put_i32(out, ckpt.epoch);
  put_f64(out, ckpt.val_accuracy);
  put_f64(out, ckpt.st.lambda_scale);
  put_f64(out, ckpt.st.delta_margin);

  const auto& p = ckpt.params;
  put_i32(out, p.cfg.d_model);
  put_i32(out, p.cfg.num_heads);
  put_i32(out, p.cfg.num_blocks);
  put_i32(out, p.cfg.d_ff);
  put_i32(out, p.cfg.max_seq_len);
  put_i32(out, p.vocab_size);
  put_i32(out, p.num_classes);

  put_mat(out, p.tok_embed);
  put_mat(out, p.pos_embed);
  for (const auto& b : p.blocks) {
    put_mat(out, b.wq); put_mat(out, b.wk); put_mat(out, b.wv); put_mat(out, b.wo);
    put_mat(out, b.w1); put_vec(out, b.b1); put_mat(out, b.w2); put_vec(out, b.b2);
  }
  put_mat(out, p.mlm_head);
  put_mat(out, p.cls_head);
  put_mat(out, p.proxy.w);
  put_i32(out, static_cast<int32_t>(p.proxy.class_begin.size()));
  for (int v : p.proxy.class_begin) put_i32(out, v);

  put_i32(out, ckpt.proxies ? 1 : 0);
  if (ckpt.proxies) put_str(out, to_json(*ckpt.proxies).dump());
  put_i32(out, ckpt.keywords ? 1 : 0);
  if (ckpt.keywords) put_str(out, keyword_table_to_json(*ckpt.keywords).dump());
}

inline Checkpoint load_checkpoint(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  using namespace detail;
  char magic[8];
  get_bytes(in, magic, 8);
  if (std::memcmp(magic, "UFITCKP1", 8) != 0)
    throw std::runtime_error(path + ": not a checkpoint file");
  const uint64_t hash = get_u64(in);
  if (hash != vocab.hash())
    throw std::runtime_error(path + ": vocabulary hash mismatch; checkpoint was trained with a different vocabulary");

  Checkpoint ckpt;
  ckpt.vocab = vocab;
  ckpt.stage = static_cast<StageTag>(get_i32(in));
  ckpt.mode = static_cast<TrainMode>(get_i32(in));
  ckpt.epoch = get_i32(in);
  ckpt.val_accuracy = get_f64(in);
  ckpt.st.lambda_scale = get_f64(in);
  ckpt.st.delta_margin = get_f64(in);

  auto& p = ckpt.params;
  p.cfg.d_model = get_i32(in);
  p.cfg.num_heads = get_i32(in);
  p.cfg.num_blocks = get_i32(in);
  p.cfg.d_ff = get_i32(in);
  p.cfg.max_seq_len = get_i32(in);
  p.vocab_size = get_i32(in);
  p.num_classes = get_i32(in);

  p.tok_embed = get_mat(in);
  p.pos_embed = get_mat(in);
  p.blocks.resize(static_cast<size_t>(p.cfg.num_blocks));
  for (auto& b : p.blocks) {
    b.wq = get_mat(in); b.wk = get_mat(in); b.wv = get_mat(in); b.wo = get_mat(in);
    b.w1 = get_mat(in); b.b1 = get_vec(in); b.w2 = get_mat(in); b.b2 = get_vec(in);
  }
  p.mlm_head = get_mat(in);
  p.cls_head = get_mat(in);
  p.proxy.w = get_mat(in);
  const int nb = get_i32(in);
  p.proxy.class_begin.resize(static_cast<size_t>(nb));
  for (int& v : p.proxy.class_begin) v = get_i32(in);

  if (get_i32(in)) ckpt.proxies = proxyset_from_json(nlohmann::json::parse(get_str(in)));
  if (get_i32(in)) ckpt.keywords = keyword_table_from_json(nlohmann::json::parse(get_str(in)));
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training pipeline
// ---------------------------------------------------------------------------

struct AuditStats {
  long batches = 0;
  long violations = 0;
};

struct PipelineResult {
  Checkpoint final;
  std::vector<Checkpoint> stage_checkpoints;
  std::optional<ProxySet> proxies;
  std::optional<KeywordTable> keywords;
  std::vector<std::string> log_lines;  // line-delimited JSON records
  AuditStats audit;
};

namespace detail {

struct Prepared {
  Vocabulary vocab;
  std::vector<TokenSeq> tokens;
  std::vector<int> train_idx, val_idx;
};

inline Prepared prepare(const Dataset& data, const TrainConfig& cfg) {
  Prepared prep;
  prep.vocab = build_vocab(data, cfg.min_freq);
  prep.tokens.reserve(data.samples.size());
  for (const auto& s : data.samples)
    prep.tokens.push_back(tokenize(s.text, prep.vocab, cfg.encoder.max_seq_len));

  // stratified validation split by label
  std::map<int, std::vector<int>> by_label;
  for (size_t i = 0; i < data.samples.size(); ++i)
    by_label[data.samples[i].label].push_back(static_cast<int>(i));
  Rng rng(derive_seed(cfg.seed, 0x5b117u));
  for (auto& [label, idx] : by_label) {
    rng.shuffle(idx);
    long n_val = round_half_away(cfg.val_fraction * static_cast<double>(idx.size()));
    n_val = std::clamp(n_val, 0L, static_cast<long>(idx.size()) - 1);
    for (size_t i = 0; i < idx.size(); ++i)
      (i < static_cast<size_t>(n_val) ? prep.val_idx : prep.train_idx).push_back(idx[i]);
  }
  std::sort(prep.train_idx.begin(), prep.train_idx.end());
  std::sort(prep.val_idx.begin(), prep.val_idx.end());
  if (prep.train_idx.empty()) throw std::invalid_argument("training split is empty");
  return prep;
}

inline void audit_batch(const Dataset& data, const std::vector<int>& batch,
                        const std::set<std::string>& allowed, AuditStats& audit) {
  ++audit.batches;
  for (int i : batch)
    if (!allowed.count(data.samples[static_cast<size_t>(i)].campaign)) ++audit.violations;
}

struct StageOutcome {
  ModelParams best_params;
  double best_metric = 0;
  int best_epoch = 0;
  int epochs_run = 0;
};

// Shared epoch/batch loop with early stopping on a validation metric.
template <typename SpecFn, typename ValFn>
StageOutcome run_stage(ModelParams params, const Dataset& data, const Prepared& prep,
                       const TrainConfig& cfg, int stage_id, bool higher_is_better,
                       double embedding_factor, bool renorm_proxy,
                       const std::set<std::string>& allowed, AuditStats& audit,
                       std::vector<std::string>& log, SpecFn&& build_spec, ValFn&& validate) {
  const long n_train = static_cast<long>(prep.train_idx.size());
  const long spe = (n_train + cfg.batch_size - 1) / cfg.batch_size;

  StageOutcome out;
  out.best_params = params;
  out.best_metric = higher_is_better ? -std::numeric_limits<double>::infinity()
                                     : std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<int> order = prep.train_idx;
    Rng shuffle_rng(derive_seed(cfg.seed, 0xe70c5u, static_cast<uint64_t>(stage_id),
                                static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    for (long b = 0; b < spe; ++b) {
      const size_t lo = static_cast<size_t>(b) * static_cast<size_t>(cfg.batch_size);
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch_size));
      std::vector<int> batch(order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi));
      audit_batch(data, batch, allowed, audit);

      BatchLossSpec spec = build_spec(params, batch, epoch, step);
      GradientSet grads = GradientSet::zeros_like(params);
      LossBreakdown loss;
      try {
        loss = batch_backward(params, spec, grads, cfg.jobs);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string("training diverged at stage ") +
                                 std::to_string(stage_id) + ", step " + std::to_string(step) +
                                 ": " + e.what());
      }
      const double lr = lr_schedule(step, spe, cfg);
      sgd_step(params, grads, lr, embedding_factor, renorm_proxy);

      char line[256];
      std::snprintf(line, sizeof(line),
                    "{\"stage\":%d,\"step\":%ld,\"lr\":%.12g,\"task\":%.12g,\"mlm\":%.12g,"
                    "\"kl\":%.12g,\"smooth\":%.12g,\"total\":%.12g}",
                    stage_id, step, lr, loss.task, loss.mlm, loss.kl, loss.smooth, loss.total);
      log.emplace_back(line);
      ++step;
    }

    const double metric = validate(params);
    char line[160];
    std::snprintf(line, sizeof(line), "{\"stage\":%d,\"epoch\":%d,\"val_metric\":%.12g}",
                  stage_id, epoch, metric);
    log.emplace_back(line);
    out.epochs_run = epoch + 1;

    const bool improved = higher_is_better ? metric > out.best_metric : metric < out.best_metric;
    if (improved) {
      out.best_metric = metric;
      out.best_params = params;
      out.best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }
  return out;
}

inline double val_accuracy(const ModelParams& params, const Prepared& prep, const Dataset& data,
                           bool proxy_classifier) {
  if (prep.val_idx.empty()) return 0;
  long correct = 0;
  for (int i : prep.val_idx)
    if (predict_class(params, prep.tokens[static_cast<size_t>(i)], proxy_classifier) ==
        data.samples[static_cast<size_t>(i)].label)
      ++correct;
  return static_cast<double>(correct) / static_cast<double>(prep.val_idx.size());
}

}  // namespace detail

// Stage 1: encoder + dense classification head, plain cross-entropy.
inline Checkpoint stage1_finetune(const Dataset& data, const TrainConfig& cfg,
                                  const detail::Prepared& prep,
                                  const std::set<std::string>& allowed, AuditStats& audit,
                                  std::vector<std::string>& log) {
  Rng init_rng(derive_seed(cfg.seed, 0x1417u));
  ModelParams params = ModelParams::init(cfg.encoder, prep.vocab.size(), data.num_classes,
                                         std::vector<int>(static_cast<size_t>(data.num_classes), 1),
                                         init_rng);

  auto build = [&](const ModelParams&, const std::vector<int>& batch, int, long) {
    BatchLossSpec spec;
    spec.task = TaskKind::cross_entropy;
    spec.weights = LossWeights{0, 0, 0};
    for (int i : batch) {
      SampleLossSpec s;
      s.input = prep.tokens[static_cast<size_t>(i)];
      s.label = data.samples[static_cast<size_t>(i)].label;
      s.in_task = true;
      spec.samples.push_back(std::move(s));
    }
    return spec;
  };
  auto validate = [&](const ModelParams& p) { return detail::val_accuracy(p, prep, data, false); };

  auto outcome = detail::run_stage(std::move(params), data, prep, cfg, 1, true, 1.0, false,
                                   allowed, audit, log, build, validate);
  Checkpoint ckpt;
  ckpt.stage = StageTag::stage1_ft;
  ckpt.mode = cfg.mode;
  ckpt.st = cfg.st;
  ckpt.epoch = outcome.best_epoch;
  ckpt.val_accuracy = outcome.best_metric;
  ckpt.params = std::move(outcome.best_params);
  ckpt.vocab = prep.vocab;
  return ckpt;
}

// Stage 2: semantic masked-token training; classification head untouched.
inline Checkpoint stage2_semantic_mlm(const Checkpoint& prev, const KeywordTable& keywords,
                                      const Dataset& data, const TrainConfig& cfg,
                                      const detail::Prepared& prep,
                                      const std::set<std::string>& allowed, AuditStats& audit,
                                      std::vector<std::string>& log) {
  std::map<int, std::unordered_set<int>> class_ids;
  for (const auto& [cls, words] : keywords.class_keywords)
    class_ids[cls] = keyword_token_ids(words, prep.vocab);

  auto mask_for = [&](int i, uint64_t stream) {
    Rng rng(derive_seed(cfg.seed, stream, static_cast<uint64_t>(i)));
    const int label = data.samples[static_cast<size_t>(i)].label;
    static const std::unordered_set<int> kNone;
    auto it = class_ids.find(label);
    return semantic_mask(prep.tokens[static_cast<size_t>(i)],
                         it == class_ids.end() ? kNone : it->second, cfg.mlm_probability, rng);
  };

  auto build = [&](const ModelParams&, const std::vector<int>& batch, int epoch, long) {
    BatchLossSpec spec;
    spec.task = TaskKind::none;
    spec.weights = LossWeights{1.0, 0, 0};
    for (int i : batch) {
      MaskedSample ms = mask_for(i, derive_seed(0x2a5cu, static_cast<uint64_t>(epoch)));
      SampleLossSpec s;
      s.input = std::move(ms.tokens);
      s.mask_positions = std::move(ms.positions);
      s.mask_truth = std::move(ms.truth);
      spec.samples.push_back(std::move(s));
    }
    return spec;
  };

  // fixed masking for comparable validation loss across epochs
  auto validate = [&](const ModelParams& p) {
    BatchLossSpec spec;
    spec.task = TaskKind::none;
    spec.weights = LossWeights{1.0, 0, 0};
    for (int i : prep.val_idx) {
      MaskedSample ms = mask_for(i, 0x7a1du);
      SampleLossSpec s;
      s.input = std::move(ms.tokens);
      s.mask_positions = std::move(ms.positions);
      s.mask_truth = std::move(ms.truth);
      spec.samples.push_back(std::move(s));
    }
    if (spec.samples.empty()) return 0.0;
    return batch_loss(p, spec).mlm;
  };

  auto outcome = detail::run_stage(prev.params, data, prep, cfg, 2, false, 1.0, false, allowed,
                                   audit, log, build, validate);
  Checkpoint ckpt;
  ckpt.stage = StageTag::stage2_mlm;
  ckpt.mode = cfg.mode;
  ckpt.st = cfg.st;
  ckpt.epoch = outcome.best_epoch;
  ckpt.val_accuracy = prev.val_accuracy;
  ckpt.params = std::move(outcome.best_params);
  ckpt.vocab = prep.vocab;
  return ckpt;
}

// Stage 3: mode-dependent composite objective. Embedding layers update at a
// reduced learning rate; SoftTriple columns are renormalized after each step.
inline Checkpoint stage3_finetune_ufit(const Checkpoint& prev, const KeywordTable* keywords,
                                       const ProxySet* proxies, const Dataset& data,
                                       const TrainConfig& cfg, const detail::Prepared& prep,
                                       const std::set<std::string>& allowed, AuditStats& audit,
                                       std::vector<std::string>& log) {
  const bool use_softtriple = cfg.mode == TrainMode::ufit || cfg.mode == TrainMode::smooth_only;
  const bool use_masking = cfg.mode == TrainMode::ufit || cfg.mode == TrainMode::mask_only;
  if (use_masking && !keywords)
    throw std::invalid_argument("stage3: keyword table required for masking modes");
  if (use_softtriple && !proxies)
    throw std::invalid_argument("stage3: proxy set required for softtriple modes");

  ModelParams params = prev.params;
  if (use_softtriple) {
    std::vector<int> k_per_class = proxies->k_per_class;
    for (int& k : k_per_class) k = std::max(k, 1);
    Rng rng(derive_seed(cfg.seed, 0x5071u));
    params.reset_proxy_head(k_per_class, rng);
  }

  LossWeights w = cfg.weights;
  if (cfg.mode == TrainMode::mask_only) w.lambda_smooth = 0;
  if (cfg.mode == TrainMode::smooth_only) {
    w.lambda_mlm = 0;
    w.lambda_kl = 0;
  }

  std::map<int, std::unordered_set<int>> class_ids;
  if (use_masking)
    for (const auto& [cls, words] : keywords->class_keywords)
      class_ids[cls] = keyword_token_ids(words, prep.vocab);
  static const std::unordered_set<int> kNone;
  auto ids_for = [&](int label) -> const std::unordered_set<int>& {
    auto it = class_ids.find(label);
    return it == class_ids.end() ? kNone : it->second;
  };

  // frozen assignment: dataset index -> discovery-time proxy id
  std::map<int, int> frozen;
  if (use_softtriple && cfg.freeze_proxy_assignments)
    for (const auto& px : proxies->proxies)
      for (int i : px.members) frozen[i] = px.id;

  auto build = [&](const ModelParams& cur, const std::vector<int>& batch, int epoch, long step) {
    BatchLossSpec spec;
    spec.task = use_softtriple ? TaskKind::soft_triple : TaskKind::cross_entropy;
    spec.classifier_is_proxy = use_softtriple;
    spec.weights = w;
    spec.st = cfg.st;

    const int m = static_cast<int>(batch.size());
    std::vector<char> is_context(static_cast<size_t>(m), 0);
    if (use_masking && cfg.context_mask_fraction > 0) {
      std::vector<int> slots(static_cast<size_t>(m));
      std::iota(slots.begin(), slots.end(), 0);
      Rng pick(derive_seed(cfg.seed, 0xc73u, static_cast<uint64_t>(epoch), static_cast<uint64_t>(step)));
      pick.shuffle(slots);
      const long n_ctx = std::clamp(round_half_away(cfg.context_mask_fraction * m), 0L,
                                    static_cast<long>(m));
      for (long j = 0; j < n_ctx; ++j) is_context[static_cast<size_t>(slots[static_cast<size_t>(j)])] = 1;
    }

    for (int bi = 0; bi < m; ++bi) {
      const int i = batch[static_cast<size_t>(bi)];
      const auto& sample = data.samples[static_cast<size_t>(i)];
      const auto& kw = ids_for(sample.label);
      SampleLossSpec s;
      s.label = sample.label;
      if (use_masking && is_context[static_cast<size_t>(bi)]) {
        // keyword-only view, pushed toward an uninformative prediction
        s.input = context_mask(prep.tokens[static_cast<size_t>(i)], kw);
        s.in_kl = true;
      } else {
        if (use_masking) {
          Rng mask_rng(derive_seed(cfg.seed, 0x3a5e3u, static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(i)));
          MaskedSample ms = semantic_mask(prep.tokens[static_cast<size_t>(i)], kw,
                                          cfg.mlm_probability, mask_rng);
          s.input = std::move(ms.tokens);
          s.mask_positions = std::move(ms.positions);
          s.mask_truth = std::move(ms.truth);
        } else {
          s.input = prep.tokens[static_cast<size_t>(i)];
        }
        s.in_task = true;
        if (use_softtriple && w.lambda_smooth > 0) {
          if (cfg.freeze_proxy_assignments) {
            auto it = frozen.find(i);
            if (it != frozen.end()) s.proxy_id = it->second;
          } else {
            s.proxy_id = assign_proxy(embed(cur, s.input), *proxies);
          }
        }
      }
      spec.samples.push_back(std::move(s));
    }
    return spec;
  };

  auto validate = [&](const ModelParams& p) {
    return detail::val_accuracy(p, prep, data, use_softtriple);
  };

  auto outcome = detail::run_stage(std::move(params), data, prep, cfg, 3, true,
                                   cfg.embedding_lr_factor, use_softtriple, allowed, audit, log,
                                   build, validate);
  Checkpoint ckpt;
  ckpt.stage = StageTag::stage3_ufit;
  ckpt.mode = cfg.mode;
  ckpt.st = cfg.st;
  ckpt.epoch = outcome.best_epoch;
  ckpt.val_accuracy = outcome.best_metric;
  ckpt.params = std::move(outcome.best_params);
  ckpt.vocab = prep.vocab;
  return ckpt;
}

// Full pipeline: stage 1, proxy discovery, keyword extraction, stage 2,
// stage 3, per the configured mode.
inline PipelineResult train_pipeline(const Dataset& data, const TrainConfig& cfg,
                                     const std::set<std::string>* allowed_campaigns = nullptr) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_pipeline: empty dataset");

  std::set<std::string> allowed;
  if (allowed_campaigns) {
    allowed = *allowed_campaigns;
  } else {
    for (const auto& tag : data.campaign_order) allowed.insert(tag);
  }

  PipelineResult result;
  detail::Prepared prep = detail::prepare(data, cfg);

  Checkpoint ckpt1 = stage1_finetune(data, cfg, prep, allowed, result.audit, result.log_lines);
  result.stage_checkpoints.push_back(ckpt1);
  if (cfg.mode == TrainMode::plain_ft) {
    result.final = std::move(ckpt1);
    return result;
  }

  // stage-1 embeddings and token attentions over the whole training dataset
  const int n = static_cast<int>(data.samples.size());
  std::vector<Vec> embeddings(static_cast<size_t>(n));
  std::vector<Vec> attentions(static_cast<size_t>(n));
  parallel_chunks(n, 8, cfg.jobs, [&](int begin, int end, int) {
    for (int i = begin; i < end; ++i) {
      EncoderOutput out = forward_sample(ckpt1.params, prep.tokens[static_cast<size_t>(i)]);
      embeddings[static_cast<size_t>(i)] = std::move(out.pooled);
      attentions[static_cast<size_t>(i)] = std::move(out.token_attention);
    }
  });
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(n));
  for (const auto& s : data.samples) labels.push_back(s.label);

  ProxyConfig pcfg = cfg.proxy;
  pcfg.seed = derive_seed(cfg.seed, 0x9c0f7u, pcfg.seed);
  result.proxies = discover_proxies(embeddings, labels, data.num_classes, pcfg);

  if (cfg.mode != TrainMode::smooth_only) {
    // keywords from each proxy's high-density core
    std::map<int, std::vector<ScoredWord>> proxy_scores;
    std::map<int, int> proxy_class;
    for (const auto& px : result.proxies->proxies) {
      std::vector<TokenSeq> members;
      std::vector<Vec> member_attn;
      std::vector<int> lengths;
      for (int i : px.high_density) {
        members.push_back(prep.tokens[static_cast<size_t>(i)]);
        member_attn.push_back(attentions[static_cast<size_t>(i)]);
        lengths.push_back(prep.tokens[static_cast<size_t>(i)].length());
      }
      proxy_class[px.id] = px.label;
      if (members.empty()) {
        proxy_scores[px.id] = {};
        continue;
      }
      proxy_scores[px.id] =
          word_attention_scores(members, member_attn, median_length(lengths), prep.vocab);
    }
    result.keywords = aggregate_keywords(proxy_scores, proxy_class, cfg.keyword_top_k);
  }

  Checkpoint stage3_base = ckpt1;
  if (cfg.mode == TrainMode::mask_only || cfg.mode == TrainMode::ufit) {
    Checkpoint ckpt2 = stage2_semantic_mlm(ckpt1, *result.keywords, data, cfg, prep, allowed,
                                           result.audit, result.log_lines);
    result.stage_checkpoints.push_back(ckpt2);
    stage3_base = std::move(ckpt2);
  }

  Checkpoint ckpt3 = stage3_finetune_ufit(
      stage3_base, result.keywords ? &*result.keywords : nullptr,
      result.proxies ? &*result.proxies : nullptr, data, cfg, prep, allowed, result.audit,
      result.log_lines);
  ckpt3.proxies = result.proxies;
  ckpt3.keywords = result.keywords;
  result.stage_checkpoints.push_back(ckpt3);
  result.final = std::move(ckpt3);
  return result;
}

// ---------------------------------------------------------------------------
// TrainConfig file and run artifacts
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["d_model"] = cfg.encoder.d_model;
  j["num_heads"] = cfg.encoder.num_heads;
  j["num_blocks"] = cfg.encoder.num_blocks;
  j["d_ff"] = cfg.encoder.d_ff;
  j["max_seq_len"] = cfg.encoder.max_seq_len;
  j["batch_size"] = cfg.batch_size;
  j["base_lr"] = cfg.base_lr;
  j["warmup_start_lr"] = cfg.warmup_start_lr;
  j["decay_factor"] = cfg.decay_factor;
  j["decay_every_epochs"] = cfg.decay_every_epochs;
  j["max_epochs"] = cfg.max_epochs;
  j["patience"] = cfg.patience;
  j["embedding_lr_factor"] = cfg.embedding_lr_factor;
  j["context_mask_fraction"] = cfg.context_mask_fraction;
  j["mlm_probability"] = cfg.mlm_probability;
  j["val_fraction"] = cfg.val_fraction;
  j["min_freq"] = cfg.min_freq;
  j["mode"] = to_string(cfg.mode);
  j["seed"] = cfg.seed;
  j["lambda_mlm"] = cfg.weights.lambda_mlm;
  j["lambda_kl"] = cfg.weights.lambda_kl;
  j["lambda_smooth"] = cfg.weights.lambda_smooth;
  j["st_lambda"] = cfg.st.lambda_scale;
  j["st_delta"] = cfg.st.delta_margin;
  j["alpha"] = cfg.proxy.alpha;
  j["p_max"] = cfg.proxy.p_max;
  j["k_selection"] = cfg.proxy.selection == KSelection::gap ? "gap" : "elbow";
  j["kmeans_iters"] = cfg.proxy.kmeans_iters;
  j["kmeans_restarts"] = cfg.proxy.restarts;
  j["keyword_top_k"] = cfg.keyword_top_k;
  j["freeze_proxy_assignments"] = cfg.freeze_proxy_assignments;
  j["jobs"] = cfg.jobs;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.encoder.d_model = j.value("d_model", cfg.encoder.d_model);
  cfg.encoder.num_heads = j.value("num_heads", cfg.encoder.num_heads);
  cfg.encoder.num_blocks = j.value("num_blocks", cfg.encoder.num_blocks);
  cfg.encoder.d_ff = j.value("d_ff", cfg.encoder.d_ff);
  cfg.encoder.max_seq_len = j.value("max_seq_len", cfg.encoder.max_seq_len);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.warmup_start_lr = j.value("warmup_start_lr", cfg.warmup_start_lr);
  cfg.decay_factor = j.value("decay_factor", cfg.decay_factor);
  cfg.decay_every_epochs = j.value("decay_every_epochs", cfg.decay_every_epochs);
  cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
  cfg.patience = j.value("patience", cfg.patience);
  cfg.embedding_lr_factor = j.value("embedding_lr_factor", cfg.embedding_lr_factor);
  cfg.context_mask_fraction = j.value("context_mask_fraction", cfg.context_mask_fraction);
  cfg.mlm_probability = j.value("mlm_probability", cfg.mlm_probability);
  cfg.val_fraction = j.value("val_fraction", cfg.val_fraction);
  cfg.min_freq = j.value("min_freq", cfg.min_freq);
  if (j.contains("mode")) cfg.mode = train_mode_from_string(j.at("mode").get<std::string>());
  cfg.seed = j.value("seed", cfg.seed);
  cfg.weights.lambda_mlm = j.value("lambda_mlm", cfg.weights.lambda_mlm);
  cfg.weights.lambda_kl = j.value("lambda_kl", cfg.weights.lambda_kl);
  cfg.weights.lambda_smooth = j.value("lambda_smooth", cfg.weights.lambda_smooth);
  cfg.st.lambda_scale = j.value("st_lambda", cfg.st.lambda_scale);
  cfg.st.delta_margin = j.value("st_delta", cfg.st.delta_margin);
  cfg.proxy.alpha = j.value("alpha", cfg.proxy.alpha);
  cfg.proxy.p_max = j.value("p_max", cfg.proxy.p_max);
  if (j.contains("k_selection")) {
    const std::string sel = j.at("k_selection").get<std::string>();
    if (sel == "gap") cfg.proxy.selection = KSelection::gap;
    else if (sel == "elbow") cfg.proxy.selection = KSelection::elbow;
    else throw std::invalid_argument("train config: k_selection must be 'gap' or 'elbow'");
  }
  cfg.proxy.kmeans_iters = j.value("kmeans_iters", cfg.proxy.kmeans_iters);
  cfg.proxy.restarts = j.value("kmeans_restarts", cfg.proxy.restarts);
  cfg.keyword_top_k = j.value("keyword_top_k", cfg.keyword_top_k);
  cfg.freeze_proxy_assignments = j.value("freeze_proxy_assignments", cfg.freeze_proxy_assignments);
  cfg.jobs = j.value("jobs", cfg.jobs);
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": malformed JSON: " + std::string(e.what()));
  }
  return train_config_from_json(j);
}

inline void write_run_artifacts(const PipelineResult& result, const TrainConfig& cfg,
                                const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto at = [&dir](const std::string& name) { return (fs::path(dir) / name).string(); };

  result.final.vocab.save(at("vocab.txt"));
  {
    std::ofstream out(at("config.json"), std::ios::binary);
    out << to_json(cfg).dump(2) << '\n';
  }
  for (const auto& ckpt : result.stage_checkpoints) {
    const int stage_no = ckpt.stage == StageTag::stage1_ft   ? 1
                         : ckpt.stage == StageTag::stage2_mlm ? 2
                                                              : 3;
    save_checkpoint(ckpt, at("checkpoint_stage" + std::to_string(stage_no) + ".ckpt"));
  }
  save_checkpoint(result.final, at("final.ckpt"));
  if (result.proxies) save_proxyset(*result.proxies, at("proxies.json"));
  if (result.keywords) {
    save_keyword_tsv(*result.keywords, at("keywords.tsv"));
    save_mask_sets(*result.keywords, at("mask_sets.json"));
  }
  {
    std::ofstream out(at("train_log.ndjson"), std::ios::binary);
    for (const auto& line : result.log_lines) out << line << '\n';
  }
}

}  // namespace ufit

