#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ufit/trainer.hpp"

namespace ufit {

inline std::vector<TokenSeq> tokenize_all(const Dataset& data, const Vocabulary& vocab,
                                          int max_len) {
  std::vector<TokenSeq> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) out.push_back(tokenize(s.text, vocab, max_len));
  return out;
}

inline double accuracy(const Checkpoint& ckpt, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  const auto tokens = tokenize_all(data, ckpt.vocab, ckpt.params.cfg.max_seq_len);
  long correct = 0;
  for (size_t i = 0; i < tokens.size(); ++i)
    if (predict_class(ckpt.params, tokens[i], ckpt.classifier_is_proxy()) ==
        data.samples[i].label)
      ++correct;
  return static_cast<double>(correct) / static_cast<double>(tokens.size());
}

// Accuracy before and after replacing every keyword occurrence (union over
// classes) with the mask token in the test inputs.
inline std::pair<double, double> keyword_masked_eval(const Checkpoint& ckpt, const Dataset& data,
                                                     const KeywordTable& table) {
  if (data.empty()) throw std::invalid_argument("keyword_masked_eval: empty dataset");
  const auto ids = keyword_token_ids(table.all_keywords(), ckpt.vocab);
  const auto tokens = tokenize_all(data, ckpt.vocab, ckpt.params.cfg.max_seq_len);
  long plain = 0, masked = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const int label = data.samples[i].label;
    if (predict_class(ckpt.params, tokens[i], ckpt.classifier_is_proxy()) == label) ++plain;
    TokenSeq m = tokens[i];
    for (size_t j = 1; j < m.ids.size(); ++j)
      if (ids.count(m.ids[j])) m.ids[j] = Vocabulary::kMask;
    if (predict_class(ckpt.params, m, ckpt.classifier_is_proxy()) == label) ++masked;
  }
  const double n = static_cast<double>(tokens.size());
  return {plain / n, masked / n};
}

// ---------------------------------------------------------------------------
// Local Lipschitz scoring: per proxy, the steepest probability change per
// unit of embedding distance over member pairs; the L-score is the max.
// ---------------------------------------------------------------------------

struct LipschitzReport {
  std::map<int, double> per_proxy;
  double l_score = 0;
  double paired_accuracy = 0;
};

inline LipschitzReport lipschitz_score(const Checkpoint& ckpt, const ProxySet& proxies,
                                       const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("lipschitz_score: empty dataset");
  const auto tokens = tokenize_all(data, ckpt.vocab, ckpt.params.cfg.max_seq_len);
  const bool proxy_cls = ckpt.classifier_is_proxy();
  const size_t n = tokens.size();

  std::vector<Vec> embeds(n), probs(n);
  long correct = 0;
  for (size_t i = 0; i < n; ++i) {
    embeds[i] = embed(ckpt.params, tokens[i]);
    if (proxy_cls) {
      const auto st = softtriple_similarities(embeds[i], ckpt.params.proxy);
      probs[i] = softmax(ckpt.st.lambda_scale * st.similarities);
      int best = 0;
      st.similarities.maxCoeff(&best);
      if (best == data.samples[i].label) ++correct;
    } else {
      const Vec logits = ckpt.params.cls_head.transpose() * embeds[i];
      probs[i] = softmax(logits);
      int best = 0;
      logits.maxCoeff(&best);
      if (best == data.samples[i].label) ++correct;
    }
  }

  std::map<int, std::vector<int>> members;
  for (const auto& px : proxies.proxies) members[px.id];  // report every proxy
  for (size_t i = 0; i < n; ++i)
    members[assign_proxy(embeds[i], proxies)].push_back(static_cast<int>(i));

  LipschitzReport report;
  report.paired_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  for (const auto& [pid, idx] : members) {
    double worst = 0;
    for (size_t a = 0; a < idx.size(); ++a)
      for (size_t b = a + 1; b < idx.size(); ++b) {
        const double dist = (embeds[static_cast<size_t>(idx[a])] - embeds[static_cast<size_t>(idx[b])]).norm();
        if (dist < 1e-9) continue;
        const double num =
            (probs[static_cast<size_t>(idx[a])] - probs[static_cast<size_t>(idx[b])]).lpNorm<1>();
        worst = std::max(worst, num / dist);
      }
    report.per_proxy[pid] = worst;
    report.l_score = std::max(report.l_score, worst);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Welch two-sided t-test
// ---------------------------------------------------------------------------

namespace detail {

inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

inline double ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 3 || b.size() < 3)
    throw std::invalid_argument("ttest: need at least 3 runs per side");
  auto stats = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= (n - 1.0);
    return std::pair<double, double>(mean, var);
  };
  const auto [ma, va] = stats(a);
  const auto [mb, vb] = stats(b);
  const double sa = va / static_cast<double>(a.size());
  const double sb = vb / static_cast<double>(b.size());
  if (sa + sb <= 0) return ma == mb ? 1.0 : 0.0;
  const double t = (ma - mb) / std::sqrt(sa + sb);
  const double df = (sa + sb) * (sa + sb) /
                    (sa * sa / (static_cast<double>(a.size()) - 1.0) +
                     sb * sb / (static_cast<double>(b.size()) - 1.0));
  const double p = detail::ibeta(df / 2.0, 0.5, df / (df + t * t));
  return std::clamp(p, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Evaluation grid
// ---------------------------------------------------------------------------

enum class EvalProtocol { incremental, pairwise, oracle };

inline const char* to_string(EvalProtocol p) {
  switch (p) {
    case EvalProtocol::incremental: return "incremental";
    case EvalProtocol::pairwise: return "pairwise";
    case EvalProtocol::oracle: return "oracle";
  }
  return "?";
}

struct EvalOptions {
  EvalProtocol protocol = EvalProtocol::incremental;
  int runs = 5;
  std::vector<TrainMode> modes{TrainMode::plain_ft, TrainMode::mask_only, TrainMode::smooth_only,
                               TrainMode::ufit};
  TrainMode reference_mode = TrainMode::plain_ft;
  bool include_variants = true;  // fixed-first, prior-year, oracle rows for incremental
  double id_holdout = 0.2;
  double oracle_holdout = 0.2;
  int jobs = 4;
};

struct EvalCell {
  std::string mode;
  std::string kind;  // inc | prior | oracle | pair
  int k = 0;
  uint64_t seed = 0;
  std::string split;  // id | nnad | fixed_first | prior_year | oracle
  std::string test_campaign;
  double accuracy = 0;
};

struct AggregateStat {
  double mean = 0;
  double stddev = 0;
  int n = 0;
};

struct EvalReport {
  std::string protocol;
  int runs = 0;
  std::string reference_mode;
  std::vector<std::string> modes;
  std::vector<EvalCell> cells;
  std::map<std::string, std::map<std::string, AggregateStat>> aggregates;      // mode -> split
  std::map<std::string, std::map<std::string, AggregateStat>> per_campaign;    // mode -> campaign (nnad-like splits)
  std::map<std::string, std::map<std::string, double>> p_values;               // mode -> split, vs reference
  AuditStats audit;
};

// Stratified by (campaign, label); returns (rest, holdout).
inline std::pair<Dataset, Dataset> stratified_holdout(const Dataset& data, double fraction,
                                                      uint64_t seed) {
  std::map<std::pair<std::string, int>, std::vector<int>> strata;
  for (size_t i = 0; i < data.samples.size(); ++i)
    strata[{data.samples[i].campaign, data.samples[i].label}].push_back(static_cast<int>(i));

  std::vector<char> held(data.samples.size(), 0);
  Rng rng(derive_seed(seed, 0x5717a7u));
  for (auto& [key, idx] : strata) {
    rng.shuffle(idx);
    long n_hold = round_half_away(fraction * static_cast<double>(idx.size()));
    n_hold = std::clamp(n_hold, 0L, static_cast<long>(idx.size()) - 1);
    for (long j = 0; j < n_hold; ++j) held[static_cast<size_t>(idx[static_cast<size_t>(j)])] = 1;
  }

  Dataset rest, holdout;
  rest.num_classes = holdout.num_classes = data.num_classes;
  rest.campaign_order = holdout.campaign_order = data.campaign_order;
  for (size_t i = 0; i < data.samples.size(); ++i)
    (held[i] ? holdout : rest).samples.push_back(data.samples[i]);
  return {std::move(rest), std::move(holdout)};
}

namespace detail {

struct EvalJob {
  TrainMode mode;
  int run = 0;
  uint64_t seed = 0;
  std::string kind;
  int k = 0;
  Dataset train;
  std::set<std::string> allowed;
  std::optional<Dataset> id_test;
  std::vector<std::pair<std::string, Dataset>> tests;  // split name + data
};

struct EvalJobResult {
  std::vector<EvalCell> cells;
  AuditStats audit;
};

inline EvalJobResult run_eval_job(const EvalJob& job, const TrainConfig& base) {
  TrainConfig cfg = base;
  cfg.mode = job.mode;
  cfg.seed = job.seed;
  cfg.jobs = 1;  // grid-level parallelism only

  PipelineResult trained = train_pipeline(job.train, cfg, &job.allowed);
  EvalJobResult out;
  out.audit = trained.audit;

  auto cell = [&](const std::string& split, const std::string& campaign, double acc) {
    out.cells.push_back(EvalCell{to_string(job.mode), job.kind, job.k, job.seed, split, campaign, acc});
  };
  if (job.id_test && !job.id_test->empty())
    cell("id", "", accuracy(trained.final, *job.id_test));
  for (const auto& [split, test_data] : job.tests) {
    const std::string campaign =
        test_data.campaign_order.size() == 1 ? test_data.campaign_order[0] : "";
    cell(split, campaign, accuracy(trained.final, test_data));
  }
  return out;
}

inline AggregateStat aggregate(const std::vector<double>& v) {
  AggregateStat s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.n;
  if (s.n > 1) {
    double var = 0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / (s.n - 1));
  }
  return s;
}

}  // namespace detail

// Trains one classifier per grid cell and measures the configured splits.
// Never lets a test campaign into the corresponding training set; every
// training batch is audited against the cell's allowed campaign tags.
inline EvalReport incremental_eval(const Dataset& data, const TrainConfig& base,
                                   const EvalOptions& opt) {
  const int num_campaigns = static_cast<int>(data.campaign_order.size());
  if (num_campaigns < 2) throw std::invalid_argument("incremental_eval: need at least 2 campaigns");
  if (opt.runs < 1) throw std::invalid_argument("incremental_eval: runs must be >= 1");

  auto campaign_data = [&](int c) {
    return subset_by_campaigns(data, {data.campaign_order[static_cast<size_t>(c)]});
  };
  auto tags_up_to = [&](int k) {
    return std::vector<std::string>(data.campaign_order.begin(),
                                    data.campaign_order.begin() + k + 1);
  };

  std::vector<detail::EvalJob> jobs;
  for (const TrainMode mode : opt.modes) {
    for (int run = 0; run < opt.runs; ++run) {
      const uint64_t seed = base.seed + static_cast<uint64_t>(run);

      if (opt.protocol == EvalProtocol::incremental) {
        for (int k = 0; k + 1 < num_campaigns; ++k) {
          detail::EvalJob job;
          job.mode = mode;
          job.run = run;
          job.seed = seed;
          job.kind = "inc";
          job.k = k;
          const Dataset pool = subset_by_campaigns(data, tags_up_to(k));
          auto [train, id_test] = stratified_holdout(pool, opt.id_holdout, seed);
          job.train = std::move(train);
          job.id_test = std::move(id_test);
          for (const auto& tag : tags_up_to(k)) job.allowed.insert(tag);
          job.tests.emplace_back("nnad", campaign_data(k + 1));
          if (k == 0 && opt.include_variants)
            for (int later = 1; later < num_campaigns; ++later)
              job.tests.emplace_back("fixed_first", campaign_data(later));
          jobs.push_back(std::move(job));
        }
        if (opt.include_variants) {
          for (int k = 1; k + 1 < num_campaigns; ++k) {
            detail::EvalJob job;
            job.mode = mode;
            job.run = run;
            job.seed = seed;
            job.kind = "prior";
            job.k = k;
            job.train = campaign_data(k);
            job.allowed.insert(data.campaign_order[static_cast<size_t>(k)]);
            job.tests.emplace_back("prior_year", campaign_data(k + 1));
            jobs.push_back(std::move(job));
          }
        }
      }

      if (opt.protocol == EvalProtocol::oracle ||
          (opt.protocol == EvalProtocol::incremental && opt.include_variants)) {
        for (int k = 0; k + 1 < num_campaigns; ++k) {
          detail::EvalJob job;
          job.mode = mode;
          job.run = run;
          job.seed = seed;
          job.kind = "oracle";
          job.k = k;
          auto [next_train, next_test] =
              stratified_holdout(campaign_data(k + 1), opt.oracle_holdout, seed);
          Dataset train = subset_by_campaigns(data, tags_up_to(k));
          for (auto& s : next_train.samples) train.samples.push_back(std::move(s));
          train.campaign_order = tags_up_to(k + 1);
          job.train = std::move(train);
          for (const auto& tag : tags_up_to(k + 1)) job.allowed.insert(tag);
          job.tests.emplace_back("oracle", std::move(next_test));
          jobs.push_back(std::move(job));
        }
      }

      if (opt.protocol == EvalProtocol::pairwise) {
        for (int a = 0; a < num_campaigns; ++a)
          for (int b = 0; b < num_campaigns; ++b) {
            if (a == b) continue;
            detail::EvalJob job;
            job.mode = mode;
            job.run = run;
            job.seed = seed;
            job.kind = "pair";
            job.k = a;
            auto [train, id_test] = stratified_holdout(campaign_data(a), opt.id_holdout, seed);
            job.train = std::move(train);
            job.id_test = std::move(id_test);
            job.allowed.insert(data.campaign_order[static_cast<size_t>(a)]);
            job.tests.emplace_back("nnad", campaign_data(b));
            jobs.push_back(std::move(job));
          }
      }
    }
  }

  std::vector<detail::EvalJobResult> results(jobs.size());
  parallel_chunks(static_cast<int>(jobs.size()), static_cast<int>(jobs.size()), opt.jobs,
                  [&](int begin, int end, int) {
                    for (int i = begin; i < end; ++i)
                      results[static_cast<size_t>(i)] =
                          detail::run_eval_job(jobs[static_cast<size_t>(i)], base);
                  });

  EvalReport report;
  report.protocol = to_string(opt.protocol);
  report.runs = opt.runs;
  report.reference_mode = to_string(opt.reference_mode);
  for (const TrainMode m : opt.modes) report.modes.push_back(to_string(m));
  for (auto& r : results) {
    report.audit.batches += r.audit.batches;
    report.audit.violations += r.audit.violations;
    for (auto& c : r.cells) report.cells.push_back(std::move(c));
  }

  // per-run means, aggregated over runs
  // mode -> split -> run -> values
  std::map<std::string, std::map<std::string, std::map<uint64_t, std::vector<double>>>> grouped;
  std::map<std::string, std::map<std::string, std::map<uint64_t, std::vector<double>>>> by_campaign;
  for (const auto& c : report.cells) {
    grouped[c.mode][c.split][c.seed].push_back(c.accuracy);
    if (!c.test_campaign.empty()) by_campaign[c.mode][c.test_campaign][c.seed].push_back(c.accuracy);
  }
  auto run_means = [](const std::map<uint64_t, std::vector<double>>& runs) {
    std::vector<double> means;
    for (const auto& [seed, vals] : runs) means.push_back(detail::aggregate(vals).mean);
    return means;
  };
  for (const auto& [mode, splits] : grouped)
    for (const auto& [split, runs] : splits)
      report.aggregates[mode][split] = detail::aggregate(run_means(runs));
  for (const auto& [mode, campaigns] : by_campaign)
    for (const auto& [campaign, runs] : campaigns)
      report.per_campaign[mode][campaign] = detail::aggregate(run_means(runs));

  const std::string ref = report.reference_mode;
  if (opt.runs >= 3 && grouped.count(ref)) {
    for (const auto& [mode, splits] : grouped) {
      if (mode == ref) continue;
      for (const auto& [split, runs] : splits) {
        auto it = grouped.at(ref).find(split);
        if (it == grouped.at(ref).end()) continue;
        const auto a = run_means(runs);
        const auto b = run_means(it->second);
        if (a.size() >= 3 && b.size() >= 3) report.p_values[mode][split] = ttest(a, b);
      }
    }
  }
  return report;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["protocol"] = r.protocol;
  j["runs"] = r.runs;
  j["reference_mode"] = r.reference_mode;
  j["modes"] = r.modes;
  auto& cells = j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : r.cells) {
    nlohmann::ordered_json cj;
    cj["mode"] = c.mode;
    cj["kind"] = c.kind;
    cj["k"] = c.k;
    cj["seed"] = c.seed;
    cj["split"] = c.split;
    cj["test_campaign"] = c.test_campaign;
    cj["accuracy"] = c.accuracy;
    cells.push_back(std::move(cj));
  }
  auto stat_json = [](const AggregateStat& s) {
    return nlohmann::ordered_json{{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}};
  };
  auto& agg = j["aggregates"] = nlohmann::ordered_json::object();
  for (const auto& [mode, splits] : r.aggregates)
    for (const auto& [split, stat] : splits) agg[mode][split] = stat_json(stat);
  auto& perc = j["per_campaign"] = nlohmann::ordered_json::object();
  for (const auto& [mode, campaigns] : r.per_campaign)
    for (const auto& [campaign, stat] : campaigns) perc[mode][campaign] = stat_json(stat);
  auto& pv = j["p_values"] = nlohmann::ordered_json::object();
  for (const auto& [mode, splits] : r.p_values)
    for (const auto& [split, p] : splits) pv[mode][split] = p;
  j["audit"] = {{"batches", r.audit.batches}, {"violations", r.audit.violations}};
  return j;
}

inline void save_report_json(const EvalReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << to_json(r).dump(2) << '\n';
}

inline void save_report_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << "mode,kind,k,seed,split,test_campaign,accuracy\n";
  char buf[64];
  for (const auto& c : r.cells) {
    std::snprintf(buf, sizeof(buf), "%.17g", c.accuracy);
    out << c.mode << ',' << c.kind << ',' << c.k << ',' << c.seed << ',' << c.split << ','
        << c.test_campaign << ',' << buf << '\n';
  }
}

}  // namespace ufit
