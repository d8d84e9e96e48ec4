#pragma once

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "ufit/common.hpp"

namespace ufit {

enum class KSelection { elbow, gap };

struct ProxyConfig {
  double alpha = 0.5;       // fraction of low-density points filtered out
  int p_max = 5;            // K sweep upper bound per class
  KSelection selection = KSelection::gap;
  int kmeans_iters = 100;
  int restarts = 5;
  uint64_t seed = 0;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0))
      throw std::invalid_argument("proxy config: alpha must lie in (0,1)");
    if (p_max < 1) throw std::invalid_argument("proxy config: p_max must be >= 1");
    if (kmeans_iters < 1 || restarts < 1)
      throw std::invalid_argument("proxy config: iteration counts must be positive");
  }
};

struct KMeansResult {
  std::vector<int> assignments;
  std::vector<Vec> centroids;
  double inertia = 0;
  std::vector<double> inertia_trace;  // after each assignment step
};

namespace detail {

inline double sqdist(const Vec& a, const Vec& b) { return (a - b).squaredNorm(); }

inline int nearest_centroid(const Vec& x, const std::vector<Vec>& centroids) {
  int best = 0;
  double best_d = sqdist(x, centroids[0]);
  for (size_t c = 1; c < centroids.size(); ++c) {
    const double d = sqdist(x, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
// from the point farthest from its assigned centroid.
inline KMeansResult kmeans(const std::vector<Vec>& points, int k, uint64_t seed,
                           int max_iters = 100) {
  const int n = static_cast<int>(points.size());
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (k > n) throw std::invalid_argument("kmeans: k exceeds number of points");
  Rng rng(seed);

  // k-means++ seeding
  std::vector<Vec> centroids;
  centroids.reserve(static_cast<size_t>(k));
  centroids.push_back(points[static_cast<size_t>(rng.uniform_int(n))]);
  std::vector<double> d2(static_cast<size_t>(n));
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0;
    for (int i = 0; i < n; ++i) {
      double best = detail::sqdist(points[static_cast<size_t>(i)], centroids[0]);
      for (size_t c = 1; c < centroids.size(); ++c)
        best = std::min(best, detail::sqdist(points[static_cast<size_t>(i)], centroids[c]));
      d2[static_cast<size_t>(i)] = best;
      total += best;
    }
    if (total <= 0) {
      // all remaining mass at existing centroids; fall back to first unchosen index
      int pick = 0;
      for (int i = 0; i < n; ++i)
        if (d2[static_cast<size_t>(i)] > 0 ||
            std::none_of(centroids.begin(), centroids.end(),
                         [&](const Vec& c) { return c == points[static_cast<size_t>(i)]; })) {
          pick = i;
          break;
        }
      centroids.push_back(points[static_cast<size_t>(pick)]);
      continue;
    }
    const double target = rng.uniform() * total;
    double acc = 0;
    int pick = n - 1;
    for (int i = 0; i < n; ++i) {
      acc += d2[static_cast<size_t>(i)];
      if (acc >= target) {
        pick = i;
        break;
      }
    }
    centroids.push_back(points[static_cast<size_t>(pick)]);
  }

  KMeansResult res;
  res.assignments.assign(static_cast<size_t>(n), -1);
  std::vector<int> prev(static_cast<size_t>(n), -2);

  for (int iter = 0; iter < max_iters; ++iter) {
    double inertia = 0;
    for (int i = 0; i < n; ++i) {
      const int c = detail::nearest_centroid(points[static_cast<size_t>(i)], centroids);
      res.assignments[static_cast<size_t>(i)] = c;
      inertia += detail::sqdist(points[static_cast<size_t>(i)], centroids[static_cast<size_t>(c)]);
    }
    res.inertia_trace.push_back(inertia);
    res.inertia = inertia;
    if (res.assignments == prev) break;
    prev = res.assignments;

    std::vector<Vec> sums(static_cast<size_t>(k), Vec::Zero(points[0].size()));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      sums[static_cast<size_t>(res.assignments[static_cast<size_t>(i)])] += points[static_cast<size_t>(i)];
      ++counts[static_cast<size_t>(res.assignments[static_cast<size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        centroids[static_cast<size_t>(c)] = sums[static_cast<size_t>(c)] / counts[static_cast<size_t>(c)];
      } else {
        // re-seed from the farthest point
        int far = 0;
        double far_d = -1;
        for (int i = 0; i < n; ++i) {
          const double d = detail::sqdist(points[static_cast<size_t>(i)],
                                          centroids[static_cast<size_t>(res.assignments[static_cast<size_t>(i)])]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        centroids[static_cast<size_t>(c)] = points[static_cast<size_t>(far)];
      }
    }
  }
  res.centroids = std::move(centroids);
  return res;
}

inline KMeansResult kmeans_restarts(const std::vector<Vec>& points, int k, uint64_t seed,
                                    int max_iters, int restarts) {
  KMeansResult best;
  for (int r = 0; r < restarts; ++r) {
    KMeansResult cur = kmeans(points, k, derive_seed(seed, 0x9e1u, static_cast<uint64_t>(r)), max_iters);
    if (r == 0 || cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

// Largest second difference of the inertia curve (index 0 holds K=1).
// Ties resolve to the smaller K.
inline int elbow_from_inertia(const std::vector<double>& inertia) {
  const int p_max = static_cast<int>(inertia.size());
  if (p_max < 3) return 1;
  int best_k = 2;
  double best_d2 = -std::numeric_limits<double>::infinity();
  for (int k = 2; k <= p_max - 1; ++k) {
    const double d2 = inertia[static_cast<size_t>(k) - 2] - 2.0 * inertia[static_cast<size_t>(k) - 1] +
                      inertia[static_cast<size_t>(k)];
    if (d2 > best_d2) {
      best_d2 = d2;
      best_k = k;
    }
  }
  return best_k;
}

// Chooses K in 1..p_max. GAP compares log-inertia to uniform reference sets
// in the data bounding box; ELBOW takes the largest second difference of the
// inertia curve. Ties resolve to the smaller K.
inline int select_k(const std::vector<Vec>& points, int p_max, KSelection method, uint64_t seed,
                    int kmeans_iters = 100, int restarts = 5) {
  const int n = static_cast<int>(points.size());
  if (n == 0) throw std::invalid_argument("select_k: no points");
  p_max = std::min(p_max, n);

  bool degenerate = true;
  for (int i = 1; i < n && degenerate; ++i)
    if (points[static_cast<size_t>(i)] != points[0]) degenerate = false;
  if (degenerate || p_max == 1) return 1;

  std::vector<double> inertia(static_cast<size_t>(p_max), 0.0);
  for (int k = 1; k <= p_max; ++k)
    inertia[static_cast<size_t>(k) - 1] =
        kmeans_restarts(points, k, derive_seed(seed, 0xdadau, static_cast<uint64_t>(k)),
                        kmeans_iters, restarts).inertia;

  if (method == KSelection::elbow) return elbow_from_inertia(inertia);

  // gap statistic with B uniform reference sets
  const int B = 10;
  const int dim = static_cast<int>(points[0].size());
  Vec lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }

  int best_k = 1;
  double best_gap = -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= p_max; ++k) {
    double ref_log = 0;
    for (int b = 0; b < B; ++b) {
      Rng rng(derive_seed(seed, 0xabcdu, static_cast<uint64_t>(k), static_cast<uint64_t>(b)));
      std::vector<Vec> ref(static_cast<size_t>(n), Vec(dim));
      for (auto& p : ref)
        for (int d = 0; d < dim; ++d) p(d) = rng.uniform(lo(d), hi(d));
      const double w = kmeans_restarts(ref, k, derive_seed(seed, 0xeeffu, static_cast<uint64_t>(k), static_cast<uint64_t>(b)),
                                       kmeans_iters, restarts).inertia;
      ref_log += std::log(std::max(w, 1e-300));
    }
    ref_log /= B;
    const double gap = ref_log - std::log(std::max(inertia[static_cast<size_t>(k) - 1], 1e-300));
    if (gap > best_gap + 1e-12) {
      best_gap = gap;
      best_k = k;
    }
  }
  return best_k;
}

// Keeps the round((1-alpha)*n) members closest to the centroid; at least one.
inline std::vector<int> alpha_density_filter(const std::vector<Vec>& members, const Vec& centroid,
                                             double alpha) {
  const int n = static_cast<int>(members.size());
  if (n == 0) throw std::invalid_argument("alpha_density_filter: no members");
  long keep = round_half_away((1.0 - alpha) * n);
  keep = std::clamp(keep, 1L, static_cast<long>(n));

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> dist(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) dist[static_cast<size_t>(i)] = (members[static_cast<size_t>(i)] - centroid).norm();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (dist[static_cast<size_t>(a)] != dist[static_cast<size_t>(b)])
      return dist[static_cast<size_t>(a)] < dist[static_cast<size_t>(b)];
    return a < b;
  });
  order.resize(static_cast<size_t>(keep));
  std::sort(order.begin(), order.end());
  return order;
}

struct Proxy {
  int id = 0;
  int label = 0;
  Vec centroid;
  std::vector<int> members;       // dataset sample indices
  std::vector<int> high_density;  // subset of members
};

struct ProxySet {
  std::vector<Proxy> proxies;
  std::vector<int> k_per_class;

  int size() const { return static_cast<int>(proxies.size()); }
};

// Per label class: choose K, cluster, and keep each cluster's high-density core.
inline ProxySet discover_proxies(const std::vector<Vec>& embeddings, const std::vector<int>& labels,
                                 int num_classes, const ProxyConfig& cfg) {
  cfg.validate();
  if (embeddings.size() != labels.size())
    throw std::invalid_argument("discover_proxies: one label per embedding required");
  if (embeddings.empty()) throw std::invalid_argument("discover_proxies: no embeddings");

  ProxySet out;
  out.k_per_class.assign(static_cast<size_t>(num_classes), 0);
  int next_id = 0;

  for (int cls = 0; cls < num_classes; ++cls) {
    std::vector<int> idx;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(static_cast<int>(i));
    if (idx.empty()) continue;

    std::vector<Vec> pts;
    pts.reserve(idx.size());
    for (int i : idx) pts.push_back(embeddings[static_cast<size_t>(i)]);

    const int n_cls = static_cast<int>(idx.size());
    int p_cap = cfg.p_max;
    if (n_cls < 2 * cfg.p_max) p_cap = std::max(1, n_cls / 2);

    const uint64_t cls_seed = derive_seed(cfg.seed, 0xc1a55u, static_cast<uint64_t>(cls));
    const int k = select_k(pts, p_cap, cfg.selection, cls_seed, cfg.kmeans_iters, cfg.restarts);
    out.k_per_class[static_cast<size_t>(cls)] = k;

    const KMeansResult km = kmeans_restarts(pts, k, derive_seed(cls_seed, 0xf17u),
                                            cfg.kmeans_iters, cfg.restarts);
    for (int c = 0; c < k; ++c) {
      Proxy px;
      px.id = next_id++;
      px.label = cls;
      px.centroid = km.centroids[static_cast<size_t>(c)];
      std::vector<Vec> member_pts;
      for (int j = 0; j < n_cls; ++j)
        if (km.assignments[static_cast<size_t>(j)] == c) {
          px.members.push_back(idx[static_cast<size_t>(j)]);
          member_pts.push_back(pts[static_cast<size_t>(j)]);
        }
      if (px.members.empty()) continue;  // stale centroid after convergence
      for (int local : alpha_density_filter(member_pts, px.centroid, cfg.alpha))
        px.high_density.push_back(px.members[static_cast<size_t>(local)]);
      out.proxies.push_back(std::move(px));
    }
  }
  if (out.proxies.empty()) throw std::runtime_error("discover_proxies: produced no proxies");
  return out;
}

// Nearest centroid; ties resolve to the lower proxy id.
inline int assign_proxy(const Vec& embedding, const ProxySet& set) {
  if (set.proxies.empty()) throw std::invalid_argument("assign_proxy: empty proxy set");
  int best = set.proxies[0].id;
  double best_d = (embedding - set.proxies[0].centroid).squaredNorm();
  for (size_t i = 1; i < set.proxies.size(); ++i) {
    const double d = (embedding - set.proxies[i].centroid).squaredNorm();
    if (d < best_d || (d == best_d && set.proxies[i].id < best)) {
      best_d = d;
      best = set.proxies[i].id;
    }
  }
  return best;
}

inline nlohmann::ordered_json to_json(const ProxySet& set) {
  nlohmann::ordered_json j;
  j["k_per_class"] = set.k_per_class;
  auto& arr = j["proxies"] = nlohmann::ordered_json::array();
  for (const auto& p : set.proxies) {
    nlohmann::ordered_json pj;
    pj["id"] = p.id;
    pj["class"] = p.label;
    pj["centroid"] = std::vector<double>(p.centroid.data(), p.centroid.data() + p.centroid.size());
    pj["members"] = p.members;
    pj["high_density"] = p.high_density;
    arr.push_back(std::move(pj));
  }
  return j;
}

inline ProxySet proxyset_from_json(const nlohmann::json& j) {
  ProxySet set;
  set.k_per_class = j.at("k_per_class").get<std::vector<int>>();
  for (const auto& pj : j.at("proxies")) {
    Proxy p;
    p.id = pj.at("id").get<int>();
    p.label = pj.at("class").get<int>();
    const auto c = pj.at("centroid").get<std::vector<double>>();
    p.centroid = Eigen::Map<const Vec>(c.data(), static_cast<long>(c.size()));
    p.members = pj.at("members").get<std::vector<int>>();
    p.high_density = pj.at("high_density").get<std::vector<int>>();
    set.proxies.push_back(std::move(p));
  }
  return set;
}

inline void save_proxyset(const ProxySet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write proxy file: " + path);
  out << to_json(set).dump(2) << '\n';
}

inline ProxySet load_proxyset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read proxy file: " + path);
  nlohmann::json j;
  in >> j;
  return proxyset_from_json(j);
}

}  // namespace ufit
