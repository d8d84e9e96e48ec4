#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "ufit/proxies.hpp"

using namespace ufit;

namespace {

Vec v2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

std::vector<Vec> two_blobs(uint64_t seed, int per_blob = 30, double sep = 10.0, double sigma = 0.4) {
  Rng rng(seed);
  std::vector<Vec> pts;
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < per_blob; ++i)
      pts.push_back(v2(b * sep + sigma * rng.normal(), sigma * rng.normal()));
  return pts;
}

}  // namespace

TEST_CASE("kmeans finds the optimal 2-partition on the rectangle fixture", "[proxies]") {
  const std::vector<Vec> pts{v2(0, 0), v2(0, 1), v2(10, 0), v2(10, 1)};
  const KMeansResult res = kmeans_restarts(pts, 2, 7, 100, 5);
  std::vector<Vec> cents = res.centroids;
  std::sort(cents.begin(), cents.end(), [](const Vec& a, const Vec& b) { return a(0) < b(0); });
  CHECK((cents[0] - v2(0, 0.5)).norm() == Catch::Approx(0.0).margin(1e-12));
  CHECK((cents[1] - v2(10, 0.5)).norm() == Catch::Approx(0.0).margin(1e-12));
  CHECK(res.inertia == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("kmeans closed forms: k=1 mean, k=n zero inertia", "[proxies]") {
  const std::vector<Vec> pts{v2(1, 2), v2(3, 4), v2(5, 0)};
  const KMeansResult one = kmeans(pts, 1, 3);
  CHECK((one.centroids[0] - v2(3, 2)).norm() == Catch::Approx(0.0).margin(1e-12));

  const KMeansResult all = kmeans(pts, 3, 3);
  CHECK(all.inertia == Catch::Approx(0.0).margin(1e-15));

  CHECK_THROWS_AS(kmeans(pts, 4, 3), std::invalid_argument);
}

TEST_CASE("kmeans inertia never increases across iterations", "[proxies]") {
  Rng rng(5);
  for (uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<Vec> pts;
    for (int i = 0; i < 60; ++i) pts.push_back(v2(rng.uniform(0, 10), rng.uniform(0, 10)));
    const KMeansResult res = kmeans(pts, 4, seed);
    for (size_t i = 1; i < res.inertia_trace.size(); ++i)
      CHECK(res.inertia_trace[i] <= res.inertia_trace[i - 1] + 1e-9);
  }
}

TEST_CASE("gap statistic picks K=2 on two separated blobs", "[proxies]") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    const auto pts = two_blobs(seed);
    CHECK(select_k(pts, 5, KSelection::gap, seed) == 2);
  }
}

TEST_CASE("elbow picks the largest second difference", "[proxies]") {
  // second differences of [100, 20, 18, 17] are {78, 1}
  CHECK(elbow_from_inertia({100, 20, 18, 17}) == 2);
  CHECK(elbow_from_inertia({100, 60, 21, 20}) == 3);
  CHECK(elbow_from_inertia({100, 50}) == 1);  // too short for a second difference

  const auto pts = two_blobs(3);
  CHECK(select_k(pts, 4, KSelection::elbow, 3) == 2);
}

TEST_CASE("select_k degenerate inputs give K=1", "[proxies]") {
  std::vector<Vec> same(12, v2(1, 1));
  CHECK(select_k(same, 5, KSelection::gap, 1) == 1);
  CHECK(select_k(same, 5, KSelection::elbow, 1) == 1);
}

TEST_CASE("alpha filter keeps the closest half with tie and floor rules", "[proxies]") {
  const std::vector<Vec> members{Vec::Constant(1, 0.0), Vec::Constant(1, 1.0),
                                 Vec::Constant(1, 2.0), Vec::Constant(1, 10.0)};
  const Vec centroid = Vec::Constant(1, 3.25);
  const auto kept = alpha_density_filter(members, centroid, 0.5);
  CHECK(kept == std::vector<int>{1, 2});

  // alpha near zero keeps everyone
  CHECK(alpha_density_filter(members, centroid, 0.001).size() == 4);

  // single member survives any alpha
  CHECK(alpha_density_filter({v2(0, 0)}, v2(5, 5), 0.5) == std::vector<int>{0});
}

TEST_CASE("alpha filter equals the brute-force sort oracle", "[proxies]") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + rng.uniform_int(40);
    std::vector<Vec> members;
    for (int i = 0; i < n; ++i) members.push_back(v2(rng.uniform(-5, 5), rng.uniform(-5, 5)));
    const Vec centroid = v2(rng.uniform(-5, 5), rng.uniform(-5, 5));
    const double alpha = 0.05 + 0.9 * rng.uniform();

    const auto got = alpha_density_filter(members, centroid, alpha);

    // oracle: sort (distance, index) pairs and take the first round((1-a)n)
    std::vector<std::pair<double, int>> pairs;
    for (int i = 0; i < n; ++i) pairs.emplace_back((members[static_cast<size_t>(i)] - centroid).norm(), i);
    std::sort(pairs.begin(), pairs.end());
    long keep = round_half_away((1.0 - alpha) * n);
    keep = std::clamp(keep, 1L, static_cast<long>(n));
    std::vector<int> expect;
    for (long i = 0; i < keep; ++i) expect.push_back(pairs[static_cast<size_t>(i)].second);
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);
  }
}

TEST_CASE("discover_proxies partitions each class and sizes high-density cores", "[proxies]") {
  // two classes, each with two planted sub-topics
  Rng rng(21);
  std::vector<Vec> embeds;
  std::vector<int> labels;
  for (int cls = 0; cls < 2; ++cls)
    for (int sub = 0; sub < 2; ++sub)
      for (int i = 0; i < 25; ++i) {
        embeds.push_back(v2(cls * 40 + sub * 12 + 0.3 * rng.normal(), 0.3 * rng.normal()));
        labels.push_back(cls);
      }

  ProxyConfig cfg;
  cfg.p_max = 4;
  cfg.seed = 9;
  const ProxySet set = discover_proxies(embeds, labels, 2, cfg);
  CHECK(set.size() == 4);
  CHECK(set.k_per_class == std::vector<int>{2, 2});

  std::vector<int> seen(embeds.size(), 0);
  for (const auto& px : set.proxies) {
    for (int i : px.members) {
      CHECK(labels[static_cast<size_t>(i)] == px.label);
      seen[static_cast<size_t>(i)]++;
    }
    // alpha=0.5 keeps round(half), at least one
    const long expect = std::max(1L, round_half_away(0.5 * static_cast<double>(px.members.size())));
    CHECK(static_cast<long>(px.high_density.size()) == expect);
  }
  for (int count : seen) CHECK(count == 1);
}

TEST_CASE("discover_proxies degenerate class sizes", "[proxies]") {
  const std::vector<Vec> embeds{v2(0, 0), v2(5, 5)};
  const std::vector<int> labels{0, 1};
  ProxyConfig cfg;
  cfg.seed = 1;
  const ProxySet set = discover_proxies(embeds, labels, 2, cfg);
  REQUIRE(set.size() == 2);
  for (const auto& px : set.proxies) {
    CHECK(px.members.size() == 1);
    CHECK(px.high_density == px.members);
  }
}

TEST_CASE("assign_proxy picks nearest centroid with low-id tie-break", "[proxies]") {
  ProxySet set;
  for (int i = 0; i < 4; ++i) {
    Proxy p;
    p.id = i;
    p.label = i % 2;
    p.centroid = v2(i * 2.0, 0);
    set.proxies.push_back(p);
  }
  CHECK(assign_proxy(v2(4.0, 0), set) == 2);   // exact centroid
  CHECK(assign_proxy(v2(3.0, 0), set) == 1);   // equidistant to 1 and 2
  CHECK_THROWS_AS(assign_proxy(v2(0, 0), ProxySet{}), std::invalid_argument);
}

TEST_CASE("proxyset json round-trip", "[proxies]") {
  Rng rng(31);
  std::vector<Vec> embeds;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    embeds.push_back(v2(rng.uniform(0, 4), rng.uniform(0, 4)));
    labels.push_back(i % 2);
  }
  ProxyConfig cfg;
  cfg.p_max = 2;
  cfg.seed = 2;
  const ProxySet set = discover_proxies(embeds, labels, 2, cfg);

  const auto path = std::filesystem::temp_directory_path() / "ufit_proxies.json";
  save_proxyset(set, path.string());
  const ProxySet back = load_proxyset(path.string());
  REQUIRE(back.size() == set.size());
  for (int i = 0; i < set.size(); ++i) {
    CHECK(back.proxies[static_cast<size_t>(i)].id == set.proxies[static_cast<size_t>(i)].id);
    CHECK(back.proxies[static_cast<size_t>(i)].members == set.proxies[static_cast<size_t>(i)].members);
    CHECK((back.proxies[static_cast<size_t>(i)].centroid - set.proxies[static_cast<size_t>(i)].centroid).norm() == 0.0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("clustering is deterministic under a fixed seed", "[proxies]") {
  const auto pts = two_blobs(13, 40);
  const KMeansResult a = kmeans(pts, 3, 99);
  const KMeansResult b = kmeans(pts, 3, 99);
  CHECK(a.assignments == b.assignments);
  CHECK(a.inertia == b.inertia);
}
