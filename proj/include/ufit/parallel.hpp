#pragma once

#include <atomic>
#include <thread>
#include <vector>

namespace ufit {

// Runs fn(begin, end, chunk_index) over fixed-size chunks. Chunk boundaries
// depend only on n and num_chunks, never on the worker count, so callers can
// reduce per-chunk results in chunk order and stay bit-reproducible for any
// --jobs value.
template <typename F>
void parallel_chunks(int n, int num_chunks, int jobs, F&& fn) {
  if (n <= 0) return;
  num_chunks = std::min(std::max(num_chunks, 1), n);
  const int chunk = (n + num_chunks - 1) / num_chunks;
  const int actual_chunks = (n + chunk - 1) / chunk;

  auto run_chunk = [&](int ci) {
    const int begin = ci * chunk;
    const int end = std::min(begin + chunk, n);
    fn(begin, end, ci);
  };

  if (jobs <= 1 || actual_chunks == 1) {
    for (int ci = 0; ci < actual_chunks; ++ci) run_chunk(ci);
    return;
  }

  std::atomic<int> next{0};
  auto worker = [&] {
    for (int ci = next.fetch_add(1); ci < actual_chunks; ci = next.fetch_add(1)) run_chunk(ci);
  };
  std::vector<std::thread> pool;
  const int nw = std::min(jobs, actual_chunks);
  pool.reserve(static_cast<size_t>(nw - 1));
  for (int w = 1; w < nw; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

}  // namespace ufit
