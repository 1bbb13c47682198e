#pragma once

#include <cstdint>
#include <vector>

namespace bilevel {

// Chunked parallel reduction with a thread-count-independent result:
// the index range is split into a fixed number of chunks, each chunk is
// accumulated serially in index order, and chunk states are merged in
// ascending chunk order. Summation order is therefore identical
// whether the loop runs on 1 thread or many.
template <class State, class Body, class Merge>
State parallel_chunked(std::uint64_t n, State init, Body&& body,
                       Merge&& merge) {
  constexpr std::uint64_t kChunks = 256;
  const std::uint64_t chunks = n < kChunks ? (n == 0 ? 1 : n) : kChunks;
  std::vector<State> partial(chunks, init);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t c = 0; c < static_cast<std::int64_t>(chunks); ++c) {
    const std::uint64_t lo = n * c / chunks;
    const std::uint64_t hi = n * (c + 1) / chunks;
    for (std::uint64_t i = lo; i < hi; ++i) body(partial[c], i);
  }
  State out = init;
  for (std::uint64_t c = 0; c < chunks; ++c) merge(out, partial[c]);
  return out;
}

}  // namespace bilevel
