#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

namespace spec {

// Fixed text form for floats in CSV output: 9 significant digits.
inline std::string format_g9(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

inline uint64_t fnv1a64(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items are
// independent; callers own any ordering of results (typically by writing into
// a pre-sized vector slot i).
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

// Thread count resolution: SPEC_THREADS env var overrides the requested
// value; 0 means hardware concurrency.
int resolve_threads(int requested);

}  // namespace spec
