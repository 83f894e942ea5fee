#pragma once

#include <chrono>
#include <cstddef>

namespace twig {

// Wall-clock split of one generation run.
struct TimingReport {
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;
  std::size_t tokens_generated = 0;

  double total_seconds() const { return prefill_seconds + decode_seconds; }
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }
  void reset() { start_ = std::chrono::steady_clock::now(); }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace twig
