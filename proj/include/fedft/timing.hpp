#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <utility>

namespace fedft {

/// Monotonic wall-clock stopwatch.
class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}

  void restart() { start_ = std::chrono::steady_clock::now(); }

  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
        .count();
  }

  std::uint64_t elapsed_whole_ms() const {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                              start_)
            .count());
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct TimedBlock {
  std::string label;
  double elapsed_ms = 0.0;
};

/// Runs `fn` and reports how long it took.
template <typename Fn>
TimedBlock time_block(std::string label, Fn&& fn) {
  Stopwatch sw;
  std::forward<Fn>(fn)();
  return {std::move(label), sw.elapsed_ms()};
}

}  // namespace fedft
