#pragma once

#include <cstdint>

namespace lmdepth {

namespace detail {
inline thread_local std::uint64_t mac_counter = 0;
}  // namespace detail

inline void count_macs(std::uint64_t n) { detail::mac_counter += n; }

// Counts multiply-accumulates issued by forward kernels on this thread while
// alive. Counts are analytic (derived from operand dims), not sampled.
class MacMeter {
 public:
  MacMeter() : start_(detail::mac_counter) {}
  std::uint64_t count() const { return detail::mac_counter - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace lmdepth
