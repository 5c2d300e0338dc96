#pragma once

#include <cstdint>
#include <vector>

namespace fstm::bench {

struct ScanTiming {
  std::size_t length = 0;
  double seconds = 0.0;        // best of the repeats
  std::size_t checked = 0;     // leading outputs compared with the oracle
  double oracle_rel_err = 0.0;
};

struct ScanBenchReport {
  std::size_t state = 16;
  std::size_t channels = 4;
  std::vector<ScanTiming> rows;
  // Least-squares slope of log(time) against log(L); NaN with < 2 lengths.
  double loglog_slope = 0.0;
};

// Times selective_scan with time-invariant parameters on one sequence per
// length. The convolution oracle is quadratic, so it is compared on the
// first min(L, oracle_prefix) outputs (the scan is causal).
ScanBenchReport bench_scan(const std::vector<std::size_t>& lengths, std::size_t state,
                           std::size_t channels, std::size_t repeats, std::uint64_t seed,
                           std::size_t oracle_prefix = 512);

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace fstm::bench
