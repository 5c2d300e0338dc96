#include "fstm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "fstm/error.hpp"
#include "fstm/params.hpp"
#include "fstm/ssm.hpp"

namespace fstm::bench {

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 2 || x.size() != y.size()) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

ScanBenchReport bench_scan(const std::vector<std::size_t>& lengths, std::size_t state,
                           std::size_t channels, std::size_t repeats, std::uint64_t seed,
                           std::size_t oracle_prefix) {
  require(!lengths.empty(), ErrorKind::invalid_argument, "bench: no lengths given");
  require(state >= 1 && channels >= 1 && repeats >= 1, ErrorKind::invalid_argument,
          "bench: state, channels and repeats must be >= 1");
  Rng rng(seed);
  ssm::SsmParams p = ssm::init_ssm_params(channels, state, rng);
  p.delta_w.fill(0.0);
  p.b_w.fill(0.0);
  p.c_w.fill(0.0);
  for (auto& v : p.b_b.data()) v = rng.uniform(-1.0, 1.0);
  for (auto& v : p.c_b.data()) v = rng.uniform(-1.0, 1.0);

  ScanBenchReport rep;
  rep.state = state;
  rep.channels = channels;
  std::vector<double> xs, ys;
  for (std::size_t len : lengths) {
    require(len >= 1, ErrorKind::invalid_argument, "bench: lengths must be >= 1");
    Tensor x({1, len, channels});
    for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
    ScanTiming row;
    row.length = len;
    row.seconds = std::numeric_limits<double>::infinity();
    Tensor y;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      y = ssm::selective_scan({x, "bench"}, p);
      const auto t1 = std::chrono::steady_clock::now();
      row.seconds = std::min(row.seconds, std::chrono::duration<double>(t1 - t0).count());
    }
    row.checked = std::min(len, oracle_prefix);
    for (std::size_t e = 0; e < channels; ++e) {
      const double dt = ad::softplus_value(p.delta_b[e]);
      std::vector<double> ab(state), bb(state), cc(state), col(row.checked);
      for (std::size_t n = 0; n < state; ++n) {
        const auto d = ssm::discretize(-std::exp(p.a_log[e * state + n]), p.b_b[n], dt);
        ab[n] = d.a_bar;
        bb[n] = d.b_bar;
        cc[n] = p.c_b[n];
      }
      for (std::size_t t = 0; t < row.checked; ++t) col[t] = x[t * channels + e];
      const auto ref = ssm::ssm_conv_oracle(col, ab, bb, cc, p.d_skip[e]);
      double num = 0, den = 0;
      for (std::size_t t = 0; t < row.checked; ++t) {
        num = std::max(num, std::abs(y[t * channels + e] - ref[t]));
        den = std::max(den, std::abs(ref[t]));
      }
      row.oracle_rel_err = std::max(row.oracle_rel_err, num / std::max(den, 1e-300));
    }
    rep.rows.push_back(row);
    xs.push_back(static_cast<double>(len));
    ys.push_back(std::max(row.seconds, 1e-9));
  }
  rep.loglog_slope = loglog_slope(xs, ys);
  return rep;
}

}  // namespace fstm::bench
