#include <doctest.h>

#include <cmath>

#include "fstm/dfnc.hpp"
#include "fstm/error.hpp"
#include "support.hpp"

using namespace fstm;

namespace {

// Two-pass Pearson correlation of columns a and b over rows [t0, t0 + w).
double naive_corr(const Tensor& x, std::size_t s, std::size_t t0, std::size_t w, std::size_t a,
                  std::size_t b) {
  double ma = 0, mb = 0;
  for (std::size_t t = t0; t < t0 + w; ++t) {
    ma += x.at({s, t, a});
    mb += x.at({s, t, b});
  }
  ma /= w;
  mb /= w;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t t = t0; t < t0 + w; ++t) {
    const double da = x.at({s, t, a}) - ma, db = x.at({s, t, b}) - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  return sab / std::sqrt(saa * sbb);
}

dfnc::SyntheticCohortSpec small_spec() {
  dfnc::SyntheticCohortSpec s;
  s.n_subjects = 20;
  s.n_components = 8;
  s.n_networks = 2;
  s.t_total = 30;
  s.window = 10;
  s.effects = {{1, 0, 1, 0.4}};
  s.seed = 9;
  return s;
}

}  // namespace

TEST_CASE("window count") {
  CHECK(dfnc::window_count(100, 10, 1) == 91);
  CHECK(dfnc::window_count(100, 10, 5) == 19);
  CHECK(dfnc::window_count(10, 10, 1) == 1);
  CHECK_THROWS_AS(dfnc::window_count(9, 10, 1), Error);
  CHECK_THROWS_AS(dfnc::window_count(30, 2, 1), Error);
  CHECK_THROWS_AS(dfnc::window_count(30, 10, 0), Error);
}

TEST_CASE("sliding-window dFNC matches a naive Pearson loop") {
  // Three AR(1) components.
  Rng rng(1);
  const std::size_t total = 40, n = 3;
  dfnc::ComponentTimeSeries ts{Tensor({2, total, n}), 0.72};
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t c = 0; c < n; ++c) {
      double v = rng.normal();
      for (std::size_t t = 0; t < total; ++t) {
        v = 0.6 * v + 0.8 * rng.normal();
        ts.data.at({s, t, c}) = v + 0.3 * c;
      }
    }
  const Tensor f = dfnc::sliding_window_dfnc(ts, 10, 1);
  REQUIRE(f.shape() == Shape{2, n, n, 31});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t w = 0; w < 31; ++w)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double ref = i == j ? 1.0 : naive_corr(ts.data, s, w, 10, i, j);
          CHECK(std::abs(f.at({s, i, j, w}) - ref) < 1e-12);
        }
}

TEST_CASE("dFNC of a constant component") {
  dfnc::ComponentTimeSeries ts{Tensor({1, 12, 2}), 0.72};
  for (std::size_t t = 0; t < 12; ++t) {
    ts.data.at({0, t, 0}) = 4.0;
    ts.data.at({0, t, 1}) = std::sin(0.7 * t);
  }
  const Tensor f = dfnc::sliding_window_dfnc(ts, 5, 2);
  CHECK(f.dim(3) == 4);
  for (std::size_t w = 0; w < 4; ++w) {
    CHECK(f.at({0, 0, 1, w}) == 0.0);
    CHECK(f.at({0, 0, 0, w}) == 1.0);
    CHECK(f.at({0, 1, 1, w}) == 1.0);
  }
}

TEST_CASE("generator is seeded, balanced and shaped") {
  const auto spec = small_spec();
  const auto a = dfnc::generate_synthetic_cohort(spec);
  const auto b = dfnc::generate_synthetic_cohort(spec);
  CHECK(a.series.data == b.series.data);
  CHECK(a.labels == b.labels);
  CHECK(a.series.data.shape() == Shape{20, 30, 8});
  int ones = 0;
  for (int l : a.labels) ones += l;
  CHECK(ones == 10);
  auto other = spec;
  other.seed = 10;
  CHECK(!(dfnc::generate_synthetic_cohort(other).series.data == a.series.data));
}

TEST_CASE("coupling offset shows up in the class-mean dFNC") {
  dfnc::SyntheticCohortSpec spec;
  spec.n_subjects = 500;
  spec.n_components = 8;
  spec.n_networks = 4;
  spec.t_total = 60;
  spec.window = 10;
  spec.effects = {{1, 0, 1, 0.4}};
  spec.noise_std = 0.01;
  spec.seed = 21;
  const auto co = dfnc::generate_synthetic_cohort(spec);
  const Tensor f = dfnc::sliding_window_dfnc(co.series, 10, 1);
  // block (network 0: components 0-1, network 1: components 2-3)
  double sum[2] = {0, 0}, other[2] = {0, 0};
  std::size_t cnt[2] = {0, 0};
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    const int l = co.labels[s];
    ++cnt[l];
    for (std::size_t w = 0; w < f.dim(3); ++w)
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 2; j < 4; ++j) {
          sum[l] += f.at({s, i, j, w}) / (4.0 * f.dim(3));
          other[l] += f.at({s, i, j + 2, w}) / (4.0 * f.dim(3));
        }
  }
  const double diff = sum[1] / cnt[1] - sum[0] / cnt[0];
  CHECK(std::abs(diff - 0.4) <= 0.05);
  CHECK(std::abs(other[1] / cnt[1] - other[0] / cnt[0]) < 0.05);
}

TEST_CASE("large noise washes out the class signal") {
  auto spec = small_spec();
  spec.n_subjects = 200;
  spec.noise_std = 1e3;
  const auto co = dfnc::generate_synthetic_cohort(spec);
  const Tensor f = dfnc::sliding_window_dfnc(co.series, 10, 1);
  double m[2] = {0, 0};
  for (std::size_t s = 0; s < spec.n_subjects; ++s)
    for (std::size_t w = 0; w < f.dim(3); ++w)
      m[co.labels[s]] += f.at({s, 0, 4, w}) / (100.0 * f.dim(3));
  CHECK(std::abs(m[1] - m[0]) < 0.05);
}

TEST_CASE("infeasible specs are rejected") {
  auto spec = small_spec();
  spec.effects[0].offset = 1.5;
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = small_spec();
  spec.ar_coefficient = 1.0;
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = small_spec();
  spec.effects[0].network_b = 0;
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = small_spec();
  spec.window = 31;
  CHECK_THROWS_AS(spec.validate(), Error);
  // offsets that stay below 1 pairwise but break positive definiteness
  spec = small_spec();
  spec.n_networks = 3;
  spec.n_components = 6;
  spec.effects = {{1, 0, 1, 0.9}, {1, 1, 2, 0.9}, {1, 0, 2, -0.9}};
  CHECK_THROWS_AS(dfnc::generate_synthetic_cohort(spec), Error);
}

TEST_CASE("spec json round trip") {
  const auto spec = small_spec();
  const auto back = dfnc::SyntheticCohortSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  CHECK_THROWS_AS(dfnc::SyntheticCohortSpec::from_json(nlohmann::json{{"n_subjects", "many"}}),
                  Error);
}
