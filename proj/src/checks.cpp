#include "fstm/checks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fstm/dfnc.hpp"
#include "fstm/error.hpp"
#include "fstm/rope.hpp"
#include "fstm/ssm.hpp"
#include "fstm/topology.hpp"
#include "fstm/train.hpp"

namespace fstm::checks {

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

CheckResult bound_check(std::string name, double value, double tol, std::string detail = {}) {
  CheckResult r;
  r.name = std::move(name);
  r.value = value;
  r.tolerance = "< " + fmt(tol);
  r.pass = std::isfinite(value) && value < tol;
  r.detail = std::move(detail);
  return r;
}

CheckResult exact_check(std::string name, std::size_t mismatches, std::string detail) {
  CheckResult r;
  r.name = std::move(name);
  r.value = static_cast<double>(mismatches);
  r.tolerance = "bit-identical";
  r.pass = mismatches == 0;
  r.detail = std::move(detail);
  return r;
}

}  // namespace

CheckResult check_scan_oracle(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t e = 4, n = 16;
  ssm::SsmParams p = ssm::init_ssm_params(e, n, rng);
  p.delta_w.fill(0.0);
  p.b_w.fill(0.0);
  p.c_w.fill(0.0);
  for (auto& v : p.b_b.data()) v = rng.uniform(-1.0, 1.0);
  for (auto& v : p.c_b.data()) v = rng.uniform(-1.0, 1.0);
  for (auto& v : p.d_skip.data()) v = rng.uniform(0.5, 1.5);
  double worst = 0.0;
  for (std::size_t len : {1u, 2u, 31u, 64u}) {
    const Tensor x = random_tensor({2, len, e}, rng);
    const Tensor y = ssm::selective_scan({x, "fwd"}, p);
    for (std::size_t q = 0; q < 2; ++q)
      for (std::size_t ch = 0; ch < e; ++ch) {
        const double dt = ad::softplus_value(p.delta_b[ch]);
        std::vector<double> ab(n), bb(n), cc(n), col(len);
        for (std::size_t k = 0; k < n; ++k) {
          const auto d = ssm::discretize(-std::exp(p.a_log[ch * n + k]), p.b_b[k], dt);
          ab[k] = d.a_bar;
          bb[k] = d.b_bar;
          cc[k] = p.c_b[k];
        }
        for (std::size_t t = 0; t < len; ++t) col[t] = x[(q * len + t) * e + ch];
        const auto ref = ssm::ssm_conv_oracle(col, ab, bb, cc, p.d_skip[ch]);
        double num = 0.0, den = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
          num = std::max(num, std::abs(y[(q * len + t) * e + ch] - ref[t]));
          den = std::max(den, std::abs(ref[t]));
        }
        worst = std::max(worst, num / std::max(den, 1e-300));
      }
  }
  return bound_check("scan_vs_conv_oracle", worst, 1e-5,
                     "L in {1,2,31,64}, Nstate 16, relative max error");
}

CheckResult check_discretization_order() {
  const double a = -1.0;
  std::vector<double> errs;
  for (int k = 0; k <= 10; ++k) {
    const double dt = 0.1 / std::pow(2.0, k);
    const auto d = ssm::discretize(a, 1.0, dt);
    errs.push_back(std::abs(d.a_bar - (1.0 + dt * a)));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i + 1 < errs.size(); ++i)
    worst = std::max(worst, std::abs(errs[i] / errs[i + 1] - 4.0) / 4.0);
  CheckResult r = bound_check("discretization_order", worst, 0.2,
                              "error ratio per halving of delta, 1e-1 .. 1e-4; "
                              "value = max |ratio/4 - 1|");
  r.tolerance = "<= 0.2";
  r.pass = worst <= 0.2;
  return r;
}

namespace {

struct GridCase {
  std::size_t n, s;
};
constexpr GridCase kGridCases[] = {{8, 2}, {8, 4}, {56, 4}};

}  // namespace

CheckResult check_cva_roundtrip(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t bad = 0;
  std::string where;
  for (int i = 0; i < 100; ++i) {
    const GridCase gc = kGridCases[i % 3];
    const Tensor x = random_tensor({2, gc.n, gc.n, 3, 2}, rng);
    const Tensor base = random_tensor(x.shape(), rng);
    const Tensor back = topo::cva_scatter(topo::cva(x, gc.s), x, gc.s);
    const Tensor g = topo::cva(base, gc.s);
    const Tensor again = topo::cva(topo::cva_scatter(g, x, gc.s), gc.s);
    if (!(back == x) || !(again == g)) {
      ++bad;
      if (where.empty())
        where = "first failure at N=" + std::to_string(gc.n) + ", s=" + std::to_string(gc.s);
    }
  }
  return exact_check("cva_roundtrip", bad,
                     where.empty() ? "100 tensors over (N, s) = (8,2), (8,4), (56,4)" : where);
}

CheckResult check_cvr_roundtrip(std::uint64_t seed) {
  Rng rng(seed);
  std::size_t bad = 0;
  std::string where;
  for (int i = 0; i < 100; ++i) {
    const GridCase gc = kGridCases[i % 3];
    const auto r = static_cast<long long>(i % 2 == 0 ? gc.s : 1 + rng.below(gc.n - 1));
    const Tensor x = random_tensor({2, gc.n, gc.n, 3}, rng);
    if (!(topo::cvr(topo::cvr(x, r), -r) == x)) {
      ++bad;
      if (where.empty())
        where = "first failure at N=" + std::to_string(gc.n) + ", r=" + std::to_string(r);
    }
  }
  return exact_check("cvr_roundtrip", bad,
                     where.empty() ? "100 tensors over (N, s) = (8,2), (8,4), (56,4)" : where);
}

CheckResult check_merge_trace() {
  model::ModelConfig cfg;  // neuromark layout, C = 24, four stages
  cfg.stages.blocks = {1, 1, 1, 1};
  cfg.state_size = 4;
  model::Model m(cfg);
  model::ForwardTrace trace;
  Binding p(m.params(), false);
  m.forward(p, ad::constant(Tensor({1, m.atlas().n_padded(), m.atlas().n_padded(), 1})), &trace);
  const std::vector<Shape> want = {
      {1, 56, 56, 1, 24}, {1, 28, 28, 1, 48}, {1, 14, 14, 1, 96}, {1, 7, 7, 1, 192}};
  std::string got;
  for (const auto& s : trace.stage_shapes) got += shape_str(s) + " ";
  CheckResult r;
  r.name = "merge_shape_trace";
  r.pass = trace.stage_shapes == want && trace.pooled == Shape{1, 192};
  r.value = r.pass ? 0.0 : 1.0;
  r.tolerance = "exact";
  r.detail = "56->28->14->7, 24->48->96->192; got " + got;
  return r;
}

CheckResult check_rope_orthogonality() {
  double worst = 0.0;
  auto residual = [](const double* m, std::size_t d) {
    double w = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += m[i * d + k] * m[j * d + k];
        w = std::max(w, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    return w;
  };
  const rope::RopeConfig cfg{10000.0, 24};
  for (double theta : cfg.spatial_frequencies())
    for (std::size_t x = 0; x < 56; x += 5)
      for (std::size_t y = 0; y < 56; y += 3) {
        const auto m = rope::symrope_block_matrix(x, y, theta);
        worst = std::max(worst, residual(m.data(), 4));
        worst = std::max(worst, residual(rope::rotation(x * theta).data(), 2));
      }
  return bound_check("rope_orthogonality", worst, 1e-12, "max |M M^T - I| over positions");
}

CheckResult check_rope_involution(std::uint64_t seed) {
  Rng rng(seed);
  const Tensor z = random_tensor({3, 6, 6, 8}, rng);
  const rope::RopeConfig cfg{10000.0, 8};
  const Tensor twice = rope::symrope_apply(rope::symrope_apply(z, cfg, false), cfg, false);
  return bound_check("rope_involution", max_abs_diff(twice, z), 1e-12,
                     "spatial SymRope applied twice");
}

CheckResult check_rope_relative(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t len = 64, c = 8;
  const rope::RopeConfig cfg{10000.0, c};
  const auto theta = cfg.temporal_frequencies();
  double worst = 0.0;
  for (int pair = 0; pair < 1000; ++pair) {
    const std::size_t m = rng.below(len), n = rng.below(len);
    Tensor x({len, c});
    const Tensor q = random_tensor({c}, rng), k = random_tensor({c}, rng);
    for (std::size_t i = 0; i < c; ++i) {
      x[m * c + i] = q[i];
      if (n != m) x[n * c + i] = k[i];
    }
    const Tensor y = rope::rope1d_apply(x, cfg, false);
    Tensor yk = y;
    if (n == m) {  // same position: encode k separately
      Tensor xk({len, c});
      for (std::size_t i = 0; i < c; ++i) xk[n * c + i] = k[i];
      yk = rope::rope1d_apply(xk, cfg, false);
    }
    for (std::size_t u = 0; u < c / 2; ++u) {
      const double lhs = y[m * c + 2 * u] * yk[n * c + 2 * u] +
                         y[m * c + 2 * u + 1] * yk[n * c + 2 * u + 1];
      const auto r = rope::rotation((static_cast<double>(n) - static_cast<double>(m)) * theta[u]);
      const double k0 = r[0] * k[2 * u] + r[1] * k[2 * u + 1];
      const double k1 = r[2] * k[2 * u] + r[3] * k[2 * u + 1];
      const double rhs = q[2 * u] * k0 + q[2 * u + 1] * k1;
      worst = std::max(worst, std::abs(lhs - rhs));
    }
  }
  return bound_check("rope_relative_position", worst, 1e-12,
                     "<R_m q, R_n k> = q^T R_(n-m) k on 1000 random pairs");
}

CheckResult check_stage_roundtrip(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (const Shape& s : {Shape{1, 4, 4, 3, 8}, Shape{2, 8, 8, 5, 16}}) {
    const Tensor z = random_tensor(s, rng);
    const rope::RopeConfig cfg{10000.0, s.back()};
    const Tensor enc = rope::stage_rope(z, cfg);
    worst = std::max(worst, max_abs_diff(rope::stage_unrope(enc, cfg), z));
    worst = std::max(worst, std::abs(l2_norm(enc.data()) - l2_norm(z.data())));
  }
  return bound_check("stage_unrope_roundtrip", worst, 1e-12,
                     "unrope(rope(z)) - z and norm change");
}

CheckResult check_dfnc_invariants(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t s = 2, t = 40, n = 6, w = 10;
  dfnc::ComponentTimeSeries ts;
  ts.data = random_tensor({s, t, n}, rng);
  for (std::size_t k = 0; k < t; ++k) ts.data[(1 * t + k) * n + 2] = 0.25;  // constant column
  const Tensor f = dfnc::sliding_window_dfnc(ts, w, 1);
  const std::size_t nw = f.dim(3);
  double worst = 0.0;
  std::size_t structural = 0;
  for (std::size_t b = 0; b < s; ++b)
    for (std::size_t k = 0; k < nw; ++k)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double v = f[((b * n + i) * n + j) * nw + k];
          if (v != f[((b * n + j) * n + i) * nw + k] || v < -1.0 || v > 1.0 ||
              (i == j && v != 1.0))
            ++structural;
          // two-pass reference
          double mi = 0, mj = 0;
          for (std::size_t u = k; u < k + w; ++u) {
            mi += ts.data[(b * t + u) * n + i];
            mj += ts.data[(b * t + u) * n + j];
          }
          mi /= w;
          mj /= w;
          double sij = 0, sii = 0, sjj = 0;
          for (std::size_t u = k; u < k + w; ++u) {
            const double di = ts.data[(b * t + u) * n + i] - mi;
            const double dj = ts.data[(b * t + u) * n + j] - mj;
            sij += di * dj;
            sii += di * di;
            sjj += dj * dj;
          }
          double ref = 0.0;
          if (i == j) ref = 1.0;
          else if (sii > dfnc::kCorrEps && sjj > dfnc::kCorrEps) ref = sij / std::sqrt(sii * sjj);
          worst = std::max(worst, std::abs(v - ref));
        }
  CheckResult r = bound_check("dfnc_invariants", worst, 1e-12,
                              "naive Pearson reference; symmetry, unit diagonal, range");
  if (structural > 0) {
    r.pass = false;
    r.detail += "; " + std::to_string(structural) + " structural violations";
  }
  return r;
}

CheckResult check_ig_linear(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 12;
  const Tensor w = random_tensor({1, n}, rng);
  const Tensor bias = random_tensor({1}, rng);
  const Tensor x = random_tensor({n}, rng);
  const Tensor base = random_tensor({n}, rng);
  train::BatchScalarFn f = [&](const ad::Var& batch) {
    return ad::linear(batch, ad::constant(w), ad::constant(bias));
  };
  double worst = 0.0;
  for (std::size_t m : {1u, 7u, 64u}) {
    const auto a = train::integrated_gradients(f, x, base, m, 16);
    for (std::size_t i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(a.ig[i] - (x[i] - base[i]) * w[i]));
  }
  return bound_check("ig_linear_exact", worst, 1e-10, "IG = (x - x') w at m in {1, 7, 64}");
}

model::ModelConfig tiny_model_config(std::uint64_t seed) {
  model::ModelConfig cfg;
  cfg.atlas_name = "tiny";
  for (int k = 0; k < 2; ++k) {
    topo::Network net;
    net.name = "net" + std::to_string(k + 1);
    for (int c = 0; c < 4; ++c) net.components.push_back("c" + std::to_string(4 * k + c + 1));
    cfg.networks.push_back(net);
  }
  cfg.base_channels = 8;
  cfg.stages.channels = {8, 16};
  cfg.stages.blocks = {2, 2};
  cfg.stages.cva_steps = {2, 1};
  cfg.stages.cvr_steps = {2, 1};
  cfg.stages.merge_before = {false, true};
  cfg.state_size = 4;
  cfg.seed = seed;
  return cfg;
}

std::vector<gradcheck::Result> gradient_suite(std::uint64_t seed,
                                              const gradcheck::Options& opt) {
  Rng rng(seed);
  std::vector<gradcheck::Result> out;
  auto unary = [&](const std::string& name, auto op, Shape s) {
    out.push_back(gradcheck::check(
        name, [op](const std::vector<ad::Var>& v) { return op(v[0]); },
        {random_tensor(s, rng, -2.0, 2.0)}, opt));
  };
  auto binary = [&](const std::string& name, auto op, Shape s) {
    out.push_back(gradcheck::check(
        name, [op](const std::vector<ad::Var>& v) { return op(v[0], v[1]); },
        {random_tensor(s, rng), random_tensor(s, rng)}, opt));
  };
  binary("add", [](auto& a, auto& b) { return ad::add(a, b); }, {3, 4});
  binary("sub", [](auto& a, auto& b) { return ad::sub(a, b); }, {3, 4});
  binary("mul", [](auto& a, auto& b) { return ad::mul(a, b); }, {3, 4});
  binary("add_n", [](auto& a, auto& b) {
    std::vector<ad::Var> xs{a, b, a};
    return ad::add_n(xs);
  }, {5});
  unary("scale", [](auto& a) { return ad::scale(a, -1.7); }, {6});
  auto mconst = std::make_shared<const Tensor>(random_tensor({2, 3}, rng));
  unary("mul_const", [mconst](auto& a) { return ad::mul_const(a, mconst); }, {2, 3});
  unary("sigmoid", [](auto& a) { return ad::sigmoid(a); }, {7});
  unary("silu", [](auto& a) { return ad::silu(a); }, {7});
  unary("softplus", [](auto& a) { return ad::softplus(a); }, {7});
  unary("neg_exp", [](auto& a) { return ad::neg_exp(a); }, {7});
  unary("sum_all", [](auto& a) { return ad::sum_all(a); }, {3, 2});
  unary("mean_all", [](auto& a) { return ad::mean_all(a); }, {3, 2});
  unary("reshape", [](auto& a) { return ad::reshape(a, {6}); }, {2, 3});
  out.push_back(gradcheck::check(
      "linear",
      [](const std::vector<ad::Var>& v) { return ad::linear(v[0], v[1], v[2]); },
      {random_tensor({2, 3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)},
      opt));
  out.push_back(gradcheck::check(
      "layer_norm",
      [](const std::vector<ad::Var>& v) { return ad::layer_norm(v[0], v[1], v[2]); },
      {random_tensor({3, 6}, rng), random_tensor({6}, rng, 0.5, 1.5), random_tensor({6}, rng)},
      opt));
  auto gidx = std::make_shared<ad::Index>(ad::Index{3, -1, 0, 5, 3, 2});
  unary("gather", [gidx](auto& a) { return ad::gather(a, gidx, {2, 3}); }, {6});
  auto sidx = std::make_shared<ad::Index>(ad::Index{4, 1, 0});
  out.push_back(gradcheck::check(
      "scatter_overwrite",
      [sidx](const std::vector<ad::Var>& v) { return ad::scatter_overwrite(v[0], v[1], sidx); },
      {random_tensor({6}, rng), random_tensor({3}, rng)}, opt));
  const std::vector<int> labels{1, 0, 1};
  out.push_back(gradcheck::check(
      "softmax_cross_entropy",
      [labels](const std::vector<ad::Var>& v) { return ad::softmax_cross_entropy(v[0], labels); },
      {random_tensor({3, 2}, rng, -2, 2)}, opt));
  const std::vector<double> targets{0.3, -1.2, 2.0};
  out.push_back(gradcheck::check(
      "mse_loss",
      [targets](const std::vector<ad::Var>& v) { return ad::mse_loss(v[0], targets); },
      {random_tensor({3, 1}, rng)}, opt));

  // selective scan kernel: delta > 0, A < 0
  out.push_back(gradcheck::check(
      "scan",
      [](const std::vector<ad::Var>& v) { return ssm::scan_op(v[0], v[1], v[2], v[3], v[4], v[5]); },
      {random_tensor({2, 6, 3}, rng), random_tensor({2, 6, 3}, rng, 0.05, 0.6),
       random_tensor({3, 4}, rng, -2.0, -0.3), random_tensor({2, 6, 4}, rng),
       random_tensor({2, 6, 4}, rng), random_tensor({3}, rng)},
      opt));
  out.push_back(gradcheck::check(
      "causal_dwconv",
      [](const std::vector<ad::Var>& v) { return ssm::causal_dwconv(v[0], v[1], v[2]); },
      {random_tensor({2, 7, 3}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)},
      opt));

  // Mamba encoder with all three scan orders
  {
    ssm::MambaEncoderConfig ec;
    ec.model_dim = 4;
    ec.state_size = 3;
    ec.directions = {ssm::Direction::forward, ssm::Direction::backward,
                     ssm::Direction::component_specific};
    ParamStore store;
    Rng init(seed + 11);
    ssm::init_mamba_encoder(store, "enc", ec, init);
    const Tensor x = random_tensor({2, 9, 4}, rng);
    out.push_back(gradcheck::check_params(
        "mamba_encoder.params",
        [&](const Binding& p) {
          return ssm::mamba_encoder_forward(p, "enc", ec, ad::constant(x), 3);
        },
        store, opt));
    out.push_back(gradcheck::check(
        "mamba_encoder.input",
        [&](const std::vector<ad::Var>& v) {
          Binding p(store, false);
          return ssm::mamba_encoder_forward(p, "enc", ec, v[0], 3);
        },
        {x}, opt));
  }

  unary("cva", [](auto& a) { return topo::cva(a, 2); }, {1, 4, 4, 2});
  out.push_back(gradcheck::check(
      "cva_scatter",
      [](const std::vector<ad::Var>& v) { return topo::cva_scatter(v[0], v[1], 2); },
      {random_tensor({2, 2, 2, 2}, rng), random_tensor({1, 4, 4, 2}, rng)}, opt));
  unary("cvr", [](auto& a) { return topo::cvr(a, 3); }, {1, 4, 4, 2});
  {
    ParamStore store;
    Rng init(seed + 12);
    topo::init_component_merge(store, "m", 4, init);
    const Tensor z = random_tensor({1, 4, 4, 2, 4}, rng);
    out.push_back(gradcheck::check_params(
        "component_merge.params",
        [&](const Binding& p) { return topo::component_merge(p, "m", ad::constant(z)); },
        store, opt));
    out.push_back(gradcheck::check(
        "component_merge.input",
        [&](const std::vector<ad::Var>& v) {
          Binding p(store, false);
          return topo::component_merge(p, "m", v[0]);
        },
        {z}, opt));
  }
  const rope::RopeConfig rc{10000.0, 8};
  unary("stage_rope", [rc](auto& a) { return rope::stage_rope(a, rc); }, {1, 3, 3, 2, 8});
  unary("stage_unrope", [rc](auto& a) { return rope::stage_unrope(a, rc); }, {1, 3, 3, 2, 8});

  const std::vector<bool> mask{true, true, false};
  unary("mean_over_time", [](auto& a) { return model::mean_over_time(a); }, {2, 3, 3, 4, 2});
  unary("masked_cell_mean", [mask](auto& a) { return model::masked_cell_mean(a, mask); },
        {2, 3, 3, 4, 2});
  unary("mask_cells", [mask](auto& a) { return model::mask_cells(a, mask); }, {2, 3, 3, 4, 2});
  unary("masked_pool", [mask](auto& a) { return model::masked_pool(a, mask); }, {2, 3, 3, 4, 2});
  out.push_back(gradcheck::check(
      "gate_combine",
      [mask](const std::vector<ad::Var>& v) { return model::gate_combine(v[0], v[1], v[2], mask); },
      {random_tensor({2, 3, 3, 2}, rng), random_tensor({2, 4, 2}, rng),
       random_tensor({2, 3, 3, 4, 2}, rng)},
      opt));

  // End-to-end tiny model: N' = 8, T = 4, C = 8, two stages
  {
    const model::Model m(tiny_model_config(seed + 13));
    const std::size_t np = m.atlas().n_padded();
    Tensor x = random_tensor({2, np, np, 4}, rng);
    x = train::make_dataset(x.reshaped({2, np, np, 4}), m.atlas(), {}).x;
    const std::vector<bool> cm = m.atlas().pad_mask();
    // one even block (CVA + CVR) in isolation
    const Tensor z = model::mask_cells(ad::constant(random_tensor({2, np, np, 4, 8}, rng)), cm).value();
    out.push_back(gradcheck::check_params(
        "fst_block.params",
        [&](const Binding& p) { return m.block_forward(p, ad::constant(z), 0, 1, cm); },
        m.params(), opt));
    out.push_back(gradcheck::check(
        "fst_block.input",
        [&](const std::vector<ad::Var>& v) {
          Binding p(m.params(), false);
          return m.block_forward(p, v[0], 0, 1, cm);
        },
        {z}, opt));
    out.push_back(gradcheck::check_params(
        "tiny_model.params",
        [&](const Binding& p) { return m.forward(p, ad::constant(x)); }, m.params(), opt));
    out.push_back(gradcheck::check(
        "tiny_model.input",
        [&](const std::vector<ad::Var>& v) {
          Binding p(m.params(), false);
          return m.forward(p, v[0]);
        },
        {x}, opt));
  }
  return out;
}

std::vector<CheckResult> run_suite(const SuiteOptions& opt) {
  std::vector<CheckResult> out;
  auto guarded = [&](const std::string& name, auto fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      CheckResult r;
      r.name = name;
      r.pass = false;
      r.value = NAN;
      r.tolerance = "-";
      r.detail = std::string("threw: ") + e.what();
      out.push_back(r);
    }
  };
  const auto s = opt.seed;
  guarded("scan_vs_conv_oracle", [&] { return check_scan_oracle(s); });
  guarded("discretization_order", [&] { return check_discretization_order(); });
  guarded("cva_roundtrip", [&] { return check_cva_roundtrip(s); });
  guarded("cvr_roundtrip", [&] { return check_cvr_roundtrip(s); });
  guarded("merge_shape_trace", [&] { return check_merge_trace(); });
  guarded("rope_orthogonality", [&] { return check_rope_orthogonality(); });
  guarded("rope_involution", [&] { return check_rope_involution(s); });
  guarded("rope_relative_position", [&] { return check_rope_relative(s); });
  guarded("stage_unrope_roundtrip", [&] { return check_stage_roundtrip(s); });
  guarded("dfnc_invariants", [&] { return check_dfnc_invariants(s); });
  guarded("ig_linear_exact", [&] { return check_ig_linear(s); });
  if (opt.gradients) {
    try {
      gradcheck::Options go;
      for (const auto& g : gradient_suite(s, go)) {
        CheckResult r;
        r.name = "grad:" + g.name;
        r.pass = g.pass;
        r.value = g.max_rel_err;
        r.tolerance = "< " + fmt(go.tolerance) + " (eps " + fmt(go.eps) + ")";
        r.detail = std::to_string(g.probes) + " probes, worst at " + g.worst;
        out.push_back(r);
      }
    } catch (const std::exception& e) {
      CheckResult r;
      r.name = "grad";
      r.value = NAN;
      r.tolerance = "-";
      r.detail = std::string("threw: ") + e.what();
      out.push_back(r);
    }
  }
  return out;
}

}  // namespace fstm::checks
