#include "fstm/ssm.hpp"

#include <algorithm>
#include <cmath>

#include "fstm/error.hpp"

namespace fstm::ssm {

Discretized discretize(double a, double b, double delta) {
  require(std::isfinite(a) && std::isfinite(b) && std::isfinite(delta),
          ErrorKind::domain, "discretize: non-finite input");
  require(delta > 0.0, ErrorKind::domain, "discretize: delta must be positive");
  const double em1 = std::expm1(delta * a);
  const double a_bar = em1 + 1.0;
  const double gain = std::abs(a) < kLimitEps ? delta : em1 / a;
  return {a_bar, gain * b};
}

void SsmParams::validate() const {
  require(a_log.rank() == 2 && a_log.dim(0) >= 1 && a_log.dim(1) >= 1,
          ErrorKind::config, "SsmParams: a_log must be [E>=1, Nstate>=1]");
  const std::size_t e = inner(), n = state();
  require(d_skip.shape() == Shape{e}, ErrorKind::config, "SsmParams: d_skip shape");
  require(delta_w.shape() == Shape{e, e} && delta_b.shape() == Shape{e},
          ErrorKind::config, "SsmParams: delta projection shape");
  require(b_w.shape() == Shape{n, e} && b_b.shape() == Shape{n},
          ErrorKind::config, "SsmParams: B projection shape");
  require(c_w.shape() == Shape{n, e} && c_b.shape() == Shape{n},
          ErrorKind::config, "SsmParams: C projection shape");
}

namespace {

// Bias that softplus maps to a step drawn log-uniformly in [1e-3, 1e-1].
Tensor init_delta_bias(std::size_t inner, Rng& rng) {
  Tensor b({inner});
  for (auto& v : b.data()) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = dt + std::log(-std::expm1(-dt));
  }
  return b;
}

Tensor init_a_log(std::size_t inner, std::size_t state) {
  Tensor a({inner, state});
  for (std::size_t e = 0; e < inner; ++e)
    for (std::size_t n = 0; n < state; ++n)
      a[e * state + n] = std::log(static_cast<double>(n + 1));
  return a;
}

}  // namespace

SsmParams init_ssm_params(std::size_t inner, std::size_t state, Rng& rng) {
  require(inner >= 1 && state >= 1, ErrorKind::config,
          "SsmParams: inner and state sizes must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(inner));
  SsmParams p;
  p.a_log = init_a_log(inner, state);
  p.d_skip = Tensor({inner}, 1.0);
  p.delta_w = uniform_tensor({inner, inner}, bound, rng);
  p.delta_b = init_delta_bias(inner, rng);
  p.b_w = uniform_tensor({state, inner}, bound, rng);
  p.b_b = Tensor({state}, 0.0);
  p.c_w = uniform_tensor({state, inner}, bound, rng);
  p.c_b = Tensor({state}, 0.0);
  return p;
}

namespace {

struct ScanDims {
  std::size_t q, l, e, n;
};

ScanDims check_scan_shapes(const Tensor& u, const Tensor& delta, const Tensor& a,
                           const Tensor& b, const Tensor& c, const Tensor& d) {
  require(u.rank() == 3, ErrorKind::shape, "scan: input must be [Q, L, E]");
  ScanDims s{u.dim(0), u.dim(1), u.dim(2), 0};
  require(a.rank() == 2 && a.dim(0) == s.e, ErrorKind::shape,
          "scan: A must be [E, N], got " + shape_str(a.shape()));
  s.n = a.dim(1);
  require(delta.shape() == u.shape(), ErrorKind::shape, "scan: delta shape");
  require(b.shape() == Shape{s.q, s.l, s.n} && c.shape() == b.shape(),
          ErrorKind::shape, "scan: B/C must be [Q, L, N]");
  require(d.shape() == Shape{s.e}, ErrorKind::shape, "scan: D must be [E]");
  return s;
}

// expm1 is several times slower than exp; the plain difference keeps ~14
// significant digits once |x| >= 1e-2.
inline double expm1_fast(double x) {
  return std::abs(x) < 1e-2 ? std::expm1(x) : std::exp(x) - 1.0;
}

// Forward recurrence; fills `hist` (h) and `em1_hist` (exp(dt a) - 1), both
// [Q, L, E, N], when non-null.
void scan_forward(const Tensor& u, const Tensor& delta, const Tensor& a,
                  const Tensor& b, const Tensor& c, const Tensor& d,
                  const ScanDims& s, Tensor& y, std::vector<double>* hist,
                  std::vector<double>* em1_hist = nullptr) {
  std::vector<double> h(s.e * s.n);
  const double* up = u.ptr();
  const double* dp = delta.ptr();
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  const double* cp = c.ptr();
  double* yp = y.ptr();
  for (std::size_t q = 0; q < s.q; ++q) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < s.l; ++t) {
      const std::size_t row = q * s.l + t;
      const double* bt = bp + row * s.n;
      const double* ct = cp + row * s.n;
      for (std::size_t e = 0; e < s.e; ++e) {
        const double dt = dp[row * s.e + e];
        const double x = up[row * s.e + e];
        const double* ae = ap + e * s.n;
        double* he = h.data() + e * s.n;
        double acc = d[e] * x;
        double* em1_out = em1_hist ? em1_hist->data() + (row * s.e + e) * s.n : nullptr;
        for (std::size_t n = 0; n < s.n; ++n) {
          const double em1 = expm1_fast(dt * ae[n]);
          if (em1_out) em1_out[n] = em1;
          const double gain = std::abs(ae[n]) < kLimitEps ? dt : em1 / ae[n];
          he[n] = (em1 + 1.0) * he[n] + gain * bt[n] * x;
          acc += ct[n] * he[n];
        }
        yp[row * s.e + e] = acc;
      }
      if (hist)
        std::copy(h.begin(), h.end(), hist->begin() + row * s.e * s.n);
    }
    const double* yq = yp + q * s.l * s.e;
    if (!all_finite({yq, s.l * s.e}))
      fail(ErrorKind::numeric,
           "selective scan: non-finite activation in sequence " + std::to_string(q));
  }
}

}  // namespace

Tensor scan_kernel(const Tensor& u, const Tensor& delta, const Tensor& a,
                   const Tensor& b, const Tensor& c, const Tensor& d) {
  const ScanDims s = check_scan_shapes(u, delta, a, b, c, d);
  Tensor y(u.shape());
  scan_forward(u, delta, a, b, c, d, s, y, nullptr);
  return y;
}

ad::Var scan_op(const ad::Var& u, const ad::Var& delta, const ad::Var& a,
                const ad::Var& b, const ad::Var& c, const ad::Var& d) {
  const ScanDims s = check_scan_shapes(u.value(), delta.value(), a.value(),
                                       b.value(), c.value(), d.value());
  Tensor y(u.shape());
  const bool need = u.requires_grad() || delta.requires_grad() ||
                    a.requires_grad() || b.requires_grad() ||
                    c.requires_grad() || d.requires_grad();
  auto hist = std::make_shared<std::vector<double>>();
  auto em1_hist = std::make_shared<std::vector<double>>();
  if (need) {
    hist->resize(s.q * s.l * s.e * s.n);
    em1_hist->resize(hist->size());
  }
  scan_forward(u.value(), delta.value(), a.value(), b.value(), c.value(),
               d.value(), s, y, need ? hist.get() : nullptr,
               need ? em1_hist.get() : nullptr);
  return ad::record(std::move(y), {u, delta, a, b, c, d},
                    [s, hist, em1_hist](ad::Node& self) {
    const double* up = self.parents[0]->value.ptr();
    const double* dp = self.parents[1]->value.ptr();
    const double* ap = self.parents[2]->value.ptr();
    const double* bp = self.parents[3]->value.ptr();
    const double* cp = self.parents[4]->value.ptr();
    const double* dskip = self.parents[5]->value.ptr();
    const double* gy = self.grad.ptr();
    const double* hs = hist->data();
    const double* em1s = em1_hist->data();
    // Accumulate into local buffers; untouched parents are skipped at the end.
    std::vector<double> gu(s.q * s.l * s.e), gdelta(gu.size());
    std::vector<double> ga(s.e * s.n), gb(s.q * s.l * s.n), gc(gb.size());
    std::vector<double> gd(s.e);
    std::vector<double> gh(s.e * s.n);
    for (std::size_t q = 0; q < s.q; ++q) {
      std::fill(gh.begin(), gh.end(), 0.0);
      for (std::size_t t = s.l; t-- > 0;) {
        const std::size_t row = q * s.l + t;
        const double* bt = bp + row * s.n;
        const double* ct = cp + row * s.n;
        const double* h_now = hs + row * s.e * s.n;
        const double* h_prev = t > 0 ? hs + (row - 1) * s.e * s.n : nullptr;
        for (std::size_t e = 0; e < s.e; ++e) {
          const std::size_t ie = row * s.e + e;
          const double g = gy[ie];
          const double x = up[ie];
          const double dt = dp[ie];
          gd[e] += g * x;
          double gx = g * dskip[e];
          double gdt = 0.0;
          const double* ae = ap + e * s.n;
          double* ghe = gh.data() + e * s.n;
          double* gae = ga.data() + e * s.n;
          const double* em1e = em1s + ie * s.n;
          for (std::size_t n = 0; n < s.n; ++n) {
            const double hn = h_now[e * s.n + n];
            const double hp = h_prev ? h_prev[e * s.n + n] : 0.0;
            gc[row * s.n + n] += g * hn;
            const double ght = ghe[n] + g * ct[n];
            const double an = ae[n];
            const double em1 = em1e[n];
            const double abar = em1 + 1.0;
            const bool limit = std::abs(an) < kLimitEps;
            const double gain = limit ? dt : em1 / an;
            const double g_abar = ght * hp;
            const double g_gain = ght * bt[n] * x;
            gb[row * s.n + n] += ght * gain * x;
            gx += ght * gain * bt[n];
            const double dgain_ddt = limit ? 1.0 : abar;
            const double dgain_da = limit ? 0.5 * dt * dt : (dt * abar - gain) / an;
            gdt += g_abar * an * abar + g_gain * dgain_ddt;
            gae[n] += g_abar * dt * abar + g_gain * dgain_da;
            ghe[n] = ght * abar;
          }
          gu[ie] += gx;
          gdelta[ie] += gdt;
        }
      }
    }
    auto flush = [&](std::size_t i, const std::vector<double>& src) {
      if (!ad::wants(self, i)) return;
      Tensor& dst = ad::parent_grad(self, i);
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    };
    flush(0, gu);
    flush(1, gdelta);
    flush(2, ga);
    flush(3, gb);
    flush(4, gc);
    flush(5, gd);
  });
}

ad::Var causal_dwconv(const ad::Var& x, const ad::Var& w, const ad::Var& bias) {
  require(x.value().rank() == 3, ErrorKind::shape, "conv: input must be [Q, L, E]");
  const std::size_t q = x.dim(0), l = x.dim(1), e = x.dim(2);
  require(w.value().rank() == 2 && w.dim(0) == e, ErrorKind::shape,
          "conv: weight must be [E, K]");
  require(bias.shape() == Shape{e}, ErrorKind::shape, "conv: bias must be [E]");
  const std::size_t k = w.dim(1);
  Tensor y(x.shape());
  const double* xp = x.value().ptr();
  const double* wp = w.value().ptr();
  const double* bp = bias.value().ptr();
  for (std::size_t s = 0; s < q; ++s)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t c = 0; c < e; ++c) {
        double acc = bp[c];
        for (std::size_t j = 0; j < k; ++j) {
          // tap j looks back k-1-j steps
          const std::size_t back = k - 1 - j;
          if (back > t) continue;
          acc += wp[c * k + j] * xp[(s * l + t - back) * e + c];
        }
        y[(s * l + t) * e + c] = acc;
      }
  return ad::record(std::move(y), {x, w, bias}, [q, l, e, k](ad::Node& self) {
    const double* g = self.grad.ptr();
    const double* xv = self.parents[0]->value.ptr();
    const double* wv = self.parents[1]->value.ptr();
    double* gx = ad::wants(self, 0) ? ad::parent_grad(self, 0).ptr() : nullptr;
    double* gw = ad::wants(self, 1) ? ad::parent_grad(self, 1).ptr() : nullptr;
    double* gbias = ad::wants(self, 2) ? ad::parent_grad(self, 2).ptr() : nullptr;
    for (std::size_t s = 0; s < q; ++s)
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t c = 0; c < e; ++c) {
          const double go = g[(s * l + t) * e + c];
          if (gbias) gbias[c] += go;
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t back = k - 1 - j;
            if (back > t) continue;
            const std::size_t src = (s * l + t - back) * e + c;
            if (gw) gw[c * k + j] += go * xv[src];
            if (gx) gx[src] += go * wv[c * k + j];
          }
        }
  });
}

std::vector<double> ssm_conv_oracle(std::span<const double> x,
                                    std::span<const double> a_bar,
                                    std::span<const double> b_bar,
                                    std::span<const double> c, double d) {
  require(a_bar.size() == b_bar.size() && a_bar.size() == c.size(),
          ErrorKind::shape, "conv oracle: state vectors differ in length");
  const std::size_t l = x.size();
  std::vector<double> kernel(l, 0.0);
  for (std::size_t n = 0; n < a_bar.size(); ++n) {
    double pw = 1.0;
    for (std::size_t k = 0; k < l; ++k) {
      kernel[k] += c[n] * pw * b_bar[n];
      pw *= a_bar[n];
    }
  }
  std::vector<double> y(l);
  for (std::size_t t = 0; t < l; ++t) {
    double acc = d * x[t];
    for (std::size_t k = 0; k <= t; ++k) acc += kernel[k] * x[t - k];
    y[t] = acc;
  }
  require(all_finite(y), ErrorKind::numeric, "conv oracle: overflow");
  return y;
}

std::vector<double> ssm_conv_oracle(std::span<const double> x, double a_bar,
                                    double b_bar, double c, double d) {
  return ssm_conv_oracle(x, std::span<const double>(&a_bar, 1),
                         std::span<const double>(&b_bar, 1),
                         std::span<const double>(&c, 1), d);
}

Tensor selective_scan(const ScanSequenceBatch& seq, const SsmParams& params) {
  params.validate();
  const Tensor& x = seq.data;
  require(x.rank() == 3, ErrorKind::shape, "selective_scan: data must be [Q, L, E]");
  require(x.dim(2) == params.inner(), ErrorKind::shape,
          "selective_scan: channel count does not match parameters");
  if (x.dim(1) == 0) return Tensor(x.shape());
  auto u = ad::constant(x);
  auto dt = ad::softplus(ad::linear(u, ad::constant(params.delta_w),
                                    ad::constant(params.delta_b)));
  auto bm = ad::linear(u, ad::constant(params.b_w), ad::constant(params.b_b));
  auto cm = ad::linear(u, ad::constant(params.c_w), ad::constant(params.c_b));
  auto a = ad::neg_exp(ad::constant(params.a_log));
  return scan_op(u, dt, a, bm, cm, ad::constant(params.d_skip)).value();
}

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::forward: return "fwd";
    case Direction::backward: return "bwd";
    case Direction::component_specific: return "row";
  }
  return "?";
}

const char* param_group(Direction d) {
  return d == Direction::component_specific ? "row" : "scan";
}

bool MambaEncoderConfig::has(Direction d) const {
  return std::find(directions.begin(), directions.end(), d) != directions.end();
}

void MambaEncoderConfig::validate() const {
  require(model_dim >= 1 && expansion >= 1 && conv_kernel >= 1 && state_size >= 1,
          ErrorKind::config, "encoder: dimensions must be >= 1");
  require(!directions.empty(), ErrorKind::config, "encoder: no scan direction");
  for (std::size_t i = 0; i < directions.size(); ++i)
    for (std::size_t j = i + 1; j < directions.size(); ++j)
      require(directions[i] != directions[j], ErrorKind::config,
              "encoder: duplicate scan direction");
}

void init_mamba_encoder(ParamStore& store, const std::string& prefix,
                        const MambaEncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.model_dim, e = cfg.inner();
  store.add(prefix + ".norm.g", Tensor({c}, 1.0));
  store.add(prefix + ".norm.b", Tensor({c}, 0.0));
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(c));
  store.add(prefix + ".in_x.w", uniform_tensor({e, c}, in_bound, rng));
  store.add(prefix + ".in_z.w", uniform_tensor({e, c}, in_bound, rng));
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(cfg.conv_kernel));
  std::vector<std::string> groups;
  for (auto d : cfg.directions) {
    const std::string dp = prefix + "." + param_group(d);
    if (std::find(groups.begin(), groups.end(), dp) != groups.end()) continue;
    groups.push_back(dp);
    store.add(dp + ".conv.w", uniform_tensor({e, cfg.conv_kernel}, conv_bound, rng));
    store.add(dp + ".conv.b", uniform_tensor({e}, conv_bound, rng));
    SsmParams p = init_ssm_params(e, cfg.state_size, rng);
    store.add(dp + ".a_log", std::move(p.a_log));
    store.add(dp + ".d", std::move(p.d_skip));
    store.add(dp + ".delta.w", std::move(p.delta_w));
    store.add(dp + ".delta.b", std::move(p.delta_b));
    store.add(dp + ".b.w", std::move(p.b_w));
    store.add(dp + ".b.b", std::move(p.b_b));
    store.add(dp + ".c.w", std::move(p.c_w));
    store.add(dp + ".c.b", std::move(p.c_b));
  }
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(e));
  store.add(prefix + ".out.w", uniform_tensor({c, e}, out_bound, rng));
}

SsmParams direction_params(const ParamStore& store, const std::string& prefix,
                           Direction d) {
  const std::string dp = prefix + "." + param_group(d);
  SsmParams p;
  p.a_log = store.get(dp + ".a_log");
  p.d_skip = store.get(dp + ".d");
  p.delta_w = store.get(dp + ".delta.w");
  p.delta_b = store.get(dp + ".delta.b");
  p.b_w = store.get(dp + ".b.w");
  p.b_b = store.get(dp + ".b.b");
  p.c_w = store.get(dp + ".c.w");
  p.c_b = store.get(dp + ".c.b");
  return p;
}

namespace {

ad::IndexPtr reversal_index(std::size_t q, std::size_t l, std::size_t e) {
  auto idx = std::make_shared<ad::Index>(q * l * e);
  for (std::size_t s = 0; s < q; ++s)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t c = 0; c < e; ++c)
        (*idx)[(s * l + t) * e + c] =
            static_cast<std::int64_t>((s * l + (l - 1 - t)) * e + c);
  return idx;
}

std::vector<ad::Var> direction_outputs(const Binding& p, const std::string& prefix,
                                       const MambaEncoderConfig& cfg,
                                       const ad::Var& xi,
                                       std::optional<std::size_t> row_length) {
  const std::size_t q = xi.dim(0), l = xi.dim(1), e = xi.dim(2);
  std::vector<ad::Var> outs;
  for (auto d : cfg.directions) {
    const std::string dp = prefix + "." + param_group(d);
    ad::Var seq = xi;
    ad::IndexPtr rev;
    if (d == Direction::backward) {
      rev = reversal_index(q, l, e);
      seq = ad::gather(xi, rev, xi.shape());
    } else if (d == Direction::component_specific) {
      const std::size_t s = *row_length;
      seq = ad::reshape(xi, {q * (l / s), s, e});
    }
    auto act = ad::silu(causal_dwconv(seq, p(dp + ".conv.w"), p(dp + ".conv.b")));
    auto dt = ad::softplus(ad::linear(act, p(dp + ".delta.w"), p(dp + ".delta.b")));
    auto bm = ad::linear(act, p(dp + ".b.w"), p(dp + ".b.b"));
    auto cm = ad::linear(act, p(dp + ".c.w"), p(dp + ".c.b"));
    auto y = scan_op(act, dt, ad::neg_exp(p(dp + ".a_log")), bm, cm, p(dp + ".d"));
    if (d == Direction::backward)
      y = ad::gather(y, rev, xi.shape());
    else if (d == Direction::component_specific)
      y = ad::reshape(y, xi.shape());
    outs.push_back(std::move(y));
  }
  return outs;
}

void check_encoder_input(const MambaEncoderConfig& cfg, const ad::Var& x,
                         std::optional<std::size_t> row_length) {
  cfg.validate();
  require(x.value().rank() == 3 && x.dim(2) == cfg.model_dim, ErrorKind::shape,
          "encoder: input must be [Q, L, " + std::to_string(cfg.model_dim) +
              "], got " + shape_str(x.shape()));
  if (cfg.has(Direction::component_specific)) {
    require(row_length.has_value() && *row_length > 0 &&
                x.dim(1) % *row_length == 0,
            ErrorKind::config,
            "encoder: component-specific scan needs sequences with row structure");
  }
}

}  // namespace

ad::Var mamba_encoder_forward(const Binding& p, const std::string& prefix,
                              const MambaEncoderConfig& cfg, const ad::Var& x,
                              std::optional<std::size_t> row_length) {
  check_encoder_input(cfg, x, row_length);
  auto xn = ad::layer_norm(x, p(prefix + ".norm.g"), p(prefix + ".norm.b"));
  auto xi = ad::linear(xn, p(prefix + ".in_x.w"));
  auto zg = ad::linear(xn, p(prefix + ".in_z.w"));
  auto outs = direction_outputs(p, prefix, cfg, xi, row_length);
  auto fused = outs.size() == 1 ? outs[0] : ad::add_n(outs);
  auto gated = ad::mul(fused, ad::silu(zg));
  return ad::linear(gated, p(prefix + ".out.w"));
}

std::vector<Tensor> mamba_direction_outputs(const ParamStore& store,
                                            const std::string& prefix,
                                            const MambaEncoderConfig& cfg,
                                            const Tensor& x,
                                            std::optional<std::size_t> row_length) {
  Binding p(store, false);
  auto xv = ad::constant(x);
  check_encoder_input(cfg, xv, row_length);
  auto xn = ad::layer_norm(xv, p(prefix + ".norm.g"), p(prefix + ".norm.b"));
  auto xi = ad::linear(xn, p(prefix + ".in_x.w"));
  std::vector<Tensor> out;
  for (auto& v : direction_outputs(p, prefix, cfg, xi, row_length))
    out.push_back(v.value());
  return out;
}

}  // namespace fstm::ssm
