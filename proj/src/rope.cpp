#include "fstm/rope.hpp"

#include <cmath>

#include "fstm/error.hpp"

namespace fstm::rope {

std::vector<double> RopeConfig::frequencies(std::size_t units) const {
  std::vector<double> f(units);
  for (std::size_t k = 0; k < units; ++k)
    f[k] = std::pow(theta_base, -static_cast<double>(k) / static_cast<double>(units));
  return f;
}

std::vector<double> RopeConfig::temporal_frequencies() const {
  require(channel_dim % 2 == 0, ErrorKind::config,
          "rope: temporal encoding needs an even channel count, got " +
              std::to_string(channel_dim));
  return frequencies(channel_dim / 2);
}

std::vector<double> RopeConfig::spatial_frequencies() const {
  require(channel_dim % 4 == 0, ErrorKind::config,
          "rope: spatial encoding needs channels divisible by 4, got " +
              std::to_string(channel_dim));
  return frequencies(channel_dim / 4);
}

Mat2 rotation(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c, -s, s, c};
}

Mat2 reflection(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {s, c, c, -s};
}

Mat2 matmul(const Mat2& a, const Mat2& b) {
  return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3],
          a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]};
}

Mat2 transpose(const Mat2& a) { return {a[0], a[2], a[1], a[3]}; }

std::array<double, 16> symrope_block_matrix(std::size_t x, std::size_t y,
                                            double theta) {
  const Mat2 sx = reflection(static_cast<double>(x) * theta);
  const Mat2 sy = reflection(static_cast<double>(y) * theta);
  std::array<double, 16> m{};
  m[0] = sx[0]; m[1] = sx[1];
  m[4] = sx[2]; m[5] = sx[3];
  m[10] = sy[0]; m[11] = sy[1];
  m[14] = sy[2]; m[15] = sy[3];
  return m;
}

namespace {

// Layout views: temporal works on (outer, L, C); spatial on
// (outer, N, N, inner, C).
void rotate_pairs(const double* in, double* out, std::size_t outer,
                  std::size_t len, std::size_t inner, std::size_t c,
                  const std::vector<double>& freqs, double sign) {
  const std::size_t pairs = c / 2;
  std::vector<double> cs(len * pairs), sn(len * pairs);
  for (std::size_t n = 0; n < len; ++n)
    for (std::size_t k = 0; k < pairs; ++k) {
      const double a = sign * static_cast<double>(n) * freqs[k];
      cs[n * pairs + k] = std::cos(a);
      sn[n * pairs + k] = std::sin(a);
    }
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t n = 0; n < len; ++n)
      for (std::size_t r = 0; r < inner; ++r) {
        const std::size_t base = ((o * len + n) * inner + r) * c;
        for (std::size_t k = 0; k < pairs; ++k) {
          const double u = in[base + 2 * k], v = in[base + 2 * k + 1];
          const double co = cs[n * pairs + k], si = sn[n * pairs + k];
          out[base + 2 * k] = co * u - si * v;
          out[base + 2 * k + 1] = si * u + co * v;
        }
      }
}

void reflect_grid(const double* in, double* out, std::size_t outer,
                  std::size_t n, std::size_t inner, std::size_t c,
                  const std::vector<double>& freqs) {
  const std::size_t blocks = c / 4;
  std::vector<double> cs(n * blocks), sn(n * blocks);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < blocks; ++k) {
      const double a = static_cast<double>(p) * freqs[k];
      cs[p * blocks + k] = std::cos(a);
      sn[p * blocks + k] = std::sin(a);
    }
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t r = 0; r < inner; ++r) {
          const std::size_t base = (((o * n + x) * n + y) * inner + r) * c;
          for (std::size_t k = 0; k < blocks; ++k) {
            const std::size_t ch = base + 4 * k;
            const double sx = sn[x * blocks + k], cx = cs[x * blocks + k];
            const double sy = sn[y * blocks + k], cy = cs[y * blocks + k];
            const double u0 = in[ch], u1 = in[ch + 1];
            const double u2 = in[ch + 2], u3 = in[ch + 3];
            out[ch] = sx * u0 + cx * u1;
            out[ch + 1] = cx * u0 - sx * u1;
            out[ch + 2] = sy * u2 + cy * u3;
            out[ch + 3] = cy * u2 - sy * u3;
          }
        }
}

struct TemporalView {
  std::size_t outer, len, c;
};

TemporalView temporal_view(const Shape& s) {
  require(s.size() >= 2, ErrorKind::shape, "rope: expected [..., L, C]");
  const std::size_t c = s.back(), len = s[s.size() - 2];
  return {numel(s) / (c * std::max<std::size_t>(len, 1)), len, c};
}

struct GridView {
  std::size_t outer, n, inner, c;
};

// Grid axes at (first, first + 1), channels last.
GridView grid_view(const Shape& s, std::size_t first) {
  require(s.size() >= first + 3 && s[first] == s[first + 1], ErrorKind::shape,
          "symrope: expected square grid axes in " + shape_str(s));
  GridView v{1, s[first], 1, s.back()};
  for (std::size_t i = 0; i < first; ++i) v.outer *= s[i];
  for (std::size_t i = first + 2; i + 1 < s.size(); ++i) v.inner *= s[i];
  return v;
}

Tensor temporal(const Tensor& x, const RopeConfig& cfg, bool inverse) {
  RopeConfig c = cfg;
  c.channel_dim = x.shape().back();
  const auto freqs = c.temporal_frequencies();
  const auto v = temporal_view(x.shape());
  Tensor out(x.shape());
  rotate_pairs(x.ptr(), out.ptr(), v.outer, v.len, 1, v.c, freqs, inverse ? -1.0 : 1.0);
  return out;
}

Tensor spatial(const Tensor& x, const RopeConfig& cfg, std::size_t first) {
  RopeConfig c = cfg;
  c.channel_dim = x.shape().back();
  const auto freqs = c.spatial_frequencies();
  const auto v = grid_view(x.shape(), first);
  Tensor out(x.shape());
  reflect_grid(x.ptr(), out.ptr(), v.outer, v.n, v.inner, v.c, freqs);
  return out;
}

// Temporal encoding on [B, N, N, T, C]: position along T.
Tensor temporal5(const Tensor& z, const RopeConfig& cfg, bool inverse) {
  RopeConfig c = cfg;
  c.channel_dim = z.shape().back();
  const auto freqs = c.temporal_frequencies();
  const Shape& s = z.shape();
  Tensor out(s);
  rotate_pairs(z.ptr(), out.ptr(), s[0] * s[1] * s[2], s[3], 1, s[4], freqs,
               inverse ? -1.0 : 1.0);
  return out;
}

void check5(const Shape& s) {
  require(s.size() == 5 && s[1] == s[2], ErrorKind::shape,
          "stage rope: expected [B, N, N, T, C], got " + shape_str(s));
}

}  // namespace

Tensor rope1d_apply(const Tensor& x, const RopeConfig& cfg, bool inverse) {
  return temporal(x, cfg, inverse);
}

Tensor symrope_apply(const Tensor& x, const RopeConfig& cfg, bool /*inverse*/) {
  require(x.rank() >= 3, ErrorKind::shape, "symrope: expected [..., N, N, C]");
  return spatial(x, cfg, x.rank() - 3);
}

Tensor stage_rope(const Tensor& z, const RopeConfig& cfg) {
  check5(z.shape());
  return temporal5(spatial(z, cfg, 1), cfg, false);
}

Tensor stage_unrope(const Tensor& z, const RopeConfig& cfg) {
  check5(z.shape());
  return spatial(temporal5(z, cfg, true), cfg, 1);
}

namespace {

ad::Var spatial_op(const ad::Var& z, const RopeConfig& cfg) {
  return ad::record(spatial(z.value(), cfg, 1), {z}, [cfg](ad::Node& self) {
    // Symmetric blocks: the adjoint is the same transform.
    Tensor g = spatial(self.grad, cfg, 1);
    Tensor& gz = ad::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
  });
}

ad::Var temporal_op(const ad::Var& z, const RopeConfig& cfg, bool inverse) {
  return ad::record(temporal5(z.value(), cfg, inverse), {z},
                    [cfg, inverse](ad::Node& self) {
    Tensor g = temporal5(self.grad, cfg, !inverse);
    Tensor& gz = ad::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
  });
}

}  // namespace

ad::Var stage_rope(const ad::Var& z, const RopeConfig& cfg) {
  check5(z.shape());
  return temporal_op(spatial_op(z, cfg), cfg, false);
}

ad::Var stage_unrope(const ad::Var& z, const RopeConfig& cfg) {
  check5(z.shape());
  return spatial_op(temporal_op(z, cfg, true), cfg);
}

Tensor absolute_encoding(std::size_t n, std::size_t t, std::size_t c,
                         double theta_base) {
  require(c % 2 == 0, ErrorKind::config, "absolute encoding: odd channel count");
  RopeConfig cfg{theta_base, c};
  const auto freqs = cfg.temporal_frequencies();
  Tensor pe({n, n, t, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t tt = 0; tt < t; ++tt)
        for (std::size_t k = 0; k < c / 2; ++k) {
          const double f = freqs[k];
          const std::size_t base = ((i * n + j) * t + tt) * c + 2 * k;
          pe[base] = 0.5 * (std::sin(static_cast<double>(i) * f) +
                            std::sin(static_cast<double>(j) * f));
          pe[base + 1] = std::cos(static_cast<double>(tt) * f);
        }
  return pe;
}

}  // namespace fstm::rope
