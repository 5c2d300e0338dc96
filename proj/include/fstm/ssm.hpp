#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fstm/autograd.hpp"
#include "fstm/params.hpp"
#include "fstm/tensor.hpp"

namespace fstm::ssm {

// Below this |a| the zero-order-hold input gain uses its a -> 0 limit.
inline constexpr double kLimitEps = 1e-6;

struct Discretized {
  double a_bar;
  double b_bar;
};

// Zero-order-hold discretisation of one diagonal entry:
// a_bar = exp(delta a), b_bar = (exp(delta a) - 1) / a * b.
Discretized discretize(double a, double b, double delta);

// Per-direction selective-scan parameters. A = -exp(a_log).
struct SsmParams {
  Tensor a_log;    // [E, Nstate]
  Tensor d_skip;   // [E]
  Tensor delta_w;  // [E, E]   pre-softplus step projection
  Tensor delta_b;  // [E]
  Tensor b_w;      // [Nstate, E]
  Tensor b_b;      // [Nstate]
  Tensor c_w;      // [Nstate, E]
  Tensor c_b;      // [Nstate]

  std::size_t inner() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }
  void validate() const;
};

SsmParams init_ssm_params(std::size_t inner, std::size_t state, Rng& rng);

struct ScanSequenceBatch {
  Tensor data;  // [Q, L, E]
  std::string ordering_id;
};

// Recurrence h_t = a_bar_t h_{t-1} + b_bar_t u_t, y_t = C_t h_t + D u_t with
// explicit per-step inputs. u, delta: [Q, L, E]; a: [E, N] (negative);
// b, c: [Q, L, N]; d: [E]. Returns [Q, L, E].
Tensor scan_kernel(const Tensor& u, const Tensor& delta, const Tensor& a,
                   const Tensor& b, const Tensor& c, const Tensor& d);

// Full selective scan: delta = softplus(delta_proj(x)), B and C projected
// from x, then scan_kernel. h_0 = 0 for every sequence.
Tensor selective_scan(const ScanSequenceBatch& seq, const SsmParams& params);

// Time-invariant reference: kernel K_k = sum_n c_n a_bar_n^k b_bar_n,
// y = x * K (causal) + d x. Quadratic in L; test use only.
std::vector<double> ssm_conv_oracle(std::span<const double> x,
                                    std::span<const double> a_bar,
                                    std::span<const double> b_bar,
                                    std::span<const double> c, double d);
std::vector<double> ssm_conv_oracle(std::span<const double> x, double a_bar,
                                    double b_bar, double c, double d);

// Differentiable pieces.
ad::Var scan_op(const ad::Var& u, const ad::Var& delta, const ad::Var& a,
                const ad::Var& b, const ad::Var& c, const ad::Var& d);
// Depthwise causal convolution along L: x [Q, L, E], w [E, K], bias [E].
ad::Var causal_dwconv(const ad::Var& x, const ad::Var& w, const ad::Var& bias);

enum class Direction { forward, backward, component_specific };
const char* direction_name(Direction d);
// Forward and backward scans share one parameter group ("scan"); the
// component-specific scan has its own ("row").
const char* param_group(Direction d);

struct MambaEncoderConfig {
  std::size_t model_dim = 24;
  std::size_t expansion = 2;
  std::size_t conv_kernel = 4;
  std::size_t state_size = 16;
  std::vector<Direction> directions{Direction::forward, Direction::backward};

  std::size_t inner() const { return expansion * model_dim; }
  bool has(Direction d) const;
  void validate() const;
};

// Registers encoder parameters under `prefix`.
void init_mamba_encoder(ParamStore& store, const std::string& prefix,
                        const MambaEncoderConfig& cfg, Rng& rng);

// x: [Q, L, C] -> [Q, L, C]. `row_length` splits each sequence into rows of
// that length for the component-specific direction. No outer residual.
ad::Var mamba_encoder_forward(const Binding& params, const std::string& prefix,
                              const MambaEncoderConfig& cfg, const ad::Var& x,
                              std::optional<std::size_t> row_length);

// Per-direction outputs before fusion, in cfg.directions order; used to
// inspect direction behaviour.
std::vector<Tensor> mamba_direction_outputs(const ParamStore& store,
                                            const std::string& prefix,
                                            const MambaEncoderConfig& cfg,
                                            const Tensor& x,
                                            std::optional<std::size_t> row_length);

// Pulls the SsmParams of one encoder direction out of a store.
SsmParams direction_params(const ParamStore& store, const std::string& prefix,
                           Direction d);

}  // namespace fstm::ssm
