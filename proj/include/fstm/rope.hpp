#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "fstm/autograd.hpp"
#include "fstm/tensor.hpp"

namespace fstm::rope {

struct RopeConfig {
  double theta_base = 10000.0;
  std::size_t channel_dim = 24;

  // theta_k = base^(-k / units), k = 0 .. units-1: one frequency per
  // rotation unit, strictly decreasing.
  std::vector<double> frequencies(std::size_t units) const;
  std::vector<double> temporal_frequencies() const;  // channel_dim / 2 pairs
  std::vector<double> spatial_frequencies() const;   // channel_dim / 4 blocks
};

using Mat2 = std::array<double, 4>;  // row-major 2x2

// Rotation by angle a: (cos a, -sin a; sin a, cos a).
Mat2 rotation(double angle);
// Symmetric reflection block (sin a, cos a; cos a, -sin a); S_a S_a = I.
Mat2 reflection(double angle);
Mat2 matmul(const Mat2& a, const Mat2& b);
Mat2 transpose(const Mat2& a);

// Rotates channel pairs (2k, 2k+1) at position n (axis -2) by n theta_k;
// `inverse` rotates by -n theta_k. x: [..., L, C].
Tensor rope1d_apply(const Tensor& x, const RopeConfig& cfg, bool inverse);

// Applies the reflection blocks S_{x theta_k} to channels (4k, 4k+1) and
// S_{y theta_k} to (4k+2, 4k+3) at grid cell (x, y). x: [..., N, N, C].
// The transform is its own inverse, so `inverse` selects the same blocks.
Tensor symrope_apply(const Tensor& x, const RopeConfig& cfg, bool inverse);

// Per-cell 4x4 spatial encoding matrix for one channel block.
std::array<double, 16> symrope_block_matrix(std::size_t x, std::size_t y,
                                            double theta);

// Stage-level encodings on z [B, N, N, T, C]: spatial then temporal.
// stage_unrope undoes both in reverse order.
Tensor stage_rope(const Tensor& z, const RopeConfig& cfg);
Tensor stage_unrope(const Tensor& z, const RopeConfig& cfg);

ad::Var stage_rope(const ad::Var& z, const RopeConfig& cfg);
ad::Var stage_unrope(const ad::Var& z, const RopeConfig& cfg);

// Fixed additive sinusoidal table for [N, N, T, C] (absolute-encoding
// baseline). Symmetric in the two grid axes.
Tensor absolute_encoding(std::size_t n, std::size_t t, std::size_t c,
                         double theta_base = 10000.0);

}  // namespace fstm::rope
