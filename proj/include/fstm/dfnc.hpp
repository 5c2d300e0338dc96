#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "fstm/tensor.hpp"

namespace fstm::dfnc {

// Variance floor below which a correlation is reported as 0.
inline constexpr double kCorrEps = 1e-12;

struct ComponentTimeSeries {
  Tensor data;  // [S, T_total, N]
  double tr_seconds = 0.72;
};

std::size_t window_count(std::size_t t_total, std::size_t window, std::size_t stride);

// Pearson correlation per rectangular window: [S, N, N, T] with
// T = floor((T_total - window) / stride) + 1.
Tensor sliding_window_dfnc(const ComponentTimeSeries& ts, std::size_t window,
                           std::size_t stride = 1);

// Class-conditional correlation offset between two networks.
struct CouplingEffect {
  int class_id = 1;
  std::size_t network_a = 0;
  std::size_t network_b = 1;
  double offset = 0.4;
};

struct SyntheticCohortSpec {
  std::size_t n_subjects = 300;
  std::size_t n_components = 16;
  std::size_t n_networks = 4;
  std::size_t t_total = 60;
  std::size_t window = 10;
  std::size_t class_count = 2;
  std::vector<CouplingEffect> effects{CouplingEffect{}};
  double ar_coefficient = 0.0;
  double noise_std = 0.3;
  double tr_seconds = 0.72;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticCohortSpec from_json(const nlohmann::json& j);
};

struct Cohort {
  ComponentTimeSeries series;
  std::vector<int> labels;
};

// Network latents are unit-variance AR(1) processes mixed through the
// Cholesky factor of the class's network correlation matrix; every
// component is its network latent plus white noise.
Cohort generate_synthetic_cohort(const SyntheticCohortSpec& spec);

}  // namespace fstm::dfnc
