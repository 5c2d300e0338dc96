#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fstm/gradcheck.hpp"
#include "fstm/model.hpp"

namespace fstm::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;      // worst observed error (or ratio, for rate checks)
  std::string tolerance;   // human-readable bound applied to `value`
  std::string detail;
};

struct SuiteOptions {
  std::uint64_t seed = 1;
  bool gradients = true;
};

// Invariant suite behind `fstm check`: scan-vs-convolution oracle,
// discretisation order, rearrangement round trips, Rope identities, dFNC
// invariants, IG exactness and gradient checks.
std::vector<CheckResult> run_suite(const SuiteOptions& opt = {});

// Individual checks (also used by the acceptance binary).
CheckResult check_scan_oracle(std::uint64_t seed);
CheckResult check_discretization_order();
CheckResult check_cva_roundtrip(std::uint64_t seed);
CheckResult check_cvr_roundtrip(std::uint64_t seed);
CheckResult check_merge_trace();
CheckResult check_rope_orthogonality();
CheckResult check_rope_involution(std::uint64_t seed);
CheckResult check_rope_relative(std::uint64_t seed);
CheckResult check_stage_roundtrip(std::uint64_t seed);
CheckResult check_dfnc_invariants(std::uint64_t seed);
CheckResult check_ig_linear(std::uint64_t seed);

// Configuration of the end-to-end gradient-check model: 8 components in two
// networks (N' = 8), C = 8, two stages with CVA/CVR steps {2, 1}.
model::ModelConfig tiny_model_config(std::uint64_t seed = 3);

// Finite-difference checks of every differentiable operation and of the
// tiny model (parameters and input).
std::vector<gradcheck::Result> gradient_suite(std::uint64_t seed,
                                              const gradcheck::Options& opt = {});

}  // namespace fstm::checks
