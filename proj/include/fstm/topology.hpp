#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fstm/autograd.hpp"
#include "fstm/params.hpp"
#include "fstm/tensor.hpp"

namespace fstm::topo {

struct Network {
  std::string name;
  std::vector<std::string> components;
};

// Per-stage layout of the hierarchy.
struct StageConfig {
  std::vector<std::size_t> channels;    // per stage
  std::vector<std::size_t> blocks;      // per stage
  std::vector<std::size_t> cva_steps;   // per stage
  std::vector<std::size_t> cvr_steps;   // per stage
  std::vector<bool> merge_before;       // per stage
  // Channel doubling without a spatial merge (no_merge ablation); derived,
  // never serialised. Empty means none.
  std::vector<bool> widen_before;

  std::size_t stage_count() const { return blocks.size(); }
  // Four stages, C -> 2C -> 4C -> 8C, depths {2, 2, 6, 2}, steps {4, 4, 2, 1}.
  static StageConfig defaults(std::size_t base_channels = 24);
  void validate() const;
  // Component count entering each stage for a padded grid side.
  std::vector<std::size_t> grid_trace(std::size_t n_padded) const;
};

// Smallest n' >= n whose per-stage grid side (after each merge) is divisible
// by that stage's CVA and CVR steps and by 2 before each merge.
std::size_t padded_size(std::size_t n, const StageConfig& stages);

class ComponentAtlas {
 public:
  ComponentAtlas() = default;
  ComponentAtlas(std::string name, std::vector<Network> networks,
                 const StageConfig& stages);

  // 53 components in 7 contiguous networks.
  static ComponentAtlas neuromark(const StageConfig& stages);
  // n_components split into n_networks equal contiguous groups.
  static ComponentAtlas uniform(std::size_t n_components, std::size_t n_networks,
                                const StageConfig& stages);
  // Structured-text (JSON) atlas document.
  static ComponentAtlas parse(const std::string& text, const StageConfig& stages);
  static ComponentAtlas load(const std::string& path, const StageConfig& stages);
  std::string to_json() const;

  const std::string& name() const noexcept { return name_; }
  const std::vector<Network>& networks() const noexcept { return networks_; }
  std::size_t n_components() const noexcept { return n_components_; }
  std::size_t n_padded() const noexcept { return n_padded_; }
  const std::vector<bool>& pad_mask() const noexcept { return pad_mask_; }
  std::size_t network_of(std::size_t component) const;
  // Half-open component range [first, last) of network k.
  std::pair<std::size_t, std::size_t> network_range(std::size_t k) const;

 private:
  std::string name_;
  std::vector<Network> networks_;
  std::vector<std::size_t> starts_;
  std::size_t n_components_ = 0;
  std::size_t n_padded_ = 0;
  std::vector<bool> pad_mask_;
};

// --- index maps (shared by the plain and differentiable forms) ------------

// x [B, N, N, rest...] -> [s B, N/s, N/s, rest...]; group g holds
// x[b, g + i s, g + j s]. Groups are stacked group-major on the batch axis.
std::pair<ad::IndexPtr, Shape> cva_index(const Shape& in, std::size_t s);
// Flat destinations in `base` of every element of cva(base, s).
ad::IndexPtr cva_scatter_index(const Shape& base, std::size_t s);
// y[b, i, j] = x[b, (i + r) mod N, (j + r) mod N].
ad::IndexPtr cvr_index(const Shape& in, long long r);

Tensor cva(const Tensor& x, std::size_t s);
Tensor cva_scatter(const Tensor& groups, const Tensor& base, std::size_t s);
Tensor cvr(const Tensor& x, long long r);

ad::Var cva(const ad::Var& x, std::size_t s);
ad::Var cva_scatter(const ad::Var& groups, const ad::Var& base, std::size_t s);
ad::Var cvr(const ad::Var& x, long long r);

// Stacks the two stride-2 CVA groups on the channel axis:
// z [B, N, N, T, C] -> [B, N/2, N/2, T, 2C], channel g C + c from group g.
ad::Var merge_stack(const ad::Var& z);
void init_component_merge(ParamStore& store, const std::string& prefix,
                          std::size_t channels, Rng& rng);
// LayerNorm over 2C then linear 2C -> 2C. `bypass_norm` skips the LN.
ad::Var component_merge(const Binding& p, const std::string& prefix,
                        const ad::Var& z, bool bypass_norm = false);

// Component validity after one merge: component i is real when either of
// its two sources is.
std::vector<bool> merge_mask(const std::vector<bool>& mask);

enum class ScanKind { forward_flatten, backward_flatten, component_specific };

struct ScanOrder {
  ScanKind kind;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> sequences;
};

ScanOrder build_scan_order(ScanKind kind, std::size_t n);

// x [B, N, N, T] with N = n_components -> [B, N', N', T], zero padded.
Tensor pad_to_atlas(const Tensor& x, const ComponentAtlas& atlas);

namespace testing {
// Fault hook for the invariant suite: shifts the CVA group offset so round
// trips break. Process-wide; off by default.
void set_cva_fault(bool on);
bool cva_fault();
}  // namespace testing

}  // namespace fstm::topo
