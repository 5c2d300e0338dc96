#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fstm/autograd.hpp"
#include "fstm/params.hpp"
#include "fstm/rope.hpp"
#include "fstm/ssm.hpp"
#include "fstm/topology.hpp"

namespace fstm::model {

enum class Task { binary_classification, regression };

// Component switches for ablation runs. Flag names match the CLI.
struct Ablations {
  bool no_cva = false;
  bool no_cvr = false;
  bool no_comp_scan = false;
  bool no_merge = false;
  bool no_pos_enc = false;
  bool abs_pos_enc = false;
  bool no_unrope = false;
  bool no_conn_branch = false;
  bool no_temp_branch = false;

  static const std::vector<std::string>& flag_names();
  void set(const std::string& flag);  // config error on unknown names
  std::vector<std::string> active() const;
  void validate() const;
};

struct ModelConfig {
  std::string atlas_name = "neuromark_fmri_1.0";
  std::vector<topo::Network> networks;  // empty -> neuromark layout
  topo::StageConfig stages = topo::StageConfig::defaults(24);
  std::size_t base_channels = 24;
  Task task = Task::binary_classification;
  std::uint64_t seed = 0;
  std::size_t state_size = 16;
  std::size_t expansion = 2;
  std::size_t conv_kernel = 4;
  double theta_base = 10000.0;
  Ablations ablations;

  std::size_t output_dim() const { return task == Task::regression ? 1 : 2; }
  // Stage layout actually built (no_merge keeps N across stages).
  topo::StageConfig effective_stages() const;
  topo::ComponentAtlas atlas() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ForwardTrace {
  std::vector<Shape> stage_shapes;  // z entering each stage's blocks
  Shape pooled;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);  // parameters initialised from cfg.seed
  Model(ModelConfig cfg, ParamStore params);

  const ModelConfig& config() const noexcept { return cfg_; }
  const topo::ComponentAtlas& atlas() const noexcept { return atlas_; }
  const ParamStore& params() const noexcept { return params_; }
  ParamStore& params() noexcept { return params_; }

  // x: padded dFNC [B, N', N', T] (or [B, N', N', T, 1]).
  // Returns logits [B, 2] or predictions [B, 1].
  ad::Var forward(const Binding& p, const ad::Var& x,
                  ForwardTrace* trace = nullptr) const;
  Tensor predict(const Tensor& x) const;

  ad::Var embed(const Binding& p, const ad::Var& x) const;
  // One FST block at `stage`, block index `block` (0-based; odd indices are
  // the "even" blocks that apply CVA/CVR).
  ad::Var block_forward(const Binding& p, const ad::Var& z, std::size_t stage,
                        std::size_t block, const std::vector<bool>& comp_mask) const;

  ssm::MambaEncoderConfig conn_encoder_config(std::size_t stage) const;
  ssm::MambaEncoderConfig temp_encoder_config(std::size_t stage) const;

 private:
  void init_params();

  ModelConfig cfg_;
  topo::StageConfig stages_;
  topo::ComponentAtlas atlas_;
  ParamStore params_;
};

// Differentiable building blocks of the block equations (exposed for tests).
// z [B, N, N, T, C] -> [B, N, N, C]
ad::Var mean_over_time(const ad::Var& z);
// z [B, N, N, T, C] -> [B, T, C], averaging only cells (i, j) with both
// components real.
ad::Var masked_cell_mean(const ad::Var& z, const std::vector<bool>& comp_mask);
// out = (yc * sigmoid(yt) + z) on real cells, 0 on padded cells.
ad::Var gate_combine(const ad::Var& yc, const ad::Var& yt, const ad::Var& z,
                     const std::vector<bool>& comp_mask);
// Zeroes padded cells of [B, N, N, ...].
ad::Var mask_cells(const ad::Var& z, const std::vector<bool>& comp_mask);
// Mean over real cells and time: [B, N, N, T, C] -> [B, C].
ad::Var masked_pool(const ad::Var& z, const std::vector<bool>& comp_mask);

}  // namespace fstm::model
