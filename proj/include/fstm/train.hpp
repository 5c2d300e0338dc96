#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fstm/model.hpp"
#include "fstm/params.hpp"
#include "fstm/tensor.hpp"

namespace fstm::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

// Decoupled weight decay, then the bias-corrected Adam update.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr);
  std::uint64_t steps() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// lr * (1 + cos(pi * step / total)) / 2
double cosine_lr(double lr, std::uint64_t step, std::uint64_t total);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  AdamWConfig adamw;
  model::Ablations ablations;
  // Validation metrics every `eval_every` epochs (0: only after the last).
  std::size_t eval_every = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Model-ready samples: x is the padded dFNC [S, N', N', T].
struct Dataset {
  Tensor x;
  std::vector<int> labels;      // classification
  std::vector<double> targets;  // regression

  std::size_t size() const { return x.empty() ? 0 : x.dim(0); }
  Tensor batch(const std::vector<std::size_t>& idx) const;
  void validate(model::Task task) const;
};

// Pads raw dFNC [S, N, N, T] to the atlas grid.
Dataset make_dataset(const Tensor& dfnc, const topo::ComponentAtlas& atlas,
                     std::vector<int> labels, std::vector<double> targets = {});

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
// Seeded shuffle; the last round(val_fraction * n) indices form the
// validation set (at least one when n >= 2 and val_fraction > 0).
Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed);

// Probability that a random positive outranks a random negative, ties
// counted half. nullopt when only one class is present.
std::optional<double> auc_rank(const std::vector<double>& scores,
                               const std::vector<int>& labels);

struct MetricReport {
  std::size_t count = 0;
  double loss = 0.0;
  std::optional<double> acc;
  std::optional<double> auc;
  std::optional<double> mae;
  std::optional<double> mse;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

// Scores are logit(1) - logit(0) for classification.
MetricReport evaluate(const model::Model& m, const Dataset& data,
                      const std::vector<std::size_t>& indices,
                      std::size_t batch_size = 64);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;          // learning rate at the epoch's last step
  double train_loss = 0.0;  // mean over the epoch's batches
  std::optional<MetricReport> val;

  nlohmann::json to_json() const;
};

struct TrainResult {
  model::Model model;
  std::vector<EpochRecord> history;
  Split split;
  std::uint64_t steps = 0;
  bool diverged = false;
  std::string message;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Divergence (non-finite loss or gradient) stops training and returns the
// parameters from before the offending step.
TrainResult train(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                  const Dataset& data, const EpochCallback& on_epoch = {});

// Loss of a batch under a binding; used by training and gradient checks.
ad::Var batch_loss(const model::Model& m, const Binding& p, const Tensor& x,
                   const Dataset& data, const std::vector<std::size_t>& idx);

// --- integrated gradients ---------------------------------------------------

// Maps a batch [k, ...] to one scalar per row, shape [k] or [k, 1]. Rows must
// not interact.
using BatchScalarFn = std::function<ad::Var(const ad::Var& batch)>;

struct Attribution {
  Tensor ig;            // same shape as the input
  double f_input = 0.0;
  double f_baseline = 0.0;
  double ig_sum = 0.0;
  double residual = 0.0;      // |sum IG - (F(x) - F(x'))|
  double rel_residual = 0.0;  // residual / |F(x) - F(x')|; 0 when both are 0
};

// Right Riemann sum over `steps` points of the straight path, evaluated in
// chunks of `chunk` path points per batch.
Attribution integrated_gradients(const BatchScalarFn& f, const Tensor& x,
                                 const Tensor& baseline, std::size_t steps,
                                 std::size_t chunk = 16);

// F = logit of `target` (or the regression output). `baseline` empty means
// the zero tensor.
Attribution model_integrated_gradients(const model::Model& m, const Tensor& x,
                                       int target, std::size_t steps,
                                       const Tensor& baseline = {},
                                       std::size_t chunk = 16);

// [N', N', T] attribution -> [N, N] temporal mean over real components.
Tensor temporal_mean_map(const Tensor& ig, std::size_t n_components);

struct CohortAttribution {
  Tensor mean_map;  // [N, N]
  std::size_t used = 0;
  std::size_t skipped = 0;  // misclassified
  double max_rel_residual = 0.0;
  std::vector<double> rel_residuals;
};

// Averages temporal-mean maps over correctly classified samples with the
// label logit as F. Regression models use every sample.
CohortAttribution cohort_attribution(const model::Model& m, const Dataset& data,
                                     const std::vector<std::size_t>& indices,
                                     std::size_t steps, std::size_t chunk = 16);

// --- checkpoints ------------------------------------------------------------

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  nlohmann::json train_config = nlohmann::json::object();
};

void save_checkpoint(const std::string& path, const model::Model& m,
                     const CheckpointMeta& meta);
std::pair<model::Model, CheckpointMeta> load_checkpoint(const std::string& path);

// Large, short-lived activations otherwise go through fresh mmap'd pages on
// every allocation. Idempotent; no-op outside glibc.
void tune_allocator();

}  // namespace fstm::train
