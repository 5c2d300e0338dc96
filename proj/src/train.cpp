#include "fstm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fstm/container.hpp"
#include "fstm/error.hpp"

namespace fstm::train {

using nlohmann::json;

void AdamW::step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                 double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    Tensor& p = params.get_mut(name);
    const Tensor& g = git->second;
    require(g.shape() == p.shape(), ErrorKind::shape, "adamw: gradient shape for " + name);
    auto [mit, fresh] = m_.try_emplace(name, p.shape());
    if (fresh) v_.emplace(name, Tensor(p.shape()));
    Tensor& m = mit->second;
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * cfg_.weight_decay;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double cosine_lr(double lr, std::uint64_t step, std::uint64_t total) {
  if (total == 0) return lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void TrainConfig::validate() const {
  require(std::isfinite(lr) && lr >= 0.0, ErrorKind::config, "train: lr must be >= 0");
  require(epochs >= 1, ErrorKind::config, "train: epochs must be >= 1");
  require(batch_size >= 1, ErrorKind::config, "train: batch_size must be >= 1");
  require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::config,
          "train: val_fraction must be in [0, 1)");
  require(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1,
          ErrorKind::config, "train: AdamW betas must be in [0, 1)");
  require(adamw.eps > 0 && adamw.weight_decay >= 0, ErrorKind::config,
          "train: AdamW eps must be > 0 and weight_decay >= 0");
  ablations.validate();
}

json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"val_fraction", val_fraction},
          {"eval_every", eval_every},
          {"schedule", "cosine"},
          {"optimizer",
           {{"name", "adamw"},
            {"beta1", adamw.beta1},
            {"beta2", adamw.beta2},
            {"weight_decay", adamw.weight_decay},
            {"eps", adamw.eps}}},
          {"ablations", ablations.active()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.eval_every = j.value("eval_every", c.eval_every);
    require(j.value("schedule", std::string("cosine")) == "cosine", ErrorKind::config,
            "train: only the cosine schedule is supported");
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      require(o.value("name", std::string("adamw")) == "adamw", ErrorKind::config,
              "train: only the adamw optimizer is supported");
      c.adamw.beta1 = o.value("beta1", c.adamw.beta1);
      c.adamw.beta2 = o.value("beta2", c.adamw.beta2);
      c.adamw.weight_decay = o.value("weight_decay", c.adamw.weight_decay);
      c.adamw.eps = o.value("eps", c.adamw.eps);
    }
    for (const auto& f : j.value("ablations", std::vector<std::string>{})) c.ablations.set(f);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor Dataset::batch(const std::vector<std::size_t>& idx) const {
  Shape s = x.shape();
  const std::size_t per = x.size() / s[0];
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] < size(), ErrorKind::invalid_argument, "dataset: index out of range");
    std::copy_n(x.ptr() + idx[k] * per, per, out.ptr() + k * per);
  }
  return out;
}

void Dataset::validate(model::Task task) const {
  require(x.rank() == 4 && x.dim(1) == x.dim(2), ErrorKind::shape,
          "dataset: x must be [S, N, N, T], got " + shape_str(x.shape()));
  if (task == model::Task::binary_classification) {
    require(labels.size() == size(), ErrorKind::invalid_argument,
            "dataset: need one label per sample");
    for (int l : labels)
      require(l == 0 || l == 1, ErrorKind::invalid_argument,
              "dataset: binary labels must be 0 or 1");
  } else {
    require(targets.size() == size(), ErrorKind::invalid_argument,
            "dataset: need one target per sample");
  }
}

Dataset make_dataset(const Tensor& dfnc, const topo::ComponentAtlas& atlas,
                     std::vector<int> labels, std::vector<double> targets) {
  Dataset d;
  d.x = topo::pad_to_atlas(dfnc, atlas);
  d.labels = std::move(labels);
  d.targets = std::move(targets);
  return d;
}

Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed ^ 0x5eed5011ULL);
  rng.shuffle(idx);
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (val_fraction > 0 && n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  Split s;
  s.train.assign(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
  s.val.assign(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
  return s;
}

std::optional<double> auc_rank(const std::vector<double>& scores,
                               const std::vector<int>& labels) {
  require(scores.size() == labels.size(), ErrorKind::invalid_argument,
          "auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // average ranks (1-based) over tie groups
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] == 1) {
      pos += 1;
      rank_sum += rank[i];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

json MetricReport::to_json() const {
  json j{{"count", count}, {"loss", loss}};
  auto opt = [&](const char* k, const std::optional<double>& v) {
    j[k] = v ? json(*v) : json(nullptr);
  };
  opt("acc", acc);
  opt("auc", auc);
  opt("mae", mae);
  opt("mse", mse);
  if (!warnings.empty()) j["warnings"] = warnings;
  return j;
}

json EpochRecord::to_json() const {
  json j{{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}};
  if (val) j["val"] = val->to_json();
  return j;
}

ad::Var batch_loss(const model::Model& m, const Binding& p, const Tensor& x,
                   const Dataset& data, const std::vector<std::size_t>& idx) {
  auto out = m.forward(p, ad::constant(x));
  if (m.config().task == model::Task::binary_classification) {
    std::vector<int> y;
    for (auto i : idx) y.push_back(data.labels[i]);
    return ad::softmax_cross_entropy(out, y);
  }
  std::vector<double> y;
  for (auto i : idx) y.push_back(data.targets[i]);
  return ad::mse_loss(out, y);
}

MetricReport evaluate(const model::Model& m, const Dataset& data,
                      const std::vector<std::size_t>& indices, std::size_t batch_size) {
  const model::Task task = m.config().task;
  data.validate(task);
  require(batch_size >= 1, ErrorKind::invalid_argument, "evaluate: batch_size must be >= 1");
  MetricReport r;
  r.count = indices.size();
  if (indices.empty()) {
    r.warnings.push_back("empty evaluation set");
    return r;
  }
  std::vector<double> scores;
  std::vector<int> labels;
  double loss_sum = 0, correct = 0, abs_sum = 0, sq_sum = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::vector<std::size_t> idx(
        indices.begin() + static_cast<std::ptrdiff_t>(start),
        indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + batch_size)));
    const Tensor out = m.predict(data.batch(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (task == model::Task::binary_classification) {
        const double l0 = out[k * 2], l1 = out[k * 2 + 1];
        const int y = data.labels[idx[k]];
        const double mx = std::max(l0, l1);
        const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
        loss_sum += lse - (y == 1 ? l1 : l0);
        const int pred = l1 > l0 ? 1 : 0;
        correct += pred == y ? 1.0 : 0.0;
        scores.push_back(l1 - l0);
        labels.push_back(y);
      } else {
        const double d = out[k] - data.targets[idx[k]];
        abs_sum += std::abs(d);
        sq_sum += d * d;
      }
    }
  }
  const double n = static_cast<double>(indices.size());
  if (task == model::Task::binary_classification) {
    r.loss = loss_sum / n;
    r.acc = correct / n;
    r.auc = auc_rank(scores, labels);
    if (!r.auc) r.warnings.push_back("single-class evaluation set: AUC undefined");
  } else {
    r.mae = abs_sum / n;
    r.mse = sq_sum / n;
    r.loss = *r.mse;
  }
  return r;
}

void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

namespace {

bool grads_finite(const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads)
    if (!all_finite(g.data())) return false;
  return true;
}

model::ModelConfig merge_ablations(model::ModelConfig cfg, const model::Ablations& extra) {
  for (const auto& f : extra.active()) cfg.ablations.set(f);
  cfg.ablations.validate();
  return cfg;
}

}  // namespace

TrainResult train(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                  const Dataset& data, const EpochCallback& on_epoch) {
  cfg.validate();
  tune_allocator();
  const model::ModelConfig mc = merge_ablations(model_cfg, cfg.ablations);
  data.validate(mc.task);
  TrainResult res{model::Model(mc), {}, split_indices(data.size(), cfg.val_fraction, cfg.seed),
                  0, false, ""};
  require(!res.split.train.empty(), ErrorKind::invalid_argument, "train: empty training split");
  model::Model& m = res.model;
  AdamW opt(cfg.adamw);
  Rng order_rng(cfg.seed ^ 0x0bde5ULL);
  const std::size_t per_epoch =
      (res.split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total = per_epoch * cfg.epochs;
  std::vector<std::size_t> order = res.split.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !res.diverged; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0;
    double lr = cfg.lr;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
      Binding p(m.params(), true);
      std::string failure;
      double loss_value = 0;
      std::map<std::string, Tensor> grads;
      try {
        auto loss = batch_loss(m, p, data.batch(idx), data, idx);
        loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) {
          failure = "non-finite loss";
        } else {
          ad::backward(loss);
          grads = p.gradients();
          if (!grads_finite(grads)) failure = "non-finite gradient";
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        failure = e.what();
      }
      if (!failure.empty()) {
        res.diverged = true;
        res.message = "diverged at epoch " + std::to_string(epoch) + ", step " +
                      std::to_string(res.steps + 1) + ": " + failure +
                      "; kept the last finite parameters";
        break;
      }
      lr = cosine_lr(cfg.lr, res.steps, total);
      ParamStore before = m.params();
      opt.step(m.params(), grads, lr);
      bool finite = true;
      for (const auto& n : m.params().names())
        finite = finite && all_finite(m.params().get(n).data());
      if (!finite) {
        m.params() = std::move(before);
        res.diverged = true;
        res.message = "diverged at epoch " + std::to_string(epoch) + ", step " +
                      std::to_string(res.steps + 1) +
                      ": update produced non-finite parameters; kept the last finite parameters";
        break;
      }
      ++res.steps;
      loss_sum += loss_value;
      ++batches;
    }
    if (batches == 0) break;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    const bool last = epoch == cfg.epochs || res.diverged;
    if (!res.split.val.empty() &&
        (last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0))) {
      try {
        rec.val = evaluate(m, data, res.split.val, cfg.batch_size);
      } catch (const Error& e) {
        // finite parameters can still overflow the forward pass after divergence
        if (e.kind() != ErrorKind::numeric || !res.diverged) throw;
        res.message += "; validation skipped: " + std::string(e.what());
      }
    }
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

// --- integrated gradients ---------------------------------------------------

Attribution integrated_gradients(const BatchScalarFn& f, const Tensor& x,
                                 const Tensor& baseline, std::size_t steps,
                                 std::size_t chunk) {
  require(x.shape() == baseline.shape(), ErrorKind::shape,
          "ig: baseline " + shape_str(baseline.shape()) + " vs input " + shape_str(x.shape()));
  require(steps >= 1 && chunk >= 1, ErrorKind::invalid_argument,
          "ig: steps and chunk must be >= 1");
  const std::size_t per = x.size();
  auto eval_rows = [&](const std::vector<double>& alphas, Tensor* grad_sum,
                       std::size_t first_step) {
    Shape bs = x.shape();
    bs.insert(bs.begin(), alphas.size());
    Tensor batch(bs);
    for (std::size_t k = 0; k < alphas.size(); ++k)
      for (std::size_t i = 0; i < per; ++i)
        batch[k * per + i] = baseline[i] + alphas[k] * (x[i] - baseline[i]);
    auto leaf = grad_sum ? ad::parameter(std::move(batch)) : ad::constant(std::move(batch));
    auto out = f(leaf);
    require(out.size() == alphas.size(), ErrorKind::shape,
            "ig: function must return one value per batch row");
    std::vector<double> values(out.value().data().begin(), out.value().data().end());
    if (grad_sum) {
      ad::backward(ad::sum_all(out));
      const Tensor& g = leaf.grad();
      for (std::size_t k = 0; k < alphas.size(); ++k) {
        const double* gk = g.ptr() + k * per;
        if (!all_finite({gk, per}))
          fail(ErrorKind::numeric,
               "ig: non-finite gradient at path step " + std::to_string(first_step + k + 1));
        for (std::size_t i = 0; i < per; ++i) (*grad_sum)[i] += gk[i];
      }
    }
    return values;
  };

  Attribution a;
  const auto ends = eval_rows({0.0, 1.0}, nullptr, 0);
  a.f_baseline = ends[0];
  a.f_input = ends[1];
  Tensor gsum(x.shape());
  for (std::size_t s0 = 0; s0 < steps; s0 += chunk) {
    std::vector<double> alphas;
    for (std::size_t k = s0; k < std::min(steps, s0 + chunk); ++k)
      alphas.push_back(static_cast<double>(k + 1) / static_cast<double>(steps));
    eval_rows(alphas, &gsum, s0);
  }
  a.ig = Tensor(x.shape());
  for (std::size_t i = 0; i < per; ++i) {
    a.ig[i] = (x[i] - baseline[i]) * gsum[i] / static_cast<double>(steps);
    a.ig_sum += a.ig[i];
  }
  const double delta = a.f_input - a.f_baseline;
  a.residual = std::abs(a.ig_sum - delta);
  a.rel_residual = delta != 0.0 ? a.residual / std::abs(delta) : (a.residual == 0 ? 0 : INFINITY);
  return a;
}

Attribution model_integrated_gradients(const model::Model& m, const Tensor& x, int target,
                                       std::size_t steps, const Tensor& baseline,
                                       std::size_t chunk) {
  require(x.rank() == 3, ErrorKind::shape, "ig: sample must be [N', N', T]");
  const std::size_t out_dim = m.config().output_dim();
  require(target >= 0 && static_cast<std::size_t>(target) < out_dim,
          ErrorKind::invalid_argument, "ig: target out of range");
  tune_allocator();
  const ParamStore& params = m.params();
  BatchScalarFn f = [&](const ad::Var& batch) {
    Binding p(params, false);
    auto out = m.forward(p, batch);
    const std::size_t k = out.dim(0);
    auto idx = std::make_shared<ad::Index>(k);
    for (std::size_t r = 0; r < k; ++r)
      (*idx)[r] = static_cast<std::int64_t>(r * out_dim + static_cast<std::size_t>(target));
    return ad::gather(out, idx, {k});
  };
  return integrated_gradients(f, x, baseline.empty() ? Tensor(x.shape()) : baseline,
                              steps, chunk);
}

Tensor temporal_mean_map(const Tensor& ig, std::size_t n_components) {
  require(ig.rank() == 3 && ig.dim(0) == ig.dim(1) && n_components <= ig.dim(0),
          ErrorKind::shape, "temporal map: expected [N', N', T]");
  const std::size_t np = ig.dim(0), t = ig.dim(2);
  Tensor out({n_components, n_components});
  for (std::size_t i = 0; i < n_components; ++i)
    for (std::size_t j = 0; j < n_components; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < t; ++k) s += ig[(i * np + j) * t + k];
      out[i * n_components + j] = s / static_cast<double>(t);
    }
  return out;
}

CohortAttribution cohort_attribution(const model::Model& m, const Dataset& data,
                                     const std::vector<std::size_t>& indices,
                                     std::size_t steps, std::size_t chunk) {
  const model::Task task = m.config().task;
  data.validate(task);
  const std::size_t n = m.atlas().n_components();
  CohortAttribution c;
  c.mean_map = Tensor({n, n});
  for (auto i : indices) {
    const Tensor xi = data.batch({i});
    Shape s(xi.shape().begin() + 1, xi.shape().end());
    const Tensor sample = xi.reshaped(s);
    int target = 0;
    if (task == model::Task::binary_classification) {
      const Tensor out = m.predict(xi);
      const int pred = out[1] > out[0] ? 1 : 0;
      if (pred != data.labels[i]) {
        ++c.skipped;
        continue;
      }
      target = data.labels[i];
    }
    const Attribution a = model_integrated_gradients(m, sample, target, steps, {}, chunk);
    const Tensor map = temporal_mean_map(a.ig, n);
    for (std::size_t k = 0; k < map.size(); ++k) c.mean_map[k] += map[k];
    c.rel_residuals.push_back(a.rel_residual);
    c.max_rel_residual = std::max(c.max_rel_residual, a.rel_residual);
    ++c.used;
  }
  if (c.used > 0)
    for (auto& v : c.mean_map.data()) v /= static_cast<double>(c.used);
  return c;
}

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::string& path, const model::Model& m,
                     const CheckpointMeta& meta) {
  io::ContainerHeader h;
  h.kind = "checkpoint";
  h.dtype = "f64";
  h.atlas = m.atlas().name();
  h.provenance = "fstm checkpoint";
  h.extra["config"] = m.config().to_json();
  h.extra["seed"] = meta.seed;
  h.extra["step"] = meta.step;
  h.extra["train_config"] = meta.train_config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& n : m.params().names()) tensors.emplace_back(n, m.params().get(n));
  io::write_tensor_set(path, h, tensors);
}

std::pair<model::Model, CheckpointMeta> load_checkpoint(const std::string& path) {
  auto [h, tensors] = io::read_tensor_set(path);
  require(h.kind == "checkpoint", ErrorKind::format, path + " is not a checkpoint");
  require(h.extra.contains("config"), ErrorKind::format, path + ": checkpoint lacks a config");
  CheckpointMeta meta;
  try {
    meta.seed = h.extra.value("seed", std::uint64_t{0});
    meta.step = h.extra.value("step", std::uint64_t{0});
    meta.train_config = h.extra.value("train_config", json::object());
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint metadata: ") + e.what());
  }
  ParamStore store;
  for (auto& [name, t] : tensors) store.add(name, std::move(t));
  model::Model m(model::ModelConfig::from_json(h.extra["config"]), std::move(store));
  return {std::move(m), meta};
}

}  // namespace fstm::train
