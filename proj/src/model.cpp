#include "fstm/model.hpp"

#include <cmath>

#include "fstm/error.hpp"

namespace fstm::model {

using nlohmann::json;

const std::vector<std::string>& Ablations::flag_names() {
  static const std::vector<std::string> names = {
      "no_cva",    "no_cvr",      "no_comp_scan",   "no_merge",      "no_pos_enc",
      "abs_pos_enc", "no_unrope", "no_conn_branch", "no_temp_branch"};
  return names;
}

namespace {

bool* flag_ptr(Ablations& a, const std::string& f) {
  if (f == "no_cva") return &a.no_cva;
  if (f == "no_cvr") return &a.no_cvr;
  if (f == "no_comp_scan") return &a.no_comp_scan;
  if (f == "no_merge") return &a.no_merge;
  if (f == "no_pos_enc") return &a.no_pos_enc;
  if (f == "abs_pos_enc") return &a.abs_pos_enc;
  if (f == "no_unrope") return &a.no_unrope;
  if (f == "no_conn_branch") return &a.no_conn_branch;
  if (f == "no_temp_branch") return &a.no_temp_branch;
  return nullptr;
}

}  // namespace

void Ablations::set(const std::string& flag) {
  bool* p = flag_ptr(*this, flag);
  require(p != nullptr, ErrorKind::config, "unknown ablation flag '" + flag + "'");
  *p = true;
}

std::vector<std::string> Ablations::active() const {
  std::vector<std::string> out;
  Ablations copy = *this;
  for (const auto& f : flag_names())
    if (*flag_ptr(copy, f)) out.push_back(f);
  return out;
}

void Ablations::validate() const {
  const int pos = int(no_pos_enc) + int(abs_pos_enc) + int(no_unrope);
  require(pos <= 1, ErrorKind::config,
          "at most one positional-encoding flag (no_pos_enc, abs_pos_enc, "
          "no_unrope) may be active");
}

topo::StageConfig ModelConfig::effective_stages() const {
  topo::StageConfig s = stages;
  if (ablations.no_merge) {
    s.widen_before = s.merge_before;
    for (std::size_t i = 0; i < s.merge_before.size(); ++i) s.merge_before[i] = false;
  }
  return s;
}

topo::ComponentAtlas ModelConfig::atlas() const {
  const auto s = effective_stages();
  if (networks.empty()) return topo::ComponentAtlas::neuromark(s);
  return topo::ComponentAtlas(atlas_name, networks, s);
}

void ModelConfig::validate() const {
  stages.validate();
  ablations.validate();
  require(stages.channels[0] == base_channels, ErrorKind::config,
          "model: stage 1 channels must equal base_channels");
  const bool rope = !ablations.no_pos_enc && !ablations.abs_pos_enc;
  for (std::size_t k = 0; k < stages.stage_count(); ++k) {
    if (rope)
      require(stages.channels[k] % 4 == 0, ErrorKind::config,
              "model: SymRope needs channels divisible by 4 at stage " +
                  std::to_string(k + 1));
    if (ablations.abs_pos_enc)
      require(stages.channels[k] % 2 == 0, ErrorKind::config,
              "model: absolute encoding needs even channels");
  }
  require(state_size >= 1 && expansion >= 1 && conv_kernel >= 1, ErrorKind::config,
          "model: encoder sizes must be >= 1");
}

json ModelConfig::to_json() const {
  json j;
  j["atlas_name"] = atlas_name;
  j["networks"] = json::array();
  for (const auto& n : networks)
    j["networks"].push_back({{"name", n.name}, {"components", n.components}});
  j["stages"] = {{"channels", stages.channels},
                 {"blocks", stages.blocks},
                 {"cva_steps", stages.cva_steps},
                 {"cvr_steps", stages.cvr_steps},
                 {"merge_before", stages.merge_before}};
  j["base_channels"] = base_channels;
  j["task"] = task == Task::regression ? "regression" : "binary_classification";
  j["seed"] = seed;
  j["state_size"] = state_size;
  j["expansion"] = expansion;
  j["conv_kernel"] = conv_kernel;
  j["theta_base"] = theta_base;
  j["ablations"] = ablations.active();
  return j;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.stages = topo::StageConfig::defaults(c.base_channels);
    c.atlas_name = j.value("atlas_name", c.atlas_name);
    if (j.contains("networks")) {
      for (const auto& jn : j["networks"]) {
        topo::Network n;
        n.name = jn.value("name", "");
        if (jn.contains("components"))
          n.components = jn["components"].get<std::vector<std::string>>();
        else
          for (std::size_t i = 0; i < jn.value("count", std::size_t{0}); ++i)
            n.components.push_back(n.name + std::to_string(i + 1));
        c.networks.push_back(std::move(n));
      }
    }
    if (j.contains("stages")) {
      const auto& s = j["stages"];
      if (s.contains("blocks")) c.stages.blocks = s["blocks"].get<std::vector<std::size_t>>();
      if (s.contains("cva_steps"))
        c.stages.cva_steps = s["cva_steps"].get<std::vector<std::size_t>>();
      if (s.contains("cvr_steps"))
        c.stages.cvr_steps = s["cvr_steps"].get<std::vector<std::size_t>>();
      else if (s.contains("cva_steps"))
        c.stages.cvr_steps = c.stages.cva_steps;
      const std::size_t k = c.stages.blocks.size();
      if (s.contains("merge_before")) {
        c.stages.merge_before = s["merge_before"].get<std::vector<bool>>();
      } else {
        c.stages.merge_before.assign(k, true);
        if (k) c.stages.merge_before[0] = false;
      }
      if (s.contains("channels")) {
        c.stages.channels = s["channels"].get<std::vector<std::size_t>>();
      } else {
        c.stages.channels.assign(k, c.base_channels);
        for (std::size_t i = 1; i < k; ++i)
          c.stages.channels[i] =
              c.stages.merge_before[i] ? 2 * c.stages.channels[i - 1] : c.stages.channels[i - 1];
      }
    }
    const std::string task = j.value("task", "binary_classification");
    if (task == "regression") c.task = Task::regression;
    else if (task == "binary_classification") c.task = Task::binary_classification;
    else fail(ErrorKind::config, "model: unknown task '" + task + "'");
    c.seed = j.value("seed", c.seed);
    c.state_size = j.value("state_size", c.state_size);
    c.expansion = j.value("expansion", c.expansion);
    c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
    c.theta_base = j.value("theta_base", c.theta_base);
    if (j.contains("ablations"))
      for (const auto& f : j["ablations"]) c.ablations.set(f.get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> cell_weights(const std::vector<bool>& m) {
  const std::size_t n = m.size();
  std::vector<double> w(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] = (m[i] && m[j]) ? 1.0 : 0.0;
  return w;
}

void check_grid5(const Shape& s, const char* op) {
  require(s.size() == 5 && s[1] == s[2], ErrorKind::shape,
          std::string(op) + ": expected [B, N, N, T, C], got " + shape_str(s));
}

}  // namespace

ad::Var mean_over_time(const ad::Var& z) {
  check_grid5(z.shape(), "mean_over_time");
  const Shape& s = z.shape();
  const std::size_t cells = s[0] * s[1] * s[2], t = s[3], c = s[4];
  Tensor out({s[0], s[1], s[2], c});
  const double inv = 1.0 / static_cast<double>(t);
  const double* zp = z.value().ptr();
  for (std::size_t k = 0; k < cells; ++k)
    for (std::size_t tt = 0; tt < t; ++tt)
      for (std::size_t ch = 0; ch < c; ++ch) out[k * c + ch] += zp[(k * t + tt) * c + ch] * inv;
  return ad::record(std::move(out), {z}, [cells, t, c, inv](ad::Node& self) {
    double* gz = ad::parent_grad(self, 0).ptr();
    for (std::size_t k = 0; k < cells; ++k)
      for (std::size_t tt = 0; tt < t; ++tt)
        for (std::size_t ch = 0; ch < c; ++ch)
          gz[(k * t + tt) * c + ch] += self.grad[k * c + ch] * inv;
  });
}

ad::Var masked_cell_mean(const ad::Var& z, const std::vector<bool>& comp_mask) {
  check_grid5(z.shape(), "masked_cell_mean");
  const Shape& s = z.shape();
  const std::size_t b = s[0], n = s[1], t = s[3], c = s[4];
  require(comp_mask.size() == n, ErrorKind::shape, "masked_cell_mean: mask size");
  auto w = std::make_shared<std::vector<double>>(cell_weights(comp_mask));
  double count = 0.0;
  for (double v : *w) count += v;
  require(count > 0, ErrorKind::shape, "masked_cell_mean: no real cells");
  for (double& v : *w) v /= count;
  Tensor out({b, t, c});
  const double* zp = z.value().ptr();
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t cell = 0; cell < n * n; ++cell) {
      const double wt = (*w)[cell];
      if (wt == 0.0) continue;
      const double* src = zp + (bb * n * n + cell) * t * c;
      double* dst = out.ptr() + bb * t * c;
      for (std::size_t k = 0; k < t * c; ++k) dst[k] += wt * src[k];
    }
  return ad::record(std::move(out), {z}, [w, b, n, t, c](ad::Node& self) {
    double* gz = ad::parent_grad(self, 0).ptr();
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t cell = 0; cell < n * n; ++cell) {
        const double wt = (*w)[cell];
        if (wt == 0.0) continue;
        double* dst = gz + (bb * n * n + cell) * t * c;
        const double* g = self.grad.ptr() + bb * t * c;
        for (std::size_t k = 0; k < t * c; ++k) dst[k] += wt * g[k];
      }
  });
}

ad::Var gate_combine(const ad::Var& yc, const ad::Var& yt, const ad::Var& z,
                     const std::vector<bool>& comp_mask) {
  check_grid5(z.shape(), "gate_combine");
  const Shape& s = z.shape();
  const std::size_t b = s[0], n = s[1], t = s[3], c = s[4];
  require(yc.shape() == Shape{b, n, n, c}, ErrorKind::shape,
          "gate_combine: y^c must be " + shape_str({b, n, n, c}) + ", got " +
              shape_str(yc.shape()));
  require(yt.shape() == Shape{b, t, c}, ErrorKind::shape,
          "gate_combine: y^t must be " + shape_str({b, t, c}) + ", got " +
              shape_str(yt.shape()));
  require(comp_mask.size() == n, ErrorKind::shape, "gate_combine: mask size");
  auto w = std::make_shared<std::vector<double>>(cell_weights(comp_mask));
  auto sig = std::make_shared<std::vector<double>>(yt.size());
  for (std::size_t i = 0; i < yt.size(); ++i) (*sig)[i] = ad::sigmoid_value(yt.value()[i]);
  Tensor out(s);
  const double* ycp = yc.value().ptr();
  const double* zp = z.value().ptr();
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t cell = 0; cell < n * n; ++cell) {
      if ((*w)[cell] == 0.0) continue;
      const double* ycc = ycp + (bb * n * n + cell) * c;
      for (std::size_t tt = 0; tt < t; ++tt) {
        const std::size_t o = ((bb * n * n + cell) * t + tt) * c;
        const double* sg = sig->data() + (bb * t + tt) * c;
        for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] = ycc[ch] * sg[ch] + zp[o + ch];
      }
    }
  return ad::record(std::move(out), {yc, yt, z}, [w, sig, b, n, t, c](ad::Node& self) {
    const double* g = self.grad.ptr();
    const double* ycp = self.parents[0]->value.ptr();
    double* gyc = ad::wants(self, 0) ? ad::parent_grad(self, 0).ptr() : nullptr;
    double* gyt = ad::wants(self, 1) ? ad::parent_grad(self, 1).ptr() : nullptr;
    double* gz = ad::wants(self, 2) ? ad::parent_grad(self, 2).ptr() : nullptr;
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t cell = 0; cell < n * n; ++cell) {
        if ((*w)[cell] == 0.0) continue;
        const std::size_t ci = (bb * n * n + cell) * c;
        for (std::size_t tt = 0; tt < t; ++tt) {
          const std::size_t o = ((bb * n * n + cell) * t + tt) * c;
          const std::size_t ti = (bb * t + tt) * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double go = g[o + ch];
            const double sg = (*sig)[ti + ch];
            if (gz) gz[o + ch] += go;
            if (gyc) gyc[ci + ch] += go * sg;
            if (gyt) gyt[ti + ch] += go * ycp[ci + ch] * sg * (1.0 - sg);
          }
        }
      }
  });
}

ad::Var mask_cells(const ad::Var& z, const std::vector<bool>& comp_mask) {
  const Shape& s = z.shape();
  require(s.size() >= 3 && s[1] == s[2] && comp_mask.size() == s[1], ErrorKind::shape,
          "mask_cells: expected [B, N, N, ...] matching the mask");
  bool all = true;
  for (bool m : comp_mask) all = all && m;
  if (all) return z;
  const std::size_t n = s[1];
  const std::size_t inner = z.size() / (s[0] * n * n);
  auto m = std::make_shared<Tensor>(s, 0.0);
  const auto w = cell_weights(comp_mask);
  for (std::size_t bb = 0; bb < s[0]; ++bb)
    for (std::size_t cell = 0; cell < n * n; ++cell)
      if (w[cell] != 0.0)
        for (std::size_t k = 0; k < inner; ++k) (*m)[(bb * n * n + cell) * inner + k] = 1.0;
  return ad::mul_const(z, m);
}

ad::Var masked_pool(const ad::Var& z, const std::vector<bool>& comp_mask) {
  check_grid5(z.shape(), "masked_pool");
  const Shape& s = z.shape();
  const std::size_t b = s[0], n = s[1], t = s[3], c = s[4];
  require(comp_mask.size() == n, ErrorKind::shape, "masked_pool: mask size");
  auto w = std::make_shared<std::vector<double>>(cell_weights(comp_mask));
  double count = 0.0;
  for (double v : *w) count += v;
  require(count > 0, ErrorKind::shape, "masked_pool: no real cells");
  for (double& v : *w) v /= count * static_cast<double>(t);
  Tensor out({b, c});
  const double* zp = z.value().ptr();
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t cell = 0; cell < n * n; ++cell) {
      const double wt = (*w)[cell];
      if (wt == 0.0) continue;
      for (std::size_t tt = 0; tt < t; ++tt)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[bb * c + ch] += wt * zp[((bb * n * n + cell) * t + tt) * c + ch];
    }
  return ad::record(std::move(out), {z}, [w, b, n, t, c](ad::Node& self) {
    double* gz = ad::parent_grad(self, 0).ptr();
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t cell = 0; cell < n * n; ++cell) {
        const double wt = (*w)[cell];
        if (wt == 0.0) continue;
        for (std::size_t tt = 0; tt < t; ++tt)
          for (std::size_t ch = 0; ch < c; ++ch)
            gz[((bb * n * n + cell) * t + tt) * c + ch] += wt * self.grad[bb * c + ch];
      }
  });
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg)
    : cfg_(std::move(cfg)), stages_(cfg_.effective_stages()), atlas_(cfg_.atlas()) {
  cfg_.validate();
  stages_.grid_trace(atlas_.n_padded());
  init_params();
}

Model::Model(ModelConfig cfg, ParamStore params)
    : cfg_(std::move(cfg)), stages_(cfg_.effective_stages()), atlas_(cfg_.atlas()),
      params_(std::move(params)) {
  cfg_.validate();
  // Cross-check the supplied tensors against a freshly initialised layout.
  Model fresh(cfg_);
  require(fresh.params_.names() == params_.names(), ErrorKind::format,
          "model: parameter set does not match the configuration");
  for (const auto& name : params_.names())
    require(fresh.params_.get(name).shape() == params_.get(name).shape(),
            ErrorKind::format, "model: parameter '" + name + "' has the wrong shape");
}

ssm::MambaEncoderConfig Model::conn_encoder_config(std::size_t stage) const {
  ssm::MambaEncoderConfig e;
  e.model_dim = stages_.channels[stage];
  e.expansion = cfg_.expansion;
  e.conv_kernel = cfg_.conv_kernel;
  e.state_size = cfg_.state_size;
  e.directions = {ssm::Direction::forward, ssm::Direction::backward};
  if (!cfg_.ablations.no_comp_scan)
    e.directions.push_back(ssm::Direction::component_specific);
  return e;
}

ssm::MambaEncoderConfig Model::temp_encoder_config(std::size_t stage) const {
  auto e = conn_encoder_config(stage);
  e.directions = {ssm::Direction::forward, ssm::Direction::backward};
  return e;
}

namespace {

std::string block_prefix(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage + 1) + ".b" + std::to_string(block + 1);
}

}  // namespace

void Model::init_params() {
  Rng rng(cfg_.seed);
  const std::size_t c0 = stages_.channels[0];
  params_.add("embed.w", uniform_tensor({c0, 1}, 1.0, rng));
  params_.add("embed.b", uniform_tensor({c0}, 1.0, rng));
  for (std::size_t k = 0; k < stages_.stage_count(); ++k) {
    const std::string sp = "s" + std::to_string(k + 1);
    if (k > 0 && cfg_.stages.merge_before[k]) {
      if (cfg_.ablations.no_merge) {
        const std::size_t c = stages_.channels[k - 1];
        params_.add(sp + ".expand.norm.g", Tensor({c}, 1.0));
        params_.add(sp + ".expand.norm.b", Tensor({c}, 0.0));
        const double bound = 1.0 / std::sqrt(static_cast<double>(c));
        params_.add(sp + ".expand.proj.w", uniform_tensor({2 * c, c}, bound, rng));
        params_.add(sp + ".expand.proj.b", uniform_tensor({2 * c}, bound, rng));
      } else {
        topo::init_component_merge(params_, sp + ".merge", stages_.channels[k - 1], rng);
      }
    }
    for (std::size_t b = 0; b < stages_.blocks[k]; ++b) {
      const std::string bp = block_prefix(k, b);
      if (!cfg_.ablations.no_conn_branch)
        ssm::init_mamba_encoder(params_, bp + ".conn", conn_encoder_config(k), rng);
      if (!cfg_.ablations.no_temp_branch)
        ssm::init_mamba_encoder(params_, bp + ".temp", temp_encoder_config(k), rng);
    }
  }
  const std::size_t cl = stages_.channels.back();
  const double hb = 1.0 / std::sqrt(static_cast<double>(cl));
  params_.add("head.w", uniform_tensor({cfg_.output_dim(), cl}, hb, rng));
  params_.add("head.b", uniform_tensor({cfg_.output_dim()}, hb, rng));
}

ad::Var Model::embed(const Binding& p, const ad::Var& x) const {
  const Shape& s = x.shape();
  const std::size_t np = atlas_.n_padded();
  const bool ok4 = s.size() == 4 && s[1] == np && s[2] == np;
  const bool ok5 = s.size() == 5 && s[1] == np && s[2] == np && s[4] == 1;
  require(ok4 || ok5, ErrorKind::shape,
          "embed: expected padded input [B, " + std::to_string(np) + ", " +
              std::to_string(np) + ", T], got " + shape_str(s));
  auto x5 = ok4 ? ad::reshape(x, {s[0], s[1], s[2], s[3], 1}) : x;
  auto z = ad::linear(x5, p("embed.w"), p("embed.b"));
  return mask_cells(z, atlas_.pad_mask());
}

ad::Var Model::block_forward(const Binding& p, const ad::Var& z, std::size_t stage,
                             std::size_t block, const std::vector<bool>& comp_mask) const {
  const std::string bp = block_prefix(stage, block);
  const auto& ab = cfg_.ablations;
  const Shape& s = z.shape();
  const std::size_t b = s[0], n = s[1], c = s[4];
  const bool even = block % 2 == 1;
  const std::size_t step = (even && !ab.no_cva) ? stages_.cva_steps[stage] : 1;
  const long long roll =
      (even && !ab.no_cvr) ? static_cast<long long>(stages_.cvr_steps[stage]) : 0;
  require(n % step == 0, ErrorKind::shape,
          "stage " + std::to_string(stage + 1) + ": CVA step " + std::to_string(step) +
              " does not divide N=" + std::to_string(n));

  auto hc = mean_over_time(z);
  auto ht = masked_cell_mean(z, comp_mask);

  ad::Var yc = hc;
  if (!ab.no_conn_branch) {
    auto g = step > 1 ? topo::cva(hc, step) : hc;
    const std::size_t m = n / step;
    if (roll != 0) g = topo::cvr(g, roll);
    auto seq = ad::reshape(g, {step * b, m * m, c});
    auto enc = ssm::mamba_encoder_forward(p, bp + ".conn", conn_encoder_config(stage),
                                          seq, m);
    auto back = ad::reshape(enc, {step * b, m, m, c});
    if (roll != 0) back = topo::cvr(back, -roll);
    if (step > 1)
      back = topo::cva_scatter(back, ad::constant(Tensor(hc.shape(), 0.0)), step);
    yc = ad::add(hc, back);
  }
  ad::Var yt = ht;
  if (!ab.no_temp_branch)
    yt = ad::add(ht, ssm::mamba_encoder_forward(p, bp + ".temp",
                                                temp_encoder_config(stage), ht,
                                                std::nullopt));
  auto out = gate_combine(yc, yt, z, comp_mask);
  require(all_finite(out.value().data()), ErrorKind::numeric,
          "non-finite activation at stage " + std::to_string(stage + 1) + " block " +
              std::to_string(block + 1));
  return out;
}

ad::Var Model::forward(const Binding& p, const ad::Var& x, ForwardTrace* trace) const {
  auto z = embed(p, x);
  std::vector<bool> mask = atlas_.pad_mask();
  const auto& ab = cfg_.ablations;
  const bool rope = !ab.no_pos_enc && !ab.abs_pos_enc;
  for (std::size_t k = 0; k < stages_.stage_count(); ++k) {
    const std::string sp = "s" + std::to_string(k + 1);
    if (k > 0 && cfg_.stages.merge_before[k]) {
      if (ab.no_merge) {
        auto zn = ad::layer_norm(z, p(sp + ".expand.norm.g"), p(sp + ".expand.norm.b"));
        z = ad::linear(zn, p(sp + ".expand.proj.w"), p(sp + ".expand.proj.b"));
      } else {
        z = topo::component_merge(p, sp + ".merge", z);
        mask = topo::merge_mask(mask);
      }
      z = mask_cells(z, mask);
    }
    const rope::RopeConfig rc{cfg_.theta_base, stages_.channels[k]};
    if (rope) {
      z = rope::stage_rope(z, rc);
    } else if (ab.abs_pos_enc) {
      const Shape& s = z.shape();
      Tensor pe = rope::absolute_encoding(s[1], s[3], s[4], cfg_.theta_base);
      Tensor full(s);
      for (std::size_t bb = 0; bb < s[0]; ++bb)
        std::copy(pe.data().begin(), pe.data().end(), full.ptr() + bb * pe.size());
      z = mask_cells(ad::add(z, ad::constant(std::move(full))), mask);
    }
    if (trace) trace->stage_shapes.push_back(z.shape());
    for (std::size_t b = 0; b < stages_.blocks[k]; ++b) z = block_forward(p, z, k, b, mask);
    if (rope && !ab.no_unrope) z = rope::stage_unrope(z, rc);
  }
  auto pooled = masked_pool(z, mask);
  if (trace) trace->pooled = pooled.shape();
  auto out = ad::linear(pooled, p("head.w"), p("head.b"));
  require(all_finite(out.value().data()), ErrorKind::numeric, "non-finite model output");
  return out;
}

Tensor Model::predict(const Tensor& x) const {
  Binding p(params_, false);
  return forward(p, ad::constant(x)).value();
}

}  // namespace fstm::model
