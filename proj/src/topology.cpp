#include "fstm/topology.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fstm/error.hpp"

namespace fstm::topo {

namespace testing {
namespace {
std::atomic<bool> g_cva_fault{false};
}
void set_cva_fault(bool on) { g_cva_fault.store(on); }
bool cva_fault() { return g_cva_fault.load(); }
}  // namespace testing

StageConfig StageConfig::defaults(std::size_t base_channels) {
  StageConfig s;
  s.channels = {base_channels, 2 * base_channels, 4 * base_channels,
                8 * base_channels};
  s.blocks = {2, 2, 6, 2};
  s.cva_steps = {4, 4, 2, 1};
  s.cvr_steps = {4, 4, 2, 1};
  s.merge_before = {false, true, true, true};
  return s;
}

void StageConfig::validate() const {
  const std::size_t k = blocks.size();
  require(k >= 1, ErrorKind::config, "stages: at least one stage required");
  require(channels.size() == k && cva_steps.size() == k &&
              cvr_steps.size() == k && merge_before.size() == k,
          ErrorKind::config, "stages: per-stage vectors differ in length");
  require(!merge_before[0], ErrorKind::config,
          "stages: the first stage cannot merge");
  for (std::size_t i = 0; i < k; ++i) {
    require(blocks[i] >= 1, ErrorKind::config,
            "stages: stage " + std::to_string(i + 1) + " has no blocks");
    require(cva_steps[i] >= 1, ErrorKind::config,
            "stages: CVA step must be >= 1 at stage " + std::to_string(i + 1));
    require(channels[i] >= 1, ErrorKind::config, "stages: channels must be >= 1");
    if (i > 0) {
      const bool widen = i < widen_before.size() && widen_before[i];
      const std::size_t expect =
          merge_before[i] || widen ? 2 * channels[i - 1] : channels[i - 1];
      require(channels[i] == expect, ErrorKind::config,
              "stages: stage " + std::to_string(i + 1) + " must have " +
                  std::to_string(expect) + " channels");
    }
  }
}

std::vector<std::size_t> StageConfig::grid_trace(std::size_t n_padded) const {
  std::vector<std::size_t> trace;
  std::size_t n = n_padded;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (merge_before[i]) {
      require(n % 2 == 0, ErrorKind::shape,
              "stages: odd component count " + std::to_string(n) +
                  " cannot merge before stage " + std::to_string(i + 1));
      n /= 2;
    }
    trace.push_back(n);
  }
  return trace;
}

namespace {

bool schedule_fits(std::size_t n, const StageConfig& stages) {
  for (std::size_t i = 0; i < stages.stage_count(); ++i) {
    if (stages.merge_before[i]) {
      if (n % 2 != 0) return false;
      n /= 2;
    }
    if (n == 0 || n % stages.cva_steps[i] != 0) return false;
  }
  return true;
}

}  // namespace

std::size_t padded_size(std::size_t n, const StageConfig& stages) {
  stages.validate();
  require(n >= 1, ErrorKind::invalid_argument, "padded_size: n must be >= 1");
  std::size_t m = n;
  while (!schedule_fits(m, stages)) ++m;
  return m;
}

ComponentAtlas::ComponentAtlas(std::string name, std::vector<Network> networks,
                               const StageConfig& stages)
    : name_(std::move(name)), networks_(std::move(networks)) {
  require(!networks_.empty(), ErrorKind::config, "atlas: no networks");
  std::set<std::string> seen;
  for (const auto& net : networks_) {
    require(!net.components.empty(), ErrorKind::config,
            "atlas: network '" + net.name + "' is empty");
    for (const auto& c : net.components)
      require(seen.insert(c).second, ErrorKind::config,
              "atlas: duplicate component '" + c + "'");
    starts_.push_back(n_components_);
    n_components_ += net.components.size();
  }
  n_padded_ = padded_size(n_components_, stages);
  pad_mask_.assign(n_padded_, false);
  for (std::size_t i = 0; i < n_components_; ++i) pad_mask_[i] = true;
}

ComponentAtlas ComponentAtlas::neuromark(const StageConfig& stages) {
  const std::vector<std::pair<const char*, std::size_t>> layout = {
      {"SC", 5}, {"AUD", 2}, {"SM", 9}, {"VS", 9},
      {"CC", 17}, {"DM", 7}, {"CB", 4}};
  std::vector<Network> nets;
  for (const auto& [name, count] : layout) {
    Network n{name, {}};
    for (std::size_t i = 0; i < count; ++i)
      n.components.push_back(std::string(name) + std::to_string(i + 1));
    nets.push_back(std::move(n));
  }
  return ComponentAtlas("neuromark_fmri_1.0", std::move(nets), stages);
}

ComponentAtlas ComponentAtlas::uniform(std::size_t n_components,
                                       std::size_t n_networks,
                                       const StageConfig& stages) {
  require(n_networks >= 1 && n_components >= n_networks, ErrorKind::config,
          "atlas: need at least one component per network");
  std::vector<Network> nets;
  std::size_t next = 0;
  for (std::size_t k = 0; k < n_networks; ++k) {
    // Earlier networks take the remainder so sizes differ by at most one.
    const std::size_t count =
        n_components / n_networks + (k < n_components % n_networks ? 1 : 0);
    Network n{"N" + std::to_string(k + 1), {}};
    for (std::size_t i = 0; i < count; ++i)
      n.components.push_back("C" + std::to_string(++next));
    nets.push_back(std::move(n));
  }
  return ComponentAtlas("uniform_" + std::to_string(n_components) + "x" +
                            std::to_string(n_networks),
                        std::move(nets), stages);
}

ComponentAtlas ComponentAtlas::parse(const std::string& text,
                                     const StageConfig& stages) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("atlas: ") + e.what());
  }
  require(doc.is_object() && doc.contains("networks") && doc["networks"].is_array(),
          ErrorKind::format, "atlas: expected an object with a 'networks' array");
  std::vector<Network> nets;
  for (const auto& jn : doc["networks"]) {
    Network n;
    n.name = jn.value("name", "N" + std::to_string(nets.size() + 1));
    if (jn.contains("components")) {
      for (const auto& c : jn["components"]) n.components.push_back(c.get<std::string>());
    } else if (jn.contains("count")) {
      const auto count = jn["count"].get<std::size_t>();
      for (std::size_t i = 0; i < count; ++i)
        n.components.push_back(n.name + std::to_string(i + 1));
    } else {
      fail(ErrorKind::format,
           "atlas: network '" + n.name + "' needs 'components' or 'count'");
    }
    nets.push_back(std::move(n));
  }
  return ComponentAtlas(doc.value("name", "atlas"), std::move(nets), stages);
}

ComponentAtlas ComponentAtlas::load(const std::string& path,
                                    const StageConfig& stages) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "atlas: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), stages);
}

std::string ComponentAtlas::to_json() const {
  nlohmann::json doc;
  doc["name"] = name_;
  doc["networks"] = nlohmann::json::array();
  for (const auto& n : networks_)
    doc["networks"].push_back({{"name", n.name}, {"components", n.components}});
  return doc.dump(2);
}

std::size_t ComponentAtlas::network_of(std::size_t component) const {
  require(component < n_components_, ErrorKind::invalid_argument,
          "atlas: component index out of range");
  std::size_t k = 0;
  while (k + 1 < starts_.size() && starts_[k + 1] <= component) ++k;
  return k;
}

std::pair<std::size_t, std::size_t> ComponentAtlas::network_range(std::size_t k) const {
  require(k < networks_.size(), ErrorKind::invalid_argument,
          "atlas: network index out of range");
  return {starts_[k], starts_[k] + networks_[k].components.size()};
}

namespace {

struct GridDims {
  std::size_t b, n, rest;
};

GridDims grid_dims(const Shape& s, const char* op) {
  require(s.size() >= 3 && s[1] == s[2], ErrorKind::shape,
          std::string(op) + ": expected [B, N, N, ...], got " + shape_str(s));
  std::size_t rest = 1;
  for (std::size_t i = 3; i < s.size(); ++i) rest *= s[i];
  return {s[0], s[1], rest};
}

ad::IndexPtr cva_index_impl(const Shape& in, std::size_t s, bool faulty,
                            Shape* out_shape) {
  const auto d = grid_dims(in, "cva");
  require(s >= 1 && d.n % s == 0, ErrorKind::shape,
          "cva: step " + std::to_string(s) + " does not divide N=" +
              std::to_string(d.n));
  const std::size_t m = d.n / s;
  auto idx = std::make_shared<ad::Index>(d.b * d.n * d.n * d.rest);
  std::size_t k = 0;
  for (std::size_t g = 0; g < s; ++g) {
    const std::size_t row_off = faulty ? (g + 1) % s : g;
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t src = ((b * d.n + row_off + i * s) * d.n + g + j * s) * d.rest;
          for (std::size_t r = 0; r < d.rest; ++r)
            (*idx)[k++] = static_cast<std::int64_t>(src + r);
        }
  }
  idx->resize(k);
  if (out_shape) {
    *out_shape = in;
    (*out_shape)[0] = s * d.b;
    (*out_shape)[1] = m;
    (*out_shape)[2] = m;
  }
  return idx;
}

}  // namespace

std::pair<ad::IndexPtr, Shape> cva_index(const Shape& in, std::size_t s) {
  Shape out;
  auto idx = cva_index_impl(in, s, testing::cva_fault() && s > 1, &out);
  return {idx, out};
}

ad::IndexPtr cva_scatter_index(const Shape& base, std::size_t s) {
  return cva_index_impl(base, s, false, nullptr);
}

ad::IndexPtr cvr_index(const Shape& in, long long r) {
  const auto d = grid_dims(in, "cvr");
  const auto n = static_cast<long long>(d.n);
  const auto shift = static_cast<std::size_t>(((r % n) + n) % n);
  auto idx = std::make_shared<ad::Index>(d.b * d.n * d.n * d.rest);
  std::size_t k = 0;
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t j = 0; j < d.n; ++j) {
        const std::size_t si = (i + shift) % d.n, sj = (j + shift) % d.n;
        const std::size_t src = ((b * d.n + si) * d.n + sj) * d.rest;
        for (std::size_t t = 0; t < d.rest; ++t)
          (*idx)[k++] = static_cast<std::int64_t>(src + t);
      }
  return idx;
}

namespace {

Tensor apply_gather(const Tensor& x, const ad::Index& idx, Shape out_shape) {
  Tensor out(std::move(out_shape));
  for (std::size_t k = 0; k < idx.size(); ++k)
    out[k] = idx[k] < 0 ? 0.0 : x[static_cast<std::size_t>(idx[k])];
  return out;
}

void check_scatter_shapes(const Shape& groups, const Shape& base, std::size_t s) {
  const auto d = grid_dims(base, "cva_scatter");
  require(s >= 1 && d.n % s == 0, ErrorKind::shape,
          "cva_scatter: step does not divide N");
  Shape expect = base;
  expect[0] = s * d.b;
  expect[1] = d.n / s;
  expect[2] = d.n / s;
  require(groups == expect, ErrorKind::shape,
          "cva_scatter: groups " + shape_str(groups) + " do not match base " +
              shape_str(base) + " at step " + std::to_string(s));
}

}  // namespace

Tensor cva(const Tensor& x, std::size_t s) {
  auto [idx, shape] = cva_index(x.shape(), s);
  return apply_gather(x, *idx, shape);
}

Tensor cva_scatter(const Tensor& groups, const Tensor& base, std::size_t s) {
  check_scatter_shapes(groups.shape(), base.shape(), s);
  auto idx = cva_scatter_index(base.shape(), s);
  Tensor out = base;
  for (std::size_t k = 0; k < idx->size(); ++k)
    out[static_cast<std::size_t>((*idx)[k])] = groups[k];
  return out;
}

Tensor cvr(const Tensor& x, long long r) {
  return apply_gather(x, *cvr_index(x.shape(), r), x.shape());
}

ad::Var cva(const ad::Var& x, std::size_t s) {
  auto [idx, shape] = cva_index(x.shape(), s);
  return ad::gather(x, idx, shape);
}

ad::Var cva_scatter(const ad::Var& groups, const ad::Var& base, std::size_t s) {
  check_scatter_shapes(groups.shape(), base.shape(), s);
  return ad::scatter_overwrite(base, groups, cva_scatter_index(base.shape(), s));
}

ad::Var cvr(const ad::Var& x, long long r) {
  return ad::gather(x, cvr_index(x.shape(), r), x.shape());
}

ad::Var merge_stack(const ad::Var& z) {
  const Shape& s = z.shape();
  require(s.size() == 5 && s[1] == s[2], ErrorKind::shape,
          "component merge: expected [B, N, N, T, C], got " + shape_str(s));
  require(s[1] % 2 == 0, ErrorKind::shape,
          "component merge: odd component count " + std::to_string(s[1]));
  const std::size_t b = s[0], n = s[1], t = s[3], c = s[4], m = n / 2;
  auto idx = std::make_shared<ad::Index>(b * m * m * t * 2 * c);
  std::size_t k = 0;
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t tt = 0; tt < t; ++tt)
          for (std::size_t g = 0; g < 2; ++g)
            for (std::size_t cc = 0; cc < c; ++cc)
              (*idx)[k++] = static_cast<std::int64_t>(
                  (((bb * n + g + 2 * i) * n + g + 2 * j) * t + tt) * c + cc);
  return ad::gather(z, idx, {b, m, m, t, 2 * c});
}

void init_component_merge(ParamStore& store, const std::string& prefix,
                          std::size_t channels, Rng& rng) {
  const std::size_t c2 = 2 * channels;
  store.add(prefix + ".norm.g", Tensor({c2}, 1.0));
  store.add(prefix + ".norm.b", Tensor({c2}, 0.0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(c2));
  store.add(prefix + ".proj.w", uniform_tensor({c2, c2}, bound, rng));
  store.add(prefix + ".proj.b", uniform_tensor({c2}, bound, rng));
}

ad::Var component_merge(const Binding& p, const std::string& prefix,
                        const ad::Var& z, bool bypass_norm) {
  auto stacked = merge_stack(z);
  if (!bypass_norm)
    stacked = ad::layer_norm(stacked, p(prefix + ".norm.g"), p(prefix + ".norm.b"));
  return ad::linear(stacked, p(prefix + ".proj.w"), p(prefix + ".proj.b"));
}

std::vector<bool> merge_mask(const std::vector<bool>& mask) {
  require(mask.size() % 2 == 0, ErrorKind::shape, "merge_mask: odd length");
  std::vector<bool> out(mask.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[2 * i] || mask[2 * i + 1];
  return out;
}

ScanOrder build_scan_order(ScanKind kind, std::size_t n) {
  require(n >= 1, ErrorKind::invalid_argument, "scan order: N must be >= 1");
  ScanOrder order{kind, {}};
  if (kind == ScanKind::component_specific) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::pair<std::size_t, std::size_t>> row;
      for (std::size_t j = 0; j < n; ++j) row.emplace_back(i, j);
      order.sequences.push_back(std::move(row));
    }
    return order;
  }
  std::vector<std::pair<std::size_t, std::size_t>> flat;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) flat.emplace_back(i, j);
  if (kind == ScanKind::backward_flatten) std::reverse(flat.begin(), flat.end());
  order.sequences.push_back(std::move(flat));
  return order;
}

Tensor pad_to_atlas(const Tensor& x, const ComponentAtlas& atlas) {
  require(x.rank() == 4 && x.dim(1) == x.dim(2), ErrorKind::shape,
          "pad_to_atlas: expected [B, N, N, T], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(1);
  require(n == atlas.n_components(), ErrorKind::shape,
          "pad_to_atlas: input has " + std::to_string(n) + " components, atlas '" +
              atlas.name() + "' has " + std::to_string(atlas.n_components()));
  const std::size_t b = x.dim(0), t = x.dim(3), np = atlas.n_padded();
  Tensor out({b, np, np, t}, 0.0);
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t tt = 0; tt < t; ++tt)
          out[((bb * np + i) * np + j) * t + tt] = x[((bb * n + i) * n + j) * t + tt];
  return out;
}

}  // namespace fstm::topo
