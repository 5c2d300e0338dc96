#include "fstm/fstm.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <new>
#include <string>

#include <json.hpp>

#include "fstm/bench.hpp"
#include "fstm/checks.hpp"
#include "fstm/container.hpp"
#include "fstm/dfnc.hpp"
#include "fstm/error.hpp"
#include "fstm/model.hpp"
#include "fstm/topology.hpp"
#include "fstm/train.hpp"

struct fstm_model {
  fstm::model::Model model;
  fstm::train::CheckpointMeta meta;
};

namespace {

using nlohmann::json;
using namespace fstm;

thread_local std::string g_last_error;

fstm_status status_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return FSTM_ERR_INVALID_ARGUMENT;
    case ErrorKind::shape: return FSTM_ERR_SHAPE;
    case ErrorKind::domain: return FSTM_ERR_DOMAIN;
    case ErrorKind::numeric: return FSTM_ERR_NUMERIC;
    case ErrorKind::config: return FSTM_ERR_CONFIG;
    case ErrorKind::io: return FSTM_ERR_IO;
    case ErrorKind::format: return FSTM_ERR_FORMAT;
  }
  return FSTM_ERR_INTERNAL;
}

template <class F>
fstm_status guard(F&& f) {
  g_last_error.clear();
  try {
    return f();
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return FSTM_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return FSTM_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FSTM_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put_report(char** out, const json& j) {
  if (out) *out = dup_string(j.dump(2));
}

void need(const void* p, const char* what) {
  require(p != nullptr, ErrorKind::invalid_argument, std::string(what) + " is NULL");
}

json parse_json(const char* text, const char* what) {
  need(text, what);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string(what) + ": " + e.what());
  }
}

json artifact(const std::string& path, const io::ContainerHeader& h) {
  return {{"path", path}, {"kind", h.kind}, {"dims", h.dims}, {"dtype", h.dtype},
          {"format", io::kFormatName}, {"format_version", io::kFormatVersion}};
}

std::vector<int> labels_from(const io::ContainerHeader& h, const char* labels_path) {
  std::vector<double> raw = h.labels;
  if (labels_path) {
    auto [lh, lt] = io::read_container(labels_path);
    require(lh.kind == "labels", ErrorKind::format,
            std::string(labels_path) + " is not a label container");
    raw.assign(lt.data().begin(), lt.data().end());
  }
  std::vector<int> out;
  for (double v : raw) out.push_back(static_cast<int>(std::lround(v)));
  return out;
}

// Fills the model's atlas from the data header when the config names none.
void resolve_atlas(model::ModelConfig& cfg, const io::ContainerHeader& h) {
  if (cfg.networks.empty() && h.extra.contains("atlas_layout")) {
    const auto& layout = h.extra["atlas_layout"];
    cfg.atlas_name = layout.value("name", h.atlas);
    for (const auto& jn : layout.at("networks"))
      cfg.networks.push_back({jn.at("name").get<std::string>(),
                              jn.at("components").get<std::vector<std::string>>()});
  }
}

struct LoadedData {
  io::ContainerHeader header;
  train::Dataset data;
};

LoadedData load_dataset(const char* dfnc_path, const char* labels_path,
                        const model::Model& m) {
  need(dfnc_path, "dfnc_path");
  auto [h, t] = io::read_container(dfnc_path);
  require(h.kind == "dfnc" && t.rank() == 4, ErrorKind::format,
          std::string(dfnc_path) + " is not a dFNC container");
  const std::size_t n = m.atlas().n_components();
  require(t.dim(1) == n, ErrorKind::shape,
          "data has " + std::to_string(t.dim(1)) + " components, atlas '" +
              m.atlas().name() + "' has " + std::to_string(n));
  LoadedData d{h, {}};
  std::vector<int> labels = labels_from(h, labels_path);
  std::vector<double> targets;
  if (m.config().task == model::Task::regression) {
    targets.assign(labels.begin(), labels.end());
    if (h.extra.contains("targets")) targets = h.extra["targets"].get<std::vector<double>>();
    labels.clear();
  }
  d.data = train::make_dataset(t, m.atlas(), std::move(labels), std::move(targets));
  d.data.validate(m.config().task);
  return d;
}

std::vector<std::size_t> subset_indices(const std::string& subset, std::size_t n,
                                        const train::CheckpointMeta& meta) {
  if (subset == "all") {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  require(subset == "train" || subset == "val", ErrorKind::invalid_argument,
          "subset must be 'all', 'train' or 'val', got '" + subset + "'");
  const auto tc = meta.train_config;
  const auto split = train::split_indices(n, tc.value("val_fraction", 0.2),
                                          tc.value("seed", std::uint64_t{0}));
  return subset == "train" ? split.train : split.val;
}

}  // namespace

extern "C" {

const char* fstm_last_error(void) { return g_last_error.c_str(); }

const char* fstm_status_name(fstm_status s) {
  switch (s) {
    case FSTM_OK: return "ok";
    case FSTM_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case FSTM_ERR_SHAPE: return "shape";
    case FSTM_ERR_DOMAIN: return "domain";
    case FSTM_ERR_NUMERIC: return "numeric";
    case FSTM_ERR_CONFIG: return "config";
    case FSTM_ERR_IO: return "io";
    case FSTM_ERR_FORMAT: return "format";
    case FSTM_ERR_CHECK_FAILED: return "check_failed";
    case FSTM_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* fstm_version(void) { return "0.1.0"; }
int fstm_container_version(void) { return io::kFormatVersion; }
void fstm_string_free(char* s) { std::free(s); }

fstm_status fstm_model_create(const char* config_json, fstm_model** out) {
  return guard([&] {
    need(out, "out");
    *out = nullptr;
    auto cfg = model::ModelConfig::from_json(parse_json(config_json, "model config"));
    *out = new fstm_model{model::Model(cfg), {cfg.seed, 0, json::object()}};
    return FSTM_OK;
  });
}

fstm_status fstm_model_load(const char* path, fstm_model** out) {
  return guard([&] {
    need(path, "checkpoint_path");
    need(out, "out");
    *out = nullptr;
    auto [m, meta] = train::load_checkpoint(path);
    *out = new fstm_model{std::move(m), std::move(meta)};
    return FSTM_OK;
  });
}

fstm_status fstm_model_save(const fstm_model* model, const char* path) {
  return guard([&] {
    need(model, "model");
    need(path, "checkpoint_path");
    train::save_checkpoint(path, model->model, model->meta);
    return FSTM_OK;
  });
}

void fstm_model_free(fstm_model* model) { delete model; }

fstm_status fstm_model_info(const fstm_model* model, char** info_json) {
  return guard([&] {
    need(model, "model");
    need(info_json, "info_json");
    const auto& m = model->model;
    json j{{"config", m.config().to_json()},
           {"atlas", m.atlas().name()},
           {"n_components", m.atlas().n_components()},
           {"n_padded", m.atlas().n_padded()},
           {"output_dim", m.config().output_dim()},
           {"parameter_tensors", m.params().tensor_count()},
           {"parameters", m.params().scalar_count()},
           {"step", model->meta.step}};
    put_report(info_json, j);
    return FSTM_OK;
  });
}

fstm_status fstm_model_predict(const fstm_model* model, const double* x, size_t batch,
                               size_t t, double* out, size_t out_len) {
  return guard([&] {
    need(model, "model");
    need(x, "x");
    need(out, "out");
    const auto& m = model->model;
    const std::size_t np = m.atlas().n_padded();
    require(batch >= 1 && t >= 1, ErrorKind::invalid_argument, "batch and t must be >= 1");
    require(out_len == batch * m.config().output_dim(), ErrorKind::shape,
            "out_len must be batch * output_dim");
    Tensor in({batch, np, np, t}, std::vector<double>(x, x + batch * np * np * t));
    const Tensor y = m.predict(in);
    std::copy(y.data().begin(), y.data().end(), out);
    return FSTM_OK;
  });
}

fstm_status fstm_generate_cohort(const char* spec_json, const char* series_path,
                                 const char* labels_path, char** report_json) {
  return guard([&] {
    need(series_path, "series_path");
    need(labels_path, "labels_path");
    const auto spec = dfnc::SyntheticCohortSpec::from_json(parse_json(spec_json, "cohort spec"));
    spec.validate();
    const auto cohort = dfnc::generate_synthetic_cohort(spec);
    const auto atlas = topo::ComponentAtlas::uniform(
        spec.n_components, spec.n_networks, topo::StageConfig{{1}, {1}, {1}, {1}, {false}});
    io::ContainerHeader sh;
    sh.kind = "timeseries";
    sh.dims = cohort.series.data.shape();
    sh.atlas = atlas.name();
    sh.labels.assign(cohort.labels.begin(), cohort.labels.end());
    sh.provenance = "synthetic cohort, seed " + std::to_string(spec.seed);
    sh.extra["atlas_layout"] = json::parse(atlas.to_json());
    sh.extra["tr_seconds"] = cohort.series.tr_seconds;
    sh.extra["spec"] = spec.to_json();
    io::ContainerHeader lh;
    lh.kind = "labels";
    lh.dims = {cohort.labels.size()};
    lh.atlas = sh.atlas;
    lh.provenance = sh.provenance;
    Tensor lt({cohort.labels.size()});
    for (std::size_t i = 0; i < cohort.labels.size(); ++i) lt[i] = cohort.labels[i];
    io::write_container(series_path, sh, cohort.series.data);
    io::write_container(labels_path, lh, lt);
    put_report(report_json, {{"spec", spec.to_json()},
                             {"artifacts", {artifact(series_path, sh), artifact(labels_path, lh)}}});
    return FSTM_OK;
  });
}

fstm_status fstm_compute_dfnc(const char* series_path, const char* dfnc_path, size_t window,
                              size_t stride, char** report_json) {
  return guard([&] {
    need(series_path, "series_path");
    need(dfnc_path, "dfnc_path");
    auto [h, t] = io::read_container(series_path);
    require(h.kind == "timeseries" && t.rank() == 3, ErrorKind::format,
            std::string(series_path) + " is not a time-series container");
    dfnc::ComponentTimeSeries ts{t, h.extra.value("tr_seconds", 0.72)};
    const Tensor f = dfnc::sliding_window_dfnc(ts, window, stride);
    io::ContainerHeader out;
    out.kind = "dfnc";
    out.dims = f.shape();
    out.atlas = h.atlas;
    out.labels = h.labels;
    out.provenance = "sliding-window Pearson, window " + std::to_string(window) +
                     ", stride " + std::to_string(stride) + " of " + series_path;
    out.extra = h.extra;
    out.extra.erase("spec");
    out.extra["window"] = window;
    out.extra["stride"] = stride;
    io::write_container(dfnc_path, out, f);
    put_report(report_json, {{"windows", f.dim(3)}, {"artifacts", {artifact(dfnc_path, out)}}});
    return FSTM_OK;
  });
}

fstm_status fstm_init_checkpoint(const char* run_config_json, const char* dfnc_path,
                                 const char* checkpoint_path, char** report_json) {
  return guard([&] {
    need(checkpoint_path, "checkpoint_path");
    const json run = parse_json(run_config_json, "run config");
    auto mc = model::ModelConfig::from_json(run.value("model", json::object()));
    if (dfnc_path) resolve_atlas(mc, io::read_header(dfnc_path));
    const auto tc = train::TrainConfig::from_json(run.value("train", json::object()));
    for (const auto& f : tc.ablations.active()) mc.ablations.set(f);
    const model::Model m(mc);
    train::save_checkpoint(checkpoint_path, m, {tc.seed, 0, tc.to_json()});
    put_report(report_json,
               {{"model", mc.to_json()},
                {"parameters", m.params().scalar_count()},
                {"artifacts", {{{"path", checkpoint_path}, {"kind", "checkpoint"},
                                {"format", io::kFormatName},
                                {"format_version", io::kFormatVersion}}}}});
    return FSTM_OK;
  });
}

fstm_status fstm_train(const char* run_config_json, const char* dfnc_path,
                       const char* labels_path, const char* checkpoint_path,
                       const char* metrics_path, fstm_epoch_callback on_epoch, void* user,
                       char** report_json) {
  return guard([&] {
    need(checkpoint_path, "checkpoint_path");
    need(dfnc_path, "dfnc_path");
    const json run = parse_json(run_config_json, "run config");
    const auto h = io::read_header(dfnc_path);
    auto mc = model::ModelConfig::from_json(run.value("model", json::object()));
    resolve_atlas(mc, h);
    const auto tc = train::TrainConfig::from_json(run.value("train", json::object()));
    const model::Model probe(mc);
    const auto loaded = load_dataset(dfnc_path, labels_path, probe);

    std::ofstream metrics;
    if (metrics_path) {
      metrics.open(metrics_path, std::ios::trunc);
      require(metrics.good(), ErrorKind::io, std::string("cannot open ") + metrics_path);
    }
    auto res = train::train(mc, tc, loaded.data, [&](const train::EpochRecord& r) {
      const std::string line = r.to_json().dump();
      if (metrics_path) metrics << line << '\n' << std::flush;
      if (on_epoch) on_epoch(line.c_str(), user);
    });
    train::save_checkpoint(checkpoint_path, res.model,
                           {tc.seed, res.steps, tc.to_json()});
    json report{{"model", res.model.config().to_json()},
                {"train", tc.to_json()},
                {"steps", res.steps},
                {"epochs_run", res.history.size()},
                {"diverged", res.diverged},
                {"train_size", res.split.train.size()},
                {"val_size", res.split.val.size()},
                {"parameters", res.model.params().scalar_count()}};
    if (!res.message.empty()) report["message"] = res.message;
    if (!res.history.empty()) report["final"] = res.history.back().to_json();
    json arts = json::array();
    arts.push_back({{"path", checkpoint_path}, {"kind", "checkpoint"},
                    {"format", io::kFormatName}, {"format_version", io::kFormatVersion}});
    if (metrics_path) arts.push_back({{"path", metrics_path}, {"kind", "metrics"}, {"format", "jsonl"}});
    report["artifacts"] = arts;
    put_report(report_json, report);
    return res.diverged ? FSTM_ERR_NUMERIC : FSTM_OK;
  });
}

fstm_status fstm_evaluate(const char* checkpoint_path, const char* dfnc_path,
                          const char* labels_path, const char* subset, char** report_json) {
  return guard([&] {
    need(checkpoint_path, "checkpoint_path");
    auto [m, meta] = train::load_checkpoint(checkpoint_path);
    const auto loaded = load_dataset(dfnc_path, labels_path, m);
    const std::string which = subset ? subset : "all";
    const auto idx = subset_indices(which, loaded.data.size(), meta);
    const auto rep = train::evaluate(m, loaded.data, idx);
    json j = rep.to_json();
    j["subset"] = which;
    j["checkpoint_step"] = meta.step;
    put_report(report_json, j);
    return FSTM_OK;
  });
}

fstm_status fstm_attribute(const char* checkpoint_path, const char* dfnc_path,
                           const char* labels_path, const char* subset, size_t steps,
                           size_t max_samples, const char* map_path, const char* heatmap_path,
                           char** report_json) {
  return guard([&] {
    need(checkpoint_path, "checkpoint_path");
    need(map_path, "map_path");
    require(steps >= 1, ErrorKind::invalid_argument, "steps must be >= 1");
    auto [m, meta] = train::load_checkpoint(checkpoint_path);
    const auto loaded = load_dataset(dfnc_path, labels_path, m);
    const std::string which = subset ? subset : "all";
    auto idx = subset_indices(which, loaded.data.size(), meta);
    if (max_samples > 0 && idx.size() > max_samples) idx.resize(max_samples);
    const auto c = train::cohort_attribution(m, loaded.data, idx, steps);
    io::ContainerHeader h;
    h.kind = "attribution";
    h.dims = c.mean_map.shape();
    h.atlas = m.atlas().name();
    h.provenance = "integrated gradients, zero baseline, " + std::to_string(steps) +
                   " steps, mean over " + std::to_string(c.used) + " correctly classified samples";
    h.extra["steps"] = steps;
    h.extra["samples_used"] = c.used;
    io::write_container(map_path, h, c.mean_map);
    json arts = json::array({artifact(map_path, h)});
    if (heatmap_path) {
      io::write_heatmap_ppm(heatmap_path, c.mean_map);
      arts.push_back({{"path", heatmap_path}, {"kind", "heatmap"}, {"format", "ppm"}});
    }
    put_report(report_json, {{"subset", which},
                             {"steps", steps},
                             {"samples_requested", idx.size()},
                             {"samples_used", c.used},
                             {"samples_skipped_misclassified", c.skipped},
                             {"completeness_rel_residual_max", c.max_rel_residual},
                             {"completeness_rel_residuals", c.rel_residuals},
                             {"artifacts", arts}});
    return FSTM_OK;
  });
}

fstm_status fstm_run_checks(int fault_cva, int gradients, uint64_t seed, char** report_json) {
  return guard([&] {
    struct FaultScope {
      explicit FaultScope(bool on) { topo::testing::set_cva_fault(on); }
      ~FaultScope() { topo::testing::set_cva_fault(false); }
    } scope(fault_cva != 0);
    checks::SuiteOptions opt;
    opt.seed = seed;
    opt.gradients = gradients != 0;
    const auto results = checks::run_suite(opt);
    json list = json::array();
    bool all = true;
    for (const auto& r : results) {
      all = all && r.pass;
      list.push_back({{"name", r.name},
                      {"pass", r.pass},
                      {"value", std::isfinite(r.value) ? json(r.value) : json(nullptr)},
                      {"tolerance", r.tolerance},
                      {"detail", r.detail}});
    }
    put_report(report_json, {{"all_pass", all}, {"fault_cva", fault_cva != 0}, {"checks", list}});
    if (!all) g_last_error = "one or more invariant checks failed";
    return all ? FSTM_OK : FSTM_ERR_CHECK_FAILED;
  });
}

fstm_status fstm_bench_scan(const size_t* lengths, size_t n_lengths, size_t state,
                            size_t channels, size_t repeats, uint64_t seed,
                            char** report_json) {
  return guard([&] {
    need(lengths, "lengths");
    const std::vector<std::size_t> ls(lengths, lengths + n_lengths);
    const auto rep = bench::bench_scan(ls, state, channels, repeats, seed);
    json rows = json::array();
    for (const auto& r : rep.rows)
      rows.push_back({{"length", r.length},
                      {"seconds", r.seconds},
                      {"oracle_checked", r.checked},
                      {"oracle_rel_err", r.oracle_rel_err}});
    put_report(report_json,
               {{"state", rep.state},
                {"channels", rep.channels},
                {"rows", rows},
                {"loglog_slope", std::isfinite(rep.loglog_slope) ? json(rep.loglog_slope)
                                                                 : json(nullptr)}});
    return FSTM_OK;
  });
}

}  // extern "C"
