// fstm: command-line front end over the fstmamba C API.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fstm/fstm.h"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

const std::vector<std::string> kAblations = {
    "no_cva",   "no_cvr",     "no_comp_scan",   "no_merge",       "no_pos_enc",
    "abs_pos_enc", "no_unrope", "no_conn_branch", "no_temp_branch"};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::uint64_t default_seed() {
  if (const char* s = std::getenv("FSTM_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring non-numeric FSTM_SEED='" << s << "'\n";
    }
  }
  return 0;
}

int exit_code(fstm_status s) {
  switch (s) {
    case FSTM_OK: return kExitOk;
    case FSTM_ERR_CHECK_FAILED:
    case FSTM_ERR_NUMERIC:
    case FSTM_ERR_INTERNAL: return kExitFailure;
    default: return kExitUsage;
  }
}

// Takes ownership of a report string from the library.
json take_report(char* raw) {
  if (!raw) return json::object();
  json j = json::parse(raw, nullptr, false);
  fstm_string_free(raw);
  return j.is_discarded() ? json::object() : j;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

struct Run {
  std::string command;
  std::string started = utc_now();
  json config = json::object();
  std::uint64_t seed = 0;
  std::string manifest_path;  // empty: print to stdout
  bool manifest_explicit = false;

  int finish(fstm_status status, json report) const {
    json m{{"command", command},
           {"config", config},
           {"seed", seed},
           {"started", started},
           {"finished", utc_now()},
           {"status", fstm_status_name(status)},
           {"library_version", fstm_version()},
           {"container_format_version", fstm_container_version()},
           {"artifacts", report.value("artifacts", json::array())}};
    report.erase("artifacts");
    m["report"] = report;
    if (status != FSTM_OK) {
      m["error"] = fstm_last_error();
      std::cerr << "error (" << fstm_status_name(status) << "): " << fstm_last_error() << '\n';
    }
    // A failed run leaves no files behind unless a manifest path was given.
    if (manifest_path.empty() || (status != FSTM_OK && !manifest_explicit)) {
      std::cout << m.dump(2) << '\n';
    } else {
      std::ofstream out(manifest_path, std::ios::trunc);
      out << m.dump(2) << '\n';
      if (!out) {
        std::cerr << "error: cannot write manifest " << manifest_path << '\n';
        return kExitUsage;
      }
    }
    return exit_code(status);
  }
};

std::string manifest_for(const std::string& explicit_path, const std::string& primary) {
  if (!explicit_path.empty()) return explicit_path == "-" ? std::string() : explicit_path;
  return primary.empty() ? std::string() : primary + ".manifest.json";
}

void print_checks(const json& report) {
  for (const auto& c : report.value("checks", json::array())) {
    std::cerr << (c.value("pass", false) ? "PASS " : "FAIL ") << c.value("name", "?")
              << "  value=" << c["value"].dump() << "  tol=" << c.value("tolerance", "")
              << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FST-Mamba dFNC toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string manifest;
  app.add_option("--manifest", manifest,
                 "Manifest path ('-' for stdout; default <output>.manifest.json)");
  std::optional<std::uint64_t> seed_flag;

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic cohort");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "Cohort spec (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output prefix: <out>.series.fstc, <out>.labels.fstc")
      ->required();
  gen->add_option("--seed", seed_flag, "Overrides the spec seed");

  // dfnc
  auto* dfnc = app.add_subcommand("dfnc", "Sliding-window dFNC from component time series");
  std::string dfnc_in, dfnc_out;
  std::size_t window = 10, stride = 1;
  dfnc->add_option("--in", dfnc_in, "Time-series container")->required();
  dfnc->add_option("--out", dfnc_out, "dFNC container")->required();
  dfnc->add_option("--window", window, "Window length in TRs")->capture_default_str();
  dfnc->add_option("--stride", stride, "Window stride in TRs")->capture_default_str();

  // train / init share the run-config surface.
  std::string config_path, data_path, labels_path, out_path, metrics_path;
  std::vector<std::string> ablate;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  auto add_run_opts = [&](CLI::App* c) {
    c->add_option("--config", config_path, "Run config (JSON: {model, train})")
        ->check(CLI::ExistingFile);
    c->add_option("--data", data_path, "dFNC container")->required();
    c->add_option("--labels", labels_path, "Label container (default: labels in data header)");
    c->add_option("--out", out_path, "Checkpoint path")->required();
    c->add_option("--ablate", ablate, "Ablation flag (repeatable)")
        ->check(CLI::IsMember(kAblations));
    c->add_option("--seed", seed_flag, "Seed (default: FSTM_SEED or 0)");
  };
  auto* train = app.add_subcommand("train", "Train a model");
  add_run_opts(train);
  train->add_option("--metrics", metrics_path, "Per-epoch metrics (JSON lines)");
  train->add_option("--epochs", epochs, "Overrides train.epochs");
  train->add_option("--lr", lr, "Overrides train.lr");
  train->add_option("--batch-size", batch, "Overrides train.batch_size");
  bool quiet = false;
  train->add_flag("--quiet", quiet, "No per-epoch progress on stderr");
  auto* init = app.add_subcommand("init", "Write an untrained checkpoint");
  add_run_opts(init);

  // eval / attribute
  std::string ckpt, subset = "all";
  auto add_eval_opts = [&](CLI::App* c) {
    c->add_option("--checkpoint", ckpt, "Checkpoint")->required();
    c->add_option("--data", data_path, "dFNC container")->required();
    c->add_option("--labels", labels_path, "Label container (default: labels in data header)");
    c->add_option("--subset", subset, "all | train | val")
        ->check(CLI::IsMember({"all", "train", "val"}))
        ->capture_default_str();
  };
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_eval_opts(eval);
  auto* attr = app.add_subcommand("attribute", "Integrated-gradient attribution maps");
  add_eval_opts(attr);
  std::size_t ig_steps = 64, max_samples = 0;
  std::string heatmap;
  attr->add_option("--steps", ig_steps, "Riemann steps")->capture_default_str();
  attr->add_option("--max-samples", max_samples, "0: all selected samples")
      ->capture_default_str();
  attr->add_option("--out", out_path, "Attribution map container")->required();
  attr->add_option("--heatmap", heatmap, "PPM rendering of the map");

  // check
  auto* check = app.add_subcommand("check", "Run the invariant suite");
  bool fault_cva = false, no_grad = false;
  check->add_flag("--fault-cva", fault_cva)->group("");  // test hook
  check->add_flag("--no-grad", no_grad, "Skip gradient checks");
  check->add_option("--seed", seed_flag, "Seed (default: FSTM_SEED or 0)");

  // bench-scan
  auto* bench = app.add_subcommand("bench-scan", "Recurrent scan timing vs length");
  std::vector<std::size_t> lengths = {256, 1024, 4096, 16384};
  std::size_t state = 16, channels = 8, repeats = 3;
  bench->add_option("--len", lengths, "Sequence lengths")->delimiter(',')->capture_default_str();
  bench->add_option("--state", state, "State size N")->capture_default_str();
  bench->add_option("--channels", channels, "Channels E")->capture_default_str();
  bench->add_option("--repeats", repeats, "Best-of repeats")->capture_default_str();
  bench->add_option("--seed", seed_flag, "Seed (default: FSTM_SEED or 0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  Run run;
  run.manifest_explicit = !manifest.empty();
  run.seed = seed_flag.value_or(default_seed());
  char* raw = nullptr;

  try {
    if (*gen) {
      run.command = "gen";
      json spec = read_json_file(gen_spec);
      if (seed_flag || !spec.contains("seed")) spec["seed"] = run.seed;
      run.seed = spec["seed"].get<std::uint64_t>();
      run.config = spec;
      run.manifest_path = manifest_for(manifest, gen_out);
      const std::string series = gen_out + ".series.fstc", labels = gen_out + ".labels.fstc";
      const auto st = fstm_generate_cohort(spec.dump().c_str(), series.c_str(), labels.c_str(), &raw);
      return run.finish(st, take_report(raw));
    }
    if (*dfnc) {
      run.command = "dfnc";
      run.config = {{"in", dfnc_in}, {"window", window}, {"stride", stride}};
      run.manifest_path = manifest_for(manifest, dfnc_out);
      const auto st = fstm_compute_dfnc(dfnc_in.c_str(), dfnc_out.c_str(), window, stride, &raw);
      return run.finish(st, take_report(raw));
    }
    if (*train || *init) {
      run.command = *train ? "train" : "init";
      json cfg = config_path.empty() ? json::object() : read_json_file(config_path);
      if (!cfg.contains("model")) cfg["model"] = json::object();
      if (!cfg.contains("train")) cfg["train"] = json::object();
      if (seed_flag || !cfg["train"].contains("seed")) {
        cfg["train"]["seed"] = run.seed;
        cfg["model"]["seed"] = run.seed;
      }
      run.seed = cfg["train"]["seed"].get<std::uint64_t>();
      auto& abl = cfg["train"]["ablations"];
      if (!abl.is_array()) abl = json::array();
      for (const auto& a : ablate) abl.push_back(a);
      if (epochs) cfg["train"]["epochs"] = *epochs;
      if (lr) cfg["train"]["lr"] = *lr;
      if (batch) cfg["train"]["batch_size"] = *batch;
      run.config = {{"run", cfg}, {"data", data_path}, {"labels", labels_path},
                    {"ablate", ablate}};
      run.manifest_path = manifest_for(manifest, out_path);
      const char* lp = labels_path.empty() ? nullptr : labels_path.c_str();
      fstm_status st;
      if (*init) {
        st = fstm_init_checkpoint(cfg.dump().c_str(), data_path.c_str(), out_path.c_str(), &raw);
      } else {
        auto progress = [](const char* epoch_json, void* user) {
          if (!*static_cast<bool*>(user)) std::cerr << epoch_json << '\n';
        };
        st = fstm_train(cfg.dump().c_str(), data_path.c_str(), lp, out_path.c_str(),
                        metrics_path.empty() ? nullptr : metrics_path.c_str(), progress,
                        &quiet, &raw);
      }
      return run.finish(st, take_report(raw));
    }
    if (*eval) {
      run.command = "eval";
      run.config = {{"checkpoint", ckpt}, {"data", data_path}, {"labels", labels_path},
                    {"subset", subset}};
      run.manifest_path = manifest_for(manifest, "");
      const char* lp = labels_path.empty() ? nullptr : labels_path.c_str();
      auto st = fstm_evaluate(ckpt.c_str(), data_path.c_str(), lp, subset.c_str(), &raw);
      json rep = take_report(raw);
      const bool undefined = st == FSTM_OK && !rep.value("warnings", json::array()).empty();
      const int rc = run.finish(st, rep);
      if (undefined) {
        std::cerr << "eval: metrics undefined on this subset (see warnings)\n";
        return kExitFailure;
      }
      return rc;
    }
    if (*attr) {
      run.command = "attribute";
      run.config = {{"checkpoint", ckpt}, {"data", data_path}, {"labels", labels_path},
                    {"subset", subset}, {"steps", ig_steps}, {"max_samples", max_samples}};
      run.manifest_path = manifest_for(manifest, out_path);
      const char* lp = labels_path.empty() ? nullptr : labels_path.c_str();
      const auto st = fstm_attribute(ckpt.c_str(), data_path.c_str(), lp, subset.c_str(),
                                     ig_steps, max_samples, out_path.c_str(),
                                     heatmap.empty() ? nullptr : heatmap.c_str(), &raw);
      return run.finish(st, take_report(raw));
    }
    if (*check) {
      run.command = "check";
      run.config = {{"gradients", !no_grad}, {"fault_cva", fault_cva}};
      run.manifest_path = manifest_for(manifest, "");
      const auto st = fstm_run_checks(fault_cva ? 1 : 0, no_grad ? 0 : 1, run.seed, &raw);
      json rep = take_report(raw);
      print_checks(rep);
      return run.finish(st, rep);
    }
    if (*bench) {
      run.command = "bench-scan";
      run.config = {{"lengths", lengths}, {"state", state}, {"channels", channels},
                    {"repeats", repeats}};
      run.manifest_path = manifest_for(manifest, "");
      const auto st = fstm_bench_scan(lengths.data(), lengths.size(), state, channels, repeats,
                                      run.seed, &raw);
      return run.finish(st, take_report(raw));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
