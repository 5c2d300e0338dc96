// Runs the fstm executable and checks exit codes, files and manifests.
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#ifndef FSTM_CLI
#error "FSTM_CLI must name the fstm executable"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Workdir {
  fs::path dir;
  Workdir() {
    dir = fs::temp_directory_path() / ("fstm_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Workdir() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(FSTM_CLI) + " " + args + " > " + log + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

json manifest(const std::string& path) { return json::parse(slurp(path)); }

const char* kRun = R"({"model": {"base_channels": 8, "state_size": 2,
  "stages": {"channels": [8, 16], "blocks": [2, 2], "cva_steps": [2, 1],
             "cvr_steps": [2, 1], "merge_before": [false, true]}},
  "train": {"epochs": 1, "batch_size": 8, "lr": 0.003}})";

}  // namespace

TEST_CASE("cli: gen, dfnc and validation exits") {
  Workdir w;
  const std::string log = w / "log";
  write(w / "spec.json", R"({"n_subjects": 8, "n_components": 8, "n_networks": 2,
      "t_total": 100, "window": 10, "seed": 3,
      "effects": [{"class": 1, "networks": [0, 1], "offset": 0.4}]})");
  REQUIRE(run("gen --spec " + (w / "spec.json") + " --out " + (w / "a"), log) == 0);
  REQUIRE(run("gen --spec " + (w / "spec.json") + " --out " + (w / "b"), log) == 0);
  CHECK(slurp(w / "a.series.fstc") == slurp(w / "b.series.fstc"));
  CHECK(slurp(w / "a.labels.fstc") == slurp(w / "b.labels.fstc"));
  const auto m = manifest(w / "a.manifest.json");
  CHECK(m["command"] == "gen");
  CHECK(m["artifacts"].size() == 2);
  CHECK(m["artifacts"][0]["dims"][0] == m["artifacts"][1]["dims"][0]);
  CHECK(m["container_format_version"] == 1);

  REQUIRE(run("dfnc --in " + (w / "a.series.fstc") + " --out " + (w / "a.dfnc"), log) == 0);
  const auto md = manifest(w / "a.dfnc.manifest.json");
  CHECK(md["artifacts"][0]["dims"][3] == 91);
  CHECK(run("dfnc --in " + (w / "a.series.fstc") + " --out " + (w / "x.dfnc") + " --window 101",
            log) == 2);
  CHECK(!fs::exists(w / "x.dfnc"));

  write(w / "bad.json", R"({"effects": [{"class": 1, "networks": [0, 1], "offset": 1.5}]})");
  CHECK(run("gen --spec " + (w / "bad.json") + " --out " + (w / "bad"), log) == 2);
  CHECK(slurp(log).find("infeasible") != std::string::npos);
  CHECK(!fs::exists(w / "bad.series.fstc"));
  CHECK(!fs::exists(w / "bad.labels.fstc"));
  CHECK(!fs::exists(w / "bad.manifest.json"));

  CHECK(run("", log) == 2);
  CHECK(run("frobnicate", log) == 2);
  CHECK(run("gen --spec " + (w / "missing.json") + " --out x", log) == 2);
}

TEST_CASE("cli: train records ablations, eval and attribute") {
  Workdir w;
  const std::string log = w / "log";
  write(w / "spec.json", R"({"n_subjects": 16, "n_components": 8, "n_networks": 2,
      "t_total": 20, "window": 10, "seed": 5,
      "effects": [{"class": 1, "networks": [0, 1], "offset": 0.4}]})");
  write(w / "run.json", kRun);
  REQUIRE(run("gen --spec " + (w / "spec.json") + " --out " + (w / "c"), log) == 0);
  REQUIRE(run("dfnc --in " + (w / "c.series.fstc") + " --out " + (w / "c.dfnc"), log) == 0);
  REQUIRE(run("train --config " + (w / "run.json") + " --data " + (w / "c.dfnc") + " --out " +
                  (w / "m.ckpt") + " --ablate no_pos_enc --quiet --metrics " + (w / "m.jsonl"),
              log) == 0);
  const auto m = manifest(w / "m.ckpt.manifest.json");
  CHECK(m["config"]["ablate"][0] == "no_pos_enc");
  CHECK(m["report"]["model"]["ablations"][0] == "no_pos_enc");
  CHECK(fs::exists(w / "m.jsonl"));

  CHECK(run("train --config " + (w / "run.json") + " --data " + (w / "c.dfnc") + " --out " +
                (w / "n.ckpt") + " --ablate no_such_thing",
            log) == 2);

  REQUIRE(run("eval --checkpoint " + (w / "m.ckpt") + " --data " + (w / "c.dfnc") +
                  " --subset val --manifest " + (w / "eval.json"),
              log) == 0);
  CHECK(manifest(w / "eval.json")["report"].contains("auc"));

  REQUIRE(run("attribute --checkpoint " + (w / "m.ckpt") + " --data " + (w / "c.dfnc") +
                  " --steps 128 --max-samples 2 --out " + (w / "ig.fstc") + " --heatmap " +
                  (w / "ig.ppm"),
              log) == 0);
  const auto ma = manifest(w / "ig.fstc.manifest.json");
  CHECK(ma["report"].contains("completeness_rel_residual_max"));
  CHECK(fs::exists(w / "ig.ppm"));
}

TEST_CASE("cli: eval exits 1 when metrics are undefined") {
  Workdir w;
  const std::string log = w / "log";
  write(w / "spec.json", R"({"n_subjects": 4, "n_components": 8, "n_networks": 2,
      "t_total": 12, "window": 10, "class_count": 1, "effects": [], "seed": 1})");
  write(w / "run.json", kRun);
  REQUIRE(run("gen --spec " + (w / "spec.json") + " --out " + (w / "c"), log) == 0);
  REQUIRE(run("dfnc --in " + (w / "c.series.fstc") + " --out " + (w / "c.dfnc"), log) == 0);
  REQUIRE(run("init --config " + (w / "run.json") + " --data " + (w / "c.dfnc") + " --out " +
                  (w / "m.ckpt"),
              log) == 0);
  CHECK(run("eval --checkpoint " + (w / "m.ckpt") + " --data " + (w / "c.dfnc"), log) == 1);
}

TEST_CASE("cli: check and fault injection") {
  Workdir w;
  const std::string log = w / "log";
  CHECK(run("check --no-grad --manifest " + (w / "ok.json"), log) == 0);
  CHECK(manifest(w / "ok.json")["report"]["checks"][0].contains("tolerance"));
  CHECK(run("check --no-grad --fault-cva --manifest " + (w / "bad.json"), log) == 1);
  CHECK(slurp(log).find("FAIL cva_roundtrip") != std::string::npos);
}

TEST_CASE("cli: bench-scan handles L = 1") {
  Workdir w;
  CHECK(run("bench-scan --len 1,32 --state 4 --channels 2 --manifest " + (w / "b.json"),
            w / "log") == 0);
  CHECK(manifest(w / "b.json")["report"]["rows"][0]["length"] == 1);
}

TEST_CASE("cli: FSTM_SEED sets the default seed") {
  Workdir w;
  write(w / "spec.json", R"({"n_subjects": 4, "n_components": 8, "n_networks": 2,
      "t_total": 12, "window": 10})");
  ::setenv("FSTM_SEED", "77", 1);
  const int rc = run("gen --spec " + (w / "spec.json") + " --out " + (w / "s"), w / "log");
  ::unsetenv("FSTM_SEED");
  REQUIRE(rc == 0);
  CHECK(manifest(w / "s.manifest.json")["seed"] == 77);
}
