// Exercises the shared library through its C header only.
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fstm/fstm.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Report {
  char* raw = nullptr;
  ~Report() { fstm_string_free(raw); }
  json parse() const { return json::parse(raw); }
};

std::string tmp(const std::string& name) {
  return (fs::temp_directory_path() / ("fstm_capi_" + name)).string();
}

const char* kTinyModel = R"({
  "atlas_name": "tiny",
  "networks": [{"name": "a", "count": 4}, {"name": "b", "count": 4}],
  "base_channels": 8, "state_size": 4,
  "stages": {"channels": [8, 16], "blocks": [2, 2], "cva_steps": [2, 1],
             "cvr_steps": [2, 1], "merge_before": [false, true]}
})";

}  // namespace

TEST_CASE("status names and versions") {
  CHECK(std::string(fstm_status_name(FSTM_OK)) == "ok");
  CHECK(std::string(fstm_status_name(FSTM_ERR_CHECK_FAILED)) == "check_failed");
  CHECK(fstm_container_version() == 1);
  CHECK(std::string(fstm_version()).size() > 0);
}

TEST_CASE("null arguments are rejected with a message") {
  fstm_model* m = nullptr;
  CHECK(fstm_model_create(nullptr, &m) == FSTM_ERR_INVALID_ARGUMENT);
  CHECK(std::string(fstm_last_error()).find("NULL") != std::string::npos);
  CHECK(m == nullptr);
  CHECK(fstm_model_predict(nullptr, nullptr, 1, 1, nullptr, 0) == FSTM_ERR_INVALID_ARGUMENT);
  fstm_model_free(nullptr);
  fstm_string_free(nullptr);
}

TEST_CASE("bad configuration json is a config error") {
  fstm_model* m = nullptr;
  CHECK(fstm_model_create("{broken", &m) == FSTM_ERR_CONFIG);
  CHECK(fstm_model_create(R"({"stages": {"channels": [8], "blocks": [1, 1]}})", &m) ==
        FSTM_ERR_CONFIG);
  CHECK(m == nullptr);
}

TEST_CASE("model create, info, predict, save and load") {
  fstm_model* m = nullptr;
  REQUIRE(fstm_model_create(kTinyModel, &m) == FSTM_OK);
  Report info;
  REQUIRE(fstm_model_info(m, &info.raw) == FSTM_OK);
  const auto j = info.parse();
  CHECK(j["n_components"] == 8);
  CHECK(j["n_padded"] == 8);
  CHECK(j["output_dim"] == 2);

  std::vector<double> x(2 * 8 * 8 * 3, 0.25), y(4, 0.0), y2(4, 0.0);
  CHECK(fstm_model_predict(m, x.data(), 2, 3, y.data(), 3) == FSTM_ERR_SHAPE);
  REQUIRE(fstm_model_predict(m, x.data(), 2, 3, y.data(), 4) == FSTM_OK);
  CHECK(y[0] == y[2]);

  const std::string p = tmp("model.ckpt");
  REQUIRE(fstm_model_save(m, p.c_str()) == FSTM_OK);
  fstm_model* back = nullptr;
  REQUIRE(fstm_model_load(p.c_str(), &back) == FSTM_OK);
  REQUIRE(fstm_model_predict(back, x.data(), 2, 3, y2.data(), 4) == FSTM_OK);
  CHECK(y == y2);
  fstm_model_free(back);
  fstm_model_free(m);
  fs::remove(p);
  CHECK(fstm_model_load(p.c_str(), &back) == FSTM_ERR_IO);
}

TEST_CASE("pipeline through the C API") {
  const std::string series = tmp("s.fstc"), labels = tmp("l.fstc"), dfnc = tmp("d.fstc"),
                    ckpt = tmp("c.ckpt"), map = tmp("a.fstc");
  const char* spec = R"({"n_subjects": 12, "n_components": 8, "n_networks": 2,
                         "t_total": 20, "window": 10, "seed": 4,
                         "effects": [{"class": 1, "networks": [0, 1], "offset": 0.4}]})";
  Report r1, r2, r3, r4, r5, r6;
  REQUIRE(fstm_generate_cohort(spec, series.c_str(), labels.c_str(), &r1.raw) == FSTM_OK);
  CHECK(r1.parse()["artifacts"].size() == 2);
  CHECK(fstm_compute_dfnc(series.c_str(), dfnc.c_str(), 30, 1, &r2.raw) ==
        FSTM_ERR_INVALID_ARGUMENT);
  REQUIRE(fstm_compute_dfnc(series.c_str(), dfnc.c_str(), 10, 1, &r2.raw) == FSTM_OK);
  CHECK(r2.parse()["windows"] == 11);

  const std::string run = R"({"model": {"base_channels": 8, "state_size": 2,
      "stages": {"channels": [8, 16], "blocks": [2, 2], "cva_steps": [2, 1],
                 "cvr_steps": [2, 1], "merge_before": [false, true]}},
      "train": {"epochs": 2, "batch_size": 4, "lr": 0.003}})";
  int epochs_seen = 0;
  auto cb = [](const char*, void* user) { ++*static_cast<int*>(user); };
  REQUIRE(fstm_train(run.c_str(), dfnc.c_str(), labels.c_str(), ckpt.c_str(), nullptr, cb,
                     &epochs_seen, &r3.raw) == FSTM_OK);
  CHECK(epochs_seen == 2);
  CHECK(r3.parse()["steps"] == 6);

  REQUIRE(fstm_evaluate(ckpt.c_str(), dfnc.c_str(), nullptr, "val", &r4.raw) == FSTM_OK);
  CHECK(r4.parse()["count"] == 2);
  CHECK(fstm_evaluate(ckpt.c_str(), dfnc.c_str(), nullptr, "test", &r5.raw) ==
        FSTM_ERR_INVALID_ARGUMENT);

  REQUIRE(fstm_attribute(ckpt.c_str(), dfnc.c_str(), nullptr, "all", 8, 3, map.c_str(), nullptr,
                         &r6.raw) == FSTM_OK);
  const auto a = r6.parse();
  CHECK(a.contains("completeness_rel_residual_max"));
  CHECK(a["samples_requested"] == 3);

  // model with the wrong component count for this data
  const std::string wrong = R"({"model": {"networks": [{"name": "x", "count": 6}],
      "base_channels": 8, "stages": {"channels": [8], "blocks": [1], "cva_steps": [1],
      "cvr_steps": [1], "merge_before": [false]}}, "train": {"epochs": 1}})";
  Report r7;
  CHECK(fstm_train(wrong.c_str(), dfnc.c_str(), nullptr, ckpt.c_str(), nullptr, nullptr, nullptr,
                   &r7.raw) == FSTM_ERR_SHAPE);
  for (const auto& p : {series, labels, dfnc, ckpt, map}) fs::remove(p);
}

TEST_CASE("invariant suite and fault hook") {
  Report ok, bad, again;
  CHECK(fstm_run_checks(0, 0, 1, &ok.raw) == FSTM_OK);
  CHECK(ok.parse()["all_pass"] == true);
  CHECK(fstm_run_checks(1, 0, 1, &bad.raw) == FSTM_ERR_CHECK_FAILED);
  bool named = false;
  const auto report = bad.parse();
  for (const auto& c : report["checks"])
    if (c["name"] == "cva_roundtrip") named = c["pass"] == false;
  CHECK(named);
  CHECK(fstm_run_checks(0, 0, 1, &again.raw) == FSTM_OK);
}

TEST_CASE("bench reports every length") {
  const size_t lens[] = {1, 64};
  Report r;
  REQUIRE(fstm_bench_scan(lens, 2, 4, 2, 1, 0, &r.raw) == FSTM_OK);
  const auto j = r.parse();
  CHECK(j["rows"].size() == 2);
  CHECK(j["rows"][0]["oracle_rel_err"].get<double>() < 1e-5);
}
