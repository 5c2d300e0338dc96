#include <doctest.h>

#include "fstm/autograd.hpp"
#include "fstm/checks.hpp"
#include "fstm/error.hpp"
#include "fstm/model.hpp"
#include "support.hpp"

using namespace fstm;
using testutil::random_tensor;

namespace {

std::size_t count_containing(const ParamStore& s, const std::string& part) {
  std::size_t n = 0;
  for (const auto& name : s.names())
    if (name.find(part) != std::string::npos) n += s.get(name).size();
  return n;
}

}  // namespace

TEST_CASE("tiny model shape trace") {
  const model::Model m(checks::tiny_model_config(1));
  CHECK(m.atlas().n_padded() == 8);
  Rng rng(1);
  const Tensor x = random_tensor({3, 8, 8, 4}, rng);
  Binding p(m.params(), false);
  model::ForwardTrace trace;
  const auto y = m.forward(p, ad::constant(x), &trace);
  CHECK(y.shape() == Shape{3, 2});
  REQUIRE(trace.stage_shapes.size() == 2);
  CHECK(trace.stage_shapes[0] == Shape{3, 8, 8, 4, 8});
  CHECK(trace.stage_shapes[1] == Shape{3, 4, 4, 4, 16});
  CHECK(trace.pooled == Shape{3, 16});
}

TEST_CASE("default configuration traces 56 -> 28 -> 14 -> 7") {
  model::ModelConfig cfg;
  cfg.stages.blocks = {1, 1, 1, 1};
  cfg.state_size = 2;
  const model::Model m(cfg);
  Binding p(m.params(), false);
  model::ForwardTrace trace;
  m.forward(p, ad::constant(Tensor({1, 56, 56, 1}, 0.1)), &trace);
  REQUIRE(trace.stage_shapes.size() == 4);
  CHECK(trace.stage_shapes[0] == Shape{1, 56, 56, 1, 24});
  CHECK(trace.stage_shapes[1] == Shape{1, 28, 28, 1, 48});
  CHECK(trace.stage_shapes[2] == Shape{1, 14, 14, 1, 96});
  CHECK(trace.stage_shapes[3] == Shape{1, 7, 7, 1, 192});
}

TEST_CASE("predictions are seeded and deterministic") {
  Rng rng(2);
  const Tensor x = random_tensor({2, 8, 8, 3}, rng);
  const model::Model a(checks::tiny_model_config(5)), b(checks::tiny_model_config(5)),
      c(checks::tiny_model_config(6));
  CHECK(a.params() == b.params());
  CHECK(a.predict(x) == b.predict(x));
  CHECK(!(a.params() == c.params()));
}

TEST_CASE("padded cells never influence the output") {
  auto cfg = checks::tiny_model_config(3);
  cfg.networks[1].components.pop_back();  // 7 real components, padded to 8
  const model::Model m(cfg);
  REQUIRE(m.atlas().n_padded() == 8);
  Rng rng(3);
  Tensor x = random_tensor({2, 8, 8, 3}, rng);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t t = 0; t < 3; ++t) x.at({b, 7, i, t}) = x.at({b, i, 7, t}) = 0.0;
  const Tensor y0 = m.predict(x);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t t = 0; t < 3; ++t) x.at({b, 7, i, t}) = x.at({b, i, 7, t}) = 9.0;
  CHECK(max_abs_diff(m.predict(x), y0) == 0.0);
}

TEST_CASE("batch rows are independent") {
  const model::Model m(checks::tiny_model_config(4));
  Rng rng(4);
  const Tensor x = random_tensor({3, 8, 8, 2}, rng);
  const Tensor all = m.predict(x);
  Tensor one({1, 8, 8, 2});
  std::copy(x.ptr() + 128, x.ptr() + 256, one.ptr());
  const Tensor y1 = m.predict(one);
  CHECK(std::abs(y1[0] - all[2]) < 1e-12);
  CHECK(std::abs(y1[1] - all[3]) < 1e-12);
}

TEST_CASE("ablations change parameters as declared") {
  const auto base = checks::tiny_model_config(1);
  const model::Model full(base);
  CHECK(count_containing(full.params(), ".conn.") > 0);
  CHECK(count_containing(full.params(), ".temp.") > 0);

  auto cfg = base;
  cfg.ablations.set("no_conn_branch");
  const model::Model nc(cfg);
  CHECK(count_containing(nc.params(), ".conn.") == 0);
  CHECK(nc.params().scalar_count() ==
        full.params().scalar_count() - count_containing(full.params(), ".conn."));

  cfg = base;
  cfg.ablations.set("no_temp_branch");
  CHECK(count_containing(model::Model(cfg).params(), ".temp.") == 0);

  cfg = base;
  cfg.ablations.set("no_comp_scan");
  const model::Model nr(cfg);
  CHECK(count_containing(nr.params(), ".row.") == 0);
  CHECK(count_containing(full.params(), ".row.") > 0);

  for (const char* flag : {"no_pos_enc", "no_unrope", "no_cva", "no_cvr", "abs_pos_enc"}) {
    cfg = base;
    cfg.ablations.set(flag);
    CHECK_MESSAGE(model::Model(cfg).params().scalar_count() == full.params().scalar_count(), flag);
  }

  cfg = base;
  cfg.ablations.set("no_merge");
  const model::Model nm(cfg);
  CHECK(count_containing(nm.params(), ".merge.") == 0);
  CHECK(count_containing(nm.params(), ".expand.") > 0);
}

TEST_CASE("ablations change the forward pass") {
  Rng rng(5);
  const Tensor x = random_tensor({2, 8, 8, 3}, rng);
  const auto base = checks::tiny_model_config(2);
  const Tensor y = model::Model(base).predict(x);
  for (const char* flag : {"no_pos_enc", "abs_pos_enc", "no_unrope", "no_cva", "no_cvr"}) {
    auto cfg = base;
    cfg.ablations.set(flag);
    CHECK_MESSAGE(max_abs_diff(model::Model(cfg).predict(x), y) > 1e-9, flag);
  }
}

TEST_CASE("no_pos_enc trace has no rope, shapes unchanged") {
  auto cfg = checks::tiny_model_config(2);
  cfg.ablations.set("no_pos_enc");
  const model::Model m(cfg);
  model::ForwardTrace trace;
  Binding p(m.params(), false);
  m.forward(p, ad::constant(Tensor({1, 8, 8, 2}, 0.2)), &trace);
  CHECK(trace.stage_shapes[1] == Shape{1, 4, 4, 2, 16});
}

TEST_CASE("conflicting or unknown ablations are config errors") {
  model::Ablations a;
  CHECK_THROWS_AS(a.set("no_such_flag"), Error);
  a.set("no_pos_enc");
  a.set("abs_pos_enc");
  CHECK_THROWS_AS(a.validate(), Error);
}

TEST_CASE("model config json round trip") {
  auto cfg = checks::tiny_model_config(11);
  cfg.ablations.set("no_cvr");
  cfg.task = model::Task::regression;
  const auto back = model::ModelConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.output_dim() == 1);
  CHECK(model::Model(back).params() == model::Model(cfg).params());
  auto bad = cfg.to_json();
  bad["stages"]["cva_steps"] = {2};
  CHECK_THROWS_AS(model::Model(model::ModelConfig::from_json(bad)), Error);
}

TEST_CASE("input shape is checked") {
  const model::Model m(checks::tiny_model_config(1));
  CHECK_THROWS_AS(m.predict(Tensor({1, 7, 7, 2})), Error);
}

TEST_CASE("gate_combine masks padded cells") {
  Rng rng(6);
  const std::vector<bool> mask{true, false};
  const auto out = model::gate_combine(ad::constant(random_tensor({1, 2, 2, 3}, rng)),
                                       ad::constant(random_tensor({1, 2, 3}, rng)),
                                       ad::constant(random_tensor({1, 2, 2, 2, 3}, rng)), mask)
                       .value();
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(out.at({0, 0, 1, t, c}) == 0.0);
      CHECK(out.at({0, 1, 0, t, c}) == 0.0);
      CHECK(out.at({0, 1, 1, t, c}) == 0.0);
    }
}
