#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fstm/autograd.hpp"
#include "fstm/checks.hpp"
#include "fstm/error.hpp"
#include "fstm/train.hpp"
#include "support.hpp"

using namespace fstm;
using testutil::random_tensor;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        ++pairs;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

train::Dataset tiny_dataset(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  train::Dataset d;
  d.x = random_tensor({n, 8, 8, 3}, rng);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 2));
  return d;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("fstm_test_" + name)).string();
}

}  // namespace

TEST_CASE("auc: hand case and brute-force pair counting") {
  const std::vector<double> s{0.9, 0.1, 0.4, 0.4, 0.8, 0.3};
  const std::vector<int> l{1, 0, 1, 0, 0, 1};
  // positives {0.9, 0.4, 0.3} vs negatives {0.1, 0.4, 0.8}: 3 + 1.5 + 1 = 5.5 of 9
  CHECK(*train::auc_rank(s, l) == doctest::Approx(5.5 / 9.0).epsilon(1e-15));
  Rng rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> sc(40);
    std::vector<int> lb(40);
    for (std::size_t i = 0; i < 40; ++i) {
      sc[i] = std::round(rng.uniform(0, 8));  // many ties
      lb[i] = static_cast<int>(rng.below(2));
    }
    lb[0] = 0;
    lb[1] = 1;
    CHECK(std::abs(*train::auc_rank(sc, lb) - pair_count_auc(sc, lb)) < 1e-12);
  }
  CHECK(*train::auc_rank({1, 2, 3, 4}, {0, 0, 1, 1}) == 1.0);
  CHECK(!train::auc_rank({1, 2}, {1, 1}).has_value());
}

TEST_CASE("auc of label-independent scores is near 0.5") {
  Rng rng(2);
  std::vector<double> s(20000);
  std::vector<int> l(20000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.normal();
    l[i] = static_cast<int>(rng.below(2));
  }
  CHECK(std::abs(*train::auc_rank(s, l) - 0.5) < 0.02);
}

TEST_CASE("adamw matches a hand-computed update") {
  ParamStore store;
  store.add("p", Tensor({2}, std::vector<double>{1.0, -2.0}));
  train::AdamWConfig cfg{0.9, 0.999, 0.1, 1e-8};
  train::AdamW opt(cfg);
  double p[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  const double lr = 0.05;
  for (int t = 1; t <= 4; ++t) {
    // gradient of p0^2 + 3 p1
    const double g[2] = {2 * p[0], 3.0};
    opt.step(store, {{"p", Tensor({2}, std::vector<double>{g[0], g[1]})}}, lr);
    for (int i = 0; i < 2; ++i) {
      p[i] *= 1 - lr * 0.1;
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      p[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(std::abs(store.get("p")[0] - p[0]) < 1e-10);
    CHECK(std::abs(store.get("p")[1] - p[1]) < 1e-10);
  }
  CHECK(opt.steps() == 4);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(train::cosine_lr(0.01, 0, 100) == 0.01);
  CHECK(std::abs(train::cosine_lr(0.01, 100, 100)) < 1e-9);
  CHECK(train::cosine_lr(0.01, 50, 100) == doctest::Approx(0.005));
}

TEST_CASE("split is seeded, disjoint and 80/20") {
  const auto a = train::split_indices(300, 0.2, 7), b = train::split_indices(300, 0.2, 7);
  CHECK(a.train == b.train);
  CHECK(a.val.size() == 60);
  CHECK(a.train.size() == 240);
  std::vector<int> seen(300, 0);
  for (auto i : a.train) ++seen[i];
  for (auto i : a.val) ++seen[i];
  for (int s : seen) CHECK(s == 1);
  CHECK(train::split_indices(300, 0.2, 8).val != a.val);
}

TEST_CASE("train config json round trip and validation") {
  train::TrainConfig c;
  c.lr = 3e-3;
  c.batch_size = 16;
  c.ablations.set("no_cva");
  const auto back = train::TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["batch_size"] = 0;
  CHECK_THROWS_AS(train::TrainConfig::from_json(j), Error);
  j = c.to_json();
  j["lr"] = -1.0;
  CHECK_THROWS_AS(train::TrainConfig::from_json(j), Error);
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
  const auto mc = checks::tiny_model_config(1);
  train::TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 3;
  tc.batch_size = 4;
  const auto res = train::train(mc, tc, tiny_dataset(10, 1));
  CHECK(res.steps == 6);
  CHECK(res.model.params() == model::Model(mc).params());
}

TEST_CASE("single-sample overfit") {
  const auto mc = checks::tiny_model_config(2);
  train::TrainConfig tc;
  tc.lr = 1e-2;
  tc.epochs = 500;
  tc.batch_size = 1;
  tc.val_fraction = 0.0;
  tc.eval_every = 0;
  auto data = tiny_dataset(1, 2);
  double best = 1e9;
  std::size_t hit = 0;
  const auto res = train::train(mc, tc, data, [&](const train::EpochRecord& r) {
    if (r.train_loss < best) best = r.train_loss;
    if (hit == 0 && r.train_loss < 1e-3) hit = r.epoch;
  });
  CHECK(!res.diverged);
  CHECK(best < 1e-3);
  CHECK(hit > 0);
  CHECK(hit <= 500);
}

TEST_CASE("training is deterministic and checkpoints reload bit-identically") {
  const auto mc = checks::tiny_model_config(3);
  train::TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 5;
  const auto data = tiny_dataset(12, 3);
  const auto a = train::train(mc, tc, data), b = train::train(mc, tc, data);
  CHECK(a.model.params() == b.model.params());
  REQUIRE(a.history.size() == 2);
  CHECK(a.history[1].train_loss == b.history[1].train_loss);
  CHECK(a.history[1].val->auc == b.history[1].val->auc);

  const std::string path = temp_path("ckpt.fstc");
  train::save_checkpoint(path, a.model, {tc.seed, a.steps, tc.to_json()});
  const auto [m, meta] = train::load_checkpoint(path);
  CHECK(meta.step == a.steps);
  CHECK(m.params() == a.model.params());
  CHECK(m.predict(data.x) == a.model.predict(data.x));
  const auto ra = train::evaluate(a.model, data, a.split.val), rb = train::evaluate(m, data, a.split.val);
  CHECK(ra.to_json() == rb.to_json());
  std::filesystem::remove(path);
}

TEST_CASE("divergence stops with the last finite parameters") {
  const auto mc = checks::tiny_model_config(4);
  train::TrainConfig tc;
  tc.lr = 1e300;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.adamw.weight_decay = 0.0;
  const auto res = train::train(mc, tc, tiny_dataset(8, 4));
  CHECK(res.diverged);
  CHECK(!res.message.empty());
  for (const auto& name : res.model.params().names())
    CHECK(all_finite(res.model.params().get(name).data()));
}

TEST_CASE("evaluation on a single-class subset reports AUC as absent") {
  const model::Model m(checks::tiny_model_config(5));
  auto data = tiny_dataset(4, 5);
  const auto r = train::evaluate(m, data, {0, 2});
  CHECK(!r.auc.has_value());
  CHECK(!r.warnings.empty());
  CHECK(r.acc.has_value());
}

TEST_CASE("integrated gradients: zero path and linear exactness") {
  Rng rng(6);
  const Tensor x = random_tensor({5}, rng), w = random_tensor({5}, rng);
  const Tensor wrow = w.reshaped({1, 5});
  auto lin = [&](const ad::Var& b) { return ad::linear(b, ad::constant(wrow)); };
  const Tensor base = random_tensor({5}, rng);
  for (std::size_t m : {1, 3, 50}) {
    const auto a = train::integrated_gradients(lin, x, base, m);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a.ig[i] - (x[i] - base[i]) * w[i]) < 1e-12);
    CHECK(a.rel_residual < 1e-12);
  }
  const auto z = train::integrated_gradients(lin, x, x, 8);
  for (double v : z.ig.data()) CHECK(v == 0.0);
}

TEST_CASE("model attribution: zero input gives zero map") {
  const model::Model m(checks::tiny_model_config(7));
  const Tensor x({8, 8, 3}, 0.0);
  const auto a = train::model_integrated_gradients(m, x, 1, 8);
  for (double v : a.ig.data()) CHECK(v == 0.0);
  const Tensor map = train::temporal_mean_map(a.ig, 8);
  CHECK(map.shape() == Shape{8, 8});
}
