#include "fstm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "fstm/error.hpp"
#include "fstm/params.hpp"

namespace fstm::gradcheck {

namespace {

double rel_err(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

void record(Result& r, double err, const std::string& where) {
  if (!(err <= r.max_rel_err)) {
    r.max_rel_err = err;
    r.worst = where;
  }
  ++r.probes;
}

// Central differences lose about eps_machine * sum|R_i y_i| / eps to
// cancellation, so the floor scales with that mass.
double scaled_floor(const Tensor& y, const Tensor& w, double floor) {
  double mass = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) mass += std::abs(y[i] * w[i]);
  return floor * std::max(1.0, mass);
}

}  // namespace

Result check(const std::string& name, const GraphFn& f, const std::vector<Tensor>& inputs,
             const Options& opt) {
  Rng rng(opt.seed);
  std::shared_ptr<const Tensor> weights;
  auto project = [&](const ad::Var& out) {
    if (!weights) {
      Tensor w(out.shape());
      for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
      weights = std::make_shared<const Tensor>(std::move(w));
    }
    return ad::sum_all(ad::mul_const(out, weights));
  };
  auto value_at = [&](const std::vector<Tensor>& xs) {
    std::vector<ad::Var> leaves;
    for (const auto& x : xs) leaves.push_back(ad::constant(x));
    return project(f(leaves)).value()[0];
  };

  std::vector<ad::Var> leaves;
  for (const auto& x : inputs) leaves.push_back(ad::parameter(x));
  const ad::Var y = f(leaves);
  auto root = project(y);
  ad::backward(root);
  const double fl = scaled_floor(y.value(), *weights, opt.floor);

  Result r;
  r.name = name;
  std::vector<Tensor> xs = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& g = leaves[k].grad();
    const std::size_t n = inputs[k].size();
    std::vector<std::size_t> picks(n);
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    if (n > opt.max_entries) {
      rng.shuffle(picks);
      picks.resize(opt.max_entries);
    }
    for (auto i : picks) {
      const double orig = xs[k][i];
      xs[k][i] = orig + opt.eps;
      const double up = value_at(xs);
      xs[k][i] = orig - opt.eps;
      const double down = value_at(xs);
      xs[k][i] = orig;
      const double numeric = (up - down) / (2 * opt.eps);
      const double analytic = g.empty() ? 0.0 : g[i];
      record(r, rel_err(analytic, numeric, fl),
             "input " + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }

  // joint random direction
  std::vector<Tensor> dir;
  double analytic = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor d(inputs[k].shape());
    for (auto& v : d.data()) v = rng.uniform(-1.0, 1.0);
    const Tensor& g = leaves[k].grad();
    if (!g.empty())
      for (std::size_t i = 0; i < d.size(); ++i) analytic += g[i] * d[i];
    dir.push_back(std::move(d));
  }
  auto shifted = [&](double s) {
    std::vector<Tensor> out = inputs;
    for (std::size_t k = 0; k < out.size(); ++k)
      for (std::size_t i = 0; i < out[k].size(); ++i) out[k][i] += s * dir[k][i];
    return out;
  };
  const double numeric = (value_at(shifted(opt.eps)) - value_at(shifted(-opt.eps))) / (2 * opt.eps);
  record(r, rel_err(analytic, numeric, fl), "random direction");
  r.pass = std::isfinite(r.max_rel_err) && r.max_rel_err < opt.tolerance;
  return r;
}

Result check_params(const std::string& name, const StoreFn& f, const ParamStore& store,
                    const Options& opt) {
  Rng rng(opt.seed);
  std::shared_ptr<const Tensor> weights;
  auto project = [&](const ad::Var& out) {
    if (!weights) {
      Tensor w(out.shape());
      for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
      weights = std::make_shared<const Tensor>(std::move(w));
    }
    return ad::sum_all(ad::mul_const(out, weights));
  };
  auto value_at = [&](const ParamStore& s) {
    Binding p(s, false);
    return project(f(p)).value()[0];
  };

  Binding bound(store, true);
  const ad::Var y = f(bound);
  ad::backward(project(y));
  const auto grads = bound.gradients();
  const double fl = scaled_floor(y.value(), *weights, opt.floor);

  Result r;
  r.name = name;
  ParamStore work = store;
  for (const auto& pname : store.names()) {
    const Tensor& g = grads.at(pname);
    Tensor& t = work.get_mut(pname);
    std::vector<std::size_t> picks(t.size());
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    if (picks.size() > opt.max_entries) {
      rng.shuffle(picks);
      picks.resize(opt.max_entries);
    }
    for (auto i : picks) {
      const double orig = t[i];
      t[i] = orig + opt.eps;
      const double up = value_at(work);
      t[i] = orig - opt.eps;
      const double down = value_at(work);
      t[i] = orig;
      record(r, rel_err(g[i], (up - down) / (2 * opt.eps), fl),
             pname + "[" + std::to_string(i) + "]");
    }
  }

  ParamStore plus = store, minus = store;
  double analytic = 0.0;
  for (const auto& pname : store.names()) {
    const Tensor& g = grads.at(pname);
    Tensor& tp = plus.get_mut(pname);
    Tensor& tm = minus.get_mut(pname);
    for (std::size_t i = 0; i < tp.size(); ++i) {
      const double d = rng.uniform(-1.0, 1.0);
      analytic += g[i] * d;
      tp[i] += opt.eps * d;
      tm[i] -= opt.eps * d;
    }
  }
  const double numeric = (value_at(plus) - value_at(minus)) / (2 * opt.eps);
  record(r, rel_err(analytic, numeric, fl), "random direction");
  r.pass = std::isfinite(r.max_rel_err) && r.max_rel_err < opt.tolerance;
  return r;
}

}  // namespace fstm::gradcheck
