#include "fstm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "fstm/error.hpp"

namespace fstm::ad {

Tensor& Node::grad_ref() {
  if (grad.size() != value.size() || grad.shape() != value.shape())
    grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var record(Tensor value, std::vector<Var> parents,
           std::function<void(Node& self)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Var& p) { return p.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace

void backward(const Var& root, const Tensor& seed) {
  require(root.defined(), ErrorKind::invalid_argument, "backward on empty var");
  require(seed.shape() == root.shape(), ErrorKind::shape,
          "backward seed shape mismatch");
  Node* r = root.node().get();
  if (!r->requires_grad) return;
  auto order = topo_order(r);
  Tensor& g = r->grad_ref();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size())
      n->backward_fn(*n);
  }
}

void backward(const Var& root) {
  require(root.size() == 1, ErrorKind::shape,
          "backward without seed needs a scalar root, got " +
              shape_str(root.shape()));
  backward(root, Tensor(root.shape(), 1.0));
}

namespace {

void check_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
              " vs " + shape_str(b.shape()));
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return record(std::move(out), {x}, [df](Node& self) {
    const Tensor& xin = self.parents[0]->value;
    Tensor& gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < xin.size(); ++i)
      gx[i] += self.grad[i] * df(xin[i], self.value[i]);
  });
}

}  // namespace

double sigmoid_value(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) noexcept {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = parent_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return record(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      Tensor& g = parent_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants(self, 1)) {
      Tensor& g = parent_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var add_n(std::span<const Var> xs) {
  require(!xs.empty(), ErrorKind::invalid_argument, "add_n of nothing");
  Tensor out = xs[0].value();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    check_same(xs[0], xs[k], "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += xs[k].value()[i];
  }
  return record(std::move(out), {xs.begin(), xs.end()}, [](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = parent_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return record(std::move(out), {a}, [s](Node& self) {
    Tensor& g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var mul_const(const Var& a, std::shared_ptr<const Tensor> m) {
  require(m && m->shape() == a.shape(), ErrorKind::shape,
          "mul_const: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*m)[i];
  return record(std::move(out), {a}, [m](Node& self) {
    Tensor& g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*m)[i];
  });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return sigmoid_value(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v * sigmoid_value(v); },
      [](double v, double) {
        double s = sigmoid_value(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Var softplus(const Var& x) {
  return unary(
      x, [](double v) { return softplus_value(v); },
      [](double v, double) { return sigmoid_value(v); });
}

Var neg_exp(const Var& x) {
  return unary(
      x, [](double v) { return -std::exp(v); },
      [](double, double y) { return y; });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(w.value().rank() == 2, ErrorKind::shape, "linear: weight must be 2-D");
  const std::size_t out_f = w.dim(0), in_f = w.dim(1);
  require(x.value().rank() >= 1 && x.shape().back() == in_f, ErrorKind::shape,
          "linear: input " + shape_str(x.shape()) + " vs weight " +
              shape_str(w.shape()));
  if (b.defined())
    require(b.size() == out_f, ErrorKind::shape, "linear: bias size mismatch");
  const std::size_t rows = x.size() / in_f;
  Shape os = x.shape();
  os.back() = out_f;
  Tensor out(os);
  const double* xp = x.value().ptr();
  const double* wp = w.value().ptr();
  const double* bp = b.defined() ? b.value().ptr() : nullptr;
  double* op = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * in_f;
    for (std::size_t o = 0; o < out_f; ++o) {
      const double* wr = wp + o * in_f;
      double acc = bp ? bp[o] : 0.0;
      for (std::size_t i = 0; i < in_f; ++i) acc += xr[i] * wr[i];
      op[r * out_f + o] = acc;
    }
  }
  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return record(std::move(out), std::move(parents),
                [rows, in_f, out_f](Node& self) {
    const double* g = self.grad.ptr();
    const double* xv = self.parents[0]->value.ptr();
    const double* wv = self.parents[1]->value.ptr();
    double* gx = wants(self, 0) ? parent_grad(self, 0).ptr() : nullptr;
    double* gw = wants(self, 1) ? parent_grad(self, 1).ptr() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xv + r * in_f;
      double* gxr = gx ? gx + r * in_f : nullptr;
      for (std::size_t o = 0; o < out_f; ++o) {
        const double go = g[r * out_f + o];
        if (go == 0.0) continue;
        if (gxr) {
          const double* wr = wv + o * in_f;
          for (std::size_t i = 0; i < in_f; ++i) gxr[i] += go * wr[i];
        }
        if (gw) {
          double* gwr = gw + o * in_f;
          for (std::size_t i = 0; i < in_f; ++i) gwr[i] += go * xr[i];
        }
      }
    }
    if (self.parents.size() > 2 && wants(self, 2)) {
      double* gb = parent_grad(self, 2).ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t c = x.shape().back();
  require(gamma.size() == c && beta.size() == c, ErrorKind::shape,
          "layer_norm: affine size mismatch");
  const std::size_t rows = x.size() / c;
  Tensor out(x.shape());
  // Saved per-row statistics: normalised values and 1/sigma.
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* xp = x.value().ptr();
  const double* gp = gamma.value().ptr();
  const double* bp = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (xr[i] - mean) * rs;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = h * gp[i] + bp[i];
    }
  }
  return record(std::move(out), {x, gamma, beta},
                [rows, c, xhat, rstd](Node& self) {
    const double* g = self.grad.ptr();
    const double* gp = self.parents[1]->value.ptr();
    const double* xh = xhat->data();
    if (wants(self, 1)) {
      double* gg = parent_grad(self, 1).ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i) gg[i] += g[r * c + i] * xh[r * c + i];
    }
    if (wants(self, 2)) {
      double* gb = parent_grad(self, 2).ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i) gb[i] += g[r * c + i];
    }
    if (wants(self, 0)) {
      double* gx = parent_grad(self, 0).ptr();
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t r = 0; r < rows; ++r) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
          const double dh = g[r * c + i] * gp[i];
          s1 += dh;
          s2 += dh * xh[r * c + i];
        }
        const double rs = (*rstd)[r];
        for (std::size_t i = 0; i < c; ++i) {
          const double dh = g[r * c + i] * gp[i];
          gx[r * c + i] += rs * (dh - inv_c * s1 - xh[r * c + i] * inv_c * s2);
        }
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return record(std::move(out), {x}, [](Node& self) {
    Tensor& g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var gather(const Var& x, IndexPtr index, Shape out_shape) {
  require(index && index->size() == numel(out_shape), ErrorKind::shape,
          "gather: index size does not match output shape " +
              shape_str(out_shape));
  Tensor out(std::move(out_shape));
  const auto n = static_cast<std::int64_t>(x.size());
  const double* xp = x.value().ptr();
  for (std::size_t k = 0; k < index->size(); ++k) {
    const auto src = (*index)[k];
    require(src < n, ErrorKind::shape, "gather: index out of range");
    out[k] = src < 0 ? 0.0 : xp[src];
  }
  return record(std::move(out), {x}, [index](Node& self) {
    double* gx = parent_grad(self, 0).ptr();
    for (std::size_t k = 0; k < index->size(); ++k) {
      const auto src = (*index)[k];
      if (src >= 0) gx[src] += self.grad[k];
    }
  });
}

Var scatter_overwrite(const Var& base, const Var& src, IndexPtr index) {
  require(index && index->size() == src.size(), ErrorKind::shape,
          "scatter_overwrite: index size does not match source");
  Tensor out = base.value();
  const auto n = static_cast<std::int64_t>(out.size());
  for (std::size_t k = 0; k < index->size(); ++k) {
    const auto dst = (*index)[k];
    require(dst >= 0 && dst < n, ErrorKind::shape,
            "scatter_overwrite: index out of range");
    out[static_cast<std::size_t>(dst)] = src.value()[k];
  }
  return record(std::move(out), {base, src}, [index](Node& self) {
    if (wants(self, 0)) {
      Tensor& gb = parent_grad(self, 0);
      std::vector<char> covered(gb.size(), 0);
      for (auto dst : *index) covered[static_cast<std::size_t>(dst)] = 1;
      for (std::size_t i = 0; i < gb.size(); ++i)
        if (!covered[i]) gb[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& gs = parent_grad(self, 1);
      for (std::size_t k = 0; k < index->size(); ++k)
        gs[k] += self.grad[static_cast<std::size_t>((*index)[k])];
    }
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return record(Tensor({1}, s), {x}, [](Node& self) {
    Tensor& g = parent_grad(self, 0);
    for (auto& v : g.data()) v += self.grad[0];
  });
}

Var mean_all(const Var& x) {
  require(x.size() > 0, ErrorKind::shape, "mean of empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  require(logits.value().rank() == 2, ErrorKind::shape,
          "cross-entropy: logits must be [B, K]");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  require(labels.size() == b, ErrorKind::shape,
          "cross-entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<double>>(b * k);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0.0;
  const double* lp = logits.value().ptr();
  for (std::size_t r = 0; r < b; ++r) {
    require((*lab)[r] >= 0 && static_cast<std::size_t>((*lab)[r]) < k,
            ErrorKind::invalid_argument, "cross-entropy: label out of range");
    const double* row = lp + r * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - m) / z;
    loss += -(row[(*lab)[r]] - m - std::log(z));
  }
  loss /= static_cast<double>(b);
  return record(Tensor({1}, loss), {logits}, [probs, lab, b, k](Node& self) {
    Tensor& g = parent_grad(self, 0);
    const double s = self.grad[0] / static_cast<double>(b);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const double y = static_cast<std::size_t>((*lab)[r]) == j ? 1.0 : 0.0;
        g[r * k + j] += s * ((*probs)[r * k + j] - y);
      }
  });
}

Var mse_loss(const Var& pred, std::span<const double> targets) {
  require(pred.size() == targets.size(), ErrorKind::shape,
          "mse: prediction/target count mismatch");
  auto tgt = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < tgt->size(); ++i) {
    const double d = pred.value()[i] - (*tgt)[i];
    loss += d * d;
  }
  const double n = static_cast<double>(tgt->size());
  return record(Tensor({1}, loss / n), {pred}, [tgt, n](Node& self) {
    Tensor& g = parent_grad(self, 0);
    const Tensor& p = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[0] * 2.0 * (p[i] - (*tgt)[i]) / n;
  });
}

}  // namespace fstm::ad
