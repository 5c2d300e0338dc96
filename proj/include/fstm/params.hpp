#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fstm/autograd.hpp"
#include "fstm/tensor.hpp"

namespace fstm {

// Seeded generator with platform-independent uniform and normal draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);
  double normal();                           // standard normal
  std::size_t below(std::size_t n);          // [0, n)

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor uniform_tensor(Shape shape, double bound, Rng& rng);

// Named trainable tensors in insertion order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t tensor_count() const noexcept { return names_.size(); }
  // Total number of scalar parameters, optionally under a name prefix.
  std::size_t scalar_count(const std::string& prefix = "") const;

  bool operator==(const ParamStore& other) const = default;

 private:
  std::vector<std::string> names_;
  std::map<std::string, Tensor> tensors_;
};

// The parameters of one store lifted into one differentiation graph. Leaves
// are created on first use, so unused parameters never enter the graph.
class Binding {
 public:
  Binding(const ParamStore& store, bool requires_grad);

  const ad::Var& operator()(const std::string& name) const;
  bool contains(const std::string& name) const { return store_->contains(name); }
  bool requires_grad() const noexcept { return requires_grad_; }

  // Gradient per store name (zeros where nothing flowed).
  std::map<std::string, Tensor> gradients() const;

 private:
  const ParamStore* store_;
  bool requires_grad_;
  mutable std::map<std::string, ad::Var> leaves_;
};

}  // namespace fstm
