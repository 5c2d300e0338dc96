#include "fstm/params.hpp"

#include <cmath>
#include <numbers>

#include "fstm/error.hpp"

namespace fstm {

Rng::Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {}

// splitmix64
std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::size_t Rng::below(std::size_t n) {
  require(n > 0, ErrorKind::invalid_argument, "Rng::below(0)");
  return static_cast<std::size_t>(next_u64() % n);
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

void ParamStore::add(const std::string& name, Tensor init) {
  require(!tensors_.contains(name), ErrorKind::invalid_argument,
          "duplicate parameter '" + name + "'");
  names_.push_back(name);
  tensors_.emplace(name, std::move(init));
}

bool ParamStore::contains(const std::string& name) const {
  return tensors_.contains(name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  require(it != tensors_.end(), ErrorKind::invalid_argument,
          "unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get_mut(const std::string& name) {
  auto it = tensors_.find(name);
  require(it != tensors_.end(), ErrorKind::invalid_argument,
          "unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_)
    if (name.compare(0, prefix.size(), prefix) == 0) n += t.size();
  return n;
}

Binding::Binding(const ParamStore& store, bool requires_grad)
    : store_(&store), requires_grad_(requires_grad) {}

const ad::Var& Binding::operator()(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const Tensor& t = store_->get(name);
  auto leaf = requires_grad_ ? ad::parameter(t) : ad::constant(t);
  return leaves_.emplace(name, std::move(leaf)).first->second;
}

std::map<std::string, Tensor> Binding::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& name : store_->names()) {
    auto it = leaves_.find(name);
    if (it != leaves_.end() && it->second.grad().size() == it->second.size())
      out.emplace(name, it->second.grad());
    else
      out.emplace(name, Tensor(store_->get(name).shape(), 0.0));
  }
  return out;
}

}  // namespace fstm
