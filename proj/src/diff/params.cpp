#include "dyadflow/diff/params.hpp"

#include <cmath>

namespace dyadflow::diff {

template <typename T>
Array<T>& ParamStore<T>::add(const std::string& name, Array<T> value) {
  if (contains(name)) throw ContractError("duplicate parameter name: " + name);
  Entry e;
  e.name = name;
  e.grad = Array<T>(value.shape());
  e.first_moment = Array<T>(value.shape());
  e.second_moment = Array<T>(value.shape());
  e.value = std::move(value);
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

template <typename T>
std::size_t ParamStore<T>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.grad.fill(T{0});
}

template <typename T>
double ParamStore<T>::grad_norm() const {
  double s = 0.0;
  for (const auto& e : entries_)
    for (T g : e.grad.values()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

template <typename T>
double ParamStore<T>::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& e : entries_)
      for (T& g : e.grad.values()) g *= factor;
  }
  return norm;
}

template <typename T>
ParamStore<T> ParamStore<T>::snapshot() const {
  ParamStore out;
  for (const auto& e : entries_) out.add(e.name, e.value);
  return out;
}

template <typename T>
void ParamStore<T>::copy_values_from(const ParamStore& other) {
  for (auto& e : entries_) {
    const auto& src = other.value(e.name);
    if (src.shape() != e.value.shape()) throw DimensionError("parameter shape mismatch for " + e.name);
    e.value = src;
  }
}

template <typename T>
void adamw_step(ParamStore<T>& store, const AdamWConfig& config) {
  const auto step = store.advance_step();
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (auto& e : store.entries()) {
    auto p = e.value.values();
    auto g = e.grad.values();
    auto m = e.first_moment.values();
    auto v = e.second_moment.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double pi = static_cast<double>(p[i]) * decay;
      const double gi = g[i];
      const double mi = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      const double vi = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      pi -= config.lr * (mi / bc1) / (std::sqrt(vi / bc2) + config.eps);
      p[i] = static_cast<T>(pi);
    }
  }
}

template <typename T>
Array<T> truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Array<T> out(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (T& x : out.values()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    x = static_cast<T>(z * stddev);
  }
  return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template void adamw_step<float>(ParamStore<float>&, const AdamWConfig&);
template void adamw_step<double>(ParamStore<double>&, const AdamWConfig&);
template Array<float> truncated_normal<float>(Shape, double, std::mt19937_64&);
template Array<double> truncated_normal<double>(Shape, double, std::mt19937_64&);

}  // namespace dyadflow::diff
