#include "dyadflow/nn/layers.hpp"

#include <cmath>

namespace dyadflow::nn {

namespace ops = diff::ops;

template <typename T>
Var<T> Weights<T>::operator()(const std::string& name) {
  if (trainable_ && store_) return tape_.param(*store_, name);
  if (auto it = frozen_.find(name); it != frozen_.end()) return it->second;
  auto v = tape_.frozen(*cstore_, name);
  frozen_.emplace(name, v);
  return v;
}

template <typename T>
void init_linear(ParamStore<T>& s, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng,
                 double stddev) {
  s.add(prefix + ".w", diff::truncated_normal<T>(Shape{in, out}, stddev, rng));
  s.add(prefix + ".b", Array<T>(Shape{1, out}));
}

template <typename T>
void init_layer_norm(ParamStore<T>& s, const std::string& prefix, std::size_t width) {
  s.add(prefix + ".g", Array<T>(Shape{1, width}, T{1}));
  s.add(prefix + ".b", Array<T>(Shape{1, width}));
}

template <typename T>
void init_block(ParamStore<T>& s, const std::string& prefix, const BlockDims& d, std::mt19937_64& rng) {
  if (d.heads == 0 || d.width % d.heads != 0) throw ConfigError("model width must be divisible by the head count");
  if ((d.width / d.heads) % 2 != 0) throw ConfigError("rotary attention needs an even head dimension");
  init_layer_norm(s, prefix + ".ln1", d.width);
  init_linear(s, prefix + ".q", d.width, d.width, rng);
  init_linear(s, prefix + ".k", d.width, d.width, rng);
  init_linear(s, prefix + ".v", d.width, d.width, rng);
  init_linear(s, prefix + ".o", d.width, d.width, rng);
  init_layer_norm(s, prefix + ".ln2", d.width);
  init_linear(s, prefix + ".ff1", d.width, d.ffn, rng);
  init_linear(s, prefix + ".ff2", d.ffn, d.width, rng);
}

template <typename T>
Var<T> linear(Weights<T>& w, const std::string& prefix, Var<T> x) {
  return ops::linear(x, w(prefix + ".w"), w(prefix + ".b"));
}

template <typename T>
Var<T> layer_norm(Weights<T>& w, const std::string& prefix, Var<T> x) {
  return ops::layer_norm(x, w(prefix + ".g"), w(prefix + ".b"));
}

namespace {

template <typename T>
Var<T> feed_forward(Weights<T>& w, const std::string& prefix, Var<T> h) {
  auto f = ops::gelu(linear(w, prefix + ".ff1", layer_norm(w, prefix + ".ln2", h)));
  return ops::add(h, linear(w, prefix + ".ff2", f));
}

}  // namespace

template <typename T>
Var<T> block(Weights<T>& w, const std::string& prefix, Var<T> x, const std::vector<long>& ts,
             const AttentionMask& mask, std::size_t heads) {
  auto n = layer_norm(w, prefix + ".ln1", x);
  auto q = ops::rope(linear(w, prefix + ".q", n), ts, heads);
  auto k = ops::rope(linear(w, prefix + ".k", n), ts, heads);
  auto v = linear(w, prefix + ".v", n);
  auto h = ops::add(x, linear(w, prefix + ".o", ops::attention(q, k, v, heads, mask)));
  return feed_forward(w, prefix, h);
}

template <typename T>
Var<T> block_cached(Weights<T>& w, const std::string& prefix, Var<T> x, const std::vector<long>& ts,
                    const AttentionMask& mask, std::size_t heads, KvCache<T>& cache, bool commit) {
  auto& tape = w.tape();
  auto n = layer_norm(w, prefix + ".ln1", x);
  auto q = ops::rope(linear(w, prefix + ".q", n), ts, heads);
  auto k = ops::rope(linear(w, prefix + ".k", n), ts, heads);
  auto v = linear(w, prefix + ".v", n);
  const std::size_t width = k.value().cols();
  Var<T> k_all = k, v_all = v;
  if (cache.rows > 0) {
    if (cache.width != width) throw DimensionError("kv cache width mismatch");
    const Shape shape{cache.rows, width};
    k_all = ops::concat<T>({tape.constant(Array<T>(shape, cache.keys)), k});
    v_all = ops::concat<T>({tape.constant(Array<T>(shape, cache.values)), v});
  }
  auto h = ops::add(x, linear(w, prefix + ".o", ops::attention(q, k_all, v_all, heads, mask)));
  if (commit) {
    cache.width = width;
    cache.keys.insert(cache.keys.end(), k.value().values().begin(), k.value().values().end());
    cache.values.insert(cache.values.end(), v.value().values().begin(), v.value().values().end());
    cache.rows += k.value().rows();
  }
  return feed_forward(w, prefix, h);
}

template <typename T>
Array<T> sinusoidal_embedding(const std::vector<T>& t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("sinusoidal embedding width must be even");
  const std::size_t half = dim / 2;
  Array<T> out(Shape{t.size(), dim});
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double w = std::pow(10000.0, -double(i) / double(half));
      const double a = 1000.0 * double(t[r]) * w;
      out(r, i) = static_cast<T>(std::sin(a));
      out(r, half + i) = static_cast<T>(std::cos(a));
    }
  return out;
}

#define DYADFLOW_NN_INSTANTIATE(T)                                                                          \
  template class Weights<T>;                                                                                \
  template void init_linear<T>(ParamStore<T>&, const std::string&, std::size_t, std::size_t,               \
                               std::mt19937_64&, double);                                                   \
  template void init_layer_norm<T>(ParamStore<T>&, const std::string&, std::size_t);                        \
  template void init_block<T>(ParamStore<T>&, const std::string&, const BlockDims&, std::mt19937_64&);      \
  template Var<T> linear<T>(Weights<T>&, const std::string&, Var<T>);                                       \
  template Var<T> layer_norm<T>(Weights<T>&, const std::string&, Var<T>);                                   \
  template Var<T> block<T>(Weights<T>&, const std::string&, Var<T>, const std::vector<long>&,               \
                           const AttentionMask&, std::size_t);                                              \
  template Var<T> block_cached<T>(Weights<T>&, const std::string&, Var<T>, const std::vector<long>&,        \
                                  const AttentionMask&, std::size_t, KvCache<T>&, bool);                    \
  template Array<T> sinusoidal_embedding<T>(const std::vector<T>&, std::size_t);

DYADFLOW_NN_INSTANTIATE(float)
DYADFLOW_NN_INSTANTIATE(double)

}  // namespace dyadflow::nn
