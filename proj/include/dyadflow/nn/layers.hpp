#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "dyadflow/diff/tape.hpp"

namespace dyadflow::nn {

using diff::Array;
using diff::AttentionMask;
using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Var;

// Binds parameter names to tape nodes: trainable leaves, or constants when
// the store is a frozen policy.
template <typename T>
class Weights {
 public:
  Weights(Tape<T>& tape, ParamStore<T>& store, bool trainable = true)
      : tape_(tape), store_(&store), cstore_(&store), trainable_(trainable) {}
  Weights(Tape<T>& tape, const ParamStore<T>& store) : tape_(tape), cstore_(&store), trainable_(false) {}

  Var<T> operator()(const std::string& name);
  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return *cstore_; }

 private:
  Tape<T>& tape_;
  ParamStore<T>* store_ = nullptr;
  const ParamStore<T>* cstore_;
  bool trainable_;
  std::map<std::string, Var<T>> frozen_;
};

struct BlockDims {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
};

inline constexpr double kInitStd = 0.02;

// W (in x out) truncated normal, b (1 x out) zero.
template <typename T>
void init_linear(ParamStore<T>& s, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng,
                 double stddev = kInitStd);
template <typename T>
void init_layer_norm(ParamStore<T>& s, const std::string& prefix, std::size_t width);
template <typename T>
void init_block(ParamStore<T>& s, const std::string& prefix, const BlockDims& dims, std::mt19937_64& rng);

template <typename T>
Var<T> linear(Weights<T>& w, const std::string& prefix, Var<T> x);
template <typename T>
Var<T> layer_norm(Weights<T>& w, const std::string& prefix, Var<T> x);

// Pre-LN transformer block with rotary self-attention:
//   h = x + Wo attn(rope(Wq LN x), rope(Wk LN x), Wv LN x);  out = h + FFN(LN h)
template <typename T>
Var<T> block(Weights<T>& w, const std::string& prefix, Var<T> x, const std::vector<long>& timestamps,
             const AttentionMask& mask, std::size_t heads);

// Rotated keys and values of previously processed tokens for one layer.
template <typename T>
struct KvCache {
  std::vector<T> keys;
  std::vector<T> values;
  std::size_t rows = 0;
  std::size_t width = 0;
  std::size_t bytes() const { return (keys.capacity() + values.capacity()) * sizeof(T); }
};

// Same block evaluated for new rows against cached keys/values. The mask is
// over [cached rows ; new rows]. commit=true appends the new keys/values.
// Row-wise arithmetic matches block() exactly.
template <typename T>
Var<T> block_cached(Weights<T>& w, const std::string& prefix, Var<T> x, const std::vector<long>& timestamps,
                    const AttentionMask& mask, std::size_t heads, KvCache<T>& cache, bool commit);

// Sinusoidal features of a scalar in [0,1]: [sin(s w_i), cos(s w_i)] with
// w_i = 10000^(-i/half) and s = 1000 t.
template <typename T>
Array<T> sinusoidal_embedding(const std::vector<T>& t, std::size_t dim);

}  // namespace dyadflow::nn
