#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dyadflow/diff/array.hpp"
#include "dyadflow/diff/params.hpp"

namespace dyadflow::diff {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Array<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Records primitive operations in creation order. Because every node is
// appended after its inputs, creation order is a topological order and the
// backward sweep simply walks the node list in reverse.
//
// A tape built with record=false only evaluates values (no closures kept);
// backward() on it is a contract error.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Array<T> value);
  // Leaf bound to a named parameter. Repeated requests on the same tape
  // return the same node; gradients are accumulated into store.grad(name).
  Var<T> param(ParamStore<T>& store, const std::string& name);
  // Non-trainable view of a parameter (e.g. a frozen reference policy).
  Var<T> frozen(const ParamStore<T>& store, const std::string& name);

  // For op implementations: appends a node. The output must be finite.
  Var<T> push(Array<T> value, const std::vector<int>& inputs, BackwardFn fn, const char* op_name);

  const Array<T>& value(int id) const { return nodes_[id].value; }
  // Gradient buffer for a node, allocated as zeros on first use.
  Array<T>& grad(int id);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse. Parameter
  // gradients are added to (not overwritten in) their ParamStore buffers.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    ParamStore<T>* store = nullptr;
    std::size_t param_index = 0;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_nodes_;
};

// Per-query list of visible key ranges [begin, end).
struct AttentionMask {
  using Range = std::pair<std::size_t, std::size_t>;
  std::size_t n_keys = 0;
  std::vector<std::vector<Range>> rows;

  static AttentionMask full(std::size_t n_queries, std::size_t n_keys);
  static AttentionMask causal(std::size_t n);
  bool allowed(std::size_t query, std::size_t key) const;
  std::size_t n_queries() const { return rows.size(); }
};

// Value-only kernels shared by the tape ops and the cached inference path.
namespace fwd {
template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* out, std::size_t rows, std::size_t cols,
                     T eps, T* mean_out = nullptr, T* rstd_out = nullptr);
template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);
// Rotates pairs (2u, 2u+1) inside each head by timestamp * base^(-2u/head_dim).
template <typename T>
void rope_rows(T* x, const long* timestamps, std::size_t rows, std::size_t n_heads, std::size_t head_dim,
               bool inverse = false);
// Scaled dot-product attention over mask-visible keys. probs (optional) is
// n_heads x n_queries x n_keys, zero where masked.
template <typename T>
void attention(const T* q, const T* k, const T* v, T* out, std::size_t n_queries, std::size_t n_keys,
               std::size_t n_heads, std::size_t head_dim, const AttentionMask& mask, T* probs);
}  // namespace fwd

namespace ops {

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);
// Same-shape elementwise add, or a rank-1 / 1xN row broadcast over the rows of a.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
// Row concatenation of 2-D arrays with equal column count.
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice(Var<T> a, std::size_t row_begin, std::size_t row_end);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> mse(Var<T> a, Var<T> b);
template <typename T> Var<T> rope(Var<T> x, const std::vector<long>& timestamps, std::size_t n_heads);
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t n_heads, const AttentionMask& mask);

// x W + b with W stored in x out.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b) { return add(matmul(x, w), b); }

}  // namespace ops

}  // namespace dyadflow::diff
