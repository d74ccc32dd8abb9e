#include "dyadflow/diff/tape.hpp"

namespace dyadflow::diff {

template <typename T>
Var<T> Tape<T>::constant(Array<T> value) {
  return push(std::move(value), {}, nullptr, "constant");
}

template <typename T>
Var<T> Tape<T>::param(ParamStore<T>& store, const std::string& name) {
  const std::string key = std::to_string(reinterpret_cast<std::uintptr_t>(&store)) + "/" + name;
  if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return Var<T>{this, it->second};
  const std::size_t index = store.index_of(name);
  Node node;
  node.value = store.entries()[index].value;
  node.requires_grad = record_;
  node.store = &store;
  node.param_index = index;
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(key, id);
  return Var<T>{this, id};
}

template <typename T>
Var<T> Tape<T>::frozen(const ParamStore<T>& store, const std::string& name) {
  return constant(store.value(name));
}

template <typename T>
Var<T> Tape<T>::push(Array<T> value, const std::vector<int>& inputs, BackwardFn fn, const char* op_name) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite output from op '") + op_name + "'");
  Node node;
  node.value = std::move(value);
  if (record_) {
    for (int in : inputs) node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    if (node.requires_grad) node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Array<T>& Tape<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Array<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (!record_) throw ContractError("backward() on a tape that does not record");
  if (loss.tape != this) throw ContractError("loss node belongs to another tape");
  if (value(loss.id).size() != 1) throw ContractError("backward() requires a scalar loss, got " +
                                                      shape_str(value(loss.id).shape()));
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id).fill(T{1});
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.store != nullptr) {
      auto dst = n.store->entries()[n.param_index].grad.values();
      auto src = n.grad.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
}

AttentionMask AttentionMask::full(std::size_t n_queries, std::size_t n_keys) {
  AttentionMask m;
  m.n_keys = n_keys;
  m.rows.assign(n_queries, {Range{0, n_keys}});
  return m;
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m;
  m.n_keys = n;
  m.rows.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.rows[i] = {Range{0, i + 1}};
  return m;
}

bool AttentionMask::allowed(std::size_t query, std::size_t key) const {
  for (const auto& [b, e] : rows.at(query))
    if (key >= b && key < e) return true;
  return false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace dyadflow::diff
