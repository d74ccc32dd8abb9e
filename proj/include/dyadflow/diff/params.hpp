#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dyadflow/diff/array.hpp"

namespace dyadflow::diff {

// Named trainable parameters with their gradient buffers and AdamW moments.
// Iteration order is insertion order so checkpoints and updates are stable.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Array<T> value;
    Array<T> grad;
    Array<T> first_moment;
    Array<T> second_moment;
  };

  // Rejects duplicate names.
  Array<T>& add(const std::string& name, Array<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;

  Array<T>& value(const std::string& name) { return entries_[index_of(name)].value; }
  const Array<T>& value(const std::string& name) const { return entries_[index_of(name)].value; }
  Array<T>& grad(const std::string& name) { return entries_[index_of(name)].grad; }
  const Array<T>& grad(const std::string& name) const { return entries_[index_of(name)].grad; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  void zero_grad();
  double grad_norm() const;
  // Rescales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
  double clip_grad_norm(double max_norm);

  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t step) { step_ = step; }
  std::int64_t advance_step() { return ++step_; }

  // Copies values only (moments and step count reset); used for policy snapshots.
  ParamStore snapshot() const;
  // Overwrites values from another store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::int64_t step_ = 0;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One bias-corrected AdamW update over every parameter. Decoupled decay scales
// the parameter by (1 - lr*weight_decay) before the moment update.
template <typename T>
void adamw_step(ParamStore<T>& store, const AdamWConfig& config);

// Truncated normal (resampled outside +-2 std).
template <typename T>
Array<T> truncated_normal(Shape shape, double stddev, std::mt19937_64& rng);

}  // namespace dyadflow::diff
