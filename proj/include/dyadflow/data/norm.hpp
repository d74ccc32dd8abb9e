#pragma once

#include <cstddef>
#include <vector>

#include "dyadflow/diff/array.hpp"

namespace dyadflow::data {

inline constexpr double kStdFloor = 1e-6;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  // Channels whose std fell below the floor and were clamped.
  std::vector<std::size_t> clamped;

  std::size_t channels() const { return mean.size(); }
};

// Per-channel mean and population std over every frame of every sequence.
NormStats fit_norm_stats(const std::vector<diff::Array<double>>& corpus);

diff::Array<double> normalize(const diff::Array<double>& seq, const NormStats& stats);
diff::Array<double> denormalize(const diff::Array<double>& seq, const NormStats& stats);

}  // namespace dyadflow::data
