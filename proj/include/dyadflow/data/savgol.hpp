#pragma once

#include <cstddef>
#include <vector>

#include "dyadflow/diff/array.hpp"

namespace dyadflow::data {

// Least-squares smoothing weights for the window centre. Throws ConfigError
// on an even or non-positive window, or order >= window.
std::vector<double> savgol_coefficients(std::size_t window, std::size_t order);

// Filters each column of an L x d array; edges use mirror padding
// (x[-i] = x[i], x[L-1+i] = x[L-1-i]).
diff::Array<double> savgol_smooth(const diff::Array<double>& seq, std::size_t window = 9, std::size_t order = 3);

}  // namespace dyadflow::data
