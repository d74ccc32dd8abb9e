#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dyadflow/diff/tape.hpp"

namespace dyadflow::diff {

// max_i |analytic_i - central_i| / (|analytic_i| + 1e-8), where central_i is
// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
double finite_diff_check(const std::function<double(std::span<const double>)>& fn,
                         std::span<const double> analytic_grad, std::span<const double> point, double eps = 1e-4);

// Same check over every coordinate of every parameter in a store. build_loss
// records a scalar loss on the given tape; it is called once for the analytic
// gradient and twice per coordinate for the central difference.
double finite_diff_check_params(ParamStore<double>& store,
                                const std::function<Var<double>(Tape<double>&, ParamStore<double>&)>& build_loss,
                                double eps = 1e-4);

}  // namespace dyadflow::diff
