#include "dyadflow/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dyadflow::diff {

double finite_diff_check(const std::function<double(std::span<const double>)>& fn,
                         std::span<const double> analytic_grad, std::span<const double> point, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check requires eps > 0");
  if (analytic_grad.size() != point.size()) throw DimensionError("gradient and point sizes differ");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = fn(x);
    x[i] = saved - eps;
    const double down = fn(x);
    x[i] = saved;
    const double central = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic_grad[i] - central) / (std::abs(analytic_grad[i]) + 1e-8));
  }
  return worst;
}

double finite_diff_check_params(ParamStore<double>& store,
                                const std::function<Var<double>(Tape<double>&, ParamStore<double>&)>& build_loss,
                                double eps) {
  store.zero_grad();
  {
    Tape<double> tape;
    auto loss = build_loss(tape, store);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    return build_loss(tape, store).value().item();
  };
  double worst = 0.0;
  for (auto& e : store.entries()) {
    std::vector<double> analytic(e.grad.values().begin(), e.grad.values().end());
    std::vector<double> point(e.value.values().begin(), e.value.values().end());
    auto fn = [&](std::span<const double> x) {
      std::copy(x.begin(), x.end(), e.value.values().begin());
      return eval();
    };
    worst = std::max(worst, finite_diff_check(fn, analytic, point, eps));
    std::copy(point.begin(), point.end(), e.value.values().begin());
  }
  return worst;
}

}  // namespace dyadflow::diff
