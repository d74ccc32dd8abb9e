#include "dyadflow/data/savgol.hpp"

#include <cmath>
#include <utility>

namespace dyadflow::data {

namespace {

// Reflect an out-of-range index back into [0, n) without repeating the edge.
std::size_t mirror(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  long j = i % period;
  if (j < 0) j += period;
  return static_cast<std::size_t>(j < n ? j : period - j);
}

}  // namespace

std::vector<double> savgol_coefficients(std::size_t window, std::size_t order) {
  if (window == 0 || window % 2 == 0) throw ConfigError("savgol window must be odd, got " + std::to_string(window));
  if (order >= window) throw ConfigError("savgol order must be below the window length");
  const long half = static_cast<long>(window / 2);
  const std::size_t n = order + 1;

  // Normal equations (A^T A) y = e0, A[i][j] = x_i^j.
  std::vector<std::vector<double>> m(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0.0;
      for (long x = -half; x <= half; ++x) s += std::pow(double(x), double(r + c));
      m[r][c] = s;
    }
    m[r][n] = r == 0 ? 1.0 : 0.0;
  }
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    if (std::abs(m[piv][col]) < 1e-300) throw NumericError("savgol normal equations are singular");
    std::swap(m[col], m[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m[r][col] / m[col][col];
      for (std::size_t c = col; c <= n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  std::vector<double> y(n);
  for (std::size_t r = 0; r < n; ++r) y[r] = m[r][n] / m[r][r];

  std::vector<double> coeffs(window);
  for (long x = -half; x <= half; ++x) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += y[j] * std::pow(double(x), double(j));
    coeffs[static_cast<std::size_t>(x + half)] = s;
  }
  return coeffs;
}

diff::Array<double> savgol_smooth(const diff::Array<double>& seq, std::size_t window, std::size_t order) {
  const auto coeffs = savgol_coefficients(window, order);
  const long half = static_cast<long>(window / 2);
  const long len = static_cast<long>(seq.rows());
  const std::size_t d = seq.cols();
  diff::Array<double> out(seq.shape());
  for (long f = 0; f < len; ++f) {
    for (long k = -half; k <= half; ++k) {
      const double w = coeffs[static_cast<std::size_t>(k + half)];
      const std::size_t src = mirror(f + k, len);
      for (std::size_t c = 0; c < d; ++c) out(f, c) += w * seq(src, c);
    }
  }
  return out;
}

}  // namespace dyadflow::data
