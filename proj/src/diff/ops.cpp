#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "dyadflow/diff/tape.hpp"
#include "dyadflow/kernels/kernels.hpp"

namespace dyadflow::diff {

namespace fwd {

template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* out, std::size_t rows, std::size_t cols, T eps,
                     T* mean_out, T* rstd_out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T mu{0};
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<T>(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(cols);
    const T rstd = T{1} / std::sqrt(var + eps);
    T* orow = out + r * cols;
    for (std::size_t c = 0; c < cols; ++c) orow[c] = (xr[c] - mu) * rstd * gamma[c] + beta[c];
    if (mean_out) mean_out[r] = mu;
    if (rstd_out) rstd_out[r] = rstd;
  }
}

// tanh approximation
template <typename T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  constexpr T a = static_cast<T>(0.044715);
  const T th = std::tanh(c * (x + a * x * x * x));
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * a * x * x);
}

template <typename T>
void rope_rows(T* x, const long* timestamps, std::size_t rows, std::size_t n_heads, std::size_t head_dim,
               bool inverse) {
  if (head_dim % 2 != 0) throw ConfigError("rope requires an even head dimension, got " + std::to_string(head_dim));
  const std::size_t half = head_dim / 2;
  std::vector<double> theta(half);
  for (std::size_t u = 0; u < half; ++u)
    theta[u] = std::pow(10000.0, -2.0 * static_cast<double>(u) / static_cast<double>(head_dim));
  const std::size_t width = n_heads * head_dim;
  for (std::size_t r = 0; r < rows; ++r) {
    const double ts = static_cast<double>(timestamps[r]);
    T* row = x + r * width;
    for (std::size_t u = 0; u < half; ++u) {
      const double angle = ts * theta[u];
      const T cs = static_cast<T>(std::cos(angle));
      const T sn = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      for (std::size_t h = 0; h < n_heads; ++h) {
        T* pair = row + h * head_dim + 2 * u;
        const T a = pair[0];
        const T b = pair[1];
        pair[0] = a * cs - b * sn;
        pair[1] = a * sn + b * cs;
      }
    }
  }
}

namespace {

// Copies head h of a rows x (heads*hd) array into a contiguous rows x hd block.
template <typename T>
void gather_head(const T* src, T* dst, std::size_t rows, std::size_t width, std::size_t h, std::size_t hd) {
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(src + r * width + h * hd, hd, dst + r * hd);
}

template <typename T>
void scatter_add_head(const T* src, T* dst, std::size_t rows, std::size_t width, std::size_t h, std::size_t hd) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < hd; ++c) dst[r * width + h * hd + c] += src[r * hd + c];
}

}  // namespace

// Dense per-head products. Every logit is one dot product of length hd and
// every output accumulates keys in index order, with masked keys carrying an
// exact zero weight; a row's result therefore does not depend on which other
// rows or masked keys are present.
template <typename T>
void attention(const T* q, const T* k, const T* v, T* out, std::size_t n_queries, std::size_t n_keys,
               std::size_t n_heads, std::size_t head_dim, const AttentionMask& mask, T* probs) {
  if (mask.n_queries() != n_queries || mask.n_keys != n_keys)
    throw DimensionError("attention mask shape does not match queries/keys");
  const std::size_t width = n_heads * head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  std::vector<T> qh(n_queries * head_dim), kh(n_keys * head_dim), vh(n_keys * head_dim), oh(n_queries * head_dim);
  std::vector<T> scratch;
  if (probs == nullptr) scratch.resize(n_queries * n_keys);
  for (std::size_t h = 0; h < n_heads; ++h) {
    T* p = probs ? probs + h * n_queries * n_keys : scratch.data();
    gather_head(q, qh.data(), n_queries, width, h, head_dim);
    gather_head(k, kh.data(), n_keys, width, h, head_dim);
    gather_head(v, vh.data(), n_keys, width, h, head_dim);
    kernels::gemm_nt(qh.data(), kh.data(), p, n_queries, head_dim, n_keys);
    for (std::size_t i = 0; i < n_queries; ++i) {
      T* row = p + i * n_keys;
      T max_score = -std::numeric_limits<T>::infinity();
      bool any = false;
      std::size_t cursor = 0;
      for (const auto& [b, e] : mask.rows[i]) {
        std::fill(row + cursor, row + std::max(cursor, b), T{0});
        for (std::size_t j = b; j < e; ++j) {
          row[j] *= scale;
          max_score = std::max(max_score, row[j]);
          any = true;
        }
        cursor = std::max(cursor, e);
      }
      std::fill(row + cursor, row + n_keys, T{0});
      if (!any) throw NumericError("attention row " + std::to_string(i) + " is fully masked");
      T denom{0};
      for (const auto& [b, e] : mask.rows[i])
        for (std::size_t j = b; j < e; ++j) {
          row[j] = std::exp(row[j] - max_score);
          denom += row[j];
        }
      const T inv = T(1) / denom;
      for (const auto& [b, e] : mask.rows[i])
        for (std::size_t j = b; j < e; ++j) row[j] *= inv;
    }
    kernels::gemm_nn(p, vh.data(), oh.data(), n_queries, n_keys, head_dim);
    for (std::size_t i = 0; i < n_queries; ++i) std::copy_n(oh.data() + i * head_dim, head_dim, out + i * width + h * head_dim);
  }
}

}  // namespace fwd

namespace ops {

namespace {

template <typename T>
void require_rank2(const Array<T>& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + " expects a 2-D array, got " + shape_str(a.shape()));
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

template <typename T>
bool is_row_broadcast(const Array<T>& a, const Array<T>& b) {
  if (a.shape() == b.shape()) return false;
  const bool row_shaped = b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1);
  return row_shaped && b.size() == a.cols() && a.rank() >= 2;
}

void add_into(auto& dst, const auto& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) throw DimensionError("matmul " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Array<T> out(Shape{m, n});
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  const int ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ai)) kernels::gemm_nt(g.data(), t.value(bi).data(), t.grad(ai).data(), m, n, k, true);
    if (t.requires_grad(bi)) kernels::gemm_tn(t.value(ai).data(), g.data(), t.grad(bi).data(), k, m, n, true);
  }, "matmul");
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  require_rank2(av, "transpose");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Array<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = av(i, j);
  const int ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, r, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga(i, j) += g(j, i);
  }, "transpose");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const int ai = a.id, bi = b.id;
  if (av.shape() == bv.shape()) {
    Array<T> out = av;
    add_into(out, bv);
    return a.tape->push(std::move(out), {ai, bi}, [ai, bi](Tape<T>& t, int self) {
      const auto& g = t.grad(self);
      if (t.requires_grad(ai)) add_into(t.grad(ai), g);
      if (t.requires_grad(bi)) add_into(t.grad(bi), g);
    }, "add");
  }
  if (!is_row_broadcast(av, bv)) throw DimensionError("add " + shape_str(av.shape()) + " + " + shape_str(bv.shape()));
  const std::size_t rows = av.rows(), cols = av.cols();
  Array<T> out = av;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return a.tape->push(std::move(out), {ai, bi}, [ai, bi, rows, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ai)) add_into(t.grad(ai), g);
    if (t.requires_grad(bi)) {
      auto& gb = t.grad(bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) throw DimensionError("sub " + shape_str(av.shape()) + " - " + shape_str(bv.shape()));
  Array<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {ai, bi}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ai)) add_into(t.grad(ai), g);
    if (t.requires_grad(bi)) {
      auto& gb = t.grad(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const int ai = a.id, bi = b.id;
  if (av.shape() == bv.shape()) {
    Array<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape->push(std::move(out), {ai, bi}, [ai, bi](Tape<T>& t, int self) {
      const auto& g = t.grad(self);
      if (t.requires_grad(ai)) {
        auto& ga = t.grad(ai);
        const auto& bv = t.value(bi);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (t.requires_grad(bi)) {
        auto& gb = t.grad(bi);
        const auto& av = t.value(ai);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
      }
    }, "mul");
  }
  if (!is_row_broadcast(av, bv)) throw DimensionError("mul " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  const std::size_t rows = av.rows(), cols = av.cols();
  Array<T> out = av;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= bv[c];
  return a.tape->push(std::move(out), {ai, bi}, [ai, bi, rows, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(ai);
    const auto& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      auto& ga = t.grad(ai);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r * cols + c] * bv[c];
    }
    if (t.requires_grad(bi)) {
      auto& gb = t.grad(bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c] * av[r * cols + c];
    }
  }, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Array<T> out = a.value();
  for (T& x : out.values()) x *= s;
  const int ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, s](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  }, "scale");
}

template <typename T>
Var<T> exp(Var<T> a) {
  Array<T> out = a.value();
  for (T& x : out.values()) x = std::exp(x);
  const int ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
  }, "exp");
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Array<T> out = a.value();
  for (T& x : out.values()) x = fwd::gelu(x);
  const int ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ai);
    auto& ga = t.grad(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * fwd::gelu_grad(x[i]);
  }, "gelu");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero arrays");
  Tape<T>* tape = parts.front().tape;
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_same_tape(parts.front(), p);
    require_rank2(p.value(), "concat");
    if (p.value().cols() != cols) throw DimensionError("concat column mismatch");
    offsets.push_back(rows);
    rows += p.value().rows();
    ids.push_back(p.id);
  }
  Array<T> out(Shape{rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = parts[i].value();
    std::copy(v.data(), v.data() + v.size(), out.data() + offsets[i] * cols);
  }
  return tape->push(std::move(out), ids, [ids, offsets, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      auto& gi = t.grad(ids[i]);
      const T* src = g.data() + offsets[i] * cols;
      for (std::size_t e = 0; e < gi.size(); ++e) gi[e] += src[e];
    }
  }, "concat");
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t row_begin, std::size_t row_end) {
  const auto& av = a.value();
  require_rank2(av, "slice");
  if (row_begin >= row_end || row_end > av.dim(0))
    throw DimensionError("slice rows [" + std::to_string(row_begin) + "," + std::to_string(row_end) + ") of " +
                         shape_str(av.shape()));
  const std::size_t cols = av.dim(1);
  Array<T> out(Shape{row_end - row_begin, cols});
  std::copy(av.data() + row_begin * cols, av.data() + row_end * cols, out.data());
  const int ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, row_begin, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    T* dst = t.grad(ai).data() + row_begin * cols;
    for (std::size_t e = 0; e < g.size(); ++e) dst[e] += g[e];
  }, "slice");
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols)
    throw DimensionError("layer_norm affine size does not match feature width");
  Array<T> out(xv.shape());
  std::vector<T> mu(rows), rstd(rows);
  fwd::layer_norm_rows(xv.data(), gamma.value().data(), beta.value().data(), out.data(), rows, cols, eps, mu.data(),
                       rstd.data());
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->push(std::move(out), {xi, gi, bi},
                      [xi, gi, bi, rows, cols, mu = std::move(mu), rstd = std::move(rstd)](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(xi);
    const auto& gam = t.value(gi);
    const bool need_x = t.requires_grad(xi);
    const bool need_g = t.requires_grad(gi);
    const bool need_b = t.requires_grad(bi);
    std::vector<T> dxhat(cols), xhat(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = xv.data() + r * cols;
      const T* gr = g.data() + r * cols;
      T mean_d{0}, mean_dx{0};
      for (std::size_t c = 0; c < cols; ++c) {
        xhat[c] = (xr[c] - mu[r]) * rstd[r];
        dxhat[c] = gr[c] * gam[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xhat[c];
      }
      mean_d /= static_cast<T>(cols);
      mean_dx /= static_cast<T>(cols);
      if (need_g) {
        auto& gg = t.grad(gi);
        for (std::size_t c = 0; c < cols; ++c) gg[c] += gr[c] * xhat[c];
      }
      if (need_b) {
        auto& gb = t.grad(bi);
        for (std::size_t c = 0; c < cols; ++c) gb[c] += gr[c];
      }
      if (need_x) {
        T* gx = t.grad(xi).data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gx[c] += rstd[r] * (dxhat[c] - mean_d - xhat[c] * mean_dx);
      }
    }
  }, "layer_norm");
}

template <typename T>
Var<T> softmax(Var<T> a) {
  const auto& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Array<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T s{0};
    for (std::size_t c = 0; c < cols; ++c) s += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= s;
  }
  const int ai = a.id;
  return a.tape->push(std::move(out), {ai}, [ai, rows, cols](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(ai);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      T d{0};
      for (std::size_t c = 0; c < cols; ++c) d += g[o + c] * y[o + c];
      for (std::size_t c = 0; c < cols; ++c) ga[o + c] += y[o + c] * (g[o + c] - d);
    }
  }, "softmax");
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T x : a.value().values()) s += x;
  const int ai = a.id;
  return a.tape->push(Array<T>::scalar(s), {ai}, [ai](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    for (T& x : t.grad(ai).values()) x += g;
  }, "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  T s{0};
  for (T x : a.value().values()) s += x;
  const int ai = a.id;
  return a.tape->push(Array<T>::scalar(s / n), {ai}, [ai, n](Tape<T>& t, int self) {
    const T g = t.grad(self)[0] / n;
    for (T& x : t.grad(ai).values()) x += g;
  }, "mean");
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) throw DimensionError("mse " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const T n = static_cast<T>(av.size());
  T s{0};
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const int ai = a.id, bi = b.id;
  return a.tape->push(Array<T>::scalar(s / n), {ai, bi}, [ai, bi, n](Tape<T>& t, int self) {
    const T g = T(2) * t.grad(self)[0] / n;
    const auto& av = t.value(ai);
    const auto& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      auto& ga = t.grad(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (t.requires_grad(bi)) {
      auto& gb = t.grad(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  }, "mse");
}

template <typename T>
Var<T> rope(Var<T> x, const std::vector<long>& timestamps, std::size_t n_heads) {
  const auto& xv = x.value();
  require_rank2(xv, "rope");
  const std::size_t rows = xv.dim(0);
  if (timestamps.size() != rows) throw DimensionError("rope needs one timestamp per token");
  if (n_heads == 0 || xv.dim(1) % n_heads != 0) throw ConfigError("rope width not divisible by head count");
  const std::size_t head_dim = xv.dim(1) / n_heads;
  Array<T> out = xv;
  fwd::rope_rows(out.data(), timestamps.data(), rows, n_heads, head_dim);
  const int xi = x.id;
  return x.tape->push(std::move(out), {xi}, [xi, timestamps, rows, n_heads, head_dim](Tape<T>& t, int self) {
    Array<T> g = t.grad(self);
    fwd::rope_rows(g.data(), timestamps.data(), rows, n_heads, head_dim, true);
    add_into(t.grad(xi), g);
  }, "rope");
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t n_heads, const AttentionMask& mask) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  require_rank2(qv, "attention");
  if (kv.shape() != vv.shape() || qv.dim(1) != kv.dim(1))
    throw DimensionError("attention q/k/v widths must match");
  if (n_heads == 0 || qv.dim(1) % n_heads != 0) throw ConfigError("attention width not divisible by head count");
  const std::size_t nq = qv.dim(0), nk = kv.dim(0), width = qv.dim(1), hd = width / n_heads;
  auto probs = std::make_shared<std::vector<T>>(n_heads * nq * nk, T{0});
  Array<T> out(Shape{nq, width});
  fwd::attention(qv.data(), kv.data(), vv.data(), out.data(), nq, nk, n_heads, hd, mask, probs->data());
  auto rows = std::make_shared<std::vector<std::vector<AttentionMask::Range>>>(mask.rows);
  const int qi = q.id, ki = k.id, vi = v.id;
  return q.tape->push(std::move(out), {qi, ki, vi},
                      [qi, ki, vi, nq, nk, n_heads, hd, width, probs, rows](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& qv = t.value(qi);
    const auto& kv = t.value(ki);
    const auto& vv = t.value(vi);
    const bool need_q = t.requires_grad(qi), need_k = t.requires_grad(ki), need_v = t.requires_grad(vi);
    T* dq = need_q ? t.grad(qi).data() : nullptr;
    T* dk = need_k ? t.grad(ki).data() : nullptr;
    T* dv = need_v ? t.grad(vi).data() : nullptr;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<T> qh(nq * hd), kh(nk * hd), vh(nk * hd), gh(nq * hd), ds(nq * nk), tmp(std::max(nq, nk) * hd);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const T* p = probs->data() + h * nq * nk;
      fwd::gather_head(g.data(), gh.data(), nq, width, h, hd);
      fwd::gather_head(vv.data(), vh.data(), nk, width, h, hd);
      if (dv) {
        kernels::gemm_tn(p, gh.data(), tmp.data(), nk, nq, hd);
        fwd::scatter_add_head(tmp.data(), dv, nk, width, h, hd);
      }
      if (!dq && !dk) continue;
      // dS = P * (G V^T - rowsum(P * G V^T)) * scale
      kernels::gemm_nt(gh.data(), vh.data(), ds.data(), nq, hd, nk);
      for (std::size_t i = 0; i < nq; ++i) {
        const T* pi = p + i * nk;
        T* di = ds.data() + i * nk;
        T row_dot{0};
        for (const auto& [b, e] : (*rows)[i])
          for (std::size_t j = b; j < e; ++j) row_dot += pi[j] * di[j];
        for (std::size_t j = 0; j < nk; ++j) di[j] = pi[j] * (di[j] - row_dot) * scale;
      }
      if (dq) {
        fwd::gather_head(kv.data(), kh.data(), nk, width, h, hd);
        kernels::gemm_nn(ds.data(), kh.data(), tmp.data(), nq, nk, hd);
        fwd::scatter_add_head(tmp.data(), dq, nq, width, h, hd);
      }
      if (dk) {
        fwd::gather_head(qv.data(), qh.data(), nq, width, h, hd);
        kernels::gemm_tn(ds.data(), qh.data(), tmp.data(), nk, nq, hd);
        fwd::scatter_add_head(tmp.data(), dk, nk, width, h, hd);
      }
    }
  }, "attention");
}

#define DYADFLOW_INSTANTIATE(T)                                                            \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                               \
  template Var<T> transpose<T>(Var<T>);                                                    \
  template Var<T> add<T>(Var<T>, Var<T>);                                                  \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                  \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                  \
  template Var<T> scale<T>(Var<T>, T);                                                     \
  template Var<T> exp<T>(Var<T>);                                                          \
  template Var<T> gelu<T>(Var<T>);                                                         \
  template Var<T> concat<T>(const std::vector<Var<T>>&);                                   \
  template Var<T> slice<T>(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                \
  template Var<T> softmax<T>(Var<T>);                                                      \
  template Var<T> sum<T>(Var<T>);                                                          \
  template Var<T> mean<T>(Var<T>);                                                         \
  template Var<T> mse<T>(Var<T>, Var<T>);                                                  \
  template Var<T> rope<T>(Var<T>, const std::vector<long>&, std::size_t);                  \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, std::size_t, const AttentionMask&);

DYADFLOW_INSTANTIATE(float)
DYADFLOW_INSTANTIATE(double)
#undef DYADFLOW_INSTANTIATE

}  // namespace ops

namespace fwd {
#define DYADFLOW_INSTANTIATE(T)                                                                                  \
  template void layer_norm_rows<T>(const T*, const T*, const T*, T*, std::size_t, std::size_t, T, T*, T*);    \
  template T gelu<T>(T);                                                                                       \
  template T gelu_grad<T>(T);                                                                                  \
  template void rope_rows<T>(T*, const long*, std::size_t, std::size_t, std::size_t, bool);                    \
  template void attention<T>(const T*, const T*, const T*, T*, std::size_t, std::size_t, std::size_t,          \
                             std::size_t, const AttentionMask&, T*);
DYADFLOW_INSTANTIATE(float)
DYADFLOW_INSTANTIATE(double)
#undef DYADFLOW_INSTANTIATE
}  // namespace fwd

}  // namespace dyadflow::diff
