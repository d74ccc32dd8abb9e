#include "dyadflow/data/norm.hpp"

#include <cmath>

#include "dyadflow/log.hpp"

namespace dyadflow::data {

NormStats fit_norm_stats(const std::vector<diff::Array<double>>& corpus) {
  if (corpus.empty()) throw ContractError("cannot fit normalization stats on an empty corpus");
  const std::size_t d = corpus.front().cols();
  NormStats st;
  st.mean.assign(d, 0.0);
  st.std.assign(d, 0.0);
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.cols() != d) throw DimensionError("corpus sequences disagree on channel count");
    for (std::size_t f = 0; f < seq.rows(); ++f)
      for (std::size_t c = 0; c < d; ++c) st.mean[c] += seq(f, c);
    count += seq.rows();
  }
  for (auto& m : st.mean) m /= double(count);
  for (const auto& seq : corpus)
    for (std::size_t f = 0; f < seq.rows(); ++f)
      for (std::size_t c = 0; c < d; ++c) {
        const double e = seq(f, c) - st.mean[c];
        st.std[c] += e * e;
      }
  for (std::size_t c = 0; c < d; ++c) {
    st.std[c] = std::sqrt(st.std[c] / double(count));
    if (!(st.std[c] >= kStdFloor)) {
      st.std[c] = kStdFloor;
      st.clamped.push_back(c);
    }
  }
  if (!st.clamped.empty())
    log::warn("normalization: " + std::to_string(st.clamped.size()) + " zero-variance channel(s) clamped to 1e-6");
  return st;
}

namespace {

void check_width(const diff::Array<double>& seq, const NormStats& stats) {
  if (seq.cols() != stats.channels())
    throw DimensionError("sequence has " + std::to_string(seq.cols()) + " channels, stats have " +
                         std::to_string(stats.channels()));
}

}  // namespace

diff::Array<double> normalize(const diff::Array<double>& seq, const NormStats& stats) {
  check_width(seq, stats);
  diff::Array<double> out(seq.shape());
  for (std::size_t f = 0; f < seq.rows(); ++f)
    for (std::size_t c = 0; c < seq.cols(); ++c) out(f, c) = (seq(f, c) - stats.mean[c]) / stats.std[c];
  return out;
}

diff::Array<double> denormalize(const diff::Array<double>& seq, const NormStats& stats) {
  check_width(seq, stats);
  diff::Array<double> out(seq.shape());
  for (std::size_t f = 0; f < seq.rows(); ++f)
    for (std::size_t c = 0; c < seq.cols(); ++c) out(f, c) = seq(f, c) * stats.std[c] + stats.mean[c];
  return out;
}

}  // namespace dyadflow::data
