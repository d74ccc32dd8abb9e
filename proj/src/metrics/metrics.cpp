#include "dyadflow/metrics/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

namespace dyadflow::metrics {

namespace {

constexpr double kEigenFloor = 1e-10;

void check_pair(const Sequence& a, const Sequence& b) {
  if (a.shape() != b.shape())
    throw DimensionError("metric inputs differ in shape: " + diff::shape_str(a.shape()) + " vs " +
                         diff::shape_str(b.shape()));
}

void check_lists(std::size_t a, std::size_t b, std::size_t s) {
  if (a != b || a != s) throw DimensionError("metric input lists differ in length");
}

void check_segments(const Sequence& seq, const SegmentSet& segs) {
  for (const auto& s : segs)
    if (s.end > seq.rows() || s.start > s.end) throw DimensionError("segment outside the sequence");
}

Eigen::MatrixXd to_eigen(const Array<double>& a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m(r, c) = a(r, c);
  return m;
}

// Symmetric PSD square root with negative eigenvalues clamped.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double pcc(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

SegmentSet vad_segments(const std::vector<std::uint8_t>& actor_vad, const std::vector<std::uint8_t>& partner_vad) {
  if (actor_vad.size() != partner_vad.size()) throw DimensionError("VAD streams differ in length");
  SegmentSet out;
  for (std::size_t f = 0; f < actor_vad.size(); ++f) {
    const bool speak = actor_vad[f] != 0;
    const bool listen = !speak && partner_vad[f] != 0;
    if (!speak && !listen) continue;
    const SegmentKind kind = speak ? SegmentKind::speaking : SegmentKind::listening;
    if (!out.empty() && out.back().end == f && out.back().kind == kind)
      out.back().end = f + 1;
    else
      out.push_back({f, f + 1, kind});
  }
  return out;
}

SegmentSet filter(const SegmentSet& segments, SegmentKind kind) {
  SegmentSet out;
  for (const auto& s : segments)
    if (s.kind == kind) out.push_back(s);
  return out;
}

SegmentSet whole(std::size_t frames, SegmentKind kind) { return {{0, frames, kind}}; }

std::string kind_name(SegmentKind kind) { return kind == SegmentKind::speaking ? "speaking" : "listening"; }

double velocity_std(const std::vector<Sequence>& seqs, const Channels& channels,
                    const std::vector<SegmentSet>& segments) {
  if (seqs.size() != segments.size()) throw DimensionError("one segment set per sequence required");
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    check_segments(seqs[i], segments[i]);
    for (const auto& s : segments[i])
      for (std::size_t f = s.start + 1; f < s.end; ++f)
        for (auto c : channels) {
          const double v = seqs[i](f, c) - seqs[i](f - 1, c);
          sum += v;
          sq += v * v;
          ++n;
        }
  }
  if (n == 0) return 0.0;
  const double mean = sum / double(n);
  return std::sqrt(std::max(0.0, sq / double(n) - mean * mean));
}

double dynamic_deviation(const std::vector<Sequence>& pred, const std::vector<Sequence>& gt, const Channels& channels,
                         const std::vector<SegmentSet>& segments) {
  check_lists(pred.size(), gt.size(), segments.size());
  for (std::size_t i = 0; i < pred.size(); ++i) check_pair(pred[i], gt[i]);
  return std::abs(velocity_std(pred, channels, segments) - velocity_std(gt, channels, segments));
}

double dynamic_deviation(const Sequence& pred, const Sequence& gt, const Channels& channels,
                         const SegmentSet& segments) {
  return dynamic_deviation(std::vector<Sequence>{pred}, std::vector<Sequence>{gt}, channels, {segments});
}

GaussianFit fit_gaussian(const Array<double>& rows) {
  const std::size_t n = rows.rows(), k = rows.cols();
  if (n < 2) throw ContractError("a Gaussian fit needs at least two observations");
  GaussianFit g;
  g.mean.assign(k, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < k; ++c) g.mean[c] += rows(r, c);
  for (auto& m : g.mean) m /= double(n);
  g.cov = Array<double>(diff::Shape{k, k});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t a = 0; a < k; ++a) {
      const double da = rows(r, a) - g.mean[a];
      for (std::size_t b = a; b < k; ++b) g.cov(a, b) += da * (rows(r, b) - g.mean[b]);
    }
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a; b < k; ++b) {
      g.cov(a, b) /= double(n - 1);
      g.cov(b, a) = g.cov(a, b);
    }
  return g;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.dim() != b.dim()) throw DimensionError("Gaussian fits differ in dimension");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Eigen::MatrixXd sa = to_eigen(a.cov), sb = to_eigen(b.cov);
  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), which stays symmetric.
  const Eigen::MatrixXd ra = sqrt_psd(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  double cross = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()(i);
    cross += ev > kEigenFloor ? std::sqrt(ev) : 0.0;
  }
  const double d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

Array<double> gather_frames(const std::vector<Sequence>& seqs, const Channels& channels,
                            const std::vector<SegmentSet>& segments) {
  if (seqs.size() != segments.size()) throw DimensionError("one segment set per sequence required");
  std::vector<double> data;
  std::size_t n = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    check_segments(seqs[i], segments[i]);
    for (const auto& s : segments[i])
      for (std::size_t f = s.start; f < s.end; ++f) {
        for (auto c : channels) data.push_back(seqs[i](f, c));
        ++n;
      }
  }
  if (n == 0) throw ContractError("no frames selected by the segments");
  return Array<double>(diff::Shape{n, channels.size()}, std::move(data));
}

double fd(const std::vector<Sequence>& pred, const std::vector<Sequence>& gt, const Channels& channels,
          const std::vector<SegmentSet>& segments) {
  check_lists(pred.size(), gt.size(), segments.size());
  return frechet_distance(fit_gaussian(gather_frames(pred, channels, segments)),
                          fit_gaussian(gather_frames(gt, channels, segments)));
}

double paired_fd(const std::vector<Sequence>& pred_actor, const std::vector<Sequence>& partner,
                 const std::vector<Sequence>& gt_actor, const Channels& channels,
                 const std::vector<SegmentSet>& segments) {
  check_lists(pred_actor.size(), gt_actor.size(), segments.size());
  if (partner.size() != pred_actor.size()) throw DimensionError("metric input lists differ in length");
  auto joint = [&](const std::vector<Sequence>& actor) {
    const auto a = gather_frames(actor, channels, segments);
    const auto p = gather_frames(partner, channels, segments);
    const std::size_t k = channels.size();
    Array<double> out(diff::Shape{a.rows(), 2 * k});
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = 0; c < k; ++c) {
        out(r, c) = a(r, c);
        out(r, k + c) = p(r, c);
      }
    return out;
  };
  return frechet_distance(fit_gaussian(joint(pred_actor)), fit_gaussian(joint(gt_actor)));
}

double mse(const std::vector<Sequence>& pred, const std::vector<Sequence>& gt, const Channels& channels,
           const std::vector<SegmentSet>& segments) {
  check_lists(pred.size(), gt.size(), segments.size());
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    check_pair(pred[i], gt[i]);
    check_segments(pred[i], segments[i]);
    for (const auto& seg : segments[i])
      for (std::size_t f = seg.start; f < seg.end; ++f)
        for (auto c : channels) {
          const double e = pred[i](f, c) - gt[i](f, c);
          s += e * e;
          ++n;
        }
  }
  return n ? s / double(n) : 0.0;
}

double sid_diversity(const std::vector<Sequence>& samples, const Channels& channels) {
  if (samples.size() < 2) throw ContractError("diversity needs at least two samples");
  for (const auto& s : samples) check_pair(s, samples.front());
  const std::size_t frames = samples.front().rows();
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    double pair_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < samples.size(); ++a)
      for (std::size_t b = a + 1; b < samples.size(); ++b) {
        double d2 = 0.0;
        for (auto c : channels) {
          const double e = samples[a](f, c) - samples[b](f, c);
          d2 += e * e;
        }
        pair_sum += std::sqrt(d2);
        ++pairs;
      }
    total += pair_sum / double(pairs);
  }
  return total / double(frames);
}

double rpcc(const Sequence& pred, const Sequence& gt, const Sequence& partner, const Channels& channels,
            const SegmentSet& segments) {
  check_pair(pred, gt);
  check_pair(pred, partner);
  check_segments(pred, segments);
  if (channels.empty()) return 0.0;
  double total = 0.0;
  for (auto c : channels) {
    std::vector<double> p, g, q;
    for (const auto& s : segments)
      for (std::size_t f = s.start; f < s.end; ++f) {
        p.push_back(pred(f, c));
        g.push_back(gt(f, c));
        q.push_back(partner(f, c));
      }
    if (p.size() < 2) continue;
    total += std::abs(pcc(p, q) - pcc(g, q));
  }
  return total / double(channels.size());
}

double lve_analogue(const Sequence& pred, const Sequence& gt, const Channels& jaw, const SegmentSet& speaking) {
  check_pair(pred, gt);
  check_segments(pred, speaking);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : speaking)
    for (std::size_t f = s.start; f < s.end; ++f) {
      double d2 = 0.0;
      for (auto c : jaw) d2 += (pred(f, c) - gt(f, c)) * (pred(f, c) - gt(f, c));
      total += std::sqrt(d2);
      ++n;
    }
  return n ? total / double(n) : 0.0;
}

double mhd_analogue(const Sequence& pred, const Sequence& gt) {
  check_pair(pred, gt);
  double total = 0.0;
  for (std::size_t f = 0; f < pred.rows(); ++f) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < pred.cols(); ++c) d2 += (pred(f, c) - gt(f, c)) * (pred(f, c) - gt(f, c));
    total += std::sqrt(d2);
  }
  return total / double(pred.rows());
}

}  // namespace dyadflow::metrics
