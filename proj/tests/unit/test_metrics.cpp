#include <cmath>
#include <random>

#include "doctest.h"
#include "dyadflow/metrics/metrics.hpp"

using namespace dyadflow;
using namespace dyadflow::metrics;

namespace {

Sequence random_seq(std::size_t frames, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Sequence s(diff::Shape{frames, d});
  for (auto& v : s.values()) v = nd(rng);
  return s;
}

GaussianFit fit1(double mean, double var) {
  GaussianFit g;
  g.mean = {mean};
  g.cov = Array<double>(diff::Shape{1, 1}, var);
  return g;
}

}  // namespace

TEST_CASE("vad segmentation") {
  const std::vector<std::uint8_t> zeros(6, 0), ones(6, 1);
  auto all_listen = vad_segments(zeros, ones);
  REQUIRE(all_listen.size() == 1);
  CHECK(all_listen[0] == Segment{0, 6, SegmentKind::listening});
  CHECK(vad_segments(zeros, zeros).empty());

  const std::vector<std::uint8_t> actor{1, 0, 1, 0, 0, 1}, partner{0, 1, 0, 1, 1, 1};
  const auto s = vad_segments(actor, partner);
  const SegmentSet expect{{0, 1, SegmentKind::speaking}, {1, 2, SegmentKind::listening},
                          {2, 3, SegmentKind::speaking}, {3, 5, SegmentKind::listening},
                          {5, 6, SegmentKind::speaking}};
  CHECK(s == expect);
  CHECK(filter(s, SegmentKind::listening).size() == 2);
  CHECK_THROWS_AS(vad_segments(actor, zeros.size() == 6 ? std::vector<std::uint8_t>(5) : zeros), DimensionError);
}

TEST_CASE("dynamic deviation") {
  std::mt19937_64 rng(3);
  const auto gt = random_seq(40, 3, rng);
  const Channels ch{0, 1, 2};
  const auto segs = whole(40);
  CHECK(dynamic_deviation(gt, gt, ch, segs) == 0.0);

  Sequence flat(diff::Shape{9, 1}, 0.5), alt(diff::Shape{9, 1});
  double x = 0.0;
  for (std::size_t f = 0; f < 9; ++f) {
    alt(f, 0) = x;
    x += f % 2 == 0 ? 1.0 : -1.0;
  }
  CHECK(std::abs(dynamic_deviation(flat, alt, {0}, whole(9)) - 1.0) < 1e-12);
  CHECK(dynamic_deviation(flat, alt, {0}, whole(9)) == dynamic_deviation(alt, flat, {0}, whole(9)));

  const auto pred = random_seq(40, 3, rng);
  auto p2 = pred, g2 = gt;
  for (std::size_t f = 0; f < 40; ++f)
    for (std::size_t c = 0; c < 3; ++c) {
      p2(f, c) += 2.0 * c + 1.0;
      g2(f, c) += 2.0 * c + 1.0;
    }
  CHECK(std::abs(dynamic_deviation(p2, g2, ch, segs) - dynamic_deviation(pred, gt, ch, segs)) < 1e-12);
}

TEST_CASE("velocities never bridge segment gaps") {
  Sequence s(diff::Shape{6, 1}, std::vector<double>{0, 0, 0, 100, 100, 100});
  const SegmentSet segs{{0, 3, SegmentKind::listening}, {3, 6, SegmentKind::listening}};
  CHECK(velocity_std({s}, {0}, {segs}) == 0.0);
}

TEST_CASE("frechet distance closed forms") {
  CHECK(frechet_distance(fit1(0, 1), fit1(0, 1)) == 0.0);
  CHECK(std::abs(frechet_distance(fit1(0, 1), fit1(1, 1)) - 1.0) < 1e-8);
  CHECK(std::abs(frechet_distance(fit1(0, 1), fit1(0, 4)) - 1.0) < 1e-8);

  // diagonal covariances reduce to per-dimension 1-D forms
  GaussianFit a, b;
  a.mean = {0.5, -1.0, 2.0};
  b.mean = {0.0, 1.0, 2.5};
  a.cov = Array<double>(diff::Shape{3, 3});
  b.cov = Array<double>(diff::Shape{3, 3});
  const double va[] = {1.0, 2.0, 0.25}, vb[] = {4.0, 0.5, 0.25};
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    a.cov(i, i) = va[i];
    b.cov(i, i) = vb[i];
    expect += std::pow(a.mean[i] - b.mean[i], 2) + std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
  }
  CHECK(std::abs(frechet_distance(a, b) - expect) < 1e-8);
  CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-10);
  CHECK_THROWS_AS(frechet_distance(a, fit1(0, 1)), DimensionError);
}

TEST_CASE("gaussian fit is unbiased and fd is zero on identical data") {
  Array<double> rows(diff::Shape{4, 1}, std::vector<double>{1, 2, 3, 4});
  const auto g = fit_gaussian(rows);
  CHECK(g.mean[0] == 2.5);
  CHECK(std::abs(g.cov(0, 0) - 5.0 / 3.0) < 1e-12);
  std::mt19937_64 rng(5);
  std::vector<Sequence> seqs{random_seq(30, 4, rng), random_seq(30, 4, rng)};
  const std::vector<SegmentSet> segs{whole(30), whole(30)};
  CHECK(fd(seqs, seqs, {0, 1, 2, 3}, segs) < 1e-8);
  CHECK(fd(seqs, {random_seq(30, 4, rng), random_seq(30, 4, rng)}, {0, 1, 2, 3}, segs) > 0.0);
  std::vector<Sequence> partner{random_seq(30, 4, rng), random_seq(30, 4, rng)};
  CHECK(paired_fd(seqs, partner, seqs, {0, 1}, segs) < 1e-8);
}

TEST_CASE("mse, diversity and correlation") {
  std::mt19937_64 rng(9);
  const auto a = random_seq(20, 3, rng);
  CHECK(mse({a}, {a}, {0, 1, 2}, {whole(20)}) == 0.0);

  std::vector<Sequence> same(3, a);
  CHECK(sid_diversity(same, {0, 1, 2}) == 0.0);
  auto shifted = a;
  for (std::size_t f = 0; f < 20; ++f) shifted(f, 1) += 0.7;
  CHECK(std::abs(sid_diversity({a, shifted}, {0, 1, 2}) - 0.7) < 1e-12);
  const auto b = random_seq(20, 3, rng), c = random_seq(20, 3, rng);
  CHECK(std::abs(sid_diversity({a, b, c}, {0, 1, 2}) - sid_diversity({c, a, b}, {0, 1, 2})) < 1e-12);

  // gt tracks the partner exactly; pred is orthogonal to it
  const std::size_t n = 64;
  Sequence partner(diff::Shape{n, 1}), gt(diff::Shape{n, 1}), pred(diff::Shape{n, 1});
  for (std::size_t f = 0; f < n; ++f) {
    partner(f, 0) = std::sin(2.0 * M_PI * f / double(n));
    gt(f, 0) = partner(f, 0);
    pred(f, 0) = std::cos(2.0 * M_PI * f / double(n));
  }
  CHECK(rpcc(gt, gt, partner, {0}, whole(n)) == 0.0);
  CHECK(std::abs(rpcc(pred, gt, partner, {0}, whole(n)) - 1.0) < 1e-9);
  auto flipped = gt;
  for (auto& v : flipped.values()) v = -v;
  CHECK(std::abs(rpcc(flipped, gt, partner, {0}, whole(n)) - 2.0) < 1e-9);
}

TEST_CASE("lve and mhd analogues") {
  Sequence pred(diff::Shape{1, 2}, 0.0), gt(diff::Shape{1, 2}, std::vector<double>{3.0, 4.0});
  CHECK(std::abs(lve_analogue(pred, gt, {0, 1}, whole(1)) - 5.0) < 1e-12);
  CHECK(lve_analogue(gt, gt, {0, 1}, whole(1)) == 0.0);
  CHECK(mhd_analogue(gt, gt) == 0.0);

  std::mt19937_64 rng(2);
  const auto p = random_seq(10, 3, rng), g = random_seq(10, 3, rng);
  Sequence pr(p.shape()), gr(g.shape());
  for (std::size_t f = 0; f < 10; ++f)
    for (std::size_t c = 0; c < 3; ++c) {
      pr(9 - f, c) = p(f, c);
      gr(9 - f, c) = g(f, c);
    }
  CHECK(std::abs(mhd_analogue(p, g) - mhd_analogue(pr, gr)) < 1e-12);
}

TEST_CASE("listening metrics ignore speaking-frame perturbations") {
  std::mt19937_64 rng(4);
  const auto gt = random_seq(30, 2, rng);
  auto pred = random_seq(30, 2, rng);
  const SegmentSet listen{{5, 15, SegmentKind::listening}};
  const double fdd = dynamic_deviation(pred, gt, {0, 1}, listen);
  const double m = mse({pred}, {gt}, {0, 1}, {listen});
  for (std::size_t f = 20; f < 30; ++f) pred(f, 0) += 50.0;
  CHECK(dynamic_deviation(pred, gt, {0, 1}, listen) == fdd);
  CHECK(mse({pred}, {gt}, {0, 1}, {listen}) == m);
}

TEST_CASE("metrics are nonnegative on random inputs") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_seq(16, 3, rng), g = random_seq(16, 3, rng), q = random_seq(16, 3, rng);
    const Channels ch{0, 1, 2};
    CHECK(dynamic_deviation(p, g, ch, whole(16)) >= 0.0);
    CHECK(fd({p}, {g}, ch, {whole(16)}) >= 0.0);
    CHECK(rpcc(p, g, q, ch, whole(16)) >= 0.0);
    CHECK(sid_diversity({p, g}, ch) >= 0.0);
  }
}
