#include <cmath>
#include <random>

#include "doctest.h"
#include "dyadflow/rng.hpp"
#include "dyadflow/sampling/sampler.hpp"

using namespace dyadflow;
using namespace dyadflow::sampling;
using diff::Shape;
using flow::FlowContext;
using flow::FlowModel;

namespace {

template <typename T>
Array<T> random_array(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Array<T> a(std::move(shape));
  for (auto& v : a.values()) v = static_cast<T>(nd(rng));
  return a;
}

constexpr std::size_t kRate = 4, kDv = 3, kDa = 2;

template <typename T>
FlowModel<T> tiny_model(std::uint64_t seed = 1) {
  flow::FlowConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 8;
  c.ffn_mult = 2;
  c.time_dim = 4;
  return FlowModel<T>(c, kDv, kDa, 3, kRate, seed);
}

template <typename T>
FlowContext<T> context(std::size_t frames, std::uint64_t seed) {
  FlowContext<T> ctx;
  ctx.text_token = 1;
  ctx.actor_audio = random_array<T>(Shape{frames, kDa}, seed);
  ctx.partner_audio = random_array<T>(Shape{frames, kDa}, seed + 1);
  ctx.partner_latents = random_array<T>(Shape{(frames + kRate - 1) / kRate, kDv}, seed + 2);
  ctx.actor_vad.assign(frames, 0);
  return ctx;
}

template <typename T>
FlowContext<T> slice_context(const FlowContext<T>& full, std::size_t f0, std::size_t f1) {
  FlowContext<T> c;
  c.text_token = full.text_token;
  auto rows = [](const Array<T>& a, std::size_t b, std::size_t e) {
    Array<T> out(Shape{e - b, a.cols()});
    std::copy(a.data() + b * a.cols(), a.data() + e * a.cols(), out.data());
    return out;
  };
  c.actor_audio = rows(full.actor_audio, f0, f1);
  c.partner_audio = rows(full.partner_audio, f0, f1);
  c.partner_latents = rows(full.partner_latents, f0 / kRate, (f1 + kRate - 1) / kRate);
  c.actor_vad.assign(full.actor_vad.begin() + f0, full.actor_vad.begin() + f1);
  return c;
}

}  // namespace

TEST_CASE("euler steps") {
  const auto zero = Array<double>(Shape{1, 2});
  const auto c = Array<double>::matrix(1, 2, {0.3, -1.7});
  SUBCASE("constant velocity telescopes to c") {
    auto s = zero;
    for (int i = 0; i < 8; ++i) s = ode_step(s, c, 1.0 / 8);
    CHECK(s[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(-1.7).epsilon(1e-12));
  }
  SUBCASE("zero step leaves the state alone") {
    const auto s = ode_step(c, c, 0.0);
    CHECK(s.storage() == c.storage());
  }
  SUBCASE("v(t)=t over two steps") {
    Array<double> s = Array<double>::scalar(0.0);
    for (int k = 0; k < 2; ++k) s = ode_step(s, Array<double>::scalar(0.5 * k), 0.5);
    CHECK(std::abs(s[0] - 0.25) < 1e-12);
  }
}

TEST_CASE("sde step") {
  const auto x = Array<double>::matrix(1, 3, {0.1, 0.2, 0.3});
  const auto v = Array<double>::matrix(1, 3, {1.0, -2.0, 0.5});
  const auto eps = Array<double>::matrix(1, 3, {1.0, 0.0, -1.0});
  SUBCASE("sigma 0 is the ode step") { CHECK(sde_step(x, v, 0.25, 0.0, eps).storage() == ode_step(x, v, 0.25).storage()); }
  SUBCASE("noise coefficient sigma sqrt(dt)") {
    const auto zero_v = Array<double>(Shape{1, 3});
    const auto out = sde_step(x, zero_v, 0.25, 0.5, eps);
    CHECK(std::abs((out[0] - x[0]) - 0.25) < 1e-12);
    CHECK(std::abs((out[2] - x[2]) + 0.25) < 1e-12);
  }
  SUBCASE("negative sigma") { CHECK_THROWS_AS(sde_step(x, v, 0.25, -0.1, eps), ConfigError); }
  SUBCASE("replay reproduces the post state") {
    CHECK(sde_step(x, v, 0.25, 0.5, eps).storage() == sde_step(x, v, 0.25, 0.5, eps).storage());
  }
}

TEST_CASE("sde with zero drift has variance sigma^2 at t=1") {
  const double sigma = 0.5;
  const std::size_t draws = 20000, steps = 4;
  auto rng = make_stream(3, 0, "test");
  std::normal_distribution<double> nd;
  const auto zero = Array<double>::scalar(0.0);
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    auto s = Array<double>::scalar(0.0);
    for (std::size_t k = 0; k < steps; ++k) s = sde_step(s, zero, 1.0 / steps, sigma, Array<double>::scalar(nd(rng)));
    sum += s[0];
    sq += s[0] * s[0];
  }
  const double mean = sum / draws, var = sq / draws - mean * mean;
  CHECK(std::abs(var - sigma * sigma) < 0.05 * sigma * sigma);
}

TEST_CASE("cfg combination") {
  const auto u = Array<double>::matrix(1, 2, {0.3, -0.1});
  const auto c = Array<double>::matrix(1, 2, {0.7, 0.9});
  CHECK(cfg_velocity(u, c, 1.0).storage() == c.storage());
  CHECK(cfg_velocity(u, c, 0.0).storage() == u.storage());
  CHECK(cfg_velocity(Array<double>::scalar(0.0), Array<double>::scalar(1.0), 2.0)[0] == 2.0);
  // affine in omega
  const auto a = cfg_velocity(u, c, 0.5), b = cfg_velocity(u, c, 1.5), m = cfg_velocity(u, c, 2.5);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs((m[i] - b[i]) - (b[i] - a[i])) < 1e-12);
}

TEST_CASE("token vad uses the majority with ties listening") {
  const std::vector<std::uint8_t> vad{1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 1};
  CHECK(token_speaking(vad, 0, 4));
  CHECK_FALSE(token_speaking(vad, 1, 4));
  CHECK_FALSE(token_speaking(vad, 2, 4));
  SamplerConfig c;
  c.cfg_speak = 2.0;
  c.cfg_listen = 3.0;
  CHECK(token_omega(c, vad, 0, 4) == 2.0);
  CHECK(token_omega(c, vad, 1, 4) == 3.0);
}

TEST_CASE("sampler config validation") {
  SamplerConfig c;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.steps = 4;
  c.sigma = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_mode("sde") == Mode::sde);
  CHECK_THROWS_AS(parse_mode("euler"), ConfigError);
}

TEST_CASE("generation is deterministic and replayable") {
  const auto model = tiny_model<float>();
  const auto ctx = context<float>(20, 5);
  SamplerConfig c;
  c.steps = 3;
  c.seed = 9;
  const auto a = generate_sequence(model, ctx, 5, c);
  const auto b = generate_sequence(model, ctx, 5, c);
  CHECK(a.latents.storage() == b.latents.storage());
  CHECK(replay_matches(a));
  for (const auto& tok : a.tokens)
    for (const auto& s : tok)
      for (float e : s.noise.values()) CHECK(e == 0.0f);

  c.mode = Mode::sde;
  const auto s1 = generate_sequence(model, ctx, 5, c);
  const auto s2 = generate_sequence(model, ctx, 5, c);
  CHECK(s1.latents.storage() == s2.latents.storage());
  CHECK(replay_matches(s1));
  CHECK(s1.latents.storage() != a.latents.storage());
  c.seed = 10;
  CHECK(generate_sequence(model, ctx, 5, c).latents.storage() != s1.latents.storage());

  SUBCASE("zero sigma sde is bit-identical to ode") {
    c.seed = 9;
    c.sigma = 0.0;
    CHECK(generate_sequence(model, ctx, 5, c).latents.storage() == a.latents.storage());
  }
}

TEST_CASE("each token's history is the previously generated latents") {
  const auto model = tiny_model<double>();
  const auto ctx = context<double>(12, 6);
  SamplerConfig c;
  c.steps = 2;
  c.seed = 4;
  const auto trace = generate_sequence(model, ctx, 3, c);
  // teacher-forced velocity of token 2's first step with the generated history
  Array<double> hist(Shape{2, kDv}), noisy(Shape{3, kDv});
  std::copy(trace.latents.data(), trace.latents.data() + 2 * kDv, hist.data());
  for (std::size_t l = 0; l < 3; ++l)
    std::copy(trace.tokens[l][0].pre.data(), trace.tokens[l][0].pre.data() + kDv, noisy.data() + l * kDv);
  diff::Tape<double> tape(false);
  nn::Weights<double> w(tape, model.params());
  const auto v = model.velocity(w, ctx, flow::Dropout::none(), &hist, noisy, {0.0, 0.0, 0.0}).value();
  for (std::size_t d = 0; d < kDv; ++d) CHECK(v(2, d) == trace.tokens[2][0].velocity[d]);
}

TEST_CASE("listen weight leaves speaking tokens alone") {
  const auto model = tiny_model<float>(3);
  auto ctx = context<float>(24, 8);
  // tokens 0..2 speaking, 3..5 listening
  for (std::size_t f = 0; f < 12; ++f) ctx.actor_vad[f] = 1;
  SamplerConfig c;
  c.steps = 2;
  c.mode = Mode::sde;
  c.seed = 1;
  c.cfg_speak = 1.5;
  const auto base = generate_sequence(model, ctx, 6, c);
  for (double w : {0.5, 2.0, 4.0}) {
    c.cfg_listen = w;
    const auto other = generate_sequence(model, ctx, 6, c);
    CHECK(std::equal(base.latents.data(), base.latents.data() + 3 * kDv, other.latents.data()));
    CHECK_FALSE(std::equal(base.latents.data() + 3 * kDv, base.latents.data() + 6 * kDv, other.latents.data() + 3 * kDv));
  }
}

TEST_CASE("sliding window") {
  const auto model = tiny_model<float>(2);
  const std::size_t W = 5;
  SamplerConfig c;
  c.steps = 2;
  c.seed = 12;
  const auto decode = [](const Array<float>& lat, std::size_t frames) {
    Array<float> m(Shape{frames, kDv});
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t d = 0; d < kDv; ++d) m(f, d) = lat(f / kRate, d);
    return m;
  };

  SUBCASE("one window equals plain generation") {
    const auto ctx = context<float>(W * kRate, 3);
    const auto slicer = [&](std::size_t a, std::size_t b) { return slice_context(ctx, a, b); };
    const auto win = sliding_window_generate<float>(model, slicer, W * kRate, W, 1, c, decode);
    SamplerConfig wc = c;
    wc.seed = stream_seed(c.seed, 0, "sampler/window");
    const auto plain = generate_sequence(model, ctx, W, wc);
    CHECK(win.windows == 1);
    CHECK(win.latents.storage() == plain.latents.storage());
    CHECK(win.motion.rows() == W * kRate);
  }

  SUBCASE("carry-over and bounded caches") {
    const std::size_t frames = 2 * W * kRate + 3;
    const auto ctx = context<float>(frames, 4);
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    const auto slicer = [&](std::size_t a, std::size_t b) {
      spans.emplace_back(a, b);
      return slice_context(ctx, a, b);
    };
    const auto win = sliding_window_generate<float>(model, slicer, frames, W, 1, c, decode);
    const std::size_t tokens = (frames + kRate - 1) / kRate;
    CHECK(win.latents.rows() == tokens);
    CHECK(win.motion.rows() == frames);
    REQUIRE(spans.size() >= 2);
    // second window starts at the carried token
    CHECK(spans[1].first == (W - 1) * kRate);
    CHECK(win.windows == 1 + (tokens - W + (W - 2)) / (W - 1));
    for (std::size_t b : win.cache_bytes) CHECK(b <= win.cache_bytes.front());
    // stitched motion comes from each token exactly once
    for (std::size_t f = 0; f < frames; ++f) CHECK(win.motion(f, 0) == win.latents(f / kRate, 0));
  }

  SUBCASE("longer runs do not grow the cache") {
    const auto short_ctx = context<float>(3 * W * kRate, 5);
    const auto long_ctx = context<float>(8 * W * kRate, 5);
    const auto a = sliding_window_generate<float>(
        model, [&](std::size_t x, std::size_t y) { return slice_context(short_ctx, x, y); }, 3 * W * kRate, W, 1, c);
    const auto b = sliding_window_generate<float>(
        model, [&](std::size_t x, std::size_t y) { return slice_context(long_ctx, x, y); }, 8 * W * kRate, W, 1, c);
    CHECK(*std::max_element(a.cache_bytes.begin(), a.cache_bytes.end()) ==
          *std::max_element(b.cache_bytes.begin(), b.cache_bytes.end()));
  }
}
