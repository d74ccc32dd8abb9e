#include <cmath>
#include <random>

#include "doctest.h"
#include "dyadflow/diff/gradcheck.hpp"
#include "dyadflow/flow/flow.hpp"

using namespace dyadflow;
using namespace dyadflow::flow;
using diff::Shape;

namespace {

FlowConfig tiny_config() {
  FlowConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 8;
  c.ffn_mult = 2;
  c.time_dim = 4;
  return c;
}

template <typename T>
Array<T> random_array(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Array<T> a(std::move(shape));
  for (auto& v : a.values()) v = static_cast<T>(nd(rng));
  return a;
}

template <typename T>
FlowContext<T> random_context(std::size_t frames, std::size_t rate, std::size_t dv, std::size_t da,
                              std::uint64_t seed) {
  FlowContext<T> ctx;
  ctx.text_token = 1;
  ctx.actor_audio = random_array<T>(Shape{frames, da}, seed);
  ctx.partner_audio = random_array<T>(Shape{frames, da}, seed + 1);
  ctx.partner_latents = random_array<T>(Shape{(frames + rate - 1) / rate, dv}, seed + 2);
  ctx.actor_vad.assign(frames, 0);
  return ctx;
}

template <typename T>
FlowModel<T> tiny_model(std::uint64_t seed = 1, bool text_global = false) {
  auto c = tiny_config();
  c.text_global = text_global;
  return FlowModel<T>(c, 3, 2, 3, 4, seed);
}

}  // namespace

TEST_CASE("timestamps follow the shared frame timeline") {
  CHECK(motion_timestamp(0, 8) == 4);
  CHECK(motion_timestamp(2, 8) == 20);
  CHECK(motion_timestamp(7, 1) == 7);
  const auto ts = assign_timestamps(200, 25, 8);
  REQUIRE(ts.size() == 426);
  CHECK(ts[0] == 0);
  CHECK(ts[1 + 5] == 5);                 // partner audio i=5
  CHECK(ts[1 + 200] == 4);               // partner motion j=0
  CHECK(ts[1 + 200 + 2] == 20);          // partner motion j=2
  CHECK(ts[1 + 200 + 25 + 5] == 5);      // actor audio i=5
  CHECK(prefix_length(200, 8) == 426);
}

TEST_CASE("motion and audio tokens at the same instant share rotary phases") {
  // rope of a token depends only on its timestamp, so equal stamps give
  // identical rotations of identical content
  const std::size_t r = 8;
  for (std::size_t j = 0; j < 25; ++j) {
    const long tm = motion_timestamp(j, r);
    const long ta = long(j * r + r / 2);
    CHECK(tm == ta);
    diff::Tape<double> tape(false);
    auto x = tape.constant(random_array<double>(Shape{2, 8}, j));
    Array<double> same(Shape{2, 8});
    for (std::size_t c = 0; c < 8; ++c) same(0, c) = same(1, c) = x.value()(0, c);
    auto rot = diff::ops::rope(tape.constant(same), {tm, ta}, 2);
    for (std::size_t c = 0; c < 8; ++c) CHECK(rot.value()(0, c) == rot.value()(1, c));
  }
}

TEST_CASE("prefix assembly") {
  auto model = tiny_model<double>();
  const auto ctx = random_context<double>(12, 4, 3, 2, 5);
  diff::Tape<double> tape(false);
  nn::Weights<double> w(tape, model.params());
  auto p = model.build_prefix(w, ctx, Dropout::none());
  CHECK(p.tokens.value().rows() == prefix_length(12, 4));
  CHECK(p.timestamps.size() == p.tokens.value().rows());
  auto p2 = model.build_prefix(w, ctx, Dropout::none());
  CHECK(p.tokens.value() == p2.tokens.value());

  // all modalities dropped: every token is its null row plus the role row
  auto nul = model.build_prefix(w, ctx, Dropout::all());
  const auto v = nul.tokens.value();
  const auto& role = model.params().value("role");
  const auto& null_pa = model.params().value("null.partner_audio");
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(v(0, c) == model.params().value("null.text")(0, c) + role(0, c));
    CHECK(v(1, c) == null_pa(0, c) + role(1, c));
    CHECK(v(12, c) == null_pa(0, c) + role(1, c));
  }
  auto other = random_context<double>(12, 4, 3, 2, 99);
  other.text_token = 2;
  CHECK(model.build_prefix(w, other, Dropout::all()).tokens.value() == v);

  auto bad = ctx;
  bad.actor_vad.pop_back();
  CHECK_THROWS_AS(model.build_prefix(w, bad, Dropout::none()), ContractError);
}

TEST_CASE("flow time outside [0,1] is rejected") {
  auto model = tiny_model<double>();
  const auto ctx = random_context<double>(12, 4, 3, 2, 5);
  diff::Tape<double> tape(false);
  nn::Weights<double> w(tape, model.params());
  const auto x = random_array<double>(Shape{1, 3}, 1);
  CHECK_THROWS_AS(model.velocity(w, ctx, Dropout::none(), nullptr, x, {1.5}), ContractError);
  CHECK_THROWS_AS(model.velocity(w, ctx, Dropout::none(), nullptr, x, {-0.1}), ContractError);
}

TEST_CASE("flow targets") {
  const auto clean = random_array<double>(Shape{4, 3}, 1);
  const auto noise = random_array<double>(Shape{4, 3}, 2);
  const auto ft = make_flow_targets(clean, noise, std::vector<double>{0.0, 1.0, 0.5, 0.25});
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(ft.state(0, k) == noise(0, k));
    CHECK(ft.state(1, k) == clean(1, k));
    CHECK(ft.target(2, k) == clean(2, k) - noise(2, k));
  }
  // the oracle velocity has zero loss
  diff::Tape<double> tape(false);
  auto tgt = tape.constant(ft.target);
  CHECK(diff::ops::mse(tgt, tgt).value().item() == 0.0);
}

TEST_CASE("zero velocity loss matches 1 + E|m|^2 / D_v") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  const std::size_t n = 20000, dv = 4;
  const auto clean = random_array<double>(Shape{1, dv}, 9, 0.7);
  double norm2 = 0.0;
  for (double v : clean.values()) norm2 += v * v;
  double acc = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    Array<double> noise(Shape{1, dv});
    for (auto& v : noise.values()) v = nd(rng);
    const auto ft = make_flow_targets(clean, noise, std::vector<double>{0.3});
    for (double v : ft.target.values()) acc += v * v / double(dv);
  }
  CHECK(std::abs(acc / double(n) - (1.0 + norm2 / double(dv))) < 0.03);
}

TEST_CASE("loss is invariant to batch order") {
  auto model = tiny_model<double>();
  std::vector<double> losses;
  for (int i = 0; i < 3; ++i) {
    const auto ctx = random_context<double>(12, 4, 3, 2, 10 + i);
    diff::Tape<double> tape(false);
    nn::Weights<double> w(tape, model.params());
    losses.push_back(model
                         .flow_loss(w, ctx, Dropout::none(), random_array<double>(Shape{3, 3}, 20 + i),
                                    random_array<double>(Shape{3, 3}, 30 + i), {0.2, 0.5, 0.9})
                         .value()
                         .item());
  }
  const double fwd = (losses[0] + losses[1] + losses[2]) / 3.0;
  const double rev = (losses[2] + losses[1] + losses[0]) / 3.0;
  CHECK(fwd == doctest::Approx(rev).epsilon(1e-15));
}

TEST_CASE("explicit history replaces the teacher-forced one") {
  auto model = tiny_model<double>();
  const auto ctx = random_context<double>(12, 4, 3, 2, 3);
  const auto clean = random_array<double>(Shape{3, 3}, 4);
  const auto noise = random_array<double>(Shape{3, 3}, 5);
  const std::vector<double> t{0.2, 0.5, 0.9};
  auto loss = [&](const Array<double>* history) {
    diff::Tape<double> tape(false);
    nn::Weights<double> w(tape, model.params());
    return model.flow_loss(w, ctx, Dropout::none(), clean, noise, t, history).value().item();
  };
  const Array<double> same(Shape{2, 3}, std::vector<double>(clean.values().begin(), clean.values().begin() + 6));
  CHECK(loss(&same) == loss(nullptr));
  auto shifted = same;
  for (auto& v : shifted.values()) v += 0.5;
  CHECK(loss(&shifted) != loss(nullptr));
  const Array<double> wrong(Shape{3, 3});
  CHECK_THROWS_AS(loss(&wrong), DimensionError);
}

TEST_CASE("velocity of token l ignores later tokens") {
  auto model = tiny_model<double>();
  const auto ctx = random_context<double>(16, 4, 3, 2, 7);
  auto hist = random_array<double>(Shape{3, 3}, 8);
  auto noisy = random_array<double>(Shape{4, 3}, 9);
  const std::vector<double> t{0.1, 0.4, 0.6, 0.8};
  diff::Tape<double> tape(false);
  nn::Weights<double> w(tape, model.params());
  const auto base = model.velocity(w, ctx, Dropout::none(), &hist, noisy, t).value();
  for (std::size_t lp = 1; lp < 4; ++lp) {
    auto h2 = hist;
    auto n2 = noisy;
    for (std::size_t k = 0; k < 3; ++k) {
      if (lp < 3) h2(lp, k) += 5.0;
      n2(lp, k) -= 3.0;
    }
    const auto v = model.velocity(w, ctx, Dropout::none(), &h2, n2, t).value();
    for (std::size_t l = 0; l < lp; ++l)
      for (std::size_t k = 0; k < 3; ++k) CHECK(v(l, k) == base(l, k));
  }
}

TEST_CASE("cached session reproduces the full pass bit for bit") {
  for (bool global : {false, true})
    for (bool drop_text : {false, true}) {
      CAPTURE(global);
      CAPTURE(drop_text);
      auto model = tiny_model<float>(3, global);
      const auto ctx = random_context<float>(16, 4, 3, 2, 11);
      Dropout drop;
      drop.text = drop_text;
      const auto clean = random_array<float>(Shape{4, 3}, 12);
      const auto noisy = random_array<float>(Shape{4, 3}, 13);
      const std::vector<float> t{0.0f, 0.25f, 0.5f, 0.75f};
      Array<float> hist(Shape{3, 3}, std::vector<float>(clean.values().begin(), clean.values().begin() + 9));
      diff::Tape<float> tape(false);
      nn::Weights<float> w(tape, model.params());
      const auto full = model.velocity(w, ctx, drop, &hist, noisy, t).value();

      FlowSession<float> session(model, ctx, drop);
      for (std::size_t l = 0; l < 4; ++l) {
        Array<float> row(Shape{1, 3},
                         std::vector<float>(noisy.values().begin() + 3 * l, noisy.values().begin() + 3 * l + 3));
        const auto v = session.velocity(row, t[l]);
        for (std::size_t k = 0; k < 3; ++k) CHECK(v(0, k) == full(l, k));
        session.append(Array<float>(Shape{1, 3}, std::vector<float>(clean.values().begin() + 3 * l,
                                                                      clean.values().begin() + 3 * l + 3)));
      }
      CHECK(session.cached_tokens() == prefix_length(16, 4) + 4);
    }
}

TEST_CASE("global text conditioning reaches the motion tokens directly") {
  // Zeroed value projections: attention carries nothing, so only a direct path can.
  auto c = tiny_config();
  const auto ctx = random_context<double>(8, 4, 3, 2, 21);
  auto other = ctx;
  other.text_token = 2;
  const auto noisy = random_array<double>(Shape{2, 3}, 22);
  auto hist = random_array<double>(Shape{1, 3}, 23);
  for (bool global : {false, true}) {
    c.text_global = global;
    FlowModel<double> model(c, 3, 2, 3, 4, 9);
    for (auto& e : model.params().entries())
      if (e.name.ends_with(".v.w"))
        for (auto& v : e.value.values()) v = 0.0;
    diff::Tape<double> tape(false);
    nn::Weights<double> w(tape, model.params());
    const auto a = model.velocity(w, ctx, Dropout::none(), &hist, noisy, {0.2, 0.6}).value();
    const auto b = model.velocity(w, other, Dropout::none(), &hist, noisy, {0.2, 0.6}).value();
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a.values()[i] - b.values()[i]);
    if (global)
      CHECK(diff > 1e-6);
    else
      CHECK(diff == 0.0);
  }
}

TEST_CASE("flow loss gradient matches finite differences") {
  auto model = tiny_model<double>(5);
  {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto& e : model.params().entries())
      for (auto& v : e.value.values()) v += nd(rng);
  }
  const auto ctx = random_context<double>(8, 4, 3, 2, 14);
  const auto clean = random_array<double>(Shape{2, 3}, 15);
  const auto noise = random_array<double>(Shape{2, 3}, 16);
  Dropout drop;
  drop.partner_motion = true;  // exercise one null embedding too
  const double err = diff::finite_diff_check_params(
      model.params(),
      [&](diff::Tape<double>& tape, diff::ParamStore<double>& store) {
        nn::Weights<double> w(tape, store);
        return model.flow_loss(w, ctx, drop, clean, noise, {0.3, 0.7});
      },
      1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("flow loss gradient with global text conditioning") {
  auto model = tiny_model<double>(5, true);
  {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto& e : model.params().entries())
      for (auto& v : e.value.values()) v += nd(rng);
  }
  const auto ctx = random_context<double>(8, 4, 3, 2, 17);
  const auto clean = random_array<double>(Shape{2, 3}, 18);
  const auto noise = random_array<double>(Shape{2, 3}, 19);
  for (bool drop_text : {false, true}) {
    Dropout drop;
    drop.text = drop_text;
    const double err = diff::finite_diff_check_params(
        model.params(),
        [&](diff::Tape<double>& tape, diff::ParamStore<double>& store) {
          nn::Weights<double> w(tape, store);
          return model.flow_loss(w, ctx, drop, clean, noise, {0.3, 0.7});
        },
        1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("without dropout the null embeddings stay at init") {
  auto cfg = tiny_config();
  cfg.p_drop = 0.0;
  cfg.epochs = 2;
  cfg.batch = 2;
  FlowModel<double> model(cfg, 3, 2, 3, 4, 8);
  const auto before = model.params().value("null.text");
  std::vector<FlowExample<double>> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back({random_context<double>(8, 4, 3, 2, 40 + i), random_array<double>(Shape{2, 3}, 50 + i)});
  std::vector<double> losses;
  train_flow(model, corpus, 1, [&](const FlowTrainLog& l) { losses.push_back(l.loss); });
  CHECK(losses.size() == 2);
  CHECK(model.params().value("null.text") == before);
  CHECK(model.params().value("null.actor_audio").all_finite());
  CHECK_FALSE(model.params().value("text.embed") == FlowModel<double>(cfg, 3, 2, 3, 4, 8).params().value("text.embed"));
}

TEST_CASE("training reduces the flow loss") {
  auto cfg = tiny_config();
  cfg.epochs = 40;
  cfg.batch = 4;
  cfg.lr = 1e-2;
  FlowModel<double> model(cfg, 3, 2, 3, 4, 2);
  std::vector<FlowExample<double>> corpus;
  for (int i = 0; i < 8; ++i) {
    Array<double> lat(Shape{2, 3});
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t k = 0; k < 3; ++k) lat(l, k) = 1.5 * std::sin(double(i) + double(l) + 2.0 * double(k));
    corpus.push_back({random_context<double>(8, 4, 3, 2, 60 + i), lat});
  }
  std::vector<double> losses;
  train_flow(model, corpus, 2, [&](const FlowTrainLog& l) { losses.push_back(l.loss); });
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) first += losses[i], last += losses[losses.size() - 1 - i];
  CHECK(last < 0.8 * first);
}
