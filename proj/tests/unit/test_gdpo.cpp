#include <cmath>
#include <random>

#include "doctest.h"
#include "dyadflow/diff/gradcheck.hpp"
#include "dyadflow/rl/gdpo.hpp"
#include "json.hpp"

using namespace dyadflow;
using namespace dyadflow::rl;
using diff::Shape;

namespace {

constexpr std::size_t kRate = 4, kDv = 2, kDa = 2, kChannels = 4;

template <typename T>
Array<T> random_array(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Array<T> a(std::move(shape));
  for (auto& v : a.values()) v = static_cast<T>(nd(rng));
  return a;
}

flow::FlowModel<double> toy_model(std::uint64_t seed = 1) {
  flow::FlowConfig c;
  c.layers = 1;
  c.heads = 2;
  c.width = 8;
  c.ffn_mult = 2;
  c.time_dim = 4;
  return flow::FlowModel<double>(c, kDv, kDa, 3, kRate, seed);
}

// 2 tokens of 4 frames; frames 4..7 listening.
GdpoExample<double> toy_example(std::uint64_t seed = 3) {
  GdpoExample<double> ex;
  ex.context.text_token = 1;
  ex.context.actor_audio = random_array<double>(Shape{8, kDa}, seed);
  ex.context.partner_audio = random_array<double>(Shape{8, kDa}, seed + 1);
  ex.context.partner_latents = random_array<double>(Shape{2, kDv}, seed + 2);
  ex.context.actor_vad = {1, 1, 1, 1, 0, 0, 0, 0};
  ex.motion = random_array<double>(Shape{8, kChannels}, seed + 3);
  ex.listening = {0, 0, 0, 0, 1, 1, 1, 1};
  return ex;
}

// Linear latent -> motion map, repeated over each token's frames.
Array<double> toy_decode(const Array<double>& lat, std::size_t frames) {
  Array<double> m(Shape{frames, kChannels});
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t c = 0; c < kChannels; ++c)
      m(f, c) = lat(f / kRate, c % kDv) * (1.0 + 0.5 * double(c)) + 0.1 * double(f % kRate) * double(c);
  return m;
}

const std::vector<std::vector<std::size_t>> kGroups{{0, 1}, {2, 3}};

GdpoConfig toy_config() {
  GdpoConfig c;
  c.steps = 4;
  c.group_size = 4;
  return c;
}

RolloutGroup<double> toy_group(const flow::FlowModel<double>& behavior, const GdpoExample<double>& ex,
                               const GdpoConfig& config, std::uint64_t seed = 5) {
  RolloutGroup<double> g;
  g.example = &ex;
  g.rollouts = rollout_group<double>(behavior, ex, config, toy_decode, kGroups, seed);
  std::vector<std::vector<double>> rewards(kGroups.size(), std::vector<double>(g.rollouts.size()));
  for (std::size_t j = 0; j < g.rollouts.size(); ++j)
    for (std::size_t i = 0; i < kGroups.size(); ++i) rewards[i][j] = g.rollouts[j].rewards[i];
  g.advantages = compute_advantages(rewards, config);
  return g;
}

void perturb(diff::ParamStore<double>& p, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& e : p.entries())
    for (auto& v : e.value.values()) v += nd(rng);
}

std::vector<double> flat_grads(const diff::ParamStore<double>& p) {
  std::vector<double> g;
  for (const auto& e : p.entries()) g.insert(g.end(), e.grad.values().begin(), e.grad.values().end());
  return g;
}

double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double scale = 0.0, worst = 0.0;
  for (double x : b) scale = std::max(scale, std::abs(x));
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst / std::max(scale, 1e-30);
}

}  // namespace

TEST_CASE("decoupled advantages") {
  SUBCASE("worked example") {
    const auto a = decoupled_advantages({{-2, 0, 2, 4}}, 1e-6)[0];
    const double s5 = std::sqrt(5.0);
    CHECK(std::abs(a[0] + 3 / s5) < 1e-12);
    CHECK(std::abs(a[1] + 1 / s5) < 1e-12);
    CHECK(std::abs(a[2] - 1 / s5) < 1e-12);
    CHECK(std::abs(a[3] - 3 / s5) < 1e-12);
    CHECK(std::abs(a[3] - 1.3416) < 1e-4);
  }
  SUBCASE("degenerate group contributes nothing") {
    const auto a = decoupled_advantages({{0.7, 0.7, 0.7, 0.7}}, 1e-6);
    for (double x : a[0]) CHECK(x == 0.0);
  }
  SUBCASE("standardized per group, invariant to per-group affine maps") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    std::vector<std::vector<double>> r(3, std::vector<double>(6));
    for (auto& g : r)
      for (auto& x : g) x = nd(rng);
    const auto a = decoupled_advantages(r, 1e-6);
    for (const auto& g : a) {
      double m = 0, s = 0;
      for (double x : g) m += x;
      for (double x : g) s += x * x;
      CHECK(std::abs(m) < 1e-12);
      CHECK(std::abs(std::sqrt(s / g.size()) - 1.0) < 1e-9);
    }
    auto scaled = r;
    const double c[3] = {1e-3, 7.0, 250.0};
    for (std::size_t i = 0; i < 3; ++i)
      for (auto& x : scaled[i]) x = c[i] * x + 3.0 * double(i);
    const auto b = decoupled_advantages(scaled, 1e-6);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(a[i][j] - b[i][j]) < 1e-9);
    const std::vector<double> lambda{1, 2, 0.5};
    const auto agg_a = aggregate_advantage(a, lambda, 1e-8), agg_b = aggregate_advantage(b, lambda, 1e-8);
    for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(agg_a[j] - agg_b[j]) < 1e-9);
  }
  CHECK_THROWS_AS(decoupled_advantages({{1.0}}, 1e-6), ContractError);
}

TEST_CASE("advantage aggregation") {
  CHECK(aggregate_advantage({{0.5}, {-0.5}}, {1, 1}, 1e-8)[0] == 0.0);
  CHECK(std::abs(aggregate_advantage({{1.0}, {5.0}}, {2, 0}, 1e-8)[0] - 2.0 / (2.0 + 1e-8)) < 1e-15);
  const auto m = aggregate_advantage({{0.3, 1.0}, {0.9, -2.0}}, {1.5, 1.5}, 1e-8);
  CHECK(std::abs(m[0] - 0.6) < 1e-8);
  CHECK(std::abs(m[1] + 0.5) < 1e-8);
}

TEST_CASE("transition log-density") {
  const double sigma = 0.5, dt = 0.25;  // sigma^2 dt = 0.0625
  const auto pre = Array<double>::matrix(1, 2, {0.2, -0.4});
  const auto v = Array<double>::matrix(1, 2, {1.0, 2.0});
  auto post = Array<double>::matrix(1, 2, {0.2 + dt * 1.0, -0.4 + dt * 2.0});
  const double at_mean = step_log_prob(pre, post, v, dt, sigma);
  CHECK(std::abs(at_mean - 0.9348) < 1e-4);
  CHECK(std::abs(at_mean + std::log(2.0 * M_PI * 0.0625)) < 1e-12);
  CHECK(std::abs(gaussian_log_density({0.0, 0.0}, {0.0, 0.0}, 0.0625) - at_mean) < 1e-12);
  post[0] += 1.0;
  CHECK(std::abs(at_mean - step_log_prob(pre, post, v, dt, sigma) - 1.0 / (2 * 0.0625)) < 1e-9);
  CHECK_THROWS_AS(step_log_prob(pre, post, v, dt, 0.0), ConfigError);
}

TEST_CASE("transition kl") {
  CHECK(transition_kl({1.0, 2.0}, {1.0, 2.0}, 0.5, 0.25) == 0.0);
  CHECK(std::abs(transition_kl({0.3, 0.0}, {0.0, 0.0}, 0.5, 0.25) - 0.09 / (2 * 0.0625)) < 1e-12);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 50; ++i) CHECK(transition_kl({nd(rng), nd(rng)}, {nd(rng), nd(rng)}, 0.5, 0.25) >= 0.0);
}

TEST_CASE("clipped surrogate") {
  CHECK(std::abs(clipped_objective(1.5, 1.0, 0.2) - 1.2) < 1e-12);
  CHECK(std::abs(clipped_objective(0.5, -1.0, 0.2) + 0.8) < 1e-12);
  CHECK(clipped_objective(1.0, 0.7, 0.2) == 0.7);

  diff::Tape<double> tape;
  auto lr = tape.constant(Array<double>(Shape{4}, std::vector<double>{std::log(1.5), std::log(0.5), std::log(1.1),
                                                                      std::log(0.9)}));
  // constants do not carry gradients, so route through a parameter
  diff::ParamStore<double> store;
  store.add("x", lr.value());
  auto x = tape.param(store, "x");
  auto s = clipped_surrogate(x, {1.0, -1.0, 2.0, -3.0}, 0.2);
  CHECK(std::abs(s.value()[0] - 1.2) < 1e-12);
  CHECK(std::abs(s.value()[1] + 0.8) < 1e-12);
  CHECK(std::abs(s.value()[2] - 2.2) < 1e-12);
  tape.backward(diff::ops::sum(s));
  const auto& g = store.grad("x");
  CHECK(g[0] == 0.0);  // clipped
  CHECK(g[1] == 0.0);
  CHECK(std::abs(g[2] - 1.1 * 2.0) < 1e-12);
  CHECK(std::abs(g[3] + 0.9 * 3.0) < 1e-12);
}

TEST_CASE("rewards") {
  const auto gt = random_array<double>(Shape{10, 3}, 1);
  const std::vector<std::size_t> ch{0, 1, 2};
  const std::vector<std::uint8_t> all(10, 1);
  const RewardWeights w;
  CHECK(reward_group(gt, gt, ch, all, w) == 0.0);

  SUBCASE("collapse is penalized") {
    Array<double> osc(Shape{10, 3}), flat(Shape{10, 3});
    for (std::size_t f = 0; f < 10; ++f) osc(f, 0) = (f % 2) ? 1.0 : -1.0;
    RewardWeights only_dyn{1.0, 0.0, 0.0, 0.0};
    CHECK(reward_group(flat, osc, ch, all, only_dyn) < 0.0);
    only_dyn = {0.0, 1.0, 0.0, 0.0};
    CHECK(reward_group(flat, osc, ch, all, only_dyn) < 0.0);
  }
  SUBCASE("monotone in the mse weight") {
    const auto pred = random_array<double>(Shape{10, 3}, 2);
    RewardWeights heavy = w;
    heavy.mse *= 2;
    CHECK(reward_group(pred, gt, ch, all, heavy) < reward_group(pred, gt, ch, all, w));
  }
  SUBCASE("speaking frames are ignored under the listener mask") {
    std::vector<std::uint8_t> listen(10, 0);
    for (std::size_t f = 4; f < 8; ++f) listen[f] = 1;
    auto pred = random_array<double>(Shape{10, 3}, 3);
    const double r0 = reward_group(pred, gt, ch, listen, w);
    for (std::size_t f : {0, 1, 2, 3, 8, 9})
      for (std::size_t c = 0; c < 3; ++c) pred(f, c) += 5.0 * double(c + 1);
    CHECK(reward_group(pred, gt, ch, listen, w) == r0);
  }
  SUBCASE("empty mask") { CHECK(reward_group(gt, gt, ch, std::vector<std::uint8_t>(10, 0), w) == 0.0); }
}

TEST_CASE("gdpo config validation") {
  GdpoConfig c;
  CHECK_NOTHROW(c.validate(6));
  c.group_size = 1;
  CHECK_THROWS_AS(c.validate(6), ConfigError);
  c = GdpoConfig{};
  c.group_weights = {1, 1};
  CHECK_THROWS_AS(c.validate(6), ConfigError);
  c.group_weights = {0, 0};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
  c.group_weights = {-1, 2};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
}

TEST_CASE("rollouts are cached, deterministic and finite") {
  const auto model = toy_model();
  const auto ex = toy_example();
  const auto cfg = toy_config();
  const auto a = rollout_group<double>(model, ex, cfg, toy_decode, kGroups, 11);
  const auto b = rollout_group<double>(model, ex, cfg, toy_decode, kGroups, 11);
  REQUIRE(a.size() == 4);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(a[j].trace.latents.storage() == b[j].trace.latents.storage());
    CHECK(a[j].trace.tokens.size() == 2);
    CHECK(a[j].trace.mode == sampling::Mode::sde);
    CHECK(a[j].rewards.size() == 2);
    CHECK(a[j].behavior_log_prob.size() == 4);
    for (double lp : a[j].behavior_log_prob) CHECK(std::isfinite(lp));
  }
  CHECK(a[0].trace.latents.storage() != a[1].trace.latents.storage());
}

TEST_CASE("replayed velocities equal the rollout velocities") {
  const auto model = toy_model();
  const auto ex = toy_example();
  const auto cfg = toy_config();
  const auto r = rollout_group<double>(model, ex, cfg, toy_decode, kGroups, 2);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    diff::Tape<double> tape(false);
    nn::Weights<double> w(tape, model.params());
    const auto v = replay_velocity(w, model, ex.context, r[0].trace, s).value();
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t d = 0; d < kDv; ++d) CHECK(v(l, d) == r[0].trace.tokens[l][s].velocity[d]);
  }
}

TEST_CASE("first update is neutral and matches the policy gradient") {
  auto policy = toy_model();
  const auto reference = policy.params().snapshot();
  const auto ex = toy_example();
  auto cfg = toy_config();
  cfg.kl_weight = 0.0;
  const auto group = toy_group(policy, ex, cfg);

  policy.params().zero_grad();
  const auto stats = accumulate_policy_gradient(policy, reference, {group}, cfg, cfg.chunk_steps);
  CHECK(stats.ratio_min == 1.0);
  CHECK(stats.ratio_max == 1.0);
  CHECK(stats.clip_fraction == 0.0);
  CHECK(std::abs(stats.objective) < 1e-12);
  const auto g_surr = flat_grads(policy.params());

  // unclipped REINFORCE on the same caches: -mean_{j,t} A_j grad log p_theta
  policy.params().zero_grad();
  diff::Tape<double> tape;
  nn::Weights<double> w(tape, policy.params());
  std::vector<diff::Var<double>> terms;
  const double dt = 1.0 / cfg.steps;
  for (std::size_t j = 0; j < group.rollouts.size(); ++j)
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      const auto& tr = group.rollouts[j].trace;
      Array<double> pre(Shape{2, kDv}), post(Shape{2, kDv}), vold(Shape{2, kDv});
      for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t d = 0; d < kDv; ++d) {
          pre(l, d) = tr.tokens[l][s].pre[d];
          post(l, d) = tr.tokens[l][s].post[d];
          vold(l, d) = tr.tokens[l][s].velocity[d];
        }
      auto v = replay_velocity(w, policy, ex.context, tr, s);
      auto lr = log_ratio(v, vold, pre, post, dt, cfg.sigma, false);
      terms.push_back(diff::ops::scale(lr, -group.advantages.aggregated[j] / double(group.rollouts.size() * cfg.steps)));
    }
  auto total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = diff::ops::add(total, terms[i]);
  tape.backward(total);
  const auto g_pg = flat_grads(policy.params());
  CHECK(max_rel(g_surr, g_pg) < 1e-10);
  double norm = 0;
  for (double x : g_pg) norm += x * x;
  CHECK(norm > 0.0);
}

TEST_CASE("kl vanishes when the policy equals the reference") {
  auto policy = toy_model();
  const auto reference = policy.params().snapshot();
  const auto ex = toy_example();
  auto cfg = toy_config();
  cfg.kl_weight = 0.5;
  const auto group = toy_group(policy, ex, cfg);
  const auto stats = accumulate_policy_gradient(policy, reference, {group}, cfg, 2);
  CHECK(stats.kl == 0.0);
  perturb(policy.params(), 0.05, 4);
  CHECK(accumulate_policy_gradient(policy, reference, {group}, cfg, 2).kl > 0.0);
}

TEST_CASE("chunked replay equals the full graph") {
  auto behavior = toy_model();
  const auto ex = toy_example();
  auto cfg = toy_config();
  cfg.kl_weight = 0.1;
  const auto group = toy_group(behavior, ex, cfg);
  auto policy = toy_model();
  perturb(policy.params(), 0.01, 7);
  auto reference = behavior.params().snapshot();
  perturb(reference, 0.01, 8);

  policy.params().zero_grad();
  const auto full = accumulate_policy_gradient(policy, reference, {group}, cfg, 0);
  const auto g_full = flat_grads(policy.params());
  for (std::size_t chunk : {1, 2, 3}) {
    policy.params().zero_grad();
    const auto part = accumulate_policy_gradient(policy, reference, {group}, cfg, chunk);
    CHECK(max_rel(flat_grads(policy.params()), g_full) < 1e-5);
    CHECK(std::abs(part.objective - full.objective) < 1e-12);
  }
}

TEST_CASE("surrogate gradient matches finite differences") {
  auto behavior = toy_model();
  const auto ex = toy_example();
  auto cfg = toy_config();
  cfg.kl_weight = 0.1;
  const auto group = toy_group(behavior, ex, cfg);
  auto policy = toy_model();
  perturb(policy.params(), 0.03, 9);
  const auto reference = behavior.params().snapshot();
  for (int variant = 0; variant < 4; ++variant) {
    cfg.per_token_ratio = variant & 1;
    cfg.ratio_listening_only = variant & 2;
    const double err = diff::finite_diff_check_params(
        policy.params(),
        [&](diff::Tape<double>& tape, diff::ParamStore<double>& store) {
          nn::Weights<double> w(tape, store);
          return surrogate_loss(w, policy, reference, group, cfg);
        },
        1e-4);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("posttraining loop syncs the behavior policy and leaves the reference alone") {
  auto policy = toy_model();
  const auto reference = policy.params().snapshot();
  const auto ref_copy = reference.snapshot();
  std::vector<GdpoExample<double>> corpus{toy_example(3), toy_example(30)};
  auto cfg = toy_config();
  cfg.iterations = 10;
  cfg.sync_period = 8;
  cfg.lr = 1e-2;
  std::vector<GdpoIterationLog> logs;
  posttrain_gdpo<double>(policy, reference, corpus, toy_decode, kGroups, cfg, 1,
                         [&](const GdpoIterationLog& l) { logs.push_back(l); });
  REQUIRE(logs.size() == 10);
  for (const auto& l : logs) CHECK(l.synced == (l.iteration % 8 == 0));
  CHECK(logs[0].update.ratio_min == 1.0);
  CHECK(logs[0].update.ratio_max == 1.0);
  CHECK((logs[1].update.ratio_min != 1.0 || logs[1].update.ratio_max != 1.0));
  CHECK(logs[8].update.ratio_max == 1.0);
  const auto j = nlohmann::json::parse(logs[3].to_json());
  CHECK(j["group_reward_mean"].size() == 2);
  CHECK(j.contains("clip_fraction"));
  CHECK(j.contains("kl"));
  for (std::size_t i = 0; i < reference.entries().size(); ++i)
    CHECK(reference.entries()[i].value.storage() == ref_copy.entries()[i].value.storage());
  bool moved = false;
  for (std::size_t i = 0; i < reference.entries().size(); ++i)
    moved = moved || policy.params().entries()[i].value.storage() != reference.entries()[i].value.storage();
  CHECK(moved);
}

TEST_CASE("masked tokens drop out of the log ratio") {
  diff::Tape<double> tape;
  const auto pre = random_array<double>(Shape{3, 2}, 1);
  const auto post = random_array<double>(Shape{3, 2}, 2);
  const auto vold = random_array<double>(Shape{3, 2}, 3);
  auto v = tape.constant(random_array<double>(Shape{3, 2}, 4));
  diff::ParamStore<double> store;
  store.add("v", random_array<double>(Shape{3, 2}, 4));
  auto vp = tape.param(store, "v");
  auto all = log_ratio(vp, vold, pre, post, 0.25, 0.5, true);
  auto masked = log_ratio(vp, vold, pre, post, 0.25, 0.5, true, {1, 0, 1});
  CHECK(masked.value()[0] == all.value()[0]);
  CHECK(masked.value()[1] == 0.0);
  CHECK(masked.value()[2] == all.value()[2]);
  tape.backward(diff::ops::sum(masked));
  CHECK(store.grad("v")(1, 0) == 0.0);
  CHECK(store.grad("v")(1, 1) == 0.0);
  CHECK(store.grad("v")(0, 0) != 0.0);
  CHECK_THROWS_AS(log_ratio(v, vold, pre, post, 0.25, 0.5, false, {1, 0}), DimensionError);
}
