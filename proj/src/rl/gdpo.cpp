#include "dyadflow/rl/gdpo.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <tuple>

#include "dyadflow/errors.hpp"
#include "dyadflow/log.hpp"
#include "dyadflow/rng.hpp"
#include "json.hpp"

namespace dyadflow::rl {

namespace ops = diff::ops;

void GdpoConfig::validate(std::size_t n_groups) const {
  if (group_size < 2) throw ConfigError("gdpo group size must be >= 2");
  if (!(sigma > 0.0)) throw ConfigError("gdpo sigma must be > 0");
  if (!(clip > 0.0) || clip >= 1.0) throw ConfigError("gdpo clip must lie in (0, 1)");
  if (kl_weight < 0.0) throw ConfigError("gdpo kl weight must be >= 0");
  if (steps == 0) throw ConfigError("gdpo rollout steps must be >= 1");
  if (sync_period == 0) throw ConfigError("gdpo sync period must be >= 1");
  if (!(std_floor > 0.0) || eps0 < 0.0) throw ConfigError("gdpo std floor must be > 0 and eps0 >= 0");
  if (contexts_per_iteration == 0) throw ConfigError("gdpo needs at least one context per iteration");
  if (!group_weights.empty() && group_weights.size() != n_groups)
    throw ConfigError("gdpo group weights: expected " + std::to_string(n_groups) + ", got " +
                      std::to_string(group_weights.size()));
  double total = 0.0;
  for (double l : weights_for(n_groups)) {
    if (!(l >= 0.0)) throw ConfigError("gdpo group weights must be >= 0");
    total += l;
  }
  if (!(total > 0.0)) throw ConfigError("gdpo group weights must not all be zero");
  const auto& r = reward;
  if (r.variance < 0 || r.velocity < 0 || r.mean < 0 || r.mse < 0) throw ConfigError("reward weights must be >= 0");
}

std::vector<double> GdpoConfig::weights_for(std::size_t n_groups) const {
  return group_weights.empty() ? std::vector<double>(n_groups, 1.0) : group_weights;
}

// ---- rewards ---------------------------------------------------------------

namespace {

double cross_channel_std(const Array<double>& m, std::size_t frame, const std::vector<std::size_t>& ch,
                         const Array<double>* prev = nullptr, std::size_t prev_frame = 0) {
  double mu = 0.0;
  auto at = [&](std::size_t c) { return prev ? m(frame, c) - (*prev)(prev_frame, c) : m(frame, c); };
  for (std::size_t c : ch) mu += at(c);
  mu /= static_cast<double>(ch.size());
  double var = 0.0;
  for (std::size_t c : ch) var += (at(c) - mu) * (at(c) - mu);
  return std::sqrt(var / static_cast<double>(ch.size()));
}

}  // namespace

double reward_group(const Array<double>& pred, const Array<double>& gt, const std::vector<std::size_t>& channels,
                    const std::vector<std::uint8_t>& mask, const RewardWeights& weights) {
  if (pred.shape() != gt.shape() || pred.rank() != 2) throw DimensionError("reward needs equal frames x d motions");
  if (mask.size() != pred.rows()) throw DimensionError("reward mask length does not match the frame count");
  if (channels.empty()) throw ContractError("reward group has no channels");
  for (std::size_t c : channels)
    if (c >= pred.cols()) throw DimensionError("reward channel index out of range");

  const std::size_t frames = pred.rows();
  double var_term = 0.0, vel_term = 0.0, mse_term = 0.0;
  std::vector<double> mean_pred(channels.size(), 0.0), mean_gt(channels.size(), 0.0);
  std::size_t counted = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    if (!mask[f]) continue;
    ++counted;
    var_term += std::abs(cross_channel_std(pred, f, channels) - cross_channel_std(gt, f, channels));
    if (f > 0 && mask[f - 1])
      vel_term += std::abs(cross_channel_std(pred, f, channels, &pred, f - 1) -
                           cross_channel_std(gt, f, channels, &gt, f - 1));
    for (std::size_t k = 0; k < channels.size(); ++k) {
      const double d = pred(f, channels[k]) - gt(f, channels[k]);
      mse_term += d * d;
      mean_pred[k] += pred(f, channels[k]);
      mean_gt[k] += gt(f, channels[k]);
    }
  }
  if (counted == 0) {
    log::warn("reward mask selects no frames; reward set to 0");
    return 0.0;
  }
  double drift = 0.0;
  for (std::size_t k = 0; k < channels.size(); ++k) {
    const double d = (mean_pred[k] - mean_gt[k]) / static_cast<double>(counted);
    drift += d * d;
  }
  drift = std::sqrt(drift);
  return -(weights.variance * var_term + weights.velocity * vel_term + weights.mean * drift + weights.mse * mse_term);
}

// ---- advantages --------------------------------------------------------------

std::vector<std::vector<double>> decoupled_advantages(const std::vector<std::vector<double>>& rewards, double floor) {
  std::vector<std::vector<double>> out;
  out.reserve(rewards.size());
  for (const auto& r : rewards) {
    if (r.size() < 2) throw ContractError("advantages need at least two rollouts per group");
    double mu = 0.0;
    for (double x : r) mu += x;
    mu /= static_cast<double>(r.size());
    double var = 0.0;
    for (double x : r) var += (x - mu) * (x - mu);
    const double sd = std::max(std::sqrt(var / static_cast<double>(r.size())), floor);
    auto& a = out.emplace_back(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) a[j] = (r[j] - mu) / sd;
  }
  return out;
}

std::vector<double> aggregate_advantage(const std::vector<std::vector<double>>& per_group,
                                        const std::vector<double>& lambda, double eps0) {
  if (per_group.size() != lambda.size()) throw DimensionError("one weight per advantage group required");
  if (per_group.empty()) throw ContractError("no advantage groups");
  const std::size_t g = per_group.front().size();
  double total = 0.0;
  for (double l : lambda) total += l;
  std::vector<double> out(g, 0.0);
  for (std::size_t i = 0; i < per_group.size(); ++i) {
    if (per_group[i].size() != g) throw DimensionError("advantage groups differ in rollout count");
    for (std::size_t j = 0; j < g; ++j) out[j] += lambda[i] * per_group[i][j];
  }
  for (double& a : out) a /= total + eps0;
  return out;
}

AdvantageSet compute_advantages(const std::vector<std::vector<double>>& rewards, const GdpoConfig& config) {
  AdvantageSet s;
  s.per_group = decoupled_advantages(rewards, config.std_floor);
  s.aggregated = aggregate_advantage(s.per_group, config.weights_for(rewards.size()), config.eps0);
  return s;
}

// ---- densities -----------------------------------------------------------------

namespace {

// Squared residual norm of one row, accumulated in double.
template <typename T>
double residual_sq(const T* pre, const T* post, const T* v, std::size_t dims, double dt) {
  double s = 0.0;
  for (std::size_t k = 0; k < dims; ++k) {
    const double r = static_cast<double>(post[k]) - static_cast<double>(pre[k]) - dt * static_cast<double>(v[k]);
    s += r * r;
  }
  return s;
}

}  // namespace

template <typename T>
double step_log_prob(const Array<T>& pre, const Array<T>& post, const Array<T>& v, double dt, double sigma) {
  if (pre.shape() != post.shape() || pre.shape() != v.shape()) throw DimensionError("step_log_prob shape mismatch");
  if (!(sigma > 0.0)) throw ConfigError("step_log_prob needs sigma > 0");
  const double var = sigma * sigma * dt;
  const double sq = residual_sq(pre.data(), post.data(), v.data(), pre.size(), dt);
  return -0.5 * static_cast<double>(pre.size()) * std::log(2.0 * std::numbers::pi * var) - sq / (2.0 * var);
}

double gaussian_log_density(const std::vector<double>& x, const std::vector<double>& mean, double variance) {
  if (x.size() != mean.size()) throw DimensionError("gaussian_log_density size mismatch");
  if (!(variance > 0.0)) throw ConfigError("gaussian variance must be > 0");
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - mean[i]) * (x[i] - mean[i]);
  return -0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi * variance) - sq / (2.0 * variance);
}

double transition_kl(const std::vector<double>& mu_a, const std::vector<double>& mu_b, double sigma, double dt) {
  if (mu_a.size() != mu_b.size()) throw DimensionError("transition_kl size mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) sq += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
  return sq / (2.0 * sigma * sigma * dt);
}

double clipped_objective(double ratio, double advantage, double clip) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage);
}

template <typename T>
Var<T> log_ratio(Var<T> v_theta, const Array<T>& v_old, const Array<T>& pre, const Array<T>& post, double dt,
                 double sigma, bool per_token, const std::vector<std::uint8_t>& token_mask) {
  const auto& vt = v_theta.value();
  if (vt.shape() != v_old.shape() || vt.shape() != pre.shape() || vt.shape() != post.shape())
    throw DimensionError("log_ratio shape mismatch");
  const std::size_t n = vt.rows(), d = vt.cols();
  if (!token_mask.empty() && token_mask.size() != n) throw DimensionError("log_ratio token mask size mismatch");
  auto keep = std::make_shared<std::vector<std::uint8_t>>(token_mask.empty() ? std::vector<std::uint8_t>(n, 1)
                                                                            : token_mask);
  const double denom = 2.0 * sigma * sigma * dt;
  Array<T> out(diff::Shape{per_token ? n : std::size_t{1}});
  double pooled = 0.0;
  for (std::size_t l = 0; l < n; ++l) {
    if (!(*keep)[l]) continue;
    const double q_old = residual_sq(pre.data() + l * d, post.data() + l * d, v_old.data() + l * d, d, dt);
    const double q_new = residual_sq(pre.data() + l * d, post.data() + l * d, vt.data() + l * d, d, dt);
    if (per_token)
      out[l] = static_cast<T>((q_old - q_new) / denom);
    else
      pooled += q_old - q_new;
  }
  if (!per_token) out[0] = static_cast<T>(pooled / denom);

  auto* tape = v_theta.tape;
  const int vi = v_theta.id;
  auto pre_c = std::make_shared<Array<T>>(pre);
  auto post_c = std::make_shared<Array<T>>(post);
  return tape->push(std::move(out), {vi}, [vi, pre_c, post_c, keep, n, d, dt, sigma, per_token](Tape<T>& t, int self) {
    if (!t.requires_grad(vi)) return;
    const auto& g = t.grad(self);
    const auto& v = t.value(vi);
    auto& gv = t.grad(vi);
    // d/dv of -|r|^2 / (2 sigma^2 dt) with r = post - pre - dt v is r / sigma^2
    const double inv = 1.0 / (sigma * sigma);
    for (std::size_t l = 0; l < n; ++l) {
      if (!(*keep)[l]) continue;
      const double gl = static_cast<double>(per_token ? g[l] : g[0]);
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t i = l * d + k;
        const double r = static_cast<double>((*post_c)[i]) - static_cast<double>((*pre_c)[i]) -
                         dt * static_cast<double>(v[i]);
        gv[i] += static_cast<T>(gl * r * inv);
      }
    }
  }, "log_ratio");
}

template <typename T>
Var<T> clipped_surrogate(Var<T> log_ratio, const std::vector<double>& advantages, double clip) {
  const auto& lr = log_ratio.value();
  if (advantages.size() != lr.size()) throw DimensionError("one advantage per ratio entry required");
  Array<T> out(lr.shape());
  auto active = std::make_shared<std::vector<double>>(lr.size(), 0.0);  // d out / d log_ratio
  for (std::size_t i = 0; i < lr.size(); ++i) {
    const double rho = std::exp(static_cast<double>(lr[i]));
    const double a = advantages[i];
    const double unclipped = rho * a;
    const double clipped = std::clamp(rho, 1.0 - clip, 1.0 + clip) * a;
    if (unclipped <= clipped) {
      out[i] = static_cast<T>(unclipped);
      (*active)[i] = unclipped;  // d(rho A)/d log rho = rho A
    } else {
      out[i] = static_cast<T>(clipped);
    }
  }
  const int li = log_ratio.id;
  return log_ratio.tape->push(std::move(out), {li}, [li, active](Tape<T>& t, int self) {
    if (!t.requires_grad(li)) return;
    const auto& g = t.grad(self);
    auto& gl = t.grad(li);
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += static_cast<T>(static_cast<double>(g[i]) * (*active)[i]);
  }, "clipped_surrogate");
}

// ---- rollouts ------------------------------------------------------------------

template <typename T>
std::vector<RolloutCache<T>> rollout_group(const flow::FlowModel<T>& behavior, const GdpoExample<T>& example,
                                           const GdpoConfig& config, const MotionDecoder<T>& decode,
                                           const std::vector<std::vector<std::size_t>>& group_channels,
                                           std::uint64_t seed) {
  config.validate(group_channels.size());
  const std::size_t n_tokens = example.context.partner_latents.rows();
  const std::size_t frames = example.context.frames();
  if (example.motion.rows() != frames || example.listening.size() != frames)
    throw DimensionError("gdpo example streams disagree on the frame count");
  std::vector<std::uint8_t> mask = config.listener_only ? example.listening : std::vector<std::uint8_t>(frames, 1);

  auto one = [&](std::size_t j) {
    sampling::SamplerConfig sc;
    sc.steps = config.steps;
    sc.sigma = config.sigma;
    sc.mode = sampling::Mode::sde;
    sc.seed = stream_seed(seed, j, "gdpo/rollout");
    RolloutCache<T> c;
    try {
      c.trace = sampling::generate_sequence(behavior, example.context, n_tokens, sc);
    } catch (const NumericError& e) {
      log::warn(std::string("rollout diverged, redrawing once: ") + e.what());
      sc.seed = stream_seed(seed, j, "gdpo/rollout/redraw");
      c.trace = sampling::generate_sequence(behavior, example.context, n_tokens, sc);
    }
    const double dt = 1.0 / static_cast<double>(config.steps);
    c.behavior_log_prob.resize(config.steps);
    for (std::size_t s = 0; s < config.steps; ++s) {
      double lp = 0.0;
      for (const auto& tok : c.trace.tokens) lp += step_log_prob(tok[s].pre, tok[s].post, tok[s].velocity, dt, config.sigma);
      if (!std::isfinite(lp)) throw NumericError("behavior log-density is not finite");
      c.behavior_log_prob[s] = lp;
    }
    c.motion = decode(c.trace.latents, frames);
    if (c.motion.shape() != example.motion.shape()) throw DimensionError("decoded rollout shape differs from ground truth");
    for (const auto& ch : group_channels)
      c.rewards.push_back(reward_group(c.motion, example.motion, ch, mask, config.reward));
    return c;
  };

  std::vector<RolloutCache<T>> out(config.group_size);
  if (config.threads <= 1) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = one(j);
  } else {
    for (std::size_t j0 = 0; j0 < out.size(); j0 += config.threads) {
      std::vector<std::future<RolloutCache<T>>> jobs;
      for (std::size_t j = j0; j < std::min(out.size(), j0 + config.threads); ++j)
        jobs.push_back(std::async(std::launch::async, one, j));
      for (std::size_t j = j0; j < j0 + jobs.size(); ++j) out[j] = jobs[j - j0].get();
    }
  }
  return out;
}

template <typename T>
Var<T> replay_velocity(nn::Weights<T>& w, const flow::FlowModel<T>& model, const flow::FlowContext<T>& ctx,
                       const sampling::GenerationTrace<T>& trace, std::size_t step) {
  const std::size_t n = trace.tokens.size();
  if (n == 0 || step >= trace.steps) throw ContractError("replay step outside the cached trajectory");
  const std::size_t d = model.latent_dim();
  Array<T> noisy(diff::Shape{n, d});
  for (std::size_t l = 0; l < n; ++l) {
    if (trace.tokens[l].size() != trace.steps) throw ContractError("cached trajectory is missing steps");
    const auto& pre = trace.tokens[l][step].pre;
    std::copy(pre.data(), pre.data() + d, noisy.data() + l * d);
  }
  const T t = static_cast<T>(static_cast<double>(step) * (1.0 / static_cast<double>(trace.steps)));
  const std::vector<T> ts(n, t);
  if (n == 1) return model.velocity(w, ctx, flow::Dropout::none(), nullptr, noisy, ts);
  Array<T> hist(diff::Shape{n - 1, d});
  std::copy(trace.latents.data(), trace.latents.data() + (n - 1) * d, hist.data());
  return model.velocity(w, ctx, flow::Dropout::none(), &hist, noisy, ts);
}

namespace {

template <typename T>
Array<T> stack_step(const sampling::GenerationTrace<T>& trace, std::size_t step, int which) {
  const std::size_t n = trace.tokens.size(), d = trace.latents.cols();
  Array<T> out(diff::Shape{n, d});
  for (std::size_t l = 0; l < n; ++l) {
    const auto& rec = trace.tokens[l][step];
    const Array<T>& src = which == 0 ? rec.pre : which == 1 ? rec.post : rec.velocity;
    std::copy(src.data(), src.data() + d, out.data() + l * d);
  }
  return out;
}

struct Accumulator {
  UpdateStats stats;
  double ratio_sum = 0.0;
  std::size_t ratio_count = 0;
  std::size_t clipped = 0;
  double kl_sum = 0.0;
  std::size_t kl_count = 0;
  double objective_sum = 0.0;

  void add_ratio(double rho, double clip) {
    if (ratio_count == 0) stats.ratio_min = stats.ratio_max = rho;
    stats.ratio_min = std::min(stats.ratio_min, rho);
    stats.ratio_max = std::max(stats.ratio_max, rho);
    ratio_sum += rho;
    ++ratio_count;
    if (std::abs(rho - 1.0) > clip) ++clipped;
  }
  UpdateStats finish() {
    stats.ratio_mean = ratio_count ? ratio_sum / static_cast<double>(ratio_count) : 0.0;
    stats.clip_fraction = ratio_count ? static_cast<double>(clipped) / static_cast<double>(ratio_count) : 0.0;
    stats.kl = kl_count ? kl_sum / static_cast<double>(kl_count) : 0.0;
    stats.objective = stats.terms ? objective_sum / static_cast<double>(stats.terms) : 0.0;
    return stats;
  }
};

// Tokens whose frames are mostly listening; ties count as listening.
std::vector<std::uint8_t> listening_tokens(const std::vector<std::uint8_t>& listening, std::size_t rate,
                                           std::size_t n) {
  std::vector<std::uint8_t> out(n, 1);
  for (std::size_t l = 0; l < n; ++l) {
    std::size_t on = 0, span = 0;
    for (std::size_t f = l * rate; f < std::min((l + 1) * rate, listening.size()); ++f, ++span) on += listening[f] != 0;
    out[l] = 2 * on >= span;
  }
  return out;
}

// Loss contribution of one (rollout, step) scaled into the overall mean;
// returns an invalid Var when the step is skipped.
template <typename T>
Var<T> step_loss(nn::Weights<T>& w, const flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                 const RolloutGroup<T>& group, std::size_t j, std::size_t step, const GdpoConfig& config,
                 double norm, Accumulator& acc) {
  const auto& trace = group.rollouts[j].trace;
  if (trace.steps != config.steps) throw ContractError("cached trajectory step count differs from the config");
  const std::size_t n = trace.tokens.size();
  const double dt = 1.0 / static_cast<double>(config.steps);
  auto v = replay_velocity(w, policy, group.example->context, trace, step);
  const auto pre = stack_step(trace, step, 0), post = stack_step(trace, step, 1), v_old = stack_step(trace, step, 2);
  auto lr = log_ratio(v, v_old, pre, post, dt, config.sigma, config.per_token_ratio,
                      config.ratio_listening_only ? listening_tokens(group.example->listening, policy.rate(), n)
                                                  : std::vector<std::uint8_t>{});
  for (T x : lr.value().values())
    if (!std::isfinite(std::exp(static_cast<double>(x)))) {
      log::warn("non-finite importance ratio; step skipped");
      ++acc.stats.skipped;
      return {};
    }
  for (T x : lr.value().values()) acc.add_ratio(std::exp(static_cast<double>(x)), config.clip);
  const double a = group.advantages.aggregated.at(j);
  auto surr = clipped_surrogate(lr, std::vector<double>(lr.value().size(), a), config.clip);
  auto term = ops::sum(surr);
  const double per = config.per_token_ratio ? 1.0 / static_cast<double>(n) : 1.0;
  acc.objective_sum += static_cast<double>(term.value()[0]) * per;
  ++acc.stats.terms;
  auto loss = ops::scale(term, static_cast<T>(-norm * per));

  if (config.kl_weight > 0.0) {
    Tape<T> ref_tape(false);
    nn::Weights<T> rw(ref_tape, reference);
    const auto v_ref = replay_velocity(rw, policy, group.example->context, trace, step).value();
    auto diff = ops::sub(v, w.tape().constant(v_ref));
    auto sq = ops::sum(ops::mul(diff, diff));
    // per-token KL: dt^2 |v - v_ref|^2 / (2 sigma^2 dt)
    const double c = dt / (2.0 * config.sigma * config.sigma);
    acc.kl_sum += static_cast<double>(sq.value()[0]) * c;
    acc.kl_count += n;
    loss = ops::add(loss, ops::scale(sq, static_cast<T>(config.kl_weight * c * norm / static_cast<double>(n))));
  }
  return loss;
}

template <typename T>
Var<T> sum_losses(const std::vector<Var<T>>& parts) {
  Var<T> total;
  for (const auto& p : parts) {
    if (!p.valid()) continue;
    total = total.valid() ? ops::add(total, p) : p;
  }
  return total;
}

}  // namespace

template <typename T>
Var<T> surrogate_loss(nn::Weights<T>& w, const flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                      const RolloutGroup<T>& group, const GdpoConfig& config) {
  Accumulator acc;
  const double norm = 1.0 / static_cast<double>(group.rollouts.size() * config.steps);
  std::vector<Var<T>> parts;
  for (std::size_t j = 0; j < group.rollouts.size(); ++j)
    for (std::size_t s = 0; s < config.steps; ++s)
      parts.push_back(step_loss(w, policy, reference, group, j, s, config, norm, acc));
  auto total = sum_losses(parts);
  if (!total.valid()) throw NumericError("every replayed step was skipped");
  return total;
}

template <typename T>
UpdateStats accumulate_policy_gradient(flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                                       const std::vector<RolloutGroup<T>>& groups, const GdpoConfig& config,
                                       std::size_t chunk_steps, double weight) {
  Accumulator acc;
  auto run = [&](const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>& items) {
    Tape<T> tape;
    nn::Weights<T> w(tape, policy.params());
    std::vector<Var<T>> parts;
    for (const auto& [g, j, s] : items) {
      const auto& group = groups[g];
      if (group.advantages.aggregated.size() != group.rollouts.size())
        throw ContractError("advantages missing for a rollout group");
      const double norm = weight / static_cast<double>(group.rollouts.size() * config.steps);
      parts.push_back(step_loss(w, policy, reference, group, j, s, config, norm, acc));
    }
    auto total = sum_losses(parts);
    if (total.valid()) tape.backward(total);
  };
  if (chunk_steps == 0) {
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> all;
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t j = 0; j < groups[g].rollouts.size(); ++j)
        for (std::size_t s = 0; s < config.steps; ++s) all.emplace_back(g, j, s);
    run(all);
  } else {
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (std::size_t j = 0; j < groups[g].rollouts.size(); ++j)
        for (std::size_t s0 = 0; s0 < config.steps; s0 += chunk_steps) {
          std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> chunk;
          for (std::size_t s = s0; s < std::min(config.steps, s0 + chunk_steps); ++s) chunk.emplace_back(g, j, s);
          run(chunk);
        }
  }
  return acc.finish();
}

std::string GdpoIterationLog::to_json() const {
  nlohmann::json j;
  j["iteration"] = iteration;
  j["synced"] = synced;
  j["group_reward_mean"] = group_reward_mean;
  j["mean_abs_advantage"] = mean_abs_advantage;
  j["objective"] = update.objective;
  j["clip_fraction"] = update.clip_fraction;
  j["kl"] = update.kl;
  j["ratio"] = {{"mean", update.ratio_mean}, {"min", update.ratio_min}, {"max", update.ratio_max}};
  j["skipped_steps"] = update.skipped;
  j["grad_norm"] = grad_norm;
  j["lr"] = lr;
  return j.dump();
}

template <typename T>
void posttrain_gdpo(flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                    const std::vector<GdpoExample<T>>& corpus, const MotionDecoder<T>& decode,
                    const std::vector<std::vector<std::size_t>>& group_channels, const GdpoConfig& config,
                    std::uint64_t seed, const std::function<void(const GdpoIterationLog&)>& on_iteration) {
  config.validate(group_channels.size());
  if (corpus.empty()) throw ContractError("gdpo corpus is empty");
  // fresh optimizer state for the new objective
  policy.params() = policy.params().snapshot();
  flow::FlowModel<T> behavior(policy.config(), policy.latent_dim(), policy.audio_dim(), policy.text_vocab(),
                              policy.rate(), policy.params().snapshot());
  diff::AdamWConfig opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    GdpoIterationLog log_entry;
    log_entry.iteration = it;
    if (it % config.sync_period == 0) {
      behavior.params().copy_values_from(policy.params());
      log_entry.synced = true;
    }
    auto pick = make_stream(seed, it, "gdpo/context");
    std::vector<RolloutGroup<T>> groups(config.contexts_per_iteration);
    log_entry.group_reward_mean.assign(group_channels.size(), 0.0);
    double abs_adv = 0.0;
    for (std::size_t c = 0; c < groups.size(); ++c) {
      auto& g = groups[c];
      g.example = &corpus[std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(pick)];
      g.rollouts = rollout_group(behavior, *g.example, config, decode, group_channels,
                                 stream_seed(seed, it * groups.size() + c, "gdpo/rollouts"));
      std::vector<std::vector<double>> rewards(group_channels.size(), std::vector<double>(g.rollouts.size()));
      for (std::size_t j = 0; j < g.rollouts.size(); ++j)
        for (std::size_t i = 0; i < group_channels.size(); ++i) {
          rewards[i][j] = g.rollouts[j].rewards[i];
          log_entry.group_reward_mean[i] +=
              rewards[i][j] / static_cast<double>(g.rollouts.size() * groups.size());
        }
      g.advantages = compute_advantages(rewards, config);
      for (double a : g.advantages.aggregated)
        abs_adv += std::abs(a) / static_cast<double>(g.rollouts.size() * groups.size());
    }
    log_entry.mean_abs_advantage = abs_adv;
    policy.params().zero_grad();
    log_entry.update = accumulate_policy_gradient(policy, reference, groups, config, config.chunk_steps,
                                                  1.0 / static_cast<double>(groups.size()));
    log_entry.grad_norm = config.grad_clip > 0.0 ? policy.params().clip_grad_norm(config.grad_clip)
                                                 : policy.params().grad_norm();
    log_entry.lr = config.lr;
    diff::adamw_step(policy.params(), opt);
    if (on_iteration) on_iteration(log_entry);
  }
}

#define DYADFLOW_RL_INSTANTIATE(T)                                                                                \
  template double step_log_prob<T>(const Array<T>&, const Array<T>&, const Array<T>&, double, double);           \
  template Var<T> log_ratio<T>(Var<T>, const Array<T>&, const Array<T>&, const Array<T>&, double, double, bool, \
                                   const std::vector<std::uint8_t>&);                                          \
  template Var<T> clipped_surrogate<T>(Var<T>, const std::vector<double>&, double);                              \
  template std::vector<RolloutCache<T>> rollout_group<T>(const flow::FlowModel<T>&, const GdpoExample<T>&,       \
                                                         const GdpoConfig&, const MotionDecoder<T>&,             \
                                                         const std::vector<std::vector<std::size_t>>&,           \
                                                         std::uint64_t);                                          \
  template Var<T> replay_velocity<T>(nn::Weights<T>&, const flow::FlowModel<T>&, const flow::FlowContext<T>&,    \
                                     const sampling::GenerationTrace<T>&, std::size_t);                          \
  template UpdateStats accumulate_policy_gradient<T>(flow::FlowModel<T>&, const ParamStore<T>&,                  \
                                                     const std::vector<RolloutGroup<T>>&, const GdpoConfig&,      \
                                                     std::size_t, double);                                        \
  template Var<T> surrogate_loss<T>(nn::Weights<T>&, const flow::FlowModel<T>&, const ParamStore<T>&,            \
                                    const RolloutGroup<T>&, const GdpoConfig&);                                   \
  template void posttrain_gdpo<T>(flow::FlowModel<T>&, const ParamStore<T>&, const std::vector<GdpoExample<T>>&, \
                                  const MotionDecoder<T>&, const std::vector<std::vector<std::size_t>>&,          \
                                  const GdpoConfig&, std::uint64_t,                                               \
                                  const std::function<void(const GdpoIterationLog&)>&);

DYADFLOW_RL_INSTANTIATE(float)
DYADFLOW_RL_INSTANTIATE(double)

}  // namespace dyadflow::rl
