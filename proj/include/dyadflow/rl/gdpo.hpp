#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dyadflow/sampling/sampler.hpp"

namespace dyadflow::rl {

using diff::Array;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

struct RewardWeights {
  double variance = 1.0;  // per-frame cross-channel std
  double velocity = 1.0;  // same on frame differences
  double mean = 0.5;      // drift of the sequence mean
  double mse = 0.25;
};

struct GdpoConfig {
  std::size_t group_size = 4;
  double sigma = 0.5;
  double clip = 0.2;
  double kl_weight = 0.01;
  std::size_t chunk_steps = 2;
  std::size_t sync_period = 8;
  std::vector<double> group_weights;  // one per channel group; empty means all 1
  double eps0 = 1e-8;
  double std_floor = 1e-6;
  std::size_t steps = 4;
  bool listener_only = true;
  // Clip per-token ratios instead of one pooled ratio per denoising step.
  bool per_token_ratio = false;
  // Leave speaking tokens out of the importance ratio (the KL term still sees them).
  bool ratio_listening_only = false;
  RewardWeights reward;

  std::size_t iterations = 64;
  std::size_t contexts_per_iteration = 1;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::size_t threads = 1;

  // ConfigError on G < 2, sigma <= 0, negative or all-zero weights, or a
  // weight count that differs from n_groups (when weights are given).
  void validate(std::size_t n_groups) const;
  std::vector<double> weights_for(std::size_t n_groups) const;
};

// ---- rewards -------------------------------------------------------------

// Negated weighted penalty between prediction and ground truth (frames x d)
// on one channel group, counted over frames with mask != 0. Frame
// differences are counted only when both frames are in the mask.
double reward_group(const Array<double>& pred, const Array<double>& gt, const std::vector<std::size_t>& channels,
                    const std::vector<std::uint8_t>& mask, const RewardWeights& weights);

// ---- advantages ----------------------------------------------------------

struct AdvantageSet {
  std::vector<std::vector<double>> per_group;  // [group][rollout]
  std::vector<double> aggregated;              // [rollout]
};

// (R - mean) / max(population std, floor), independently per group.
std::vector<std::vector<double>> decoupled_advantages(const std::vector<std::vector<double>>& rewards, double floor);
// sum_i lambda_i A_i / (sum_i lambda_i + eps0)
std::vector<double> aggregate_advantage(const std::vector<std::vector<double>>& per_group,
                                        const std::vector<double>& lambda, double eps0);
AdvantageSet compute_advantages(const std::vector<std::vector<double>>& rewards, const GdpoConfig& config);

// ---- densities and objective pieces ----------------------------------------

// log N(post; pre + dt v, sigma^2 dt I) summed over all entries.
template <typename T>
double step_log_prob(const Array<T>& pre, const Array<T>& post, const Array<T>& v, double dt, double sigma);
// Closed forms used as oracles.
double gaussian_log_density(const std::vector<double>& x, const std::vector<double>& mean, double variance);
double transition_kl(const std::vector<double>& mu_a, const std::vector<double>& mu_b, double sigma, double dt);
double clipped_objective(double ratio, double advantage, double clip);

// log p_theta - log p_old for one step, from residuals r = post - pre - dt v.
// Shape {1} when pooled over tokens, {n} per token. Both residuals go
// through the same arithmetic, so equal velocities give exactly zero.
// Tokens with token_mask[l] == 0 contribute nothing (empty mask keeps all).
template <typename T>
Var<T> log_ratio(Var<T> v_theta, const Array<T>& v_old, const Array<T>& pre, const Array<T>& post, double dt,
                 double sigma, bool per_token, const std::vector<std::uint8_t>& token_mask = {});

// min(rho A, clip(rho, 1-eps, 1+eps) A) elementwise on rho = exp(log_ratio).
template <typename T>
Var<T> clipped_surrogate(Var<T> log_ratio, const std::vector<double>& advantages, double clip);

// ---- rollouts ---------------------------------------------------------------

template <typename T>
using MotionDecoder = std::function<Array<double>(const Array<T>& latents, std::size_t frames)>;

template <typename T>
struct RolloutCache {
  sampling::GenerationTrace<T> trace;
  std::vector<double> behavior_log_prob;  // per denoising step, pooled over tokens
  Array<double> motion;                   // decoded
  std::vector<double> rewards;            // per channel group
};

template <typename T>
struct GdpoExample {
  flow::FlowContext<T> context;
  Array<double> motion;                 // ground truth, frames x d
  std::vector<std::uint8_t> listening;  // per frame
};

template <typename T>
struct RolloutGroup {
  const GdpoExample<T>* example = nullptr;
  std::vector<RolloutCache<T>> rollouts;
  AdvantageSet advantages;
};

// G SDE rollouts of the behavior policy on one context (CFG weights 1).
// A rollout that turns non-finite is redrawn once with a fresh stream.
template <typename T>
std::vector<RolloutCache<T>> rollout_group(const flow::FlowModel<T>& behavior, const GdpoExample<T>& example,
                                           const GdpoConfig& config, const MotionDecoder<T>& decode,
                                           const std::vector<std::vector<std::size_t>>& group_channels,
                                           std::uint64_t seed);

// Replays one denoising step of a cached rollout with gradients: all tokens
// at once, history = the rollout's own latents.
template <typename T>
Var<T> replay_velocity(nn::Weights<T>& w, const flow::FlowModel<T>& model, const flow::FlowContext<T>& ctx,
                       const sampling::GenerationTrace<T>& trace, std::size_t step);

struct UpdateStats {
  double objective = 0.0;  // mean clipped term
  double kl = 0.0;
  double clip_fraction = 0.0;
  double ratio_mean = 0.0;
  double ratio_min = 0.0;
  double ratio_max = 0.0;
  std::size_t terms = 0;
  std::size_t skipped = 0;
};

// Adds d(loss)/d(theta) * weight into the policy gradients, where loss is
// -(mean_{j,t} clipped term) + beta * KL. Steps are replayed chunk_steps at
// a time per rollout, each chunk on its own tape; chunk_steps == 0 records
// everything on one tape.
template <typename T>
UpdateStats accumulate_policy_gradient(flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                                       const std::vector<RolloutGroup<T>>& groups, const GdpoConfig& config,
                                       std::size_t chunk_steps, double weight = 1.0);

// The loss above on a caller-provided tape (gradient checks, reference runs).
template <typename T>
Var<T> surrogate_loss(nn::Weights<T>& w, const flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                      const RolloutGroup<T>& group, const GdpoConfig& config);

struct GdpoIterationLog {
  std::size_t iteration = 0;
  bool synced = false;
  std::vector<double> group_reward_mean;
  double mean_abs_advantage = 0.0;
  UpdateStats update;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::string to_json() const;
};

// Stage-2 loop. The behavior policy is re-synced every sync_period
// iterations (including 0); the reference stays at its given values.
template <typename T>
void posttrain_gdpo(flow::FlowModel<T>& policy, const ParamStore<T>& reference,
                    const std::vector<GdpoExample<T>>& corpus, const MotionDecoder<T>& decode,
                    const std::vector<std::vector<std::size_t>>& group_channels, const GdpoConfig& config,
                    std::uint64_t seed, const std::function<void(const GdpoIterationLog&)>& on_iteration = {});

}  // namespace dyadflow::rl
