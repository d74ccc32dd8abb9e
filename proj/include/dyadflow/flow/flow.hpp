#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "dyadflow/nn/layers.hpp"

namespace dyadflow::flow {

using diff::Array;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

struct FlowConfig {
  std::size_t layers = 4;
  std::size_t heads = 8;
  std::size_t width = 128;
  std::size_t ffn_mult = 4;
  std::size_t time_dim = 32;
  // per-modality condition dropout, trains the null embeddings used by CFG
  double p_drop = 0.1;
  // Teacher-forced history gets N(0, s^2) noise with s ~ U(0, history_noise) per example.
  double history_noise = 0.0;
  // Also add the text (or null-text) embedding to every history and noisy token.
  bool text_global = false;
  std::size_t epochs = 20;
  std::size_t batch = 8;
  double lr = 5e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;

  void validate() const;
};

// Token roles, each with a learned type embedding.
enum class Role : std::size_t { text = 0, partner_audio, partner_motion, actor_audio, history, noisy, count };

struct Dropout {
  bool text = false;
  bool partner_audio = false;
  bool partner_motion = false;
  bool actor_audio = false;

  static Dropout none() { return {}; }
  static Dropout all() { return {true, true, true, true}; }
  bool operator==(const Dropout&) const = default;
};

// One sequence's conditioning. Partner latents live in the normalized
// latent space; audio and VAD run at the frame rate.
template <typename T>
struct FlowContext {
  int text_token = 0;
  Array<T> actor_audio;      // L x d_a
  Array<T> partner_audio;    // L x d_a
  Array<T> partner_latents;  // ceil(L/r) x D_v
  std::vector<std::uint8_t> actor_vad;

  std::size_t frames() const { return actor_audio.rows(); }
  // ContractError on length mismatches between streams.
  void validate(std::size_t rate, std::size_t latent_dim, std::size_t audio_dim, std::size_t vocab) const;
};

// Prefix order [text; partner audio; partner motion; actor audio] with
// timestamps text -> 0, audio i -> i, motion j -> j*r + floor(r/2).
std::vector<long> assign_timestamps(std::size_t audio_len, std::size_t motion_tokens, std::size_t rate);
inline long motion_timestamp(std::size_t j, std::size_t rate) { return long(j * rate + rate / 2); }
inline std::size_t prefix_length(std::size_t frames, std::size_t rate) {
  return 1 + 2 * frames + (frames + rate - 1) / rate;
}

template <typename T>
struct FlowTargets {
  Array<T> state;   // (1-t) x0 + t x1
  Array<T> target;  // x1 - x0
};

template <typename T>
FlowTargets<T> make_flow_targets(const Array<T>& clean, const Array<T>& noise, const std::vector<T>& t);

template <typename T>
class FlowModel {
 public:
  FlowModel(const FlowConfig& config, std::size_t latent_dim, std::size_t audio_dim, std::size_t text_vocab,
            std::size_t rate, std::uint64_t seed);
  FlowModel(const FlowConfig& config, std::size_t latent_dim, std::size_t audio_dim, std::size_t text_vocab,
            std::size_t rate, ParamStore<T> params);

  const FlowConfig& config() const { return config_; }
  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t audio_dim() const { return audio_dim_; }
  std::size_t text_vocab() const { return vocab_; }
  std::size_t rate() const { return rate_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  struct Prefix {
    Var<T> tokens;  // P x D
    std::vector<long> timestamps;
  };
  Prefix build_prefix(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop) const;

  // Teacher-forced pass over [prefix; history; noisy]. history holds clean
  // tokens 0..h-1 (h may be 0 when noisy has one row); noisy row l sees the
  // prefix, history rows < l and itself. Returns n x D_v velocities.
  Var<T> velocity(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop, const Array<T>* history,
                  const Array<T>& noisy, const std::vector<T>& t) const;

  // Rectified-flow loss: x_t = (1-t) x0 + t x1, target x1 - x0, mean squared error.
  // The history is clean[0..n-2] unless one is given (n-1 rows).
  Var<T> flow_loss(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop, const Array<T>& clean,
                   const Array<T>& noise, const std::vector<T>& t, const Array<T>* history = nullptr) const;

  // Shared by the full pass and the cached session.
  // text: 1 x D row added to each token when text_global is set, else ignored.
  Var<T> embed_history(nn::Weights<T>& w, const Array<T>& rows, const Var<T>* text = nullptr) const;
  Var<T> embed_noisy(nn::Weights<T>& w, const Array<T>& rows, const std::vector<T>& t,
                     const Var<T>* text = nullptr) const;
  Var<T> text_embedding(nn::Weights<T>& w, const FlowContext<T>& ctx, const Dropout& drop) const;
  Var<T> head(nn::Weights<T>& w, Var<T> x) const;

 private:
  Var<T> role(nn::Weights<T>& w, Role r) const;

  FlowConfig config_;
  std::size_t latent_dim_, audio_dim_, vocab_, rate_;
  ParamStore<T> params_;
};

// Incremental inference: the prefix and each appended history token are
// pushed through the layers once and kept as per-layer key/value caches.
// Velocities match FlowModel::velocity bit for bit.
template <typename T>
class FlowSession {
 public:
  FlowSession(const FlowModel<T>& model, const FlowContext<T>& ctx, const Dropout& drop);

  std::size_t history() const { return history_; }
  void append(const Array<T>& latent);  // 1 x D_v
  Array<T> velocity(const Array<T>& state, T t) const;
  std::size_t cache_bytes() const;
  std::size_t cached_tokens() const { return caches_.empty() ? 0 : caches_.front().rows; }

 private:
  const FlowModel<T>& model_;
  std::size_t prefix_len_;
  std::size_t history_ = 0;
  std::vector<nn::KvCache<T>> caches_;
  Array<T> text_;  // only read when text_global is set
};

template <typename T>
struct FlowExample {
  FlowContext<T> context;
  Array<T> latents;  // ceil(L/r) x D_v, normalized
};

struct FlowTrainLog {
  std::size_t epoch;
  double loss;
  double lr;
  std::uint64_t seed;
};

template <typename T>
void train_flow(FlowModel<T>& model, const std::vector<FlowExample<T>>& corpus, std::uint64_t seed,
                const std::function<void(const FlowTrainLog&)>& on_epoch = {});

}  // namespace dyadflow::flow
