#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dyadflow/nn/layers.hpp"

namespace dyadflow::vae {

using diff::Array;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

struct VaeConfig {
  std::size_t rate = 8;         // frames per latent token
  std::size_t latent_dim = 16;  // D_v
  std::size_t layers = 2;       // encoder and decoder each
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t ffn_mult = 4;
  double kl_weight = 1e-4;
  // training schedule
  std::size_t epochs = 30;
  std::size_t batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 1.0;

  void validate() const;
};

inline std::size_t token_count(std::size_t frames, std::size_t rate) { return (frames + rate - 1) / rate; }

// Timestamp of latent token j on the frame timeline: j*r + floor(r/2).
inline long token_timestamp(std::size_t j, std::size_t rate) { return long(j * rate + rate / 2); }

template <typename T>
struct Posterior {
  Var<T> mean;    // tokens x D_v
  Var<T> logvar;  // tokens x D_v
};

template <typename T>
struct VaeLoss {
  Var<T> total;
  T recon = 0;
  T kl = 0;  // mean per element
};

// Frame-level transformer; stride-r mean pooling before the last encoder
// layer, nearest-repeat upsampling before the decoder layers.
template <typename T>
class MotionVae {
 public:
  MotionVae(const VaeConfig& config, std::size_t channels, std::uint64_t seed);
  MotionVae(const VaeConfig& config, std::size_t channels, ParamStore<T> params);

  const VaeConfig& config() const { return config_; }
  std::size_t channels() const { return channels_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // motion: L x d, channel-normalized. Frames past L (when r does not divide
  // L) are zero-padded and masked from attention and pooling.
  Posterior<T> encode(nn::Weights<T>& w, const Array<T>& motion) const;
  // latents: tokens x D_v -> frames x d, cropped to `frames`.
  Var<T> decode(nn::Weights<T>& w, Var<T> latents, std::size_t frames) const;

  // Reparameterized loss with externally supplied standard-normal noise.
  VaeLoss<T> loss(nn::Weights<T>& w, const Array<T>& motion, const Array<T>& noise) const;

  // Value-only helpers on a non-recording tape.
  Array<T> encode_mean(const Array<T>& motion) const;
  std::pair<Array<T>, Array<T>> encode_posterior(const Array<T>& motion) const;
  Array<T> decode_values(const Array<T>& latents, std::size_t frames) const;

 private:
  VaeConfig config_;
  std::size_t channels_;
  ParamStore<T> params_;
};

// Closed-form KL(N(mean, exp(logvar)) || N(0, I)) averaged over elements.
template <typename T>
Var<T> gaussian_kl(Var<T> mean, Var<T> logvar);

struct TrainLog {
  std::size_t epoch;
  double loss;
  double recon;
  double kl;
  double lr;
};

// Minibatch AdamW over normalized sequences; per-sample gradients are summed
// in index order, so results do not depend on scheduling.
template <typename T>
void train_vae(MotionVae<T>& model, const std::vector<Array<T>>& corpus, std::uint64_t seed,
               const std::function<void(const TrainLog&)>& on_epoch = {});

}  // namespace dyadflow::vae
