#include "dyadflow/vae/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dyadflow/rng.hpp"

namespace dyadflow::vae {

namespace ops = diff::ops;
using diff::AttentionMask;
using diff::Shape;

void VaeConfig::validate() const {
  if (rate == 0) throw ConfigError("vae.rate must be positive");
  if (latent_dim == 0) throw ConfigError("vae.latent_dim must be positive");
  if (layers == 0) throw ConfigError("vae.layers must be positive");
  if (heads == 0 || width % heads != 0) throw ConfigError("vae.width must be divisible by vae.heads");
  if ((width / heads) % 2 != 0) throw ConfigError("vae head dimension must be even");
  if (ffn_mult == 0) throw ConfigError("vae.ffn_mult must be positive");
  if (kl_weight < 0) throw ConfigError("vae.kl_weight must be nonnegative");
  if (batch == 0) throw ConfigError("vae.batch must be positive");
}

namespace {

std::string layer_name(const char* side, std::size_t i) { return std::string(side) + ".b" + std::to_string(i); }

std::vector<long> iota_ts(std::size_t n) {
  std::vector<long> ts(n);
  std::iota(ts.begin(), ts.end(), 0L);
  return ts;
}

template <typename T>
void init_params(ParamStore<T>& s, const VaeConfig& c, std::size_t d, std::uint64_t seed) {
  auto rng = make_stream(seed, 0, "vae_init");
  const nn::BlockDims dims{c.width, c.heads, c.width * c.ffn_mult};
  nn::init_linear(s, "enc.in", d, c.width, rng);
  for (std::size_t i = 0; i < c.layers; ++i) nn::init_block(s, layer_name("enc", i), dims, rng);
  nn::init_layer_norm(s, "enc.ln_out", c.width);
  nn::init_linear(s, "enc.mean", c.width, c.latent_dim, rng);
  nn::init_linear(s, "enc.logvar", c.width, c.latent_dim, rng);
  nn::init_linear(s, "dec.in", c.latent_dim, c.width, rng);
  s.add("dec.phase", diff::truncated_normal<T>(Shape{c.rate, c.width}, nn::kInitStd, rng));
  for (std::size_t i = 0; i < c.layers; ++i) nn::init_block(s, layer_name("dec", i), dims, rng);
  nn::init_layer_norm(s, "dec.ln_out", c.width);
  nn::init_linear(s, "dec.out", c.width, d, rng);
}

}  // namespace

template <typename T>
MotionVae<T>::MotionVae(const VaeConfig& config, std::size_t channels, std::uint64_t seed)
    : config_(config), channels_(channels) {
  config_.validate();
  if (channels == 0) throw ConfigError("motion needs at least one channel");
  init_params(params_, config_, channels_, seed);
}

template <typename T>
MotionVae<T>::MotionVae(const VaeConfig& config, std::size_t channels, ParamStore<T> params)
    : config_(config), channels_(channels), params_(std::move(params)) {
  config_.validate();
}

template <typename T>
Posterior<T> MotionVae<T>::encode(nn::Weights<T>& w, const Array<T>& motion) const {
  if (motion.rank() != 2 || motion.cols() != channels_)
    throw DimensionError("vae expects L x " + std::to_string(channels_) + " motion, got " +
                         diff::shape_str(motion.shape()));
  auto& tape = w.tape();
  const std::size_t r = config_.rate, frames = motion.rows();
  const std::size_t n = token_count(frames, r), padded = n * r;
  Array<T> x(Shape{padded, channels_});
  std::copy(motion.values().begin(), motion.values().end(), x.values().begin());

  AttentionMask frame_mask;
  frame_mask.n_keys = padded;
  frame_mask.rows.assign(padded, {{0, frames}});
  auto h = nn::linear(w, "enc.in", tape.constant(std::move(x)));
  const auto ts = iota_ts(padded);
  for (std::size_t i = 0; i + 1 < config_.layers; ++i)
    h = nn::block(w, layer_name("enc", i), h, ts, frame_mask, config_.heads);

  Array<T> pool(Shape{n, padded});
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t b = j * r, e = std::min(frames, b + r);
    for (std::size_t f = b; f < e; ++f) pool(j, f) = T(1) / T(e - b);
  }
  h = ops::matmul(tape.constant(std::move(pool)), h);
  std::vector<long> token_ts(n);
  for (std::size_t j = 0; j < n; ++j) token_ts[j] = token_timestamp(j, r);
  h = nn::block(w, layer_name("enc", config_.layers - 1), h, token_ts, AttentionMask::full(n, n), config_.heads);
  h = nn::layer_norm(w, "enc.ln_out", h);
  return {nn::linear(w, "enc.mean", h), nn::linear(w, "enc.logvar", h)};
}

template <typename T>
Var<T> MotionVae<T>::decode(nn::Weights<T>& w, Var<T> latents, std::size_t frames) const {
  const auto& z = latents.value();
  if (z.rank() != 2 || z.cols() != config_.latent_dim) throw DimensionError("latent width mismatch");
  const std::size_t r = config_.rate, n = z.rows(), padded = n * r;
  if (frames == 0 || token_count(frames, r) != n)
    throw DimensionError(std::to_string(n) + " latent tokens cannot decode to " + std::to_string(frames) + " frames");
  auto& tape = w.tape();
  Array<T> repeat(Shape{padded, n}), phase(Shape{padded, r});
  for (std::size_t f = 0; f < padded; ++f) {
    repeat(f, f / r) = T(1);
    phase(f, f % r) = T(1);
  }
  auto h = ops::matmul(tape.constant(std::move(repeat)), nn::linear(w, "dec.in", latents));
  h = ops::add(h, ops::matmul(tape.constant(std::move(phase)), w("dec.phase")));
  const auto ts = iota_ts(padded);
  const auto mask = AttentionMask::full(padded, padded);
  for (std::size_t i = 0; i < config_.layers; ++i) h = nn::block(w, layer_name("dec", i), h, ts, mask, config_.heads);
  auto out = nn::linear(w, "dec.out", nn::layer_norm(w, "dec.ln_out", h));
  return padded == frames ? out : ops::slice(out, 0, frames);
}

template <typename T>
Var<T> gaussian_kl(Var<T> mean, Var<T> logvar) {
  auto& tape = *mean.tape;
  // 0.5 * (mu^2 + exp(lv) - 1 - lv)
  auto terms = ops::sub(ops::add(ops::mul(mean, mean), ops::exp(logvar)),
                        ops::add(logvar, tape.constant(Array<T>(logvar.shape(), T(1)))));
  return ops::scale(ops::mean(terms), T(0.5));
}

template <typename T>
VaeLoss<T> MotionVae<T>::loss(nn::Weights<T>& w, const Array<T>& motion, const Array<T>& noise) const {
  auto post = encode(w, motion);
  if (noise.shape() != post.mean.shape()) throw DimensionError("vae noise must match the latent shape");
  auto& tape = w.tape();
  auto z = ops::add(post.mean, ops::mul(ops::exp(ops::scale(post.logvar, T(0.5))), tape.constant(noise)));
  auto recon = ops::mse(decode(w, z, motion.rows()), tape.constant(motion));
  auto kl = gaussian_kl(post.mean, post.logvar);
  auto total = ops::add(recon, ops::scale(kl, static_cast<T>(config_.kl_weight)));
  return {total, recon.value().item(), kl.value().item()};
}

template <typename T>
Array<T> MotionVae<T>::encode_mean(const Array<T>& motion) const {
  return encode_posterior(motion).first;
}

template <typename T>
std::pair<Array<T>, Array<T>> MotionVae<T>::encode_posterior(const Array<T>& motion) const {
  Tape<T> tape(false);
  nn::Weights<T> w(tape, params_);
  auto post = encode(w, motion);
  return {post.mean.value(), post.logvar.value()};
}

template <typename T>
Array<T> MotionVae<T>::decode_values(const Array<T>& latents, std::size_t frames) const {
  Tape<T> tape(false);
  nn::Weights<T> w(tape, params_);
  return decode(w, tape.constant(latents), frames).value();
}

template <typename T>
void train_vae(MotionVae<T>& model, const std::vector<Array<T>>& corpus, std::uint64_t seed,
               const std::function<void(const TrainLog&)>& on_epoch) {
  const auto& c = model.config();
  if (corpus.empty()) throw ContractError("vae training corpus is empty");
  auto rng = make_stream(seed, 0, "vae_train");
  std::normal_distribution<double> nd;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches_per_epoch = (corpus.size() + c.batch - 1) / c.batch;
  const std::size_t total_steps = std::max<std::size_t>(1, c.epochs * batches_per_epoch);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum_loss = 0, sum_recon = 0, sum_kl = 0, lr = c.lr;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += c.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + c.batch);
      auto& params = model.params();
      params.zero_grad();
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& x = corpus[order[i]];
        Array<T> noise(Shape{token_count(x.rows(), c.rate), c.latent_dim});
        for (auto& v : noise.values()) v = static_cast<T>(nd(rng));
        Tape<T> tape;
        nn::Weights<T> w(tape, params);
        auto l = model.loss(w, x, noise);
        tape.backward(ops::scale(l.total, T(1) / T(b1 - b0)));
        sum_loss += double(l.total.value().item());
        sum_recon += double(l.recon);
        sum_kl += double(l.kl);
      }
      if (c.grad_clip > 0) params.clip_grad_norm(c.grad_clip);
      // cosine decay to 10% of the base rate
      const double progress = double(step) / double(total_steps);
      lr = c.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
      diff::adamw_step(params, {.lr = lr, .weight_decay = c.weight_decay});
      ++step;
    }
    if (on_epoch) {
      const double n = double(corpus.size());
      on_epoch({epoch, sum_loss / n, sum_recon / n, sum_kl / n, lr});
    }
  }
}

template class MotionVae<float>;
template class MotionVae<double>;
template Var<float> gaussian_kl<float>(Var<float>, Var<float>);
template Var<double> gaussian_kl<double>(Var<double>, Var<double>);
template void train_vae<float>(MotionVae<float>&, const std::vector<Array<float>>&, std::uint64_t,
                               const std::function<void(const TrainLog&)>&);
template void train_vae<double>(MotionVae<double>&, const std::vector<Array<double>>&, std::uint64_t,
                                const std::function<void(const TrainLog&)>&);

}  // namespace dyadflow::vae
