#include "dyadflow/sampling/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>

#include "dyadflow/errors.hpp"
#include "dyadflow/rng.hpp"

namespace dyadflow::sampling {

std::string mode_name(Mode m) { return m == Mode::ode ? "ode" : "sde"; }

Mode parse_mode(const std::string& s) {
  if (s == "ode") return Mode::ode;
  if (s == "sde") return Mode::sde;
  throw ConfigError("sampler mode must be ode or sde, got '" + s + "'");
}

void SamplerConfig::validate() const {
  if (steps == 0) throw ConfigError("sampler steps must be >= 1");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sampler sigma must be finite and >= 0");
  if (!std::isfinite(cfg_speak) || !std::isfinite(cfg_listen)) throw ConfigError("cfg weights must be finite");
}

namespace {

template <typename T>
void require_same(const Array<T>& a, const Array<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shapes " + diff::shape_str(a.shape()) + " and " +
                         diff::shape_str(b.shape()) + " differ");
}

template <typename T>
void require_finite(const Array<T>& a, const char* what) {
  for (T v : a.values())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " produced a non-finite value");
}

}  // namespace

template <typename T>
Array<T> ode_step(const Array<T>& state, const Array<T>& velocity, double dt) {
  require_same(state, velocity, "ode_step");
  Array<T> out = state;
  const T h = static_cast<T>(dt);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * velocity[i];
  return out;
}

template <typename T>
Array<T> sde_step(const Array<T>& state, const Array<T>& velocity, double dt, double sigma, const Array<T>& noise) {
  if (sigma < 0.0) throw ConfigError("sde_step sigma must be >= 0");
  if (sigma == 0.0) return ode_step(state, velocity, dt);
  require_same(state, velocity, "sde_step");
  require_same(state, noise, "sde_step");
  Array<T> out = state;
  const T h = static_cast<T>(dt);
  const T c = static_cast<T>(sigma * std::sqrt(dt));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * velocity[i] + c * noise[i];
  return out;
}

template <typename T>
Array<T> cfg_velocity(const Array<T>& v_uncond, const Array<T>& v_cond, double omega) {
  require_same(v_uncond, v_cond, "cfg_velocity");
  if (omega == 1.0) return v_cond;
  if (omega == 0.0) return v_uncond;
  Array<T> out = v_uncond;
  const T w = static_cast<T>(omega);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * (v_cond[i] - v_uncond[i]);
  return out;
}

bool token_speaking(const std::vector<std::uint8_t>& vad, std::size_t token, std::size_t rate) {
  const std::size_t b = std::min(vad.size(), token * rate), e = std::min(vad.size(), (token + 1) * rate);
  std::size_t on = 0;
  for (std::size_t f = b; f < e; ++f) on += vad[f] ? 1 : 0;
  return 2 * on > e - b;
}

double token_omega(const SamplerConfig& config, const std::vector<std::uint8_t>& vad, std::size_t token,
                   std::size_t rate) {
  return token_speaking(vad, token, rate) ? config.cfg_speak : config.cfg_listen;
}

template <typename T>
GenerationTrace<T> generate_sequence(const flow::FlowModel<T>& model, const flow::FlowContext<T>& ctx,
                                     std::size_t n_tokens, const SamplerConfig& config,
                                     const std::vector<Array<T>>& carry) {
  config.validate();
  if (n_tokens == 0) throw ContractError("generate_sequence needs at least one token");
  const std::size_t dv = model.latent_dim();
  const std::size_t rate = model.rate();
  ctx.validate(rate, dv, model.audio_dim(), model.text_vocab());
  if (carry.size() + n_tokens > ctx.partner_latents.rows())
    throw ContractError("generate_sequence asked for more tokens than the context covers");

  bool need_uncond = false;
  for (std::size_t l = 0; l < n_tokens; ++l)
    need_uncond = need_uncond || token_omega(config, ctx.actor_vad, carry.size() + l, rate) != 1.0;

  flow::FlowSession<T> cond(model, ctx, flow::Dropout::none());
  std::optional<flow::FlowSession<T>> uncond;
  if (need_uncond) uncond.emplace(model, ctx, flow::Dropout::all());
  for (const auto& c : carry) {
    cond.append(c);
    if (uncond) uncond->append(c);
  }

  // Two streams so ODE and SDE runs with one seed start from the same x0.
  auto init_rng = make_stream(config.seed, 0, "sampler/init");
  auto noise_rng = make_stream(config.seed, 0, "sampler/noise");
  // one distribution per stream: normal_distribution caches its second draw
  std::normal_distribution<double> init_nd, noise_nd;
  const bool sde = config.mode == Mode::sde;
  const double dt = config.dt();

  GenerationTrace<T> trace;
  trace.mode = config.mode;
  trace.steps = config.steps;
  trace.sigma = sde ? config.sigma : 0.0;
  trace.tokens.resize(n_tokens);
  trace.latents = Array<T>(diff::Shape{n_tokens, dv});
  for (std::size_t l = 0; l < n_tokens; ++l) {
    const double omega = token_omega(config, ctx.actor_vad, carry.size() + l, rate);
    Array<T> state(diff::Shape{1, dv});
    for (auto& v : state.values()) v = static_cast<T>(init_nd(init_rng));
    auto& steps = trace.tokens[l];
    steps.reserve(config.steps);
    for (std::size_t s = 0; s < config.steps; ++s) {
      const T t = static_cast<T>(static_cast<double>(s) * dt);
      Array<T> v = cond.velocity(state, t);
      if (omega != 1.0) v = cfg_velocity(uncond->velocity(state, t), v, omega);
      Array<T> eps(diff::Shape{1, dv});
      if (sde)
        for (auto& e : eps.values()) e = static_cast<T>(noise_nd(noise_rng));
      Array<T> next = sde ? sde_step(state, v, dt, config.sigma, eps) : ode_step(state, v, dt);
      require_finite(next, "sampler step");
      steps.push_back({state, std::move(v), std::move(eps), next});
      state = std::move(next);
    }
    std::copy(state.values().begin(), state.values().end(), trace.latents.row(l).begin());
    trace.cache_bytes = std::max(trace.cache_bytes, cond.cache_bytes() + (uncond ? uncond->cache_bytes() : 0));
    // the last token is never attended to, so it is not cached
    if (l + 1 == n_tokens) break;
    cond.append(state);
    if (uncond) uncond->append(state);
  }
  return trace;
}

template <typename T>
bool replay_matches(const GenerationTrace<T>& trace) {
  const double dt = 1.0 / static_cast<double>(trace.steps);
  for (const auto& token : trace.tokens)
    for (const auto& s : token) {
      const auto post = trace.mode == Mode::sde ? sde_step(s.pre, s.velocity, dt, trace.sigma, s.noise)
                                                : ode_step(s.pre, s.velocity, dt);
      if (post.storage() != s.post.storage()) return false;
    }
  return true;
}

template <typename T>
WindowedResult<T> sliding_window_generate(const flow::FlowModel<T>& model, const ContextSlicer<T>& slice,
                                          std::size_t total_frames, std::size_t window, std::size_t carry,
                                          const SamplerConfig& config, const Decoder<T>& decode) {
  if (window == 0 || carry >= window) throw ConfigError("sliding window needs W >= 1 and 0 <= k < W");
  if (total_frames == 0) throw ContractError("sliding window over zero frames");
  const std::size_t rate = model.rate(), dv = model.latent_dim();
  const std::size_t n_tokens = (total_frames + rate - 1) / rate;

  WindowedResult<T> out;
  out.latents = Array<T>(diff::Shape{n_tokens, dv});
  std::vector<T> motion;
  std::size_t motion_cols = 0;
  std::size_t next = 0;  // first token not yet generated
  while (next < n_tokens) {
    const std::size_t k = next == 0 ? 0 : carry;
    const std::size_t begin = next - k;
    const std::size_t end = std::min(n_tokens, begin + window);
    const std::size_t f0 = begin * rate, f1 = std::min(total_frames, end * rate);
    const auto ctx = slice(f0, f1);
    std::vector<Array<T>> hist;
    for (std::size_t j = begin; j < next; ++j) {
      Array<T> row(diff::Shape{1, dv});
      std::copy(out.latents.row(j).begin(), out.latents.row(j).end(), row.values().begin());
      hist.push_back(std::move(row));
    }
    SamplerConfig wc = config;
    wc.seed = stream_seed(config.seed, out.windows, "sampler/window");
    const auto trace = generate_sequence(model, ctx, end - next, wc, hist);
    for (std::size_t j = next; j < end; ++j)
      std::copy(trace.latents.row(j - next).begin(), trace.latents.row(j - next).end(), out.latents.row(j).begin());

    out.cache_bytes.push_back(trace.cache_bytes);

    if (decode) {
      Array<T> win(diff::Shape{end - begin, dv});
      for (std::size_t j = begin; j < end; ++j)
        std::copy(out.latents.row(j).begin(), out.latents.row(j).end(), win.row(j - begin).begin());
      const auto m = decode(win, f1 - f0);
      if (m.rows() != f1 - f0) throw DimensionError("window decoder returned the wrong frame count");
      motion_cols = m.cols();
      // carried frames were already emitted by the previous window
      const std::size_t skip = k * rate;
      motion.insert(motion.end(), m.data() + skip * motion_cols, m.data() + m.size());
    }
    next = end;
    ++out.windows;
  }
  if (decode) out.motion = Array<T>(diff::Shape{total_frames, motion_cols}, std::move(motion));
  return out;
}

#define DYADFLOW_SAMPLING_INSTANTIATE(T)                                                                      \
  template Array<T> ode_step<T>(const Array<T>&, const Array<T>&, double);                                  \
  template Array<T> sde_step<T>(const Array<T>&, const Array<T>&, double, double, const Array<T>&);          \
  template Array<T> cfg_velocity<T>(const Array<T>&, const Array<T>&, double);                              \
  template GenerationTrace<T> generate_sequence<T>(const flow::FlowModel<T>&, const flow::FlowContext<T>&,  \
                                                   std::size_t, const SamplerConfig&,                       \
                                                   const std::vector<Array<T>>&);                           \
  template bool replay_matches<T>(const GenerationTrace<T>&);                                               \
  template WindowedResult<T> sliding_window_generate<T>(const flow::FlowModel<T>&, const ContextSlicer<T>&, \
                                                        std::size_t, std::size_t, std::size_t,              \
                                                        const SamplerConfig&, const Decoder<T>&);

DYADFLOW_SAMPLING_INSTANTIATE(float)
DYADFLOW_SAMPLING_INSTANTIATE(double)

}  // namespace dyadflow::sampling
