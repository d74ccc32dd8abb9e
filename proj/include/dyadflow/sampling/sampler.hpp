#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dyadflow/flow/flow.hpp"

namespace dyadflow::sampling {

using diff::Array;

enum class Mode { ode, sde };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);  // ConfigError on anything but "ode"/"sde"

struct SamplerConfig {
  std::size_t steps = 10;
  double sigma = 0.5;
  double cfg_speak = 1.0;
  double cfg_listen = 1.0;
  Mode mode = Mode::ode;
  std::uint64_t seed = 0;

  double dt() const { return 1.0 / static_cast<double>(steps); }
  void validate() const;
};

// m + dt v
template <typename T>
Array<T> ode_step(const Array<T>& state, const Array<T>& velocity, double dt);

// m + dt v + sigma sqrt(dt) eps. ConfigError for sigma < 0.
template <typename T>
Array<T> sde_step(const Array<T>& state, const Array<T>& velocity, double dt, double sigma, const Array<T>& noise);

// v_uncond + omega (v_cond - v_uncond); omega 1 and 0 return the operands exactly.
template <typename T>
Array<T> cfg_velocity(const Array<T>& v_uncond, const Array<T>& v_cond, double omega);

// Majority VAD over the token's frames; ties and empty spans count as listening.
bool token_speaking(const std::vector<std::uint8_t>& vad, std::size_t token, std::size_t rate);
double token_omega(const SamplerConfig& config, const std::vector<std::uint8_t>& vad, std::size_t token,
                   std::size_t rate);

template <typename T>
struct StepRecord {
  Array<T> pre;
  Array<T> velocity;
  Array<T> noise;  // zeros in ODE mode
  Array<T> post;
};

template <typename T>
struct GenerationTrace {
  Mode mode = Mode::ode;
  std::size_t steps = 0;
  double sigma = 0.0;
  std::vector<std::vector<StepRecord<T>>> tokens;  // [token][step]
  Array<T> latents;                                // n x D_v
  Array<T> motion;                                 // filled by callers that decode
  std::size_t cache_bytes = 0;                     // peak KV-cache footprint, both CFG branches
};

// Auto-regressive generation. Every token starts from N(0, I), is integrated
// over T steps and appended to the history. `carry` seeds the history
// without being regenerated; it is not part of the returned latents.
template <typename T>
GenerationTrace<T> generate_sequence(const flow::FlowModel<T>& model, const flow::FlowContext<T>& ctx,
                                     std::size_t n_tokens, const SamplerConfig& config,
                                     const std::vector<Array<T>>& carry = {});

// Recomputes post-states from recorded pre-states, velocities and noises.
template <typename T>
bool replay_matches(const GenerationTrace<T>& trace);

template <typename T>
struct WindowedResult {
  Array<T> latents;  // ceil(frames/r) x D_v
  Array<T> motion;   // frames x d, when a decoder is given
  std::size_t windows = 0;
  std::vector<std::size_t> cache_bytes;  // peak KV-cache bytes per window
};

// Conditioning for frames [begin, end), with partner latents for the
// matching token span.
template <typename T>
using ContextSlicer = std::function<flow::FlowContext<T>(std::size_t frame_begin, std::size_t frame_end)>;
template <typename T>
using Decoder = std::function<Array<T>(const Array<T>& latents, std::size_t frames)>;

// Windows of W tokens; each window after the first carries the latest k
// latents as history and generates W - k new ones.
template <typename T>
WindowedResult<T> sliding_window_generate(const flow::FlowModel<T>& model, const ContextSlicer<T>& slice,
                                          std::size_t total_frames, std::size_t window, std::size_t carry,
                                          const SamplerConfig& config, const Decoder<T>& decode = {});

}  // namespace dyadflow::sampling
