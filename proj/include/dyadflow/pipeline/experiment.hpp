#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dyadflow/data/dyad.hpp"
#include "dyadflow/data/norm.hpp"
#include "dyadflow/io/container.hpp"
#include "dyadflow/pipeline/config.hpp"
#include "json.hpp"

namespace dyadflow::pipeline {

// Models train and sample in single precision; metrics run in double.
using Real = float;
using FlowModel = flow::FlowModel<Real>;
using Context = flow::FlowContext<Real>;

using Logger = std::function<void(const nlohmann::json&)>;

struct Corpus {
  data::DyadConfig dyad;
  std::vector<data::DyadSample> train;
  std::vector<data::DyadSample> eval;
};

// One sample with the configured smoothing applied to both motion streams.
data::DyadSample make_sample(const RunConfig& config, const data::DyadConfig& dyad, std::uint64_t index,
                             const data::GenerateOptions& options = {});
// Train samples use indices [0, n); eval samples follow and carry no text.
Corpus make_corpus(const RunConfig& config);

io::Container corpus_to_container(const Corpus& corpus);
Corpus corpus_from_container(const io::Container& c, const data::DyadConfig& dyad);

// VAE plus the two normalizations around it.
struct Codec {
  vae::MotionVae<Real> vae;
  data::NormStats motion_norm;
  data::NormStats latent_norm;

  std::size_t rate() const { return vae.config().rate; }
  std::size_t latent_dim() const { return vae.config().latent_dim; }
  // raw motion -> normalized latents (posterior means)
  diff::Array<Real> encode(const diff::Array<double>& motion) const;
  // normalized latents -> channel-normalized motion
  diff::Array<double> decode_normalized(const diff::Array<Real>& latents, std::size_t frames) const;
  // normalized latents -> raw motion
  diff::Array<double> decode(const diff::Array<Real>& latents, std::size_t frames) const;
};

Codec train_codec(const RunConfig& config, const Corpus& corpus, const Logger& log = {});

Context make_context(const Codec& codec, const data::DyadSample& sample);
FlowModel make_flow(const RunConfig& config, const Codec& codec, std::uint64_t seed);
FlowModel train_stage1(const RunConfig& config, const Codec& codec, const Corpus& corpus, const Logger& log = {});
// Stage 2 in place; the reference is the policy at entry.
void train_stage2(const RunConfig& config, FlowModel& policy, const Codec& codec, const Corpus& corpus,
                  const Logger& log = {});

// Autoregressive generation of the whole context, decoded to raw motion.
diff::Array<double> generate_motion(const FlowModel& flow, const Codec& codec, const Context& ctx,
                                    const sampling::SamplerConfig& sampler);

// ---- checkpoints ---------------------------------------------------------

void save_codec(const std::filesystem::path& path, const Codec& codec, const nlohmann::json& config_echo,
                const std::string& manifest);
Codec load_codec(const std::filesystem::path& path, const RunConfig& config);
void save_flow(const std::filesystem::path& path, const FlowModel& flow, const nlohmann::json& config_echo,
               const std::string& manifest);
FlowModel load_flow(const std::filesystem::path& path, const RunConfig& config, const Codec& codec);
// Adds the config echo and manifest reference every artifact carries.
void stamp(io::Container& c, const nlohmann::json& config_echo, const std::string& manifest);

// ---- evaluation -----------------------------------------------------------

// Listening-side statistics used by the collapse and recovery checks.
struct ListenStats {
  double vstd_pred = 0.0;  // velocity std over listening frames, expr channels
  double vstd_gt = 0.0;
  double ratio = 0.0;
  double fdd = 0.0;        // listening FDD-analogue
  double speak_mse = 0.0;  // speaking-frame MSE over all channels
  nlohmann::json to_json() const;
};

struct EvalResult {
  ListenStats listen;
  nlohmann::json metrics;  // full table per segment kind
};

// Generates every eval context (ODE unless the sampler says otherwise) and
// scores it against ground truth.
EvalResult evaluate(const RunConfig& config, const FlowModel& flow, const Codec& codec, const Corpus& corpus,
                    const sampling::SamplerConfig& sampler);
// Velocity-std distance between two independent ground-truth draws.
double noise_floor(const RunConfig& config, const Corpus& corpus);

double cfg_listen_vstd(const RunConfig& config, const FlowModel& flow, const Codec& codec, const Corpus& corpus,
                       double omega_listen);

struct SemanticResult {
  std::size_t segments = 0;
  std::size_t agree = 0;
  double agreement() const { return segments ? double(agree) / double(segments) : 0.0; }
};
SemanticResult semantic_agreement(const RunConfig& config, const FlowModel& flow, const Codec& codec);

struct LongResult {
  double vstd_first = 0.0;
  double vstd_last = 0.0;
  std::size_t windows = 0;
  std::size_t peak_cache_bytes = 0;
  std::size_t short_peak_cache_bytes = 0;  // same check on a quarter-length run
  double ratio() const { return vstd_first > 0 ? vstd_last / vstd_first : 0.0; }
};
LongResult long_sequence(const RunConfig& config, const FlowModel& flow, const Codec& codec);

// ---- full acceptance experiment -------------------------------------------

struct DemoReport {
  nlohmann::json report;  // deterministic: no timings
  bool all_pass = false;
};

DemoReport demo_collapse(const RunConfig& config, const Logger& log = {});

}  // namespace dyadflow::pipeline
