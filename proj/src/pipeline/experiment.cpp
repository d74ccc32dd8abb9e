#include "dyadflow/pipeline/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "dyadflow/data/savgol.hpp"
#include "dyadflow/errors.hpp"
#include "dyadflow/log.hpp"
#include "dyadflow/metrics/metrics.hpp"
#include "dyadflow/rng.hpp"

namespace dyadflow::pipeline {

using diff::Array;
using diff::Shape;
using nlohmann::json;
using metrics::SegmentKind;
using metrics::SegmentSet;

namespace {

void emit(const Logger& log, json event) {
  if (log) log(event);
}

Array<std::uint8_t> bytes_array(const std::string& s) {
  return Array<std::uint8_t>(Shape{s.size()}, std::vector<std::uint8_t>(s.begin(), s.end()));
}

Array<std::uint8_t> flags_array(const std::vector<std::uint8_t>& v) { return Array<std::uint8_t>(Shape{v.size()}, v); }

std::vector<std::size_t> all_channels(std::size_t d) {
  std::vector<std::size_t> c(d);
  for (std::size_t i = 0; i < d; ++i) c[i] = i;
  return c;
}

std::vector<std::size_t> concat_channels(const data::DyadConfig& dyad, const std::vector<std::string>& groups) {
  std::vector<std::size_t> out;
  for (const auto& g : groups) {
    const auto c = dyad.group_channels(g);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

SegmentSet segments_of(const data::DyadSample& s) { return metrics::vad_segments(s.actor_vad, s.partner_vad); }

// Segments clipped to frames [a, b).
SegmentSet clip_segments(const SegmentSet& segs, std::size_t a, std::size_t b) {
  SegmentSet out;
  for (auto s : segs) {
    s.start = std::max(s.start, a);
    s.end = std::min(s.end, b);
    if (s.end > s.start) out.push_back(s);
  }
  return out;
}

Array<Real> rows_of(const Array<double>& a, std::size_t begin, std::size_t end) {
  Array<Real> out(Shape{end - begin, a.cols()});
  for (std::size_t f = begin; f < end; ++f)
    for (std::size_t c = 0; c < a.cols(); ++c) out(f - begin, c) = static_cast<Real>(a(f, c));
  return out;
}

void store_params(io::Container& c, const std::string& prefix, const diff::ParamStore<Real>& p) {
  for (const auto& e : p.entries()) c.add(prefix + e.name, e.value);
}

diff::ParamStore<Real> load_params(const io::Container& c, const std::string& prefix) {
  diff::ParamStore<Real> p;
  for (const auto& [name, array] : c.entries())
    if (name.rfind(prefix, 0) == 0) p.add(name.substr(prefix.size()), std::get<Array<float>>(array));
  if (p.size() == 0) throw FormatError("checkpoint has no '" + prefix + "' parameters");
  return p;
}

void store_norm(io::Container& c, const std::string& prefix, const data::NormStats& n) {
  c.add(prefix + "mean", Array<double>(Shape{n.mean.size()}, n.mean));
  c.add(prefix + "std", Array<double>(Shape{n.std.size()}, n.std));
}

data::NormStats load_norm(const io::Container& c, const std::string& prefix) {
  data::NormStats n;
  n.mean = c.get_f64(prefix + "mean").storage();
  n.std = c.get_f64(prefix + "std").storage();
  if (n.mean.size() != n.std.size()) throw FormatError("normalization stats disagree in size");
  return n;
}

// Checks a loaded parameter set against a freshly built model of the
// configured shape.
void check_layout(const diff::ParamStore<Real>& loaded, const diff::ParamStore<Real>& expected,
                  const std::string& what) {
  if (loaded.size() != expected.size()) throw FormatError(what + " checkpoint does not match the configured model");
  for (std::size_t i = 0; i < loaded.size(); ++i)
    if (loaded.entries()[i].name != expected.entries()[i].name ||
        loaded.entries()[i].value.shape() != expected.entries()[i].value.shape())
      throw FormatError(what + " checkpoint does not match the configured model at '" +
                        expected.entries()[i].name + "'");
}

sampling::SamplerConfig eval_sampler(const sampling::SamplerConfig& base, std::size_t i, const char* what) {
  auto s = base;
  s.seed = stream_seed(base.seed, i, what);
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---- data ------------------------------------------------------------------

data::DyadSample make_sample(const RunConfig& config, const data::DyadConfig& dyad, std::uint64_t index,
                             const data::GenerateOptions& options) {
  auto s = data::generate_dyad(dyad, index, options);
  if (config.data.smooth) {
    s.actor_motion = data::savgol_smooth(s.actor_motion, config.data.savgol_window, config.data.savgol_order);
    s.partner_motion = data::savgol_smooth(s.partner_motion, config.data.savgol_window, config.data.savgol_order);
  }
  return s;
}

Corpus make_corpus(const RunConfig& config) {
  Corpus c;
  c.dyad = config.data.dyad;
  const auto n = config.data.train_samples;
  for (std::size_t i = 0; i < n; ++i) c.train.push_back(make_sample(config, c.dyad, i));
  data::GenerateOptions untexted;
  untexted.force_text = data::kNoText;
  for (std::size_t i = 0; i < config.data.eval_samples; ++i)
    c.eval.push_back(make_sample(config, c.dyad, n + i, untexted));
  return c;
}

io::Container corpus_to_container(const Corpus& corpus) {
  io::Container c;
  auto put = [&](const std::string& split, const std::vector<data::DyadSample>& samples) {
    c.add(split + "/count", Array<double>::scalar(double(samples.size())));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      const std::string p = split + "/" + std::to_string(i) + "/";
      c.add(p + "actor_motion", s.actor_motion);
      c.add(p + "partner_motion", s.partner_motion);
      c.add(p + "actor_audio", s.actor_audio);
      c.add(p + "partner_audio", s.partner_audio);
      c.add(p + "actor_vad", flags_array(s.actor_vad));
      c.add(p + "partner_vad", flags_array(s.partner_vad));
      c.add(p + "text", Array<double>::scalar(double(s.text_token)));
      Array<double> utt(Shape{s.partner_utterances.size(), 3});
      for (std::size_t k = 0; k < s.partner_utterances.size(); ++k) {
        const auto& u = s.partner_utterances[k];
        utt(k, 0) = double(u.start), utt(k, 1) = double(u.end), utt(k, 2) = double(u.intent);
      }
      c.add(p + "utterances", utt);
      Array<double> lis(Shape{s.listening.size(), 4});
      for (std::size_t k = 0; k < s.listening.size(); ++k) {
        const auto& l = s.listening[k];
        lis(k, 0) = double(l.start), lis(k, 1) = double(l.end), lis(k, 2) = double(l.intent), lis(k, 3) = double(l.mode);
      }
      c.add(p + "listening", lis);
    }
  };
  put("train", corpus.train);
  put("eval", corpus.eval);
  return c;
}

Corpus corpus_from_container(const io::Container& c, const data::DyadConfig& dyad) {
  Corpus corpus;
  corpus.dyad = dyad;
  auto take = [&](const std::string& split, std::vector<data::DyadSample>& out) {
    const auto n = static_cast<std::size_t>(c.get_f64(split + "/count")[0]);
    for (std::size_t i = 0; i < n; ++i) {
      const std::string p = split + "/" + std::to_string(i) + "/";
      data::DyadSample s;
      s.actor_motion = c.get_f64(p + "actor_motion");
      s.partner_motion = c.get_f64(p + "partner_motion");
      s.actor_audio = c.get_f64(p + "actor_audio");
      s.partner_audio = c.get_f64(p + "partner_audio");
      s.actor_vad = c.get<std::uint8_t>(p + "actor_vad").storage();
      s.partner_vad = c.get<std::uint8_t>(p + "partner_vad").storage();
      s.text_token = static_cast<int>(c.get_f64(p + "text")[0]);
      const auto utt = c.get_f64(p + "utterances");
      for (std::size_t k = 0; k < utt.rows(); ++k)
        s.partner_utterances.push_back({std::size_t(utt(k, 0)), std::size_t(utt(k, 1)), int(utt(k, 2))});
      const auto lis = c.get_f64(p + "listening");
      for (std::size_t k = 0; k < lis.rows(); ++k)
        s.listening.push_back({std::size_t(lis(k, 0)), std::size_t(lis(k, 1)), int(lis(k, 2)), int(lis(k, 3))});
      if (s.actor_motion.rows() != s.frames() || s.actor_motion.cols() != dyad.channels())
        throw FormatError("dataset '" + p + "' does not match the configured channel layout");
      out.push_back(std::move(s));
    }
  };
  take("train", corpus.train);
  take("eval", corpus.eval);
  return corpus;
}

// ---- codec -------------------------------------------------------------------

Array<Real> Codec::encode(const Array<double>& motion) const {
  const auto norm = data::normalize(motion, motion_norm).cast<Real>();
  const auto lat = vae.encode_mean(norm).cast<double>();
  return data::normalize(lat, latent_norm).cast<Real>();
}

Array<double> Codec::decode_normalized(const Array<Real>& latents, std::size_t frames) const {
  const auto raw = data::denormalize(latents.cast<double>(), latent_norm).cast<Real>();
  return vae.decode_values(raw, frames).cast<double>();
}

Array<double> Codec::decode(const Array<Real>& latents, std::size_t frames) const {
  return data::denormalize(decode_normalized(latents, frames), motion_norm);
}

Codec train_codec(const RunConfig& config, const Corpus& corpus, const Logger& log) {
  std::vector<Array<double>> motions;
  for (const auto& s : corpus.train) {
    motions.push_back(s.actor_motion);
    motions.push_back(s.partner_motion);
  }
  const auto motion_norm = data::fit_norm_stats(motions);
  std::vector<Array<Real>> normalized;
  for (const auto& m : motions) normalized.push_back(data::normalize(m, motion_norm).cast<Real>());

  vae::MotionVae<Real> model(config.vae, corpus.dyad.channels(), config.stage_seed("vae/init"));
  vae::train_vae(model, normalized, config.stage_seed("vae/train"), [&](const vae::TrainLog& l) {
    emit(log, {{"stage", "vae"}, {"epoch", l.epoch}, {"loss", l.loss}, {"recon", l.recon}, {"kl", l.kl}, {"lr", l.lr}});
  });

  std::vector<Array<double>> latents;
  for (const auto& m : normalized) latents.push_back(model.encode_mean(m).cast<double>());
  const auto latent_norm = data::fit_norm_stats(latents);
  return Codec{std::move(model), motion_norm, latent_norm};
}

// ---- flow ----------------------------------------------------------------------

Context make_context(const Codec& codec, const data::DyadSample& sample) {
  Context ctx;
  ctx.text_token = sample.text_token;
  ctx.actor_audio = sample.actor_audio.cast<Real>();
  ctx.partner_audio = sample.partner_audio.cast<Real>();
  ctx.partner_latents = codec.encode(sample.partner_motion);
  ctx.actor_vad = sample.actor_vad;
  return ctx;
}

FlowModel make_flow(const RunConfig& config, const Codec& codec, std::uint64_t seed) {
  return FlowModel(config.flow, codec.latent_dim(), config.data.dyad.audio_dim, config.data.dyad.modes_per_intent + 1,
                   codec.rate(), seed);
}

FlowModel train_stage1(const RunConfig& config, const Codec& codec, const Corpus& corpus, const Logger& log) {
  std::vector<flow::FlowExample<Real>> examples;
  for (const auto& s : corpus.train) examples.push_back({make_context(codec, s), codec.encode(s.actor_motion)});
  auto model = make_flow(config, codec, config.stage_seed("flow/init"));
  flow::train_flow(model, examples, config.stage_seed("flow/train"), [&](const flow::FlowTrainLog& l) {
    emit(log, {{"stage", "flow"}, {"epoch", l.epoch}, {"loss", l.loss}, {"lr", l.lr}});
  });
  return model;
}

void train_stage2(const RunConfig& config, FlowModel& policy, const Codec& codec, const Corpus& corpus,
                  const Logger& log) {
  const auto reference = policy.params().snapshot();
  std::vector<rl::GdpoExample<Real>> examples;
  for (const auto& s : corpus.train) {
    rl::GdpoExample<Real> ex;
    ex.context = make_context(codec, s);
    ex.motion = data::normalize(s.actor_motion, codec.motion_norm);
    ex.listening.resize(s.frames());
    for (std::size_t f = 0; f < s.frames(); ++f) ex.listening[f] = s.is_listening(f) ? 1 : 0;
    examples.push_back(std::move(ex));
  }
  std::vector<std::vector<std::size_t>> groups;
  for (const auto& g : corpus.dyad.groups) groups.push_back(corpus.dyad.group_channels(g.name));
  const rl::MotionDecoder<Real> decode = [&](const Array<Real>& lat, std::size_t frames) {
    return codec.decode_normalized(lat, frames);
  };
  rl::posttrain_gdpo<Real>(policy, reference, examples, decode, groups, config.gdpo, config.stage_seed("gdpo"),
                           [&](const rl::GdpoIterationLog& l) {
                             auto j = json::parse(l.to_json());
                             j["stage"] = "gdpo";
                             emit(log, j);
                           });
}

Array<double> generate_motion(const FlowModel& flow, const Codec& codec, const Context& ctx,
                              const sampling::SamplerConfig& sampler) {
  const auto frames = ctx.frames();
  const auto trace = sampling::generate_sequence(flow, ctx, vae::token_count(frames, codec.rate()), sampler);
  return codec.decode(trace.latents, frames);
}

// ---- checkpoints -----------------------------------------------------------------

void stamp(io::Container& c, const json& config_echo, const std::string& manifest) {
  c.set("meta/config", bytes_array(config_echo.dump()));
  c.set("meta/manifest", bytes_array(manifest));
}

void save_codec(const std::filesystem::path& path, const Codec& codec, const json& config_echo,
                const std::string& manifest) {
  io::Container c;
  store_params(c, "vae/", codec.vae.params());
  store_norm(c, "norm/motion/", codec.motion_norm);
  store_norm(c, "norm/latent/", codec.latent_norm);
  stamp(c, config_echo, manifest);
  io::save_container(path, c);
}

Codec load_codec(const std::filesystem::path& path, const RunConfig& config) {
  const auto c = io::load_container(path);
  const auto channels = config.data.dyad.channels();
  auto params = load_params(c, "vae/");
  check_layout(params, vae::MotionVae<Real>(config.vae, channels, 0).params(), "vae");
  Codec codec{vae::MotionVae<Real>(config.vae, channels, std::move(params)), load_norm(c, "norm/motion/"),
              load_norm(c, "norm/latent/")};
  if (codec.motion_norm.channels() != channels || codec.latent_norm.channels() != config.vae.latent_dim)
    throw FormatError("normalization stats do not match the configured model");
  return codec;
}

void save_flow(const std::filesystem::path& path, const FlowModel& flow, const json& config_echo,
               const std::string& manifest) {
  io::Container c;
  store_params(c, "flow/", flow.params());
  stamp(c, config_echo, manifest);
  io::save_container(path, c);
}

FlowModel load_flow(const std::filesystem::path& path, const RunConfig& config, const Codec& codec) {
  const auto c = io::load_container(path);
  auto params = load_params(c, "flow/");
  check_layout(params, make_flow(config, codec, 0).params(), "flow");
  return FlowModel(config.flow, codec.latent_dim(), config.data.dyad.audio_dim, config.data.dyad.modes_per_intent + 1,
                   codec.rate(), std::move(params));
}

// ---- evaluation --------------------------------------------------------------------

json ListenStats::to_json() const {
  return {{"listen_velocity_std_pred", vstd_pred}, {"listen_velocity_std_gt", vstd_gt},
          {"listen_velocity_std_ratio", ratio},   {"listen_fdd", fdd},
          {"speak_mse", speak_mse}};
}

EvalResult evaluate(const RunConfig& config, const FlowModel& flow, const Codec& codec, const Corpus& corpus,
                    const sampling::SamplerConfig& sampler) {
  const auto& dyad = corpus.dyad;
  std::vector<Array<double>> pred, gt, partner;
  std::vector<SegmentSet> listen, speak;
  for (std::size_t i = 0; i < corpus.eval.size(); ++i) {
    const auto& s = corpus.eval[i];
    pred.push_back(generate_motion(flow, codec, make_context(codec, s), eval_sampler(sampler, i, "eval")));
    gt.push_back(s.actor_motion);
    partner.push_back(s.partner_motion);
    const auto segs = segments_of(s);
    listen.push_back(metrics::filter(segs, SegmentKind::listening));
    speak.push_back(metrics::filter(segs, SegmentKind::speaking));
  }
  const auto expr = dyad.group_channels("expr");
  const auto jaw = dyad.group_channels("jaw");
  const auto head = concat_channels(dyad, {"neck", "rot"});
  const auto all = all_channels(dyad.channels());

  EvalResult r;
  auto& L = r.listen;
  L.vstd_pred = metrics::velocity_std(pred, expr, listen);
  L.vstd_gt = metrics::velocity_std(gt, expr, listen);
  L.ratio = L.vstd_gt > 0 ? L.vstd_pred / L.vstd_gt : 0.0;
  L.fdd = std::abs(L.vstd_pred - L.vstd_gt);
  L.speak_mse = metrics::mse(pred, gt, all, speak);

  auto table = [&](const std::vector<SegmentSet>& segs, bool speaking) {
    json t;
    t["fdd"] = metrics::dynamic_deviation(pred, gt, expr, segs);
    t["pdd"] = metrics::dynamic_deviation(pred, gt, head, segs);
    t["jdd"] = metrics::dynamic_deviation(pred, gt, jaw, segs);
    t["fd"] = metrics::fd(pred, gt, all, segs);
    t["p_fd"] = metrics::paired_fd(pred, partner, gt, all, segs);
    t["mse"] = metrics::mse(pred, gt, all, segs);
    double rp = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) rp += metrics::rpcc(pred[i], gt[i], partner[i], expr, segs[i]);
    t["rpcc_analogue"] = rp / double(pred.size());
    if (speaking) {
      double lve = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        if (segs[i].empty()) continue;
        lve += metrics::lve_analogue(pred[i], gt[i], jaw, segs[i]);
        ++n;
      }
      t["lve_analogue"] = n ? lve / double(n) : 0.0;
    }
    return t;
  };
  r.metrics["speaking"] = table(speak, true);
  r.metrics["listening"] = table(listen, false);
  double mhd = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) mhd += metrics::mhd_analogue(pred[i], gt[i]);
  r.metrics["mhd_analogue"] = mhd / double(pred.size());

  // SID: three draws on the first few contexts.
  constexpr std::size_t kSidContexts = 4, kSidDraws = 3;
  double sid = 0.0;
  const auto nsid = std::min(kSidContexts, corpus.eval.size());
  for (std::size_t i = 0; i < nsid; ++i) {
    const auto ctx = make_context(codec, corpus.eval[i]);
    std::vector<Array<double>> draws;
    for (std::size_t k = 0; k < kSidDraws; ++k)
      draws.push_back(generate_motion(flow, codec, ctx, eval_sampler(sampler, i * kSidDraws + k, "eval/sid")));
    sid += metrics::sid_diversity(draws, all);
  }
  r.metrics["sid_analogue"] = nsid ? sid / double(nsid) : 0.0;
  r.metrics["summary"] = L.to_json();
  return r;
}

double noise_floor(const RunConfig& config, const Corpus& corpus) {
  const auto expr = corpus.dyad.group_channels("expr");
  std::vector<Array<double>> a, b;
  std::vector<SegmentSet> listen;
  data::GenerateOptions redraw;
  redraw.force_text = data::kNoText;
  redraw.mode_salt = 1;
  for (std::size_t i = 0; i < corpus.eval.size(); ++i) {
    a.push_back(corpus.eval[i].actor_motion);
    b.push_back(make_sample(config, corpus.dyad, config.data.train_samples + i, redraw).actor_motion);
    listen.push_back(metrics::filter(segments_of(corpus.eval[i]), SegmentKind::listening));
  }
  return metrics::dynamic_deviation(b, a, expr, listen);
}

double cfg_listen_vstd(const RunConfig& config, const FlowModel& flow, const Codec& codec, const Corpus& corpus,
                       double omega_listen) {
  auto sampler = config.sampler;
  sampler.mode = sampling::Mode::ode;
  sampler.cfg_speak = 1.0;
  sampler.cfg_listen = omega_listen;
  std::vector<Array<double>> pred;
  std::vector<SegmentSet> listen;
  for (std::size_t i = 0; i < corpus.eval.size(); ++i) {
    const auto& s = corpus.eval[i];
    pred.push_back(generate_motion(flow, codec, make_context(codec, s), eval_sampler(sampler, i, "eval")));
    listen.push_back(metrics::filter(segments_of(s), SegmentKind::listening));
  }
  return metrics::velocity_std(pred, corpus.dyad.group_channels("expr"), listen);
}

SemanticResult semantic_agreement(const RunConfig& config, const FlowModel& flow, const Codec& codec) {
  const auto& dyad = config.data.dyad;
  const int modes = static_cast<int>(dyad.modes_per_intent);
  const auto channels = concat_channels(dyad, data::listening_groups());
  auto sampler = config.sampler;
  sampler.mode = sampling::Mode::ode;
  SemanticResult r;
  for (std::size_t j = 0; j < config.data.eval_samples; ++j) {
    const std::uint64_t index = config.data.train_samples + j;
    std::vector<Array<double>> templates;
    for (int m = 0; m < modes; ++m) {
      data::GenerateOptions o;
      o.force_text = data::kNoText;
      o.force_mode = m;
      templates.push_back(make_sample(config, dyad, index, o).actor_motion);
    }
    for (int m = 0; m < modes; ++m) {
      data::GenerateOptions o;
      o.force_text = m + 1;
      const auto s = make_sample(config, dyad, index, o);
      const auto pred = generate_motion(flow, codec, make_context(codec, s), eval_sampler(sampler, index, "semantic"));
      for (const auto& seg : s.listening) {
        std::vector<double> dist(modes, 0.0);
        std::size_t frames = 0;
        for (std::size_t f = seg.start; f < seg.end; ++f) {
          if (!s.is_listening(f)) continue;
          ++frames;
          for (int k = 0; k < modes; ++k)
            for (auto c : channels) {
              const double d = pred(f, c) - templates[k](f, c);
              dist[k] += d * d;
            }
        }
        if (frames == 0) continue;
        const auto nearest = std::min_element(dist.begin(), dist.end()) - dist.begin();
        ++r.segments;
        if (nearest == m) ++r.agree;
      }
    }
  }
  return r;
}

LongResult long_sequence(const RunConfig& config, const FlowModel& flow, const Codec& codec) {
  auto run = [&](std::size_t frames, bool score, LongResult& out) {
    auto dyad = config.data.dyad;
    dyad.frames = frames;
    data::GenerateOptions o;
    o.force_text = data::kNoText;
    const auto s = make_sample(config, dyad, config.data.train_samples + config.data.eval_samples, o);
    const sampling::ContextSlicer<Real> slice = [&](std::size_t f0, std::size_t f1) {
      Context ctx;
      ctx.text_token = s.text_token;
      ctx.actor_audio = rows_of(s.actor_audio, f0, f1);
      ctx.partner_audio = rows_of(s.partner_audio, f0, f1);
      // partner tokens are re-encoded per window so memory stays bounded
      ctx.partner_latents = codec.encode(rows_of(s.partner_motion, f0, f1).cast<double>());
      ctx.actor_vad.assign(s.actor_vad.begin() + long(f0), s.actor_vad.begin() + long(f1));
      return ctx;
    };
    const sampling::Decoder<Real> decode = [&](const Array<Real>& lat, std::size_t n) {
      return codec.decode(lat, n).cast<Real>();
    };
    auto sampler = config.sampler;
    sampler.mode = sampling::Mode::ode;
    const auto res = sampling::sliding_window_generate<Real>(flow, slice, frames, config.metrics.window_tokens,
                                                             config.metrics.window_carry, sampler, decode);
    const auto peak = *std::max_element(res.cache_bytes.begin(), res.cache_bytes.end());
    if (!score) {
      out.short_peak_cache_bytes = peak;
      return;
    }
    out.peak_cache_bytes = peak;
    out.windows = res.windows;
    const auto listen = metrics::filter(segments_of(s), SegmentKind::listening);
    const auto expr = dyad.group_channels("expr");
    const std::vector<Array<double>> pred{res.motion.cast<double>()};
    const auto q = frames / 4;
    out.vstd_first = metrics::velocity_std(pred, expr, {clip_segments(listen, 0, q)});
    out.vstd_last = metrics::velocity_std(pred, expr, {clip_segments(listen, frames - q, frames)});
  };
  LongResult r;
  run(config.metrics.long_frames, true, r);
  run(std::max<std::size_t>(config.metrics.long_frames / 4, codec.rate()), false, r);
  return r;
}

// ---- demo ------------------------------------------------------------------------

DemoReport demo_collapse(const RunConfig& config, const Logger& log) {
  const auto& M = config.metrics;
  auto t0 = std::chrono::steady_clock::now();
  auto timed = [&](const std::string& phase) {
    emit(log, {{"phase", phase}, {"seconds", seconds_since(t0)}});
  };

  const auto corpus = make_corpus(config);
  timed("data");
  const auto codec = train_codec(config, corpus, log);
  timed("vae");
  const auto stage1 = train_stage1(config, codec, corpus, log);
  timed("stage1");

  auto sampler = config.sampler;
  sampler.mode = sampling::Mode::ode;
  const double floor = noise_floor(config, corpus);
  const auto before = evaluate(config, stage1, codec, corpus, sampler);
  timed("eval/stage1");

  auto stage2 = stage1;
  train_stage2(config, stage2, codec, corpus, log);
  timed("stage2");
  const auto after = evaluate(config, stage2, codec, corpus, sampler);
  timed("eval/stage2");

  std::vector<double> sweep;
  for (double w : M.cfg_sweep) sweep.push_back(cfg_listen_vstd(config, stage2, codec, corpus, w));
  timed("cfg");
  const auto semantic = semantic_agreement(config, stage2, codec);
  timed("semantic");
  const auto longrun = long_sequence(config, stage2, codec);
  timed("long");

  const auto& b = before.listen;
  const auto& a = after.listen;
  json criteria = json::array();
  auto add = [&](int id, const std::string& name, bool pass, json values) {
    criteria.push_back({{"id", id}, {"name", name}, {"pass", pass}, {"values", std::move(values)}});
  };
  add(5, "collapse", b.ratio < M.collapse_ratio && b.fdd > M.collapse_floor_factor * floor,
      {{"velocity_std_ratio", b.ratio}, {"listen_fdd", b.fdd}, {"noise_floor", floor}});
  const double gain = b.fdd > 0 ? (b.fdd - a.fdd) / b.fdd : 0.0;
  const double mse_change = b.speak_mse > 0 ? (a.speak_mse - b.speak_mse) / b.speak_mse : 0.0;
  add(6, "recovery",
      gain >= M.recovery_fdd_gain && a.ratio > M.recovery_ratio && mse_change <= M.speaking_mse_slack,
      {{"fdd_gain", gain}, {"velocity_std_ratio", a.ratio}, {"speak_mse_change", mse_change}});
  bool monotone = true;
  for (std::size_t i = 1; i < sweep.size(); ++i) monotone = monotone && sweep[i] >= sweep[i - 1];
  add(7, "cfg_monotonic", monotone, {{"omega_listen", M.cfg_sweep}, {"listen_velocity_std", sweep}});
  add(8, "semantic_control", semantic.segments > 0 && semantic.agreement() >= M.semantic_agreement,
      {{"segments", semantic.segments}, {"agree", semantic.agree}, {"agreement", semantic.agreement()}});
  add(9, "long_sequence",
      longrun.ratio() >= M.long_ratio && longrun.peak_cache_bytes <= longrun.short_peak_cache_bytes,
      {{"first_quarter_velocity_std", longrun.vstd_first},
       {"last_quarter_velocity_std", longrun.vstd_last},
       {"ratio", longrun.ratio()},
       {"windows", longrun.windows},
       {"peak_cache_bytes", longrun.peak_cache_bytes},
       {"short_run_peak_cache_bytes", longrun.short_peak_cache_bytes}});

  DemoReport out;
  out.all_pass = std::all_of(criteria.begin(), criteria.end(), [](const json& c) { return c["pass"].get<bool>(); });
  out.report["seed"] = config.seed;
  out.report["config"] = to_json(config);
  out.report["stage1"] = before.metrics;
  out.report["stage2"] = after.metrics;
  out.report["noise_floor_fdd"] = floor;
  out.report["criteria"] = criteria;
  out.report["all_pass"] = out.all_pass;
  return out;
}

}  // namespace dyadflow::pipeline
