#include "dyadflow/data/dyad.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "dyadflow/rng.hpp"

namespace dyadflow::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr std::size_t kListenRamp = 6;
constexpr std::size_t kAudioRamp = 3;
constexpr std::uint64_t kWorldIndex = 0xA11CEull;

const std::vector<std::string>& canonical_names() {
  static const std::vector<std::string> names{"expr", "jaw", "neck", "eyelid", "eyepose", "rot"};
  return names;
}

// Raised-cosine fade in/out over `ramp` frames inside [start, end).
double fade(std::size_t f, std::size_t start, std::size_t end, std::size_t ramp) {
  const double rise = (static_cast<double>(f - start) + 0.5) / static_cast<double>(ramp);
  const double fall = (static_cast<double>(end - f) - 0.5) / static_cast<double>(ramp);
  const double x = std::clamp(std::min(rise, fall), 0.0, 1.0);
  return 0.5 * (1.0 - std::cos(std::numbers::pi * x));
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct Turn {
  std::size_t start, end;
  bool actor;
};

std::vector<Turn> schedule_turns(const DyadConfig& c, std::uint64_t idx) {
  auto rng = make_stream(c.seed, idx, "turns");
  std::vector<Turn> turns;
  bool actor = (rng() & 1u) == 0;
  std::size_t t = 0;
  while (t < c.frames) {
    const std::size_t len = uniform_int(rng, c.segment_min, c.segment_max);
    turns.push_back({t, std::min(t + len, c.frames), actor});
    t += len + uniform_int(rng, 0, c.gap_max);
    actor = !actor;
  }
  return turns;
}

// Sum of three random-phase sinusoids per channel, gated by a faded VAD envelope.
Array<double> speech_features(const DyadConfig& c, std::uint64_t idx, const std::string& who,
                              const std::vector<Turn>& turns, bool actor) {
  Array<double> out(diff::Shape{c.frames, c.audio_dim});
  for (std::size_t ch = 0; ch < c.audio_dim; ++ch) {
    auto rng = make_stream(c.seed, idx, who + "_audio/" + std::to_string(ch));
    double amp[3], freq[3], phase[3];
    for (int q = 0; q < 3; ++q) {
      amp[q] = uniform(rng, 0.3, 1.0);
      freq[q] = uniform(rng, 0.3, 2.0);
      phase[q] = uniform(rng, 0.0, kTwoPi);
    }
    for (const auto& turn : turns) {
      if (turn.actor != actor) continue;
      for (std::size_t f = turn.start; f < turn.end; ++f) {
        double s = 0.0;
        for (int q = 0; q < 3; ++q) s += amp[q] * std::sin(kTwoPi * freq[q] * static_cast<double>(f) / c.fps + phase[q]);
        out(f, ch) = s * fade(f, turn.start, turn.end, kAudioRamp);
      }
    }
  }
  return out;
}

std::vector<double> intent_code(const DyadConfig& c, int intent) {
  auto rng = make_stream(c.world_seed, kWorldIndex, "intent_code/" + std::to_string(intent));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> code(c.audio_dim);
  double norm = 0.0;
  for (auto& x : code) {
    x = nd(rng);
    norm += x * x;
  }
  for (auto& x : code) x /= std::sqrt(norm);
  return code;
}

double speak_scale(const std::string& group) {
  if (group == "jaw") return 1.0;
  if (group == "expr" || group == "rot") return 0.3;
  if (group == "neck") return 0.2;
  return 0.0;
}

// Fixed linear map from own audio features to a motion channel while speaking.
std::vector<double> speak_gains(const DyadConfig& c, const std::string& group, std::size_t ch) {
  auto rng = make_stream(c.world_seed, kWorldIndex, "map/" + group + "/" + std::to_string(ch));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> g(c.audio_dim);
  const double s = c.speak_gain * speak_scale(group) / std::sqrt(static_cast<double>(c.audio_dim));
  for (auto& x : g) x = nd(rng) * s;
  return g;
}

bool is_listening_group(const std::string& g) { return g == "expr" || g == "rot"; }

struct Reaction {
  std::size_t start, end;
  int intent, mode;
};

Array<double> synthesize_motion(const DyadConfig& c, std::uint64_t idx, const std::string& who,
                                const Array<double>& own_audio, const std::vector<Reaction>& reactions) {
  Array<double> m(diff::Shape{c.frames, c.channels()});
  std::size_t offset = 0;
  for (const auto& g : c.groups) {
    for (std::size_t k = 0; k < g.size; ++k) {
      const std::size_t col = offset + k;
      const auto gains = speak_gains(c, g.name, k);
      for (std::size_t f = 0; f < c.frames; ++f) {
        double s = 0.0;
        for (std::size_t a = 0; a < c.audio_dim; ++a) s += gains[a] * own_audio(f, a);
        m(f, col) = s;
      }
      if (is_listening_group(g.name)) {
        for (const auto& r : reactions) {
          for (std::size_t f = r.start; f < r.end; ++f) {
            m(f, col) += fade(f, r.start, r.end, kListenRamp) *
                         listening_waveform(c, g.name, k, r.intent, r.mode, static_cast<double>(f - r.start));
          }
        }
      } else if (g.name != "jaw") {
        auto rng = make_stream(c.seed, idx, who + "_idle/" + g.name + "/" + std::to_string(k));
        const double freq = uniform(rng, 0.1, 0.5);
        const double phase = uniform(rng, 0.0, kTwoPi);
        for (std::size_t f = 0; f < c.frames; ++f)
          m(f, col) += c.idle_amplitude * std::sin(kTwoPi * freq * static_cast<double>(f) / c.fps + phase);
      }
    }
    offset += g.size;
  }
  return m;
}

}  // namespace

std::vector<ChannelGroup> desk_groups() {
  return {{"expr", 6}, {"jaw", 2}, {"neck", 2}, {"eyelid", 2}, {"eyepose", 2}, {"rot", 2}};
}

std::vector<ChannelGroup> full_groups() {
  return {{"expr", 50}, {"jaw", 3}, {"neck", 3}, {"eyelid", 2}, {"eyepose", 6}, {"rot", 3}};
}

std::vector<std::string> listening_groups() { return {"expr", "rot"}; }

std::size_t DyadConfig::channels() const {
  std::size_t d = 0;
  for (const auto& g : groups) d += g.size;
  return d;
}

std::size_t DyadConfig::group_offset(const std::string& name) const {
  std::size_t off = 0;
  for (const auto& g : groups) {
    if (g.name == name) return off;
    off += g.size;
  }
  throw ConfigError("unknown channel group: " + name);
}

const ChannelGroup& DyadConfig::group(const std::string& name) const {
  for (const auto& g : groups)
    if (g.name == name) return g;
  throw ConfigError("unknown channel group: " + name);
}

std::vector<std::size_t> DyadConfig::group_channels(const std::string& name) const {
  const std::size_t off = group_offset(name);
  std::vector<std::size_t> out(group(name).size);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = off + i;
  return out;
}

void DyadConfig::validate() const {
  std::set<std::string> seen;
  for (const auto& g : groups) {
    if (g.size == 0) throw ConfigError("channel group '" + g.name + "' has size 0");
    if (!seen.insert(g.name).second) throw ConfigError("duplicate channel group '" + g.name + "'");
  }
  for (const auto& n : canonical_names())
    if (!seen.count(n)) throw ConfigError("missing channel group '" + n + "'");
  if (seen.size() != canonical_names().size()) throw ConfigError("unexpected channel group names");
  if (frames == 0) throw ConfigError("frames must be positive");
  if (fps <= 0.0) throw ConfigError("fps must be positive");
  if (intents == 0) throw ConfigError("need at least one intent");
  if (modes_per_intent == 0) throw ConfigError("need at least one reaction mode");
  if (audio_dim == 0) throw ConfigError("audio_dim must be positive");
  if (segment_min == 0 || segment_min > segment_max)
    throw ConfigError("segment range must satisfy 1 <= min <= max");
  if (segment_min > frames) throw ConfigError("segment_min exceeds the sequence length");
  if (text_probability < 0.0 || text_probability > 1.0) throw ConfigError("text_probability must be in [0,1]");
}

double listening_waveform(const DyadConfig& c, const std::string& group, std::size_t channel_in_group, int intent,
                          int mode, double frames_since_start) {
  auto rng = make_stream(c.world_seed, kWorldIndex,
                         "listen/" + group + "/" + std::to_string(channel_in_group) + "/" + std::to_string(intent));
  const double phase = uniform(rng, 0.0, kTwoPi);
  const double freq = 0.6 + 0.35 * static_cast<double>(intent % 4) + 0.1 * static_cast<double>(intent / 4);
  const double mode_shift = kTwoPi * static_cast<double>(mode) / static_cast<double>(c.modes_per_intent);
  return c.listen_amplitude * std::sin(kTwoPi * freq * frames_since_start / c.fps + phase + mode_shift);
}

DyadSample generate_dyad(const DyadConfig& c, std::uint64_t idx, const GenerateOptions& opt) {
  c.validate();
  const auto turns = schedule_turns(c, idx);
  DyadSample s;
  s.actor_vad.assign(c.frames, 0);
  s.partner_vad.assign(c.frames, 0);
  for (const auto& t : turns)
    for (std::size_t f = t.start; f < t.end; ++f) (t.actor ? s.actor_vad : s.partner_vad)[f] = 1;

  s.actor_audio = speech_features(c, idx, "actor", turns, true);
  s.partner_audio = speech_features(c, idx, "partner", turns, false);

  auto intent_rng = make_stream(c.seed, idx, "intent");
  for (const auto& t : turns) {
    if (t.actor) continue;
    const int intent = static_cast<int>(uniform_int(intent_rng, 0, c.intents - 1));
    s.partner_utterances.push_back({t.start, t.end, intent});
    const auto code = intent_code(c, intent);
    for (std::size_t f = t.start; f < t.end; ++f) {
      const double env = fade(f, t.start, t.end, kAudioRamp);
      for (std::size_t a = 0; a < c.audio_dim; ++a) s.partner_audio(f, a) += env * code[a];
    }
  }

  const std::string salt = opt.mode_salt == 0 ? "" : "/" + std::to_string(opt.mode_salt);
  auto mode_rng = make_stream(c.seed, idx, "mode" + salt);
  auto text_rng = make_stream(c.seed, idx, "text");
  const int modes = static_cast<int>(c.modes_per_intent);
  const bool has_text = uniform(text_rng, 0.0, 1.0) < c.text_probability;
  const int sample_mode = static_cast<int>(uniform_int(mode_rng, 0, c.modes_per_intent - 1));
  s.text_token = has_text ? sample_mode + 1 : kNoText;
  if (opt.force_text) {
    if (*opt.force_text < 0 || *opt.force_text > modes) throw ConfigError("text token out of range");
    s.text_token = *opt.force_text;
  }
  std::vector<Reaction> actor_reactions;
  for (const auto& u : s.partner_utterances) {
    int mode = s.text_token != kNoText ? s.text_token - 1
                                       : static_cast<int>(uniform_int(mode_rng, 0, c.modes_per_intent - 1));
    if (opt.force_mode) mode = *opt.force_mode;
    if (mode < 0 || mode >= modes) throw ConfigError("reaction mode out of range");
    actor_reactions.push_back({u.start, u.end, u.intent, mode});
    s.listening.push_back({u.start, u.end, u.intent, mode});
  }

  auto partner_rng = make_stream(c.seed, idx, "partner_reaction");
  std::vector<Reaction> partner_reactions;
  for (const auto& t : turns) {
    if (!t.actor) continue;
    const int intent = static_cast<int>(uniform_int(partner_rng, 0, c.intents - 1));
    const int mode = static_cast<int>(uniform_int(partner_rng, 0, c.modes_per_intent - 1));
    partner_reactions.push_back({t.start, t.end, intent, mode});
  }

  s.actor_motion = synthesize_motion(c, idx, "actor", s.actor_audio, actor_reactions);
  s.partner_motion = synthesize_motion(c, idx, "partner", s.partner_audio, partner_reactions);
  return s;
}

}  // namespace dyadflow::data
