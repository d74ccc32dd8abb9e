#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dyadflow/diff/array.hpp"

namespace dyadflow::data {

using diff::Array;

struct ChannelGroup {
  std::string name;
  std::size_t size = 0;
};

// expr=6, jaw=2, neck=2, eyelid=2, eyepose=2, rot=2 (d=16)
std::vector<ChannelGroup> desk_groups();
// expr=50, jaw=3, neck=3, eyelid=2, eyepose=6, rot=3 (d=67)
std::vector<ChannelGroup> full_groups();

struct DyadConfig {
  std::size_t frames = 200;
  std::vector<ChannelGroup> groups = desk_groups();
  double fps = 25.0;
  std::size_t intents = 4;
  std::size_t modes_per_intent = 2;
  std::size_t segment_min = 30;
  std::size_t segment_max = 70;
  std::size_t gap_max = 4;
  std::size_t audio_dim = 8;
  // Fraction of samples carrying a text token that names the reaction mode.
  double text_probability = 0.5;
  double listen_amplitude = 1.0;
  double speak_gain = 1.0;
  double idle_amplitude = 0.1;
  // Seeds the fixed audio->motion mappings shared by every sample.
  std::uint64_t world_seed = 7;
  std::uint64_t seed = 0;

  std::size_t channels() const;
  std::size_t group_offset(const std::string& name) const;
  const ChannelGroup& group(const std::string& name) const;
  std::vector<std::size_t> group_channels(const std::string& name) const;
  // Throws ConfigError on invalid partitions or infeasible segment ranges.
  void validate() const;
};

struct Utterance {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  int intent = 0;
};

struct ListeningLabel {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  int intent = 0;
  int mode = 0;
};

// Token 0 means "no prompt"; token m+1 names reaction mode m.
constexpr int kNoText = 0;

struct DyadSample {
  Array<double> actor_motion;    // L x d
  Array<double> partner_motion;  // L x d
  Array<double> actor_audio;     // L x d_a
  Array<double> partner_audio;   // L x d_a
  std::vector<std::uint8_t> actor_vad;
  std::vector<std::uint8_t> partner_vad;
  std::vector<Utterance> partner_utterances;
  std::vector<ListeningLabel> listening;
  int text_token = kNoText;

  std::size_t frames() const { return actor_vad.size(); }
  // listening <=> !actor_vad && partner_vad
  bool is_listening(std::size_t f) const { return !actor_vad[f] && partner_vad[f]; }
  bool is_speaking(std::size_t f) const { return actor_vad[f] != 0; }
};

struct GenerateOptions {
  // Re-salts only the hidden reaction-mode draws: same context, independent listener responses.
  std::uint64_t mode_salt = 0;
  // Forces every listening segment to one mode (templates for nearest-mode classification).
  std::optional<int> force_mode;
  // Forces the text token (kNoText to strip the prompt).
  std::optional<int> force_text;
};

DyadSample generate_dyad(const DyadConfig& config, std::uint64_t sample_index, const GenerateOptions& options = {});

// The mode waveform shared by all listening segments of an intent, before
// ramping: amplitude * sin(2 pi f_k (frame - start) / fps + phase_c + 2 pi m / M).
double listening_waveform(const DyadConfig& config, const std::string& group, std::size_t channel_in_group,
                          int intent, int mode, double frames_since_start);

// Channel groups carrying listener reactions.
std::vector<std::string> listening_groups();

}  // namespace dyadflow::data
