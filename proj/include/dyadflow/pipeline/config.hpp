#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyadflow/data/dyad.hpp"
#include "dyadflow/flow/flow.hpp"
#include "dyadflow/rl/gdpo.hpp"
#include "dyadflow/sampling/sampler.hpp"
#include "dyadflow/vae/vae.hpp"
#include "json.hpp"

namespace dyadflow::pipeline {

struct DataSection {
  data::DyadConfig dyad;
  std::size_t train_samples = 96;
  std::size_t eval_samples = 16;
  bool smooth = true;
  std::size_t savgol_window = 9;
  std::size_t savgol_order = 3;
};

struct MetricsSection {
  // Long-sequence check.
  std::size_t long_frames = 1000;
  std::size_t window_tokens = 25;
  std::size_t window_carry = 1;
  std::vector<double> cfg_sweep{0.5, 1.0, 2.0, 4.0};
  // Acceptance thresholds for the collapse/recovery report.
  double collapse_ratio = 0.5;
  double collapse_floor_factor = 2.0;
  double recovery_fdd_gain = 0.25;
  double recovery_ratio = 0.7;
  double speaking_mse_slack = 0.2;
  double semantic_agreement = 0.8;
  double long_ratio = 0.5;
};

struct IoSection {
  std::string out_dir;  // empty: $DYADFLOW_OUT_DIR, else ./dyadflow_out
  std::size_t threads = 1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSection data;
  vae::VaeConfig vae;
  flow::FlowConfig flow;
  sampling::SamplerConfig sampler;
  rl::GdpoConfig gdpo;
  MetricsSection metrics;
  IoSection io;

  // Cross-section checks (rates, group counts, module validators).
  void validate() const;
  // Seed for one named stage, derived from the master seed.
  std::uint64_t stage_seed(const std::string& stage) const;
  // Sets the master seed and every seed derived from it.
  void set_seed(std::uint64_t s);
  void set_threads(std::size_t n);
};

// Every key is optional; unknown keys anywhere raise ConfigError naming the
// full path.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::string& path);
// Fully resolved config, including defaults.
nlohmann::json to_json(const RunConfig& config);

}  // namespace dyadflow::pipeline
