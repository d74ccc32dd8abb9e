#include "dyadflow/pipeline/config.hpp"

#include <fstream>
#include <functional>
#include <set>

#include "dyadflow/errors.hpp"
#include "dyadflow/rng.hpp"

namespace dyadflow::pipeline {

using nlohmann::json;

namespace {

// One visitor drives both parsing and echo, so the two cannot drift apart.
class Reader {
 public:
  Reader(const json* obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (obj_ && !obj_->is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename V>
  void field(const char* key, V& value) {
    keys_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    read(obj_->at(key), value, where(key));
  }

  void section(const char* key, const std::function<void(Reader&)>& body) {
    keys_.insert(key);
    const json* child = obj_ && obj_->contains(key) ? &obj_->at(key) : nullptr;
    Reader r(child, where(key));
    body(r);
    r.finish();
  }

  void finish() const {
    if (!obj_) return;
    for (const auto& [k, v] : obj_->items())
      if (!keys_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  static void read(const json& j, std::size_t& v, const std::string& at) {
    if (!j.is_number_unsigned()) throw ConfigError(at + " must be a non-negative integer");
    v = j.get<std::size_t>();
  }
  static void read(const json& j, double& v, const std::string& at) {
    if (!j.is_number()) throw ConfigError(at + " must be a number");
    v = j.get<double>();
  }
  static void read(const json& j, bool& v, const std::string& at) {
    if (!j.is_boolean()) throw ConfigError(at + " must be a boolean");
    v = j.get<bool>();
  }
  static void read(const json& j, std::string& v, const std::string& at) {
    if (!j.is_string()) throw ConfigError(at + " must be a string");
    v = j.get<std::string>();
  }
  static void read(const json& j, sampling::Mode& v, const std::string& at) {
    if (!j.is_string()) throw ConfigError(at + " must be \"ode\" or \"sde\"");
    v = sampling::parse_mode(j.get<std::string>());
  }
  static void read(const json& j, std::vector<double>& v, const std::string& at) {
    if (!j.is_array()) throw ConfigError(at + " must be an array of numbers");
    v.clear();
    for (const auto& x : j) {
      if (!x.is_number()) throw ConfigError(at + " must be an array of numbers");
      v.push_back(x.get<double>());
    }
  }
  static void read(const json& j, std::vector<data::ChannelGroup>& v, const std::string& at) {
    if (!j.is_array()) throw ConfigError(at + " must be an array of {name, size}");
    v.clear();
    for (const auto& g : j) {
      if (!g.is_object()) throw ConfigError(at + " entries must be objects");
      Reader r(&g, at + "[]");
      data::ChannelGroup cg;
      r.field("name", cg.name);
      r.field("size", cg.size);
      r.finish();
      v.push_back(cg);
    }
  }

  const json* obj_;
  std::string path_;
  std::set<std::string> keys_;
};

class Writer {
 public:
  explicit Writer(json& out) : out_(out) { out_ = json::object(); }

  template <typename V>
  void field(const char* key, const V& value) {
    out_[key] = encode(value);
  }

  void section(const char* key, const std::function<void(Writer&)>& body) {
    json child;
    Writer w(child);
    body(w);
    out_[key] = std::move(child);
  }

 private:
  template <typename V>
  static json encode(const V& v) {
    return json(v);
  }
  static json encode(const sampling::Mode& m) { return sampling::mode_name(m); }
  static json encode(const std::vector<data::ChannelGroup>& groups) {
    json a = json::array();
    for (const auto& g : groups) a.push_back({{"name", g.name}, {"size", g.size}});
    return a;
  }

  json& out_;
};

template <typename V, typename C>
void visit(V& v, C& c) {
  v.field("seed", c.seed);
  v.section("data", [&](auto& s) {
    auto& d = c.data.dyad;
    s.field("frames", d.frames);
    s.field("groups", d.groups);
    s.field("fps", d.fps);
    s.field("intents", d.intents);
    s.field("modes_per_intent", d.modes_per_intent);
    s.field("segment_min", d.segment_min);
    s.field("segment_max", d.segment_max);
    s.field("gap_max", d.gap_max);
    s.field("audio_dim", d.audio_dim);
    s.field("text_probability", d.text_probability);
    s.field("listen_amplitude", d.listen_amplitude);
    s.field("speak_gain", d.speak_gain);
    s.field("idle_amplitude", d.idle_amplitude);
    s.field("world_seed", d.world_seed);
    s.field("train_samples", c.data.train_samples);
    s.field("eval_samples", c.data.eval_samples);
    s.field("smooth", c.data.smooth);
    s.field("savgol_window", c.data.savgol_window);
    s.field("savgol_order", c.data.savgol_order);
  });
  v.section("vae", [&](auto& s) {
    auto& m = c.vae;
    s.field("rate", m.rate);
    s.field("latent_dim", m.latent_dim);
    s.field("layers", m.layers);
    s.field("heads", m.heads);
    s.field("width", m.width);
    s.field("ffn_mult", m.ffn_mult);
    s.field("kl_weight", m.kl_weight);
    s.field("epochs", m.epochs);
    s.field("batch", m.batch);
    s.field("lr", m.lr);
    s.field("weight_decay", m.weight_decay);
    s.field("grad_clip", m.grad_clip);
  });
  v.section("flow", [&](auto& s) {
    auto& m = c.flow;
    s.field("layers", m.layers);
    s.field("heads", m.heads);
    s.field("width", m.width);
    s.field("ffn_mult", m.ffn_mult);
    s.field("time_dim", m.time_dim);
    s.field("p_drop", m.p_drop);
    s.field("history_noise", m.history_noise);
    s.field("text_global", m.text_global);
    s.field("epochs", m.epochs);
    s.field("batch", m.batch);
    s.field("lr", m.lr);
    s.field("weight_decay", m.weight_decay);
    s.field("grad_clip", m.grad_clip);
  });
  v.section("sampler", [&](auto& s) {
    auto& m = c.sampler;
    s.field("steps", m.steps);
    s.field("sigma", m.sigma);
    s.field("cfg_speak", m.cfg_speak);
    s.field("cfg_listen", m.cfg_listen);
    s.field("mode", m.mode);
  });
  v.section("gdpo", [&](auto& s) {
    auto& g = c.gdpo;
    s.field("group_size", g.group_size);
    s.field("sigma", g.sigma);
    s.field("clip", g.clip);
    s.field("kl_weight", g.kl_weight);
    s.field("chunk_steps", g.chunk_steps);
    s.field("sync_period", g.sync_period);
    s.field("group_weights", g.group_weights);
    s.field("eps0", g.eps0);
    s.field("std_floor", g.std_floor);
    s.field("steps", g.steps);
    s.field("listener_only", g.listener_only);
    s.field("per_token_ratio", g.per_token_ratio);
    s.field("ratio_listening_only", g.ratio_listening_only);
    s.section("reward", [&](auto& r) {
      r.field("variance", g.reward.variance);
      r.field("velocity", g.reward.velocity);
      r.field("mean", g.reward.mean);
      r.field("mse", g.reward.mse);
    });
    s.field("iterations", g.iterations);
    s.field("contexts_per_iteration", g.contexts_per_iteration);
    s.field("lr", g.lr);
    s.field("weight_decay", g.weight_decay);
    s.field("grad_clip", g.grad_clip);
  });
  v.section("metrics", [&](auto& s) {
    auto& m = c.metrics;
    s.field("long_frames", m.long_frames);
    s.field("window_tokens", m.window_tokens);
    s.field("window_carry", m.window_carry);
    s.field("cfg_sweep", m.cfg_sweep);
    s.field("collapse_ratio", m.collapse_ratio);
    s.field("collapse_floor_factor", m.collapse_floor_factor);
    s.field("recovery_fdd_gain", m.recovery_fdd_gain);
    s.field("recovery_ratio", m.recovery_ratio);
    s.field("speaking_mse_slack", m.speaking_mse_slack);
    s.field("semantic_agreement", m.semantic_agreement);
    s.field("long_ratio", m.long_ratio);
  });
  v.section("io", [&](auto& s) {
    s.field("out_dir", c.io.out_dir);
    s.field("threads", c.io.threads);
  });
}

}  // namespace

void RunConfig::validate() const {
  data.dyad.validate();
  vae.validate();
  flow.validate();
  sampler.validate();
  gdpo.validate(data.dyad.groups.size());
  if (data.train_samples == 0 || data.eval_samples == 0) throw ConfigError("data needs train and eval samples");
  if (data.savgol_window % 2 == 0 || data.savgol_order >= data.savgol_window)
    throw ConfigError("savgol window must be odd and larger than the order");
  if (data.dyad.frames < vae.rate) throw ConfigError("sequences must span at least one latent token");
  if (metrics.window_tokens == 0 || metrics.window_carry >= metrics.window_tokens)
    throw ConfigError("metrics window needs 0 <= carry < window_tokens");
  if (metrics.cfg_sweep.empty()) throw ConfigError("metrics.cfg_sweep must not be empty");
  if (io.threads == 0) throw ConfigError("io.threads must be >= 1");
  if (data.dyad.modes_per_intent + 1 > 64) throw ConfigError("too many reaction modes for the text vocabulary");
}

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seed parsing assumes 64-bit size_t");

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  data.dyad.seed = stage_seed("data");
  sampler.seed = stage_seed("sampler");
}

void RunConfig::set_threads(std::size_t n) {
  io.threads = n;
  gdpo.threads = n;
}

std::uint64_t RunConfig::stage_seed(const std::string& stage) const { return stream_seed(seed, 0, "stage/" + stage); }

RunConfig parse_config(const json& doc) {
  RunConfig c;
  Reader r(&doc, "");
  visit(r, c);
  r.finish();
  c.set_seed(c.seed);
  c.set_threads(c.io.threads);
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

json to_json(const RunConfig& config) {
  json out;
  Writer w(out);
  visit(w, config);
  return out;
}

}  // namespace dyadflow::pipeline
