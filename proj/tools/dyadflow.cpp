#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "dyadflow/errors.hpp"
#include "dyadflow/log.hpp"
#include "dyadflow/pipeline/experiment.hpp"
#include "dyadflow/pipeline/manifest.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dyadflow;
using namespace dyadflow::pipeline;
using diff::Array;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string data_path;
  std::string checkpoint;
  // sampler overrides
  std::optional<std::string> mode;
  std::optional<std::size_t> steps;
  std::optional<double> cfg_speak, cfg_listen, sigma;
  std::optional<int> text;
  std::optional<std::size_t> frames;
  std::size_t sample = 0;
};

struct Run {
  RunConfig config;
  std::string config_source;  // the file as given, empty for defaults
  fs::path out;
};

Run resolve(const Options& o) {
  Run r;
  if (!o.config_path.empty()) {
    r.config_source = read_file(o.config_path);
    json doc;
    try {
      doc = json::parse(r.config_source);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + o.config_path + "' is not valid JSON: " + e.what());
    }
    r.config = parse_config(doc);
  } else {
    r.config = parse_config(json::object());
  }
  if (o.seed) r.config.set_seed(*o.seed);
  if (o.threads) {
    if (*o.threads == 0) throw ConfigError("--threads must be >= 1");
    r.config.set_threads(*o.threads);
  }
  auto& s = r.config.sampler;
  if (o.mode) s.mode = sampling::parse_mode(*o.mode);
  if (o.steps) s.steps = *o.steps;
  if (o.cfg_speak) s.cfg_speak = *o.cfg_speak;
  if (o.cfg_listen) s.cfg_listen = *o.cfg_listen;
  if (o.sigma) s.sigma = *o.sigma;
  r.config.validate();

  if (!o.out_dir.empty())
    r.out = o.out_dir;
  else if (!r.config.io.out_dir.empty())
    r.out = r.config.io.out_dir;
  else if (const char* env = std::getenv("DYADFLOW_OUT_DIR"); env && *env)
    r.out = env;
  else
    r.out = "dyadflow_out";
  fs::create_directories(r.out);
  return r;
}

Manifest start_manifest(const std::string& command, const Run& run, int argc, char** argv) {
  Manifest m(command, to_json(run.config), run.config.seed);
  if (!run.config_source.empty()) {
    m.add_input("config_source", run.config_source);
    m.set("config_source", run.config_source);
  }
  json args = json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  m.set("argv", args);
  return m;
}

Logger stderr_logger() {
  return [](const json& event) { log::info(event.dump()); };
}

Corpus obtain_corpus(const Options& o, const Run& run, Manifest& m) {
  fs::path path = o.data_path.empty() ? run.out / "data.nary" : fs::path(o.data_path);
  if (fs::exists(path)) {
    m.add_input_file(path);
    return corpus_from_container(io::load_container(path), run.config.data.dyad);
  }
  if (!o.data_path.empty()) throw ContractError("dataset '" + path.string() + "' does not exist");
  log::info("no dataset found, regenerating from the config");
  return make_corpus(run.config);
}

fs::path require(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw ContractError("missing '" + p.string() + "' (run " + hint + " first)");
  return p;
}

Codec obtain_codec(const Run& run, Manifest& m) {
  const auto p = require(run.out / "vae.nary", "train-vae");
  m.add_input_file(p);
  return load_codec(p, run.config);
}

fs::path flow_checkpoint(const Options& o, const Run& run) {
  if (!o.checkpoint.empty()) return require(o.checkpoint, "train-flow");
  if (fs::exists(run.out / "flow_stage2.nary")) return run.out / "flow_stage2.nary";
  return require(run.out / "flow_stage1.nary", "train-flow");
}

void finish(Manifest& m, const Run& run, const std::vector<fs::path>& outputs) {
  for (const auto& p : outputs) m.add_output(p);
  const auto path = m.write(run.out);
  std::cout << "wrote " << path.string() << "\n";
}

void write_json(const fs::path& path, json j, const Manifest& m) {
  j["manifest"] = m.file_name();
  write_file(path, j.dump(2) + "\n");
}

// ---- subcommands -------------------------------------------------------------

void cmd_gen_data(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("gen-data", run, argc, argv);
  const auto corpus = make_corpus(run.config);
  auto c = corpus_to_container(corpus);
  stamp(c, m.config(), m.file_name());
  const auto path = run.out / "data.nary";
  io::save_container(path, c);
  m.set("samples", {{"train", corpus.train.size()}, {"eval", corpus.eval.size()}});
  finish(m, run, {path});
}

void cmd_train_vae(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("train-vae", run, argc, argv);
  const auto corpus = obtain_corpus(o, run, m);
  const auto codec = train_codec(run.config, corpus, stderr_logger());
  const auto path = run.out / "vae.nary";
  save_codec(path, codec, m.config(), m.file_name());
  finish(m, run, {path});
}

void cmd_train_flow(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("train-flow", run, argc, argv);
  const auto corpus = obtain_corpus(o, run, m);
  const auto codec = obtain_codec(run, m);
  const auto flow = train_stage1(run.config, codec, corpus, stderr_logger());
  const auto path = run.out / "flow_stage1.nary";
  save_flow(path, flow, m.config(), m.file_name());
  finish(m, run, {path});
}

void cmd_posttrain(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("posttrain-gdpo", run, argc, argv);
  const auto corpus = obtain_corpus(o, run, m);
  const auto codec = obtain_codec(run, m);
  const auto in = o.checkpoint.empty() ? require(run.out / "flow_stage1.nary", "train-flow") : fs::path(o.checkpoint);
  m.add_input_file(in);
  auto flow = load_flow(in, run.config, codec);

  std::ostringstream lines;
  lines << json{{"manifest", m.file_name()}}.dump() << "\n";
  const auto to_stderr = stderr_logger();
  train_stage2(run.config, flow, codec, corpus, [&](const json& e) {
    lines << e.dump() << "\n";
    to_stderr(e);
  });
  const auto path = run.out / "flow_stage2.nary";
  save_flow(path, flow, m.config(), m.file_name());
  const auto log_path = run.out / "gdpo_log.jsonl";
  write_file(log_path, lines.str());
  finish(m, run, {path, log_path});
}

void cmd_infer(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("infer", run, argc, argv);
  const auto codec = obtain_codec(run, m);
  const auto ckpt = flow_checkpoint(o, run);
  m.add_input_file(ckpt);
  const auto flow = load_flow(ckpt, run.config, codec);

  auto dyad = run.config.data.dyad;
  if (o.frames) {
    if (*o.frames == 0) throw ConfigError("--frames must be >= 1");
    dyad.frames = *o.frames;
  }
  data::GenerateOptions gen;
  if (o.text) gen.force_text = *o.text;
  const std::uint64_t index = run.config.data.train_samples + o.sample;
  const auto sample = make_sample(run.config, dyad, index, gen);
  const auto& sc = run.config.sampler;
  const auto tokens = vae::token_count(dyad.frames, codec.rate());

  io::Container out;
  if (tokens <= run.config.metrics.window_tokens) {
    const auto ctx = make_context(codec, sample);
    const auto trace = sampling::generate_sequence(flow, ctx, tokens, sc);
    out.add("latents", trace.latents);
    out.add("motion", codec.decode(trace.latents, dyad.frames));
    // [token][step][dim] stacks of the recorded transitions
    const std::size_t dv = codec.latent_dim();
    Array<float> pre(diff::Shape{tokens, sc.steps, dv}), vel = pre, noise = pre, post = pre;
    for (std::size_t l = 0; l < tokens; ++l)
      for (std::size_t s = 0; s < sc.steps; ++s)
        for (std::size_t d = 0; d < dv; ++d) {
          const auto& rec = trace.tokens[l][s];
          const auto at = (l * sc.steps + s) * dv + d;
          pre[at] = rec.pre[d];
          vel[at] = rec.velocity[d];
          noise[at] = rec.noise.size() ? rec.noise[d] : 0.0f;
          post[at] = rec.post[d];
        }
    out.add("trace/pre", pre);
    out.add("trace/velocity", vel);
    out.add("trace/noise", noise);
    out.add("trace/post", post);
  } else {
    const sampling::ContextSlicer<Real> slice = [&](std::size_t f0, std::size_t f1) {
      auto part = sample;
      auto rows = [&](const Array<double>& a) {
        Array<double> r(diff::Shape{f1 - f0, a.cols()});
        std::copy(a.data() + f0 * a.cols(), a.data() + f1 * a.cols(), r.data());
        return r;
      };
      part.actor_audio = rows(sample.actor_audio);
      part.partner_audio = rows(sample.partner_audio);
      part.partner_motion = rows(sample.partner_motion);
      part.actor_vad.assign(sample.actor_vad.begin() + long(f0), sample.actor_vad.begin() + long(f1));
      return make_context(codec, part);
    };
    const sampling::Decoder<Real> decode = [&](const Array<Real>& lat, std::size_t n) {
      return codec.decode(lat, n).cast<Real>();
    };
    const auto res = sampling::sliding_window_generate<Real>(flow, slice, dyad.frames, run.config.metrics.window_tokens,
                                                             run.config.metrics.window_carry, sc, decode);
    out.add("latents", res.latents);
    out.add("motion", res.motion.cast<double>());
  }
  out.add("ground_truth", sample.actor_motion);
  out.add("actor_vad", Array<std::uint8_t>(diff::Shape{sample.actor_vad.size()}, sample.actor_vad));
  stamp(out, m.config(), m.file_name());
  const auto path = run.out / "infer.nary";
  io::save_container(path, out);
  m.set("infer", {{"sample_index", index}, {"frames", dyad.frames}, {"text", sample.text_token}});
  finish(m, run, {path});
}

void cmd_eval(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("eval", run, argc, argv);
  const auto corpus = obtain_corpus(o, run, m);
  const auto codec = obtain_codec(run, m);
  const auto ckpt = flow_checkpoint(o, run);
  m.add_input_file(ckpt);
  const auto flow = load_flow(ckpt, run.config, codec);
  const auto res = evaluate(run.config, flow, codec, corpus, run.config.sampler);

  json report{{"checkpoint", ckpt.filename().string()},
              {"seed", run.config.seed},
              {"config", m.config()},
              {"metrics", res.metrics},
              {"noise_floor_fdd", noise_floor(run.config, corpus)}};
  const auto json_path = run.out / "eval.json";
  write_json(json_path, report, m);

  std::ostringstream csv;
  csv << "# manifest," << m.file_name() << "\n";
  csv << "segment,metric,value\n";
  for (const char* kind : {"speaking", "listening"})
    for (const auto& [k, v] : res.metrics[kind].items()) csv << kind << "," << k << "," << v.dump() << "\n";
  for (const char* k : {"mhd_analogue", "sid_analogue"}) csv << "all," << k << "," << res.metrics[k].dump() << "\n";
  const auto csv_path = run.out / "eval.csv";
  write_file(csv_path, csv.str());
  finish(m, run, {json_path, csv_path});
}

void cmd_demo(const Options& o, int argc, char** argv) {
  const auto run = resolve(o);
  auto m = start_manifest("demo-collapse", run, argc, argv);
  const auto res = demo_collapse(run.config, stderr_logger());
  const auto path = run.out / "demo_collapse.json";
  write_json(path, res.report, m);
  for (const auto& c : res.report["criteria"])
    std::cout << (c["pass"].get<bool>() ? "PASS" : "FAIL") << "  " << c["id"] << " " << c["name"].get<std::string>()
              << "  " << c["values"].dump() << "\n";
  m.set("all_pass", res.all_pass);
  finish(m, run, {path});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dyadflow: dyadic listener/speaker motion generation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", o.out_dir, "output directory (default: io.out_dir, $DYADFLOW_OUT_DIR, ./dyadflow_out)");
    sub->add_option("--seed", o.seed, "master seed override");
    sub->add_option("--threads", o.threads, "worker threads; 1 is fully deterministic");
  };
  auto data_opt = [&](CLI::App* sub) { sub->add_option("--data", o.data_path, "dataset container"); };
  auto sampler_opts = [&](CLI::App* sub) {
    sub->add_option("--mode", o.mode, "ode or sde")->check(CLI::IsMember({"ode", "sde"}));
    sub->add_option("--steps", o.steps, "denoising steps");
    sub->add_option("--sigma", o.sigma, "SDE noise scale");
    sub->add_option("--cfg-speak", o.cfg_speak, "CFG weight on speaking frames");
    sub->add_option("--cfg-listen", o.cfg_listen, "CFG weight on listening frames");
    sub->add_option("--checkpoint", o.checkpoint, "flow checkpoint (default: latest stage)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dyadic corpus");
  common(gen);
  auto* vae = app.add_subcommand("train-vae", "train the motion VAE and normalizers");
  common(vae);
  data_opt(vae);
  auto* flow = app.add_subcommand("train-flow", "Stage 1: supervised flow-matching training");
  common(flow);
  data_opt(flow);
  auto* post = app.add_subcommand("posttrain-gdpo", "Stage 2: group-decoupled policy optimization");
  common(post);
  data_opt(post);
  post->add_option("--checkpoint", o.checkpoint, "Stage-1 checkpoint");
  auto* infer = app.add_subcommand("infer", "generate motion for one context");
  common(infer);
  sampler_opts(infer);
  infer->add_option("--text", o.text, "text token (0 = none, m+1 = reaction mode m)");
  infer->add_option("--frames", o.frames, "sequence length in frames");
  infer->add_option("--sample", o.sample, "eval context index");
  auto* ev = app.add_subcommand("eval", "score a checkpoint on the eval split");
  common(ev);
  data_opt(ev);
  sampler_opts(ev);
  auto* demo = app.add_subcommand("demo-collapse", "full collapse-vs-recovery experiment with pass/fail report");
  common(demo);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) cmd_gen_data(o, argc, argv);
    if (*vae) cmd_train_vae(o, argc, argv);
    if (*flow) cmd_train_flow(o, argc, argv);
    if (*post) cmd_posttrain(o, argc, argv);
    if (*infer) cmd_infer(o, argc, argv);
    if (*ev) cmd_eval(o, argc, argv);
    if (*demo) cmd_demo(o, argc, argv);
  } catch (const ConfigError& e) {
    log::error(e.what());
    return 1;
  } catch (const std::exception& e) {
    log::error(e.what());
    return 2;
  }
  return 0;
}
