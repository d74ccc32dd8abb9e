#include <filesystem>

#include "doctest.h"
#include "dyadflow/errors.hpp"
#include "dyadflow/pipeline/config.hpp"
#include "dyadflow/pipeline/experiment.hpp"
#include "dyadflow/pipeline/manifest.hpp"

using namespace dyadflow;
using namespace dyadflow::pipeline;
using nlohmann::json;

namespace {

RunConfig tiny_config() {
  return parse_config(json::parse(R"({
    "seed": 3,
    "data": {"frames": 32, "train_samples": 3, "eval_samples": 2, "segment_min": 8, "segment_max": 12},
    "vae": {"rate": 8, "latent_dim": 4, "layers": 1, "heads": 2, "width": 8, "ffn_mult": 2, "epochs": 1, "batch": 2},
    "flow": {"layers": 1, "heads": 2, "width": 8, "ffn_mult": 2, "time_dim": 4, "epochs": 1, "batch": 2},
    "gdpo": {"iterations": 1, "group_size": 2},
    "metrics": {"long_frames": 48, "window_tokens": 3, "window_carry": 1}
  })"));
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dyadflow_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  const auto c = parse_config(json::object());
  CHECK(c.sampler.steps == 10);
  CHECK(c.gdpo.steps == 4);
  CHECK(c.gdpo.group_size == 4);
  const auto d = parse_config(json::parse(R"({"sampler": {"mode": "sde", "cfg_listen": 2.5}, "gdpo": {"clip": 0.1}})"));
  CHECK(d.sampler.mode == sampling::Mode::sde);
  CHECK(d.sampler.cfg_listen == 2.5);
  CHECK(d.gdpo.clip == 0.1);
}

TEST_CASE("unknown keys are rejected with their path") {
  auto message = [](const char* text) {
    try {
      parse_config(json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  CHECK(message(R"({"bogus": 1})").find("bogus") != std::string::npos);
  CHECK(message(R"({"gdpo": {"reward": {"varience": 1}}})").find("gdpo.reward.varience") != std::string::npos);
  CHECK(message(R"({"data": {"groups": [{"name": "expr", "size": 4, "extra": 0}]}})").find("extra") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"flow": {"layers": "two"}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"flow": {"layers": -1}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"sampler": {"mode": "euler"}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"flow": {"heads": 3}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(json::parse(R"([1, 2])")), ConfigError);
}

TEST_CASE("config echo round-trips") {
  const auto c = tiny_config();
  const auto echo = to_json(c);
  const auto again = parse_config(echo);
  CHECK(to_json(again) == echo);
  CHECK(echo["seed"] == 3);
  CHECK(echo["data"]["frames"] == 32);
}

TEST_CASE("stage seeds derive from the master seed") {
  auto c = tiny_config();
  const auto data_seed = c.data.dyad.seed;
  CHECK(c.stage_seed("vae") != c.stage_seed("flow"));
  c.set_seed(4);
  CHECK(c.data.dyad.seed != data_seed);
  c.set_seed(3);
  CHECK(c.data.dyad.seed == data_seed);
}

TEST_CASE("git-style content hash") {
  // `printf 'hello\n' | git hash-object --stdin`
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("manifest records inputs, outputs and the config") {
  const auto dir = temp_dir("manifest");
  Manifest m("unit", to_json(tiny_config()), 3);
  write_file(dir / "out.txt", "payload");
  m.add_input("extra", "abc");
  m.add_output(dir / "out.txt");
  const auto path = m.write(dir);
  const auto j = json::parse(read_file(path));
  CHECK(j["command"] == "unit");
  CHECK(j["seed"] == 3);
  CHECK(j["config"] == to_json(tiny_config()));
  CHECK(j["inputs"].size() == 2);
  CHECK(j["outputs"][0]["hash"] == git_blob_hash("payload"));
  CHECK(j["wall_time_seconds"].get<double>() >= 0.0);
  CHECK(j["inputs_hash"].get<std::string>().size() == 40);
}

TEST_CASE("corpus container round-trip") {
  const auto c = tiny_config();
  const auto corpus = make_corpus(c);
  REQUIRE(corpus.train.size() == 3);
  REQUIRE(corpus.eval.size() == 2);
  for (const auto& s : corpus.eval) CHECK(s.text_token == data::kNoText);
  const auto back = corpus_from_container(io::decode_container(io::encode_container(corpus_to_container(corpus))),
                                          c.data.dyad);
  REQUIRE(back.train.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto &a = corpus.train[i], &b = back.train[i];
    CHECK(a.actor_motion.storage() == b.actor_motion.storage());
    CHECK(a.partner_audio.storage() == b.partner_audio.storage());
    CHECK(a.actor_vad == b.actor_vad);
    CHECK(a.text_token == b.text_token);
    CHECK(a.listening.size() == b.listening.size());
  }
}

TEST_CASE("checkpoints reload bit-exactly and carry the manifest") {
  const auto c = tiny_config();
  const auto dir = temp_dir("ckpt");
  const auto corpus = make_corpus(c);
  const auto codec = train_codec(c, corpus);
  save_codec(dir / "vae.nary", codec, to_json(c), "x.manifest.json");
  const auto codec2 = load_codec(dir / "vae.nary", c);
  const auto lat = codec.encode(corpus.eval[0].actor_motion);
  CHECK(lat.storage() == codec2.encode(corpus.eval[0].actor_motion).storage());

  const auto flow = make_flow(c, codec, 5);
  save_flow(dir / "flow.nary", flow, to_json(c), "x.manifest.json");
  const auto flow2 = load_flow(dir / "flow.nary", c, codec2);
  for (std::size_t i = 0; i < flow.params().size(); ++i)
    CHECK(flow.params().entries()[i].value.storage() == flow2.params().entries()[i].value.storage());

  const auto raw = io::load_container(dir / "flow.nary");
  const auto& m = raw.get<std::uint8_t>("meta/manifest").storage();
  CHECK(std::string(m.begin(), m.end()) == "x.manifest.json");
  const auto& cfg = raw.get<std::uint8_t>("meta/config").storage();
  CHECK(json::parse(std::string(cfg.begin(), cfg.end())) == to_json(c));

  auto other = c;
  other.flow.width = 16;
  CHECK_THROWS_AS(load_flow(dir / "flow.nary", other, codec2), FormatError);
}

TEST_CASE("generation decodes to the context length") {
  const auto c = tiny_config();
  const auto corpus = make_corpus(c);
  const auto codec = train_codec(c, corpus);
  const auto flow = make_flow(c, codec, 5);
  const auto m = generate_motion(flow, codec, make_context(codec, corpus.eval[0]), c.sampler);
  CHECK(m.rows() == 32);
  CHECK(m.cols() == c.data.dyad.channels());
}
