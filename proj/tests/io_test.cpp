#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "refseg/cli.hpp"
#include "refseg/errors.hpp"
#include "refseg/io.hpp"
#include "refseg/metrics.hpp"
#include "refseg/model.hpp"
#include "test_support.hpp"

using namespace refseg;
using namespace refseg::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("refseg_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor random_mask_tensor(Shape s, std::uint64_t seed) {
  Tensor t = random_tensor(std::move(s), seed);
  for (double& v : t.data()) v = v > 0 ? 1.0 : 0.0;
  return t;
}

std::string expect_throw_message(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "no exception";
  return {};
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Volume, FloatRoundTripIsBitExact) {
  const Tensor t = random_tensor({3, 4, 5}, 1);
  const Volume3d v = decode_volume(encode_volume(t, {0.5f, 1.0f, 2.25f}, VolumeType::Float));
  EXPECT_EQ(v.type, VolumeType::Float);
  EXPECT_EQ(v.spacing, (std::array<float, 3>{0.5f, 1.0f, 2.25f}));
  ASSERT_EQ(v.data.shape(), t.shape());
  // Stored as f32, so the round trip is exact once values are f32.
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(v.data.data()[i], static_cast<double>(static_cast<float>(t.data()[i])));
  const Volume3d again = decode_volume(encode_volume(v.data, v.spacing, VolumeType::Float));
  EXPECT_TRUE(bit_identical(again.data, v.data));
}

TEST(Volume, MaskRoundTripThroughFile) {
  const Tensor m = random_mask_tensor({2, 3, 4}, 2);
  const fs::path p = scratch_dir("mask") / "m.v3d";
  write_volume(p.string(), m, {1, 1, 1}, VolumeType::Mask);
  EXPECT_EQ(fs::file_size(p), 4u + 1 + 12 + 12 + 24);
  const Volume3d v = read_volume(p.string());
  EXPECT_EQ(v.type, VolumeType::Mask);
  EXPECT_TRUE(bit_identical(v.data, m));
}

TEST(Volume, RejectsBadFiles) {
  auto bytes = encode_volume(random_mask_tensor({2, 2, 2}, 3), {1, 1, 1}, VolumeType::Mask);
  auto magic = bytes;
  std::copy_n("XXXX", 4, magic.begin());
  EXPECT_THROW(decode_volume(magic), FormatError);

  auto two = bytes;
  two.back() = 2;
  EXPECT_THROW(decode_volume(two), InputError);

  auto dtype = bytes;
  dtype[4] = 7;
  EXPECT_THROW(decode_volume(dtype), FormatError);

  auto cut = bytes;
  cut.resize(cut.size() - 3);
  const std::string msg = expect_throw_message([&] { decode_volume(cut); });
  EXPECT_NE(msg.find("5 bytes"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected 8"), std::string::npos) << msg;
  EXPECT_THROW(decode_volume(cut), CorruptionError);

  auto header = bytes;
  header.resize(10);
  EXPECT_THROW(decode_volume(header), CorruptionError);

  EXPECT_THROW(encode_volume(Tensor({2, 2, 2}, {0, 1, 0.5, 0, 0, 0, 0, 0}), {1, 1, 1}, VolumeType::Mask), InputError);
  EXPECT_THROW(read_volume("/nonexistent/none.v3d"), InputError);
}

TEST(Checkpoint, RoundTripRestoresEveryTensorAndTag) {
  const Model a(tiny_config());
  const fs::path p = scratch_dir("ckpt") / "m.ckpt";
  write_checkpoint(p.string(), a.params(), serialize_config(a.config()));
  const Checkpoint c = read_checkpoint(p.string());
  EXPECT_EQ(parse_config(c.config_text), a.config());
  ASSERT_EQ(c.params.size(), a.params().all().size());
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const auto& want = a.params().all()[i];
    EXPECT_EQ(c.params[i].name, want.name);
    EXPECT_EQ(c.params[i].tag.frozen, want.tag.frozen);
    EXPECT_EQ(c.params[i].tag.origin, want.tag.origin);
    EXPECT_TRUE(bit_identical(c.params[i].value, want.value)) << want.name;
  }

  ModelConfig other = tiny_config();
  other.train.seed = 5;
  Model b(other);
  load_checkpoint(b.params(), c);
  EXPECT_EQ(b.params().frozen_hash(), a.params().frozen_hash());
  const Tensor v = random_tensor({1, 1, 8, 8, 8}, 6);
  EXPECT_TRUE(bit_identical(a.forward(v, "segment the cube"), b.forward(v, "segment the cube")));
}

TEST(Checkpoint, MismatchesAndCorruptionAreRejected) {
  const Model a(tiny_config());
  const fs::path p = scratch_dir("ckpt_bad") / "m.ckpt";
  write_checkpoint(p.string(), a.params(), "");
  const Checkpoint c = read_checkpoint(p.string());

  ModelConfig wider = tiny_config();
  wider.decoder.mlp_dim = 32;
  Model b(wider);
  EXPECT_THROW(load_checkpoint(b.params(), c), FormatError);

  Checkpoint retagged = c;
  retagged.params[0].tag.frozen = !retagged.params[0].tag.frozen;
  Model same(tiny_config());
  EXPECT_THROW(load_checkpoint(same.params(), retagged), FormatError);

  auto bytes = read_file_bytes(p.string());
  bytes.resize(bytes.size() / 2);
  write_file_bytes(p.string(), bytes);
  EXPECT_THROW(read_checkpoint(p.string()), CorruptionError);
  bytes[0] = 'X';
  write_file_bytes(p.string(), bytes);
  EXPECT_THROW(read_checkpoint(p.string()), FormatError);
}

TEST(Config, EmptyTextGivesDefaults) {
  const ModelConfig c = parse_config("");
  EXPECT_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.epochs, 200u);
  EXPECT_EQ(c.train.batch_size, 1u);
  EXPECT_EQ(c.train.weight_decay, 1e-5);
  EXPECT_EQ(c.train.beta1, 0.9);
  EXPECT_EQ(c, ModelConfig{});
}

TEST(Config, BadValueNamesTheKey) {
  const std::string msg = expect_throw_message([] { parse_config("train.lr = banana\n"); });
  EXPECT_NE(msg.find("train.lr"), std::string::npos) << msg;
  EXPECT_THROW(parse_config("[train]\nlr = banana\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nnot_a_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[train\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nlr = 1\nlr = 2\n"), ConfigError);
}

TEST(Config, SerializeParseRoundTrip) {
  ModelConfig c = tiny_config();
  c.train.lr = 3.25e-4;
  c.train.augment = {"flip"};
  c.data.classes = {"cube", "slab", "sphere"};
  c.text.pooling = "eos";
  c.crossmodal.use_projector = false;
  EXPECT_EQ(parse_config(serialize_config(c)), c);
  EXPECT_EQ(serialize_config(parse_config(serialize_config(c))), serialize_config(c));
}

TEST(Dataset, WriteReadRoundTrip) {
  DataConfig d;
  d.dims = {8, 8, 8};
  const auto samples = synth_dataset(4, 3, d);
  const fs::path dir = scratch_dir("dataset");
  write_dataset(dir.string(), samples);
  EXPECT_TRUE(fs::exists(dir / "images" / "case_0002.v3d"));
  const auto cases = read_cases((dir / "cases.jsonl").string());
  ASSERT_EQ(cases.size(), 3u);
  EXPECT_EQ(cases[1].id, case_id(1));
  EXPECT_EQ(cases[1].prompt, samples[1].prompt);
  EXPECT_EQ(cases[1].classes, samples[1].classes);
  const auto back = read_dataset(dir.string());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(bit_identical(back[i].mask, samples[i].mask));
    EXPECT_EQ(back[i].target, samples[i].target);
    EXPECT_EQ(back[i].volume.shape(), samples[i].volume.shape());
    EXPECT_LE(max_abs_diff(back[i].volume, samples[i].volume), 1e-7);
  }

  std::ofstream(dir / "cases.jsonl", std::ios::app) << "{not json\n";
  const std::string msg = expect_throw_message([&] { read_cases((dir / "cases.jsonl").string()); });
  EXPECT_NE(msg.find("cases.jsonl:4"), std::string::npos) << msg;
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;
  std::string config;

  void SetUp() override {
    dir = scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    ModelConfig c = tiny_config();
    c.train.epochs = 2;
    c.train.checkpoint_every = 1;
    c.train.lr = 1e-3;
    c.data.samples = 3;
    config = (dir / "small.ini").string();
    std::ofstream(config) << serialize_config(c);
  }
};

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run_cli({}).code, 1);
  const CliResult bad = run_cli({"synth", "--seed", "1", "--n", "1", "--out", dir.string(), "--bogus"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("--bogus"), std::string::npos);
  EXPECT_EQ(run_cli({"train", "--help"}).code, 0);
  EXPECT_NE(run_cli({"--help"}).out.find("gradcheck"), std::string::npos);
  const fs::path junk = dir / "junk.ckpt";
  std::ofstream(junk) << "not a checkpoint";
  const CliResult runtime = run_cli({"infer", "--checkpoint", junk.string(), "--volume", junk.string(), "--prompt", "x", "--out", (dir / "o.v3d").string()});
  EXPECT_EQ(runtime.code, 2);
  EXPECT_EQ(runtime.err.rfind("error: ", 0), 0u) << runtime.err;
}

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run_cli({"synth", "--seed", "7", "--n", "2", "--out", (dir / "a").string(), "--config", config}).code, 0);
  ASSERT_EQ(run_cli({"synth", "--seed", "7", "--n", "2", "--out", (dir / "b").string(), "--config", config}).code, 0);
  for (const char* rel : {"cases.jsonl", "images/case_0000.v3d", "masks/case_0001.v3d"})
    EXPECT_EQ(read_file_bytes((dir / "a" / rel).string()), read_file_bytes((dir / "b" / rel).string())) << rel;
  EXPECT_EQ(read_volume((dir / "a" / "images" / "case_0000.v3d").string()).data.shape(), (Shape{8, 8, 8}));
}

TEST_F(Cli, TrainInferEval) {
  const fs::path data = dir / "data", run = dir / "run", pred = dir / "pred";
  ASSERT_EQ(run_cli({"synth", "--seed", "3", "--n", "3", "--out", data.string(), "--config", config}).code, 0);
  const CliResult tr = run_cli({"train", "--config", config, "--data", data.string(), "--out", run.string()});
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_NE(tr.out.find("frozen"), std::string::npos);
  EXPECT_TRUE(fs::exists(run / "model.ckpt"));
  EXPECT_TRUE(fs::exists(run / "checkpoint_epoch0001.ckpt"));
  std::istringstream log(read_text(run / "train_log.jsonl"));
  std::string line;
  std::size_t epochs = 0;
  while (std::getline(log, line)) {
    EXPECT_TRUE(nlohmann::json::parse(line).contains("loss")) << line;
    ++epochs;
  }
  EXPECT_EQ(epochs, 2u);

  const CliResult one = run_cli({"infer", "--checkpoint", (run / "model.ckpt").string(), "--volume", (data / "images" / "case_0000.v3d").string(),
                                 "--prompt", "segment the cube", "--out", (dir / "one.v3d").string()});
  ASSERT_EQ(one.code, 0) << one.err;
  const Volume3d m = read_volume((dir / "one.v3d").string());
  EXPECT_EQ(m.type, VolumeType::Mask);
  EXPECT_EQ(m.data.shape(), (Shape{8, 8, 8}));

  const CliResult batch = run_cli({"infer", "--checkpoint", (run / "model.ckpt").string(), "--cases", (data / "cases.jsonl").string(), "--images",
                                   (data / "images").string(), "--out", pred.string()});
  ASSERT_EQ(batch.code, 0) << batch.err;
  EXPECT_TRUE(fs::exists(pred / "case_0002.v3d"));

  const CliResult ev = run_cli({"eval", "--pred", pred.string(), "--gt", (data / "masks").string(), "--cases", (data / "cases.jsonl").string(), "--out",
                                (dir / "report").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  std::istringstream rep(read_text(dir / "report" / "report.jsonl"));
  std::size_t rows = 0;
  while (std::getline(rep, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["case_id"], case_id(rows));
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
}

TEST_F(Cli, EvalOnIdenticalMasksIsPerfect) {
  const fs::path data = dir / "data";
  ASSERT_EQ(run_cli({"synth", "--seed", "5", "--n", "2", "--out", data.string(), "--config", config}).code, 0);
  const CliResult ev = run_cli({"eval", "--pred", (data / "masks").string(), "--gt", (data / "masks").string(), "--out", (dir / "r").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  std::istringstream rep(read_text(dir / "r" / "report.jsonl"));
  std::string line;
  while (std::getline(rep, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["dice"], 1.0);
    EXPECT_EQ(j["nsd"], 1.0);
    EXPECT_EQ(j["hd"], 0.0);
  }
  EXPECT_NE(read_text(dir / "r" / "report.txt").find("case_0001"), std::string::npos);
}
