#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "eqreg/binary_io.hpp"
#include "eqreg/cli.hpp"
#include "eqreg/training.hpp"

namespace eqreg {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("eqreg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& rel) const { return (dir_ / rel).string(); }

  void gen() {
    const Result r = run({"gen", "--out", p("ds"), "--train", "4", "--val", "2", "--size", "32",
                          "--complexity", "4", "--seed", "3"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }

  // Tiny network so each train call takes well under a second.
  std::vector<std::string> train_args(const std::string& out) const {
    return {"train", "--data", p("ds"), "--out", p(out), "--steps", "3", "--set", "crop_size=16",
            "--set", "base_channels=4", "--set", "depth_blocks=2", "--set", "val_crops=2"};
  }

  fs::path dir_;
};

TEST(GitBlobHash, KnownValues) {
  EXPECT_EQ(git_blob_hash({}), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  const std::string hello = "hello\n";
  EXPECT_EQ(git_blob_hash({reinterpret_cast<const std::uint8_t*>(hello.data()), hello.size()}),
            "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(ExitCodes, KindMapping) {
  EXPECT_EQ(exit_code(ErrorKind::Config), 2);
  EXPECT_EQ(exit_code(ErrorKind::Constraint), 2);
  EXPECT_EQ(exit_code(ErrorKind::Collision), 2);
  EXPECT_EQ(exit_code(ErrorKind::Architecture), 2);
  EXPECT_EQ(exit_code(ErrorKind::Semantics), 2);
  EXPECT_EQ(exit_code(ErrorKind::Io), 3);
  EXPECT_EQ(exit_code(ErrorKind::Format), 3);
  EXPECT_EQ(exit_code(ErrorKind::Truncated), 3);
  EXPECT_EQ(exit_code(ErrorKind::Checksum), 3);
  EXPECT_EQ(exit_code(ErrorKind::Version), 3);
  EXPECT_EQ(exit_code(ErrorKind::Dtype), 3);
  EXPECT_EQ(exit_code(ErrorKind::Divergence), 4);
}

TEST(ExitCodes, ParseErrorsAndHelp) {
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"train"}).code, kExitConfig);
  EXPECT_EQ(run({"gen", "--out", "x", "--train", "many"}).code, kExitConfig);
  const Result h = run({"--help"});
  EXPECT_EQ(h.code, kExitOk);
  EXPECT_NE(h.out.find("eqerr"), std::string::npos);
}

TEST_F(CliDir, GenCollisionAndForce) {
  gen();
  EXPECT_TRUE(fs::exists(p("ds/manifest.txt")));
  EXPECT_TRUE(fs::exists(p("ds/run.json")));
  const std::string before = slurp(p("ds/val/1000003_rgb.dmap"));
  const Result again = run({"gen", "--out", p("ds"), "--size", "32"});
  EXPECT_EQ(again.code, kExitConfig);
  EXPECT_NE(again.err.find("collision"), std::string::npos);
  EXPECT_EQ(slurp(p("ds/val/1000003_rgb.dmap")), before);
  const Result forced = run({"gen", "--out", p("ds"), "--train", "4", "--val", "2", "--size", "32",
                             "--complexity", "4", "--seed", "3", "--force"});
  EXPECT_EQ(forced.code, kExitOk) << forced.err;
  EXPECT_EQ(slurp(p("ds/val/1000003_rgb.dmap")), before);
}

TEST_F(CliDir, IoAndConfigErrors) {
  gen();
  EXPECT_EQ(run({"eval", "--ckpt", p("missing.eqvn"), "--data", p("ds")}).code, kExitIo);
  std::ofstream(p("junk.eqvn")) << "not a checkpoint";
  EXPECT_EQ(run({"eval", "--ckpt", p("junk.eqvn"), "--data", p("ds")}).code, kExitIo);
  EXPECT_EQ(run({"eval", "--data", p("ds")}).code, kExitConfig);
  auto a = train_args("r");
  a.insert(a.end(), {"--set", "no_such_key=1"});
  EXPECT_EQ(run(a).code, kExitConfig);
  a = train_args("r");
  a.insert(a.end(), {"--mode", "finetune"});
  EXPECT_EQ(run(a).code, kExitConfig);
}

TEST_F(CliDir, DivergenceExitsFour) {
  gen();
  auto a = train_args("r");
  a.insert(a.end(), {"--set", "lr_start=1e300"});
  const Result r = run(a);
  EXPECT_EQ(r.code, kExitDivergence) << r.err;
}

TEST_F(CliDir, TrainWritesRunRecord) {
  gen();
  const Result r = run(train_args("r"));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("final run=run step=3 absrel="), std::string::npos);
  const auto j = nlohmann::json::parse(slurp(p("r/run.json")));
  EXPECT_EQ(j["command"], "train");
  EXPECT_EQ(j["inputs"][p("ds/manifest.txt")], git_blob_hash(read_file(p("ds/manifest.txt"))));
  EXPECT_EQ(j["outputs"].size(), 3u);
  // The recorded config replays to the same checkpoint.
  std::ofstream(p("replay.txt")) << j["config"].get<std::string>();
  const Result again =
      run({"train", "--data", p("ds"), "--out", p("r2"), "--config", p("replay.txt")});
  ASSERT_EQ(again.code, kExitOk) << again.err;
  EXPECT_TRUE(slurp(p("r/final.eqvn")) == slurp(p("r2/final.eqvn")));
}

TEST_F(CliDir, ZeroLambdaEqLossMatchesAug) {
  gen();
  auto a = train_args("aug");
  a.insert(a.end(), {"--mode", "aug"});
  auto e = train_args("eq");
  e.insert(e.end(), {"--mode", "eqloss", "--lambda", "0"});
  ASSERT_EQ(run(a).code, kExitOk);
  ASSERT_EQ(run(e).code, kExitOk);
  EXPECT_TRUE(slurp(p("aug/final.eqvn")) == slurp(p("eq/final.eqvn")));
}

TEST_F(CliDir, LambdaSweep) {
  gen();
  auto a = train_args("sw");
  a.insert(a.end(), {"--mode", "eqloss", "--lambda", "0", "--lambda", "1e-4", "--lambda", "0.01",
                     "--lambda", "1"});
  const Result r = run(a);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* d : {"lambda_0", "lambda_0.0001", "lambda_0.01", "lambda_1"}) {
    EXPECT_TRUE(fs::exists(dir_ / "sw" / d / "final.eqvn")) << d;
    EXPECT_TRUE(fs::exists(dir_ / "sw" / d / "run.json")) << d;
  }
  const std::vector<MetricRow> rows = read_metrics_csv(p("sw/sweep.csv"));
  int eq_rows = 0;
  for (const MetricRow& m : rows) eq_rows += m.metric == "val_eqloss";
  EXPECT_EQ(eq_rows, 4);
  std::size_t lines = 0;
  for (std::size_t q = r.out.find("final run="); q != std::string::npos; q = r.out.find("final run=", q + 1)) ++lines;
  EXPECT_EQ(lines, 4u);
}

TEST_F(CliDir, EvalOracleAndCheckpoint) {
  gen();
  const Result o = run({"eval", "--oracle", "--data", p("ds"), "--out", p("o.csv")});
  ASSERT_EQ(o.code, kExitOk) << o.err;
  double absrel = -1;
  for (const MetricRow& m : read_metrics_csv(p("o.csv"))) {
    if (m.metric == "absrel") absrel = m.value;
  }
  EXPECT_GE(absrel, 0.0);
  EXPECT_LE(absrel, 1e-6);

  ASSERT_EQ(run(train_args("r")).code, kExitOk);
  const Result e = run({"eval", "--ckpt", p("r/final.eqvn"), "--data", p("ds"), "--crop-size", "16",
                        "--val-crops", "2"});
  ASSERT_EQ(e.code, kExitOk) << e.err;
  EXPECT_EQ(e.out.rfind(kMetricsHeader, 0), 0u);
  EXPECT_NE(e.out.find("final,3,eqloss,"), std::string::npos);
  EXPECT_EQ(run({"eval", "--ckpt", p("r/final.eqvn"), "--data", p("ds"), "--task", "normal"}).code,
            kExitConfig);
}

TEST_F(CliDir, EqErrWritesReport) {
  gen();
  ASSERT_EQ(run(train_args("r")).code, kExitOk);
  const Result r = run({"eqerr", "--ckpt", p("r/final.eqvn"), "--oracle", "--gt",
                        p("ds/val/1000003_disp.dmap"), "--image", p("ds/val/1000003_rgb.dmap"),
                        "--pairs", "20", "--heatmaps", "2", "--out", p("eq")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* f : {"eqerr.csv", "eqerr_box.svg", "run.json", "pair_0_oracle.png",
                        "pair_0_final.png", "pair_1_final.png"}) {
    EXPECT_TRUE(fs::exists(dir_ / "eq" / f)) << f;
  }
  int samples = 0;
  double oracle_sum = 0.0;
  double oracle_mean = -1;
  for (const MetricRow& m : read_metrics_csv(p("eq/eqerr.csv"))) {
    samples += m.metric == "eqerr";
    if (m.run_id != "oracle") continue;
    if (m.metric == "eqerr") oracle_sum += m.value;
    if (m.metric == "eqerr_mean") oracle_mean = m.value;
  }
  EXPECT_EQ(samples, 40);
  EXPECT_NEAR(oracle_mean, oracle_sum / 20.0, 1e-12);
  EXPECT_EQ(run({"eqerr", "--oracle", "--image", p("ds/val/1000003_rgb.dmap"), "--out", p("x")}).code,
            kExitConfig);
}

TEST_F(CliDir, TtaSingleDegenerateCropIsPlainPrediction) {
  gen();
  ASSERT_EQ(run(train_args("r")).code, kExitOk);
  const Result r = run({"tta", "--ckpt", p("r/final.eqvn"), "--image", p("ds/val/1000003_rgb.dmap"),
                        "--crops", "1", "--scale-lo", "1", "--scale-hi", "1", "--aspect-lo", "1",
                        "--aspect-hi", "1", "--pad", "0", "--out", p("t.dmap")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const PredictorNet net = load_checkpoint(p("r/final.eqvn")).net;
  const DenseMap plain = predict_task(net, Task::Depth, read_map(p("ds/val/1000003_rgb.dmap")));
  const DenseMap tta = read_map(p("t.dmap"));
  ASSERT_EQ(tta.height(), plain.height());
  // Maps are stored as float32.
  for (int q = 0; q < plain.pixels(); ++q) {
    ASSERT_TRUE(tta.valid(q));
    EXPECT_NEAR(tta.values()[q], plain.values()[q], 1e-6 * std::abs(plain.values()[q]));
  }
}

TEST_F(CliDir, TtaMatchesLibrary) {
  gen();
  ASSERT_EQ(run(train_args("r")).code, kExitOk);
  const Result r = run({"tta", "--ckpt", p("r/final.eqvn"), "--image", p("ds/val/1000004_rgb.dmap"),
                        "--crops", "3", "--crop-size", "16", "--seed", "9", "--out", p("t.dmap")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const PredictorNet net = load_checkpoint(p("r/final.eqvn")).net;
  CropSampler s;
  s.out_h = s.out_w = 16;
  RandomState rng(9);
  const DenseMap want =
      predict_tta([&](const DenseMap& x) { return predict_task(net, Task::Depth, x); },
                  read_map(p("ds/val/1000004_rgb.dmap")), s, 3, rng);
  EXPECT_TRUE(read_map(p("t.dmap")) == decode_map(encode_map(want)));
  EXPECT_EQ(run({"tta", "--ckpt", p("r/final.eqvn"), "--image", p("ds/val/1000004_rgb.dmap"),
                 "--task", "normal", "--out", p("n.dmap")})
                .code,
            kExitConfig);
}

}  // namespace
}  // namespace eqreg
