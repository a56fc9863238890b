#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eqreg/error.hpp"
#include "eqreg/training.hpp"

namespace eqreg {
namespace {

namespace fs = std::filesystem;

class TrainDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("eqreg_train_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  DatasetManifest small_dataset(int n_train = 6, int n_val = 2) {
    SceneParams p;
    p.size = 32;
    p.complexity = 4;
    p.seed = 3;
    return build_dataset(p, n_train, n_val, dir_ / "data");
  }

  fs::path dir_;
};

// Small enough that a few hundred steps run in seconds.
TrainConfig tiny_config() {
  TrainConfig c;
  c.arch.depth_blocks = 2;
  c.arch.base_channels = 4;
  c.sampler.out_h = c.sampler.out_w = 16;
  c.steps = 4;
  c.val_images = 2;
  c.val_crops = 2;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Offset of the first differing byte, -1 when the files are identical.
long first_difference(const fs::path& a, const fs::path& b) {
  const std::string x = slurp(a);
  const std::string y = slurp(b);
  const std::size_t n = std::min(x.size(), y.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] != y[i]) return static_cast<long>(i);
  }
  return x.size() == y.size() ? -1 : static_cast<long>(n);
}

bool same_parameters(const PredictorNet& a, const PredictorNet& b) {
  return std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin(),
                    b.parameters().end());
}

double last_value(const std::vector<MetricRow>& rows, const std::string& metric) {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->metric == metric) return it->value;
  }
  ADD_FAILURE() << "no row " << metric;
  return 0.0;
}

TEST(Config, DefaultsFollowTheTrainingProtocol) {
  const TrainConfig c;
  EXPECT_EQ(c.crops, 3);
  EXPECT_EQ(c.lambda, 1e-4);
  EXPECT_EQ(c.lr_start, 1e-3);
  EXPECT_EQ(c.lr_end, 0.0);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.steps, 2000);
  EXPECT_TRUE(c.loss_layer == LayerSelector::penultimate());
}

TEST(Config, TextRoundTrip) {
  TrainConfig c = tiny_config();
  c.mode = TrainMode::SemiSup;
  c.task = Task::Normal;
  c.lambda = 3e-5;
  c.lambda_unlabeled = 0.25;
  c.loss_layer = LayerSelector::up(1);
  c.sampler.pad_mode = PadMode::Total;
  c.sampler.jitter.hue = 0.05;
  c.labeled_count = 2;
  c.teacher = "t.eqvn";
  c.run_id = "r7";
  const std::string text = config_to_text(c);
  const TrainConfig back = parse_config(text);
  EXPECT_EQ(config_to_text(back), text);
  EXPECT_EQ(back.mode, TrainMode::SemiSup);
  EXPECT_EQ(back.task, Task::Normal);
  EXPECT_EQ(back.lambda, 3e-5);
  ASSERT_TRUE(back.lambda_unlabeled.has_value());
  EXPECT_EQ(*back.lambda_unlabeled, 0.25);
  EXPECT_TRUE(back.loss_layer == LayerSelector::up(1));
  EXPECT_EQ(back.sampler.pad_mode, PadMode::Total);
}

TEST(Config, CommentsOverridesAndErrors) {
  const TrainConfig c = parse_config("# header\nmode = eqloss  # trailing\n\nlambda=0.5\ncrops = 5\n");
  EXPECT_EQ(c.mode, TrainMode::EqLoss);
  EXPECT_EQ(c.lambda, 0.5);
  EXPECT_EQ(c.crops, 5);
  const TrainConfig o = parse_config("crops = 2", c);
  EXPECT_EQ(o.crops, 2);
  EXPECT_EQ(o.lambda, 0.5);
  auto kind = [](const std::string& text) {
    try {
      parse_config(text).check();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind("no_such_key = 1"), ErrorKind::Config);
  EXPECT_EQ(kind("mode = bogus"), ErrorKind::Config);
  EXPECT_EQ(kind("crops = 0"), ErrorKind::Config);
  EXPECT_EQ(kind("lambda = -1"), ErrorKind::Config);
  EXPECT_EQ(kind("steps = 0"), ErrorKind::Config);
  EXPECT_EQ(kind("crops = three"), ErrorKind::Config);
  EXPECT_EQ(kind("just words"), ErrorKind::Config);
}

TEST(Config, TaskPicksHead) {
  TrainConfig c;
  c.task = Task::Depth;
  EXPECT_EQ(c.effective_arch().out_channels, 1);
  EXPECT_EQ(c.effective_arch().head, HeadActivation::Softplus);
  c.task = Task::Normal;
  EXPECT_EQ(c.effective_arch().out_channels, 3);
  EXPECT_EQ(c.effective_arch().head, HeadActivation::Identity);
}

TEST(PositionBias, PatternIsCropRelative) {
  DenseMap m(4, 4, 1, Semantics::Disparity, 1.0);
  apply_position_bias(m, 0.5);
  double mean = 0.0;
  for (double v : m.values()) mean += v / 16.0;
  EXPECT_NEAR(mean, 1.0, 1e-12);
  EXPECT_NEAR(m.at(0, 1, 0), 1.0 + 0.5 * std::sin(std::numbers::pi / 4), 1e-12);
}

TEST_F(TrainDir, LambdaZeroEqLossIsAugBitwise) {
  const DatasetManifest m = small_dataset();
  TrainConfig aug = tiny_config();
  aug.mode = TrainMode::Aug;
  TrainConfig eq = aug;
  eq.mode = TrainMode::EqLoss;
  eq.lambda = 0.0;
  for (int steps : {1, 5}) {
    aug.steps = eq.steps = steps;
    const TrainResult a = train(aug, m, "");
    const TrainResult b = train(eq, m, "");
    EXPECT_TRUE(same_parameters(a.checkpoint.net, b.checkpoint.net)) << steps;
    EXPECT_TRUE(a.checkpoint.optimizer == b.checkpoint.optimizer);
    EXPECT_EQ(a.checkpoint.rng_state, b.checkpoint.rng_state);
  }
  eq.lambda = 1e-2;
  EXPECT_FALSE(same_parameters(train(aug, m, "").checkpoint.net, train(eq, m, "").checkpoint.net));
}

TEST_F(TrainDir, SeededRunsWriteIdenticalFiles) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  c.mode = TrainMode::EqLoss;
  c.checkpoint_every = 2;
  c.val_every = 2;
  train(c, m, dir_ / "a");
  train(c, m, dir_ / "b");
  for (const char* f : {"metrics.csv", "config.txt", "final.eqvn", "checkpoint_2.eqvn"}) {
    ASSERT_TRUE(fs::exists(dir_ / "a" / f)) << f;
    EXPECT_EQ(first_difference(dir_ / "a" / f, dir_ / "b" / f), -1) << f;
  }
  const auto rows = read_metrics_csv(dir_ / "a" / "metrics.csv");
  EXPECT_EQ(std::count_if(rows.begin(), rows.end(),
                          [](const MetricRow& r) { return r.metric == "train_loss"; }),
            c.steps);
  EXPECT_EQ(std::count_if(rows.begin(), rows.end(),
                          [](const MetricRow& r) { return r.metric == "val_eqloss"; }),
            3);
  c.seed = 1;
  train(c, m, dir_ / "c");
  EXPECT_NE(first_difference(dir_ / "a" / "metrics.csv", dir_ / "c" / "metrics.csv"), -1);
}

TEST_F(TrainDir, SavedConfigReplays) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  c.mode = TrainMode::EqLoss;
  train(c, m, dir_ / "a");
  const TrainConfig back = load_config(dir_ / "a" / "config.txt");
  train(back, m, dir_ / "b");
  EXPECT_EQ(first_difference(dir_ / "a" / "final.eqvn", dir_ / "b" / "final.eqvn"), -1);
}

TEST_F(TrainDir, ConstantImageEqLossVanishes) {
  const fs::path root = dir_ / "flat";
  DatasetManifest m;
  m.root = root;
  m.params.size = 32;
  m.ids = {{"train", 0}, {"val", kValSeedOffset}};
  for (const SampleId& id : m.ids) {
    fs::create_directories(root / id.split);
    write_map(DenseMap(32, 32, 3, Semantics::Rgb, 0.5), m.file(id, "rgb"));
    write_map(DenseMap(32, 32, 1, Semantics::Depth, 5.0), m.file(id, "depth"));
    write_map(DenseMap(32, 32, 1, Semantics::Disparity, 0.2), m.file(id, "disp"));
    DenseMap n(32, 32, 3, Semantics::Normal, 0.0);
    for (int i = 0; i < 32; ++i) {
      for (int j = 0; j < 32; ++j) n.at(i, j, 2) = -1.0;
    }
    write_map(n, m.file(id, "normal"));
    write_map(DenseMap(32, 32, 1, Semantics::Edge, 0.0), m.file(id, "edge"));
  }
  write_manifest(m);
  TrainConfig c = tiny_config();
  c.mode = TrainMode::EqLoss;
  c.steps = 200;
  const TrainResult r = train(c, read_manifest(root), "");
  EXPECT_LT(last_value(r.rows, "train_eq"), 1e-6);
}

TEST_F(TrainDir, SemiSupWithoutUnlabeledWeightIsSupervisedEqLoss) {
  const DatasetManifest m = small_dataset();
  TrainConfig semi = tiny_config();
  semi.mode = TrainMode::SemiSup;
  semi.labeled_count = 3;
  semi.lambda_unlabeled = 0.0;
  TrainConfig eq = tiny_config();
  eq.mode = TrainMode::EqLoss;
  eq.max_train = 3;
  const TrainResult a = train(semi, m, "");
  const TrainResult b = train(eq, m, "");
  EXPECT_TRUE(same_parameters(a.checkpoint.net, b.checkpoint.net));
  for (const MetricRow& row : a.rows) {
    if (row.metric == "train_eq_unlabeled") EXPECT_EQ(row.value, 0.0);
  }
  semi.lambda_unlabeled = 1e-2;
  const TrainResult c = train(semi, m, "");
  EXPECT_GT(last_value(c.rows, "train_eq_unlabeled"), 0.0);
  EXPECT_FALSE(same_parameters(a.checkpoint.net, c.checkpoint.net));
}

TEST_F(TrainDir, SemiSupNeedsBothStreams) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  c.mode = TrainMode::SemiSup;
  for (int labeled : {0, 6, 9}) {
    c.labeled_count = labeled;
    try {
      train(c, m, "");
      ADD_FAILURE() << labeled;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Config) << labeled;
    }
  }
}

TEST_F(TrainDir, DivergenceAborts) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  c.lr_start = 1e300;
  c.steps = 20;
  try {
    train(c, m, "");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST_F(TrainDir, FinetuneWithoutStepsKeepsTeacher) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  c.mode = TrainMode::Aug;
  const PredictorNet teacher = train(c, m, "").checkpoint.net;
  c.mode = TrainMode::Finetune;
  c.lambda = 0.0;
  c.lr_start = 0.0;
  c.steps = 3;
  const TrainResult r = finetune_unsupervised(c, m, teacher, "");
  EXPECT_TRUE(same_parameters(r.checkpoint.net, teacher));
  const SceneSample s = load_sample(m, m.split("val")[0]);
  EXPECT_TRUE(predict_task(r.checkpoint.net, Task::Depth, s.rgb) ==
              predict_task(teacher, Task::Depth, s.rgb));
}

TEST_F(TrainDir, FinetuneReadsNoTrainingGroundTruth) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  const PredictorNet teacher(c.effective_arch(), 5);
  for (const SampleId& id : m.split("train")) {
    for (const char* kind : {"depth", "disp", "normal", "edge"}) fs::remove(m.file(id, kind));
  }
  c.mode = TrainMode::Finetune;
  c.lr_start = 1e-4;
  const TrainResult r = finetune_unsupervised(c, m, teacher, "");
  EXPECT_FALSE(same_parameters(r.checkpoint.net, teacher));
  EXPECT_TRUE(r.initial.has("absrel"));
  EXPECT_TRUE(r.final.has("eqloss"));
}

TEST_F(TrainDir, FinetuneArchitectureMismatch) {
  const DatasetManifest m = small_dataset();
  TrainConfig c = tiny_config();
  c.mode = TrainMode::Finetune;
  Architecture other = c.effective_arch();
  other.base_channels = 6;
  try {
    finetune_unsupervised(c, m, PredictorNet(other, 1), "");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Architecture);
  }
  const fs::path ckpt = dir_ / "other.eqvn";
  save_checkpoint(PredictorNet(other, 1), ckpt);
  c.teacher = ckpt.string();
  try {
    train(c, m, "");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Architecture);
  }
}

TEST(Validation, FreshNetIsNotEquivariant) {
  TrainConfig c = tiny_config();
  const PredictorNet net(c.effective_arch(), 9);
  for (std::uint64_t seed : {1, 2, 3}) {
    const DenseMap x = gen_scene(seed, 32, 32, 4).rgb;
    const double v = validation_eqloss(net, Task::Depth, std::span(&x, 1), c.sampler, 3, 7, 0.125);
    EXPECT_GT(v, 1e-6) << seed;
    EXPECT_EQ(v, validation_eqloss(net, Task::Depth, std::span(&x, 1), c.sampler, 3, 7, 0.125));
  }
}

TEST(Validation, OracleScoresPerfectly) {
  std::vector<SceneSample> s{gen_scene(4, 32, 32, 4), gen_scene(5, 32, 32, 4)};
  const auto lookup = [&](const DenseMap& x) {
    for (const SceneSample& v : s) {
      if (v.rgb == x) return v.disparity;
    }
    throw Error(ErrorKind::Invariant, "unknown image");
  };
  const EvalMetrics e = evaluate_predictor(lookup, Task::Depth, s);
  EXPECT_NEAR(e.at("absrel"), 0.0, 1e-6);
  EXPECT_EQ(e.at("delta_1.25"), 0.0);
}

// ReLU kinks sit at zero biases in a fresh net; perturb to a generic point.
PredictorNet generic_net(const Architecture& arch, std::uint64_t seed) {
  PredictorNet net(arch, seed);
  RandomState rng(seed ^ 0x5eed);
  for (double& p : net.mutable_parameters()) p += rng.uniform(-0.05, 0.05);
  return net;
}

void check_objective_gradient(LayerSelector layer, std::uint64_t seed) {
  TrainConfig c = tiny_config();
  c.mode = TrainMode::EqLoss;
  c.lambda = 0.7;
  c.loss_layer = layer;
  c.arch.base_channels = 3;
  c.arch.pos_bands = 1;
  c.sampler.out_h = c.sampler.out_w = 8;
  const PredictorNet net = generic_net(c.effective_arch(), seed);
  ASSERT_LE(net.parameter_count(), 5000);
  const SceneSample s = gen_scene(seed, 32, 32, 4);
  RandomState rng(seed + 1);
  std::vector<CropTransform> ts;
  for (int k = 0; k < c.crops; ++k) ts.push_back(sample_transform(c.sampler, 32, 32, rng));
  LinearPredictorHead head(layer.channels(net.architecture()));
  for (double& w : head.weights()) w += rng.uniform(-0.1, 0.1);
  const ObjectiveEval base = training_objective(net, head, c, s.rgb, &s.disparity, ts);
  EXPECT_GT(base.eq, 0.0);
  auto value = [&](const PredictorNet& n, const LinearPredictorHead& h) {
    return training_objective(n, h, c, s.rgb, &s.disparity, ts, &base.average).value;
  };
  EXPECT_EQ(value(net, head), base.value);
  // Fourth-order differences at h = 1e-5 keep roundoff far below the bar for
  // entries down to ~1e-7. A ReLU or L1 kink inside that stencil spoils it, so
  // such entries are rechecked with a narrow second-order difference.
  auto shifted = [&](std::size_t i, double d) {
    PredictorNet p = net;
    p.mutable_parameters()[i] += d;
    return value(p, head);
  };
  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };
  double worst = 0.0;
  for (std::size_t i = 0; i < base.parameters.size(); ++i) {
    const double h = 1e-5;
    const double ana = base.parameters[i];
    double e = rel(ana, (8 * (shifted(i, h) - shifted(i, -h)) - (shifted(i, 2 * h) - shifted(i, -2 * h))) /
                            (12 * h));
    if (e > 1e-4) e = std::min(e, rel(ana, (shifted(i, 1e-6) - shifted(i, -1e-6)) / 2e-6));
    worst = std::max(worst, e);
  }
  EXPECT_LE(worst, 1e-4) << layer.to_string();
  for (std::size_t i = 0; i < base.head.size(); ++i) {
    LinearPredictorHead p = head;
    LinearPredictorHead m = head;
    p.weights()[i] += 1e-6;
    m.weights()[i] -= 1e-6;
    const double num = (value(net, p) - value(net, m)) / 2e-6;
    EXPECT_NEAR(base.head[i], num, 1e-4 * std::max(std::abs(num), 1e-6)) << i;
  }
}

TEST(Objective, GradientMatchesFiniteDifferencesAtOutput) {
  check_objective_gradient(LayerSelector::output(), 31);
}

TEST(Objective, GradientMatchesFiniteDifferencesAtPenultimate) {
  check_objective_gradient(LayerSelector::penultimate(), 32);
}

}  // namespace
}  // namespace eqreg
