#include "eqreg/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

#include "eqreg/binary_io.hpp"
#include "eqreg/checkpoint.hpp"
#include "eqreg/data.hpp"
#include "eqreg/equivariance.hpp"
#include "eqreg/metrics.hpp"
#include "eqreg/report.hpp"
#include "eqreg/training.hpp"

namespace eqreg {
namespace {

namespace fs = std::filesystem;

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s += digits[d[i] >> 4];
    s += digits[d[i] & 15];
  }
  return s;
}

std::string sha1(std::span<const std::uint8_t> head, std::span<const std::uint8_t> body) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), head.data(), head.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), body.data(), body.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error(ErrorKind::Invariant, "SHA-1 digest failed");
  }
  return hex(digest, len);
}

std::span<const std::uint8_t> bytes_of(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, bytes_of(text));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void record_input(RunRecord& r, const fs::path& p) {
  r.inputs[p.string()] = git_blob_hash(read_file(p));
}

void record_dataset(RunRecord& r, const DatasetManifest& m) {
  record_input(r, m.root / "manifest.txt");
}

void check_task(const PredictorNet& net, Task task) {
  const int want = task == Task::Normal ? 3 : 1;
  if (net.architecture().out_channels != want) {
    throw Error(ErrorKind::Architecture, "checkpoint has " +
                                             std::to_string(net.architecture().out_channels) +
                                             " output channels, task " + to_string(task) +
                                             " needs " + std::to_string(want));
  }
}

DenseMap read_rgb(const fs::path& path) {
  DenseMap x = read_map(path);
  if (x.semantics() != Semantics::Rgb || x.channels() != 3) {
    throw Error(ErrorKind::Semantics, path.string() + " is not a 3-channel rgb map");
  }
  return x;
}

// Ground truth as disparity, from a depth or disparity map.
DenseMap read_gt_disparity(const fs::path& path) {
  DenseMap g = read_map(path);
  if (g.channels() != 1) throw Error(ErrorKind::Semantics, path.string() + " is not single-channel");
  if (g.semantics() == Semantics::Depth) {
    for (int p = 0; p < g.pixels(); ++p) {
      if (g.valid(p)) g.values()[p] = 1.0 / g.values()[p];
    }
    g.set_semantics(Semantics::Disparity);
  } else if (g.semantics() != Semantics::Disparity) {
    throw Error(ErrorKind::Semantics, path.string() + " holds neither depth nor disparity");
  }
  return g;
}

std::string final_line(const std::string& run, std::int64_t step, const EvalMetrics& m) {
  std::string s = "final run=" + run + " step=" + std::to_string(step);
  for (const auto& [k, v] : m.values) s += " " + k + "=" + fmt(v);
  return s;
}

struct Common {
  bool deterministic = true;
};

// ---- gen ----
struct GenOpts {
  std::string out;
  int train = 8;
  int val = 2;
  SceneParams params;
  bool force = false;
};

int cmd_gen(const GenOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  const DatasetManifest m = build_dataset(o.params, o.train, o.val, o.out, o.force);
  RunRecord r;
  r.run_id = "gen";
  r.command = "gen";
  r.arguments = args;
  r.outputs.push_back((m.root / "manifest.txt").string());
  for (const SampleId& id : m.ids) {
    for (const char* kind : {"rgb", "depth", "disp", "normal", "edge"}) {
      r.outputs.push_back(m.file(id, kind).string());
    }
  }
  write_text(m.root / "run.json", r.to_json());
  out << "wrote " << m.ids.size() << " samples (" << o.train << " train, " << o.val
      << " val) to " << m.root.string() << "\n";
  return kExitOk;
}

// ---- train ----
struct TrainOpts {
  std::string data;
  std::string out;
  std::string config;
  std::string mode;
  std::string task;
  std::vector<double> lambdas;
  int crops = 0;
  int steps = 0;
  std::int64_t seed = -1;
  std::string teacher;
  std::string run_id;
  std::vector<std::string> set;
};

TrainConfig build_config(const TrainOpts& o) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : load_config(o.config);
  if (!o.mode.empty()) c.mode = parse_mode(o.mode);
  if (!o.task.empty()) c.task = parse_task(o.task);
  if (o.crops > 0) c.crops = o.crops;
  if (o.steps > 0) c.steps = o.steps;
  if (o.seed >= 0) c.seed = static_cast<std::uint64_t>(o.seed);
  if (!o.teacher.empty()) c.teacher = o.teacher;
  if (!o.run_id.empty()) c.run_id = o.run_id;
  for (const std::string& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Config, "--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return c;
}

int cmd_train(const TrainOpts& o, const Common& common, const std::vector<std::string>& args,
              std::ostream& out) {
  const TrainConfig base = build_config(o);
  const DatasetManifest m = read_manifest(o.data);
  std::vector<double> lambdas = o.lambdas;
  if (lambdas.empty()) lambdas.push_back(base.lambda);
  const bool sweep = lambdas.size() > 1;
  std::vector<MetricRow> sweep_rows;
  for (double lambda : lambdas) {
    TrainConfig c = base;
    c.lambda = lambda;
    c.deterministic = common.deterministic;
    c.check();
    fs::path dir = o.out;
    if (sweep) {
      c.run_id = base.run_id + "_lambda_" + fmt(lambda);
      dir /= "lambda_" + fmt(lambda);
    }
    const TrainResult res = train(c, m, dir);
    RunRecord r;
    r.run_id = c.run_id;
    r.command = "train";
    r.arguments = args;
    r.config = config_to_text(c);
    record_dataset(r, m);
    if (!o.config.empty()) record_input(r, o.config);
    if (c.mode == TrainMode::Finetune) record_input(r, c.teacher);
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().filename() != "run.json") r.outputs.push_back(e.path().string());
    }
    std::sort(r.outputs.begin(), r.outputs.end());
    write_text(dir / "run.json", r.to_json());
    out << final_line(c.run_id, c.steps, res.final) << "\n";
    for (const auto& [k, v] : res.final.values) sweep_rows.push_back({c.run_id, c.steps, "val_" + k, v});
  }
  if (sweep) write_metrics_csv(fs::path(o.out) / "sweep.csv", sweep_rows);
  return kExitOk;
}

// ---- eval ----
struct EvalOpts {
  std::string ckpt;
  bool oracle = false;
  std::string data;
  std::string task = "depth";
  std::string split = "val";
  std::string out;
  int crop_size = 0;
  int val_crops = 3;
  std::uint64_t val_seed = 7919;
};

int cmd_eval(const EvalOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.oracle == !o.ckpt.empty()) throw Error(ErrorKind::Config, "eval needs exactly one of --ckpt or --oracle");
  const Task task = parse_task(o.task);
  const DatasetManifest m = read_manifest(o.data);
  const std::vector<SceneSample> samples = load_split(m, o.split);
  RunRecord r;
  r.command = "eval";
  r.arguments = args;
  record_dataset(r, m);
  std::vector<MetricRow> rows;
  if (o.oracle) {
    r.run_id = "oracle";
    const auto lookup = [&](const DenseMap& x) -> DenseMap {
      for (const SceneSample& s : samples) {
        if (s.rgb == x) return task_target(s, task);
      }
      throw Error(ErrorKind::Invariant, "oracle asked about an unknown image");
    };
    const EvalMetrics e = evaluate_predictor(lookup, task, samples);
    for (const auto& [k, v] : e.values) rows.push_back({r.run_id, 0, k, v});
  } else {
    const Checkpoint ck = load_checkpoint(o.ckpt);
    check_task(ck.net, task);
    record_input(r, o.ckpt);
    r.run_id = fs::path(o.ckpt).stem().string();
    TrainConfig c;
    c.task = task;
    c.sampler.out_h = c.sampler.out_w = o.crop_size > 0 ? o.crop_size : m.params.size;
    c.val_crops = o.val_crops;
    c.val_seed = o.val_seed;
    const EvalMetrics e = evaluate(ck.net, c, samples);
    for (const auto& [k, v] : e.values) {
      rows.push_back({r.run_id, static_cast<std::int64_t>(ck.step), k, v});
    }
  }
  if (o.out.empty()) {
    out << kMetricsHeader << "\n";
    for (const MetricRow& row : rows) out << format_metric_row(row) << "\n";
  } else {
    write_metrics_csv(o.out, rows);
    r.outputs.push_back(o.out);
    fs::path rec = fs::path(o.out).parent_path() / (fs::path(o.out).stem().string() + ".run.json");
    write_text(rec, r.to_json());
    out << "wrote " << rows.size() << " metrics to " << o.out << "\n";
  }
  return kExitOk;
}

// ---- eqerr ----
struct EqErrOpts {
  std::vector<std::string> ckpts;
  bool oracle = false;
  std::string image;
  std::string gt;
  int pairs = 5000;
  double scale_lo = 0.85;
  double scale_hi = 1.0;
  double pad = 0.0;
  int crop_size = 0;
  std::uint64_t seed = 0;
  int heatmaps = 4;
  std::string out;
};

int cmd_eqerr(const EqErrOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.ckpts.empty() && !o.oracle) throw Error(ErrorKind::Config, "eqerr needs --ckpt or --oracle");
  if (o.oracle && o.gt.empty()) throw Error(ErrorKind::Config, "--oracle needs --gt");
  const DenseMap x = read_rgb(o.image);
  std::optional<DenseMap> gt_disp;
  std::optional<DenseMap> gt_depth;
  if (!o.gt.empty()) {
    gt_disp = read_gt_disparity(o.gt);
    if (gt_disp->height() != x.height() || gt_disp->width() != x.width()) {
      throw Error(ErrorKind::Dimension, "--gt does not match --image");
    }
    gt_depth = disparity_to_depth(*gt_disp);
  }
  CropSampler s;
  s.scale_lo = o.scale_lo;
  s.scale_hi = o.scale_hi;
  s.aspect_lo = s.aspect_hi = 1.0;
  s.pad_frac = o.pad;
  s.out_h = s.out_w = o.crop_size > 0 ? o.crop_size : x.height();
  s.check();

  struct Series {
    std::string label;
    PredictorFn f;
    DenseMap input;
  };
  std::vector<Series> series;
  std::vector<PredictorNet> nets;
  nets.reserve(o.ckpts.size());
  RunRecord r;
  r.run_id = "eqerr";
  r.command = "eqerr";
  r.arguments = args;
  record_input(r, o.image);
  if (!o.gt.empty()) record_input(r, o.gt);
  if (o.oracle) {
    // Ground truth rides along as a fourth channel, so every crop carries its own lookup.
    series.push_back({"oracle", [](const DenseMap& in) { return channel(in, 3, Semantics::Disparity); },
                      concat_channels(x, *gt_disp, Semantics::Feature)});
  }
  for (const std::string& p : o.ckpts) {
    nets.push_back(load_checkpoint(p).net);
    check_task(nets.back(), Task::Depth);
    record_input(r, p);
    const PredictorNet* net = &nets.back();
    series.push_back({fs::path(p).stem().string(),
                      [net](const DenseMap& in) { return predict_task(*net, Task::Depth, in); }, x});
  }

  const fs::path dir = o.out;
  fs::create_directories(dir);
  std::vector<MetricRow> rows;
  std::vector<BoxSeries> boxes;
  for (const Series& se : series) {
    const EqErrStats st =
        eqerr_distribution(se.f, se.input, s, o.pairs, o.seed, gt_depth ? &*gt_depth : nullptr);
    const std::string& id = se.label;
    for (const auto& [k, v] : std::vector<std::pair<std::string, double>>{
             {"n_pairs", st.n_pairs}, {"skipped", st.skipped}, {"mean", st.mean},
             {"median", st.median}, {"q1", st.q1}, {"q3", st.q3}, {"min", st.min}, {"max", st.max}}) {
      rows.push_back({id, 0, "eqerr_" + k, v});
    }
    if (st.reference_absrel) rows.push_back({id, 0, "reference_absrel", *st.reference_absrel});
    for (std::size_t i = 0; i < st.samples.size(); ++i) {
      rows.push_back({id, static_cast<std::int64_t>(i), "eqerr", st.samples[i]});
    }
    boxes.push_back({id, st.samples, st.reference_absrel});
    out << id << ": pairs=" << st.samples.size() << " skipped=" << st.skipped
        << " mean=" << fmt(st.mean) << " median=" << fmt(st.median);
    if (st.reference_absrel) out << " absrel_vs_gt=" << fmt(*st.reference_absrel);
    out << "\n";
  }
  write_metrics_csv(dir / "eqerr.csv", rows);
  r.outputs.push_back((dir / "eqerr.csv").string());
  write_text(dir / "eqerr_box.svg",
             box_plot_svg(boxes, "Depth variation across crop pairs", "eqerr (AbsRel)"));
  r.outputs.push_back((dir / "eqerr_box.svg").string());

  // |depth difference| heatmaps of the first pairs, on a shared scale per pair.
  int written = 0;
  for (int i = 0; i < o.pairs && written < o.heatmaps; ++i) {
    const auto [t1, t2] = eqerr_transforms(s, x.height(), x.width(), o.seed, i);
    std::vector<DenseMap> diffs;
    try {
      for (const Series& se : series) {
        const EqErrPair p = eqerr_pair(se.f, se.input, t1, t2);
        diffs.push_back(abs_difference(p.depth_a, p.depth_b));
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Overlap) throw;
      continue;
    }
    double vmax = 0.0;
    for (const DenseMap& d : diffs) {
      for (int p = 0; p < d.pixels(); ++p) {
        if (d.valid(p)) vmax = std::max(vmax, d.values()[p]);
      }
    }
    for (std::size_t k = 0; k < series.size(); ++k) {
      const fs::path png = dir / ("pair_" + std::to_string(i) + "_" + series[k].label + ".png");
      write_heatmap_png(diffs[k], png, vmax);
      r.outputs.push_back(png.string());
    }
    ++written;
  }
  write_text(dir / "run.json", r.to_json());
  return kExitOk;
}

// ---- tta ----
struct TtaOpts {
  std::string ckpt;
  std::string image;
  int crops = 3;
  double scale_lo = 0.4;
  double scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
  double pad = 0.2;
  int crop_size = 0;
  std::uint64_t seed = 0;
  std::string task = "depth";
  std::string out;
};

int cmd_tta(const TtaOpts& o, const std::vector<std::string>& args, std::ostream& out) {
  const Task task = parse_task(o.task);
  const DenseMap x = read_rgb(o.image);
  const PredictorNet net = load_checkpoint(o.ckpt).net;
  check_task(net, task);
  CropSampler s;
  s.scale_lo = o.scale_lo;
  s.scale_hi = o.scale_hi;
  s.aspect_lo = o.aspect_lo;
  s.aspect_hi = o.aspect_hi;
  s.pad_frac = o.pad;
  s.out_h = s.out_w = o.crop_size > 0 ? o.crop_size : x.height();
  s.check();
  RandomState rng(o.seed);
  DenseMap y = predict_tta([&](const DenseMap& in) { return predict_task(net, task, in); }, x, s,
                           o.crops, rng);
  write_map(y, o.out);
  RunRecord r;
  r.run_id = "tta";
  r.command = "tta";
  r.arguments = args;
  record_input(r, o.ckpt);
  record_input(r, o.image);
  r.outputs.push_back(o.out);
  const fs::path out_path(o.out);
  write_text(out_path.parent_path() / (out_path.stem().string() + ".run.json"), r.to_json());
  out << "wrote " << o.out << " (" << y.height() << "x" << y.width() << ", " << o.crops
      << " crops + identity)\n";
  return kExitOk;
}

}  // namespace

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::Format:
    case ErrorKind::Dtype:
    case ErrorKind::Version:
    case ErrorKind::Truncated:
    case ErrorKind::Checksum:
      return kExitIo;
    case ErrorKind::Divergence:
      return kExitDivergence;
    default:
      return kExitConfig;
  }
}

std::string git_blob_hash(std::span<const std::uint8_t> bytes) {
  std::string head = "blob " + std::to_string(bytes.size());
  head.push_back('\0');
  return sha1(bytes_of(head), bytes);
}

std::string RunRecord::input_hash() const {
  std::string listing;
  for (const auto& [path, hash] : inputs) listing += hash + " " + path + "\n";
  return git_blob_hash(bytes_of(listing));
}

std::string RunRecord::to_json() const {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["command"] = command;
  j["arguments"] = arguments;
  j["config"] = config;
  j["inputs"] = inputs;
  j["input_hash"] = input_hash();
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Crop-equivariant dense prediction: data, training and equivariance audits", "eqreg"};
  app.require_subcommand(1);
  Common common;
  app.add_flag("--deterministic,!--no-deterministic", common.deterministic,
               "Single-threaded fixed-order execution (always on)");

  GenOpts gen;
  auto* g = app.add_subcommand("gen", "Render a synthetic dataset");
  g->add_option("--out", gen.out, "Dataset root")->required();
  g->add_option("--train", gen.train, "Training scenes")->check(CLI::NonNegativeNumber);
  g->add_option("--val", gen.val, "Validation scenes")->check(CLI::NonNegativeNumber);
  g->add_option("--size", gen.params.size, "Square frame size in pixels");
  g->add_option("--complexity", gen.params.complexity, "Primitives per scene");
  g->add_option("--seed", gen.params.seed, "First scene seed");
  g->add_flag("--force", gen.force, "Overwrite an existing dataset");

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Train or finetune a predictor");
  t->add_option("--data", tr.data, "Dataset root")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--config", tr.config, "key = value config file");
  t->add_option("--mode", tr.mode, "sup | aug | eqloss | semisup | finetune");
  t->add_option("--task", tr.task, "depth | normal | edge");
  t->add_option("--lambda", tr.lambdas, "Equivariant loss weight; repeat to sweep");
  t->add_option("--crops", tr.crops, "Crops per image");
  t->add_option("--steps", tr.steps, "Optimizer steps");
  t->add_option("--seed", tr.seed, "Run seed");
  t->add_option("--teacher", tr.teacher, "Teacher checkpoint for finetune");
  t->add_option("--run-id", tr.run_id, "Run id written to the metrics");
  t->add_option("--set", tr.set, "Override any config key, key=value");

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Task metrics and validation EqLoss of a checkpoint");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint");
  e->add_flag("--oracle", ev.oracle, "Evaluate the ground-truth lookup instead");
  e->add_option("--data", ev.data, "Dataset root")->required();
  e->add_option("--task", ev.task, "depth | normal | edge");
  e->add_option("--split", ev.split, "Split to evaluate");
  e->add_option("--out", ev.out, "Metrics CSV (default: stdout)");
  e->add_option("--crop-size", ev.crop_size, "Validation crop size (default: frame size)");
  e->add_option("--val-crops", ev.val_crops, "Crops per image for validation EqLoss");
  e->add_option("--val-seed", ev.val_seed, "Seed of the validation transform set");

  EqErrOpts eq;
  auto* q = app.add_subcommand("eqerr", "Depth variation across random crop pairs");
  q->add_option("--ckpt", eq.ckpts, "Checkpoint; repeat to compare");
  q->add_flag("--oracle", eq.oracle, "Include the ground-truth lookup (needs --gt)");
  q->add_option("--image", eq.image, "RGB map")->required();
  q->add_option("--gt", eq.gt, "Ground-truth depth or disparity map");
  q->add_option("--pairs", eq.pairs, "Crop pairs")->check(CLI::PositiveNumber);
  q->add_option("--scale-lo", eq.scale_lo, "Smallest crop scale");
  q->add_option("--scale-hi", eq.scale_hi, "Largest crop scale");
  q->add_option("--pad", eq.pad, "Padding fraction");
  q->add_option("--crop-size", eq.crop_size, "Network input size (default: frame size)");
  q->add_option("--seed", eq.seed, "Pair seed");
  q->add_option("--heatmaps", eq.heatmaps, "Pairs rendered as |diff| PNGs")->check(CLI::NonNegativeNumber);
  q->add_option("--out", eq.out, "Output directory")->required();

  TtaOpts tt;
  auto* a = app.add_subcommand("tta", "Inference-time equivariant averaging");
  a->add_option("--ckpt", tt.ckpt, "Checkpoint")->required();
  a->add_option("--image", tt.image, "RGB map")->required();
  a->add_option("--crops", tt.crops, "Sampled crops in addition to the identity")->check(CLI::NonNegativeNumber);
  a->add_option("--scale-lo", tt.scale_lo, "Smallest crop scale");
  a->add_option("--scale-hi", tt.scale_hi, "Largest crop scale");
  a->add_option("--aspect-lo", tt.aspect_lo, "Smallest aspect ratio");
  a->add_option("--aspect-hi", tt.aspect_hi, "Largest aspect ratio");
  a->add_option("--pad", tt.pad, "Padding fraction");
  a->add_option("--crop-size", tt.crop_size, "Network input size (default: frame size)");
  a->add_option("--seed", tt.seed, "Crop seed");
  a->add_option("--task", tt.task, "depth | normal | edge");
  a->add_option("--out", tt.out, "Output map")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "eqreg: " << ex.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*g) return cmd_gen(gen, args, out);
    if (*t) return cmd_train(tr, common, args, out);
    if (*e) return cmd_eval(ev, args, out);
    if (*q) return cmd_eqerr(eq, args, out);
    if (*a) return cmd_tta(tt, args, out);
  } catch (const Error& ex) {
    err << "eqreg: " << ex.what() << "\n";
    return exit_code(ex.kind());
  } catch (const fs::filesystem_error& ex) {
    err << "eqreg: io error: " << ex.what() << "\n";
    return kExitIo;
  }
  return kExitConfig;
}

}  // namespace eqreg
