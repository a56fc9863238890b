#include "eqreg/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "eqreg/error.hpp"

namespace eqreg {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kLeakySlope = 0.2;

std::uint64_t next_net_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

Activation make_act(int h, int w, int c) {
  return Activation{h, w, c, std::vector<double>(static_cast<std::size_t>(h) * w * c, 0.0)};
}

// Rows: pixels; columns: (ky, kx, channel) patch entries, zero padded.
void im2col3(const Activation& in, RowMat& col) {
  const int h = in.h;
  const int w = in.w;
  const int c = in.c;
  col.resize(static_cast<Eigen::Index>(h) * w, 9 * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* row = col.data() + (static_cast<std::size_t>(y) * w + x) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          double* dst = row + (ky * 3 + kx) * c;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            std::fill_n(dst, c, 0.0);
          } else {
            std::copy_n(in.v.data() + (static_cast<std::size_t>(sy) * w + sx) * c, c, dst);
          }
        }
      }
    }
  }
}

void col2im3_add(const RowMat& dcol, Activation& din) {
  const int h = din.h;
  const int w = din.w;
  const int c = din.c;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double* row = dcol.data() + (static_cast<std::size_t>(y) * w + x) * 9 * c;
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= w) continue;
          const double* src = row + (ky * 3 + kx) * c;
          double* dst = din.v.data() + (static_cast<std::size_t>(sy) * w + sx) * c;
          for (int k = 0; k < c; ++k) dst[k] += src[k];
        }
      }
    }
  }
}

Activation avg_pool2(const Activation& in) {
  Activation out = make_act(in.h / 2, in.w / 2, in.c);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      double* d = out.v.data() + (static_cast<std::size_t>(y) * out.w + x) * in.c;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const double* s =
              in.v.data() + (static_cast<std::size_t>(2 * y + dy) * in.w + 2 * x + dx) * in.c;
          for (int k = 0; k < in.c; ++k) d[k] += 0.25 * s[k];
        }
      }
    }
  }
  return out;
}

void avg_pool2_backward_add(const Activation& dout, Activation& din) {
  for (int y = 0; y < dout.h; ++y) {
    for (int x = 0; x < dout.w; ++x) {
      const double* s = dout.v.data() + (static_cast<std::size_t>(y) * dout.w + x) * dout.c;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          double* d =
              din.v.data() + (static_cast<std::size_t>(2 * y + dy) * din.w + 2 * x + dx) * din.c;
          for (int k = 0; k < dout.c; ++k) d[k] += 0.25 * s[k];
        }
      }
    }
  }
}

struct UpTap {
  int i0;
  int i1;
  double f;
};

// Half-pixel 2x upsampling with edge clamping.
std::vector<UpTap> up_taps(int n_in) {
  std::vector<UpTap> taps(static_cast<std::size_t>(2 * n_in));
  for (int i = 0; i < 2 * n_in; ++i) {
    double s = (i + 0.5) / 2.0 - 0.5;
    s = std::max(s, 0.0);
    int i0 = static_cast<int>(std::floor(s));
    i0 = std::min(i0, n_in - 1);
    const int i1 = std::min(i0 + 1, n_in - 1);
    taps[i] = UpTap{i0, i1, s - i0};
  }
  return taps;
}

Activation upsample2(const Activation& in) {
  Activation out = make_act(2 * in.h, 2 * in.w, in.c);
  const auto ty = up_taps(in.h);
  const auto tx = up_taps(in.w);
  for (int y = 0; y < out.h; ++y) {
    const UpTap& a = ty[y];
    for (int x = 0; x < out.w; ++x) {
      const UpTap& b = tx[x];
      const double w00 = (1 - a.f) * (1 - b.f);
      const double w01 = (1 - a.f) * b.f;
      const double w10 = a.f * (1 - b.f);
      const double w11 = a.f * b.f;
      const double* s00 = in.v.data() + (static_cast<std::size_t>(a.i0) * in.w + b.i0) * in.c;
      const double* s01 = in.v.data() + (static_cast<std::size_t>(a.i0) * in.w + b.i1) * in.c;
      const double* s10 = in.v.data() + (static_cast<std::size_t>(a.i1) * in.w + b.i0) * in.c;
      const double* s11 = in.v.data() + (static_cast<std::size_t>(a.i1) * in.w + b.i1) * in.c;
      double* d = out.v.data() + (static_cast<std::size_t>(y) * out.w + x) * in.c;
      for (int k = 0; k < in.c; ++k) {
        d[k] = w00 * s00[k] + w01 * s01[k] + w10 * s10[k] + w11 * s11[k];
      }
    }
  }
  return out;
}

void upsample2_backward_add(const Activation& dout, Activation& din) {
  const auto ty = up_taps(din.h);
  const auto tx = up_taps(din.w);
  const int c = din.c;
  for (int y = 0; y < dout.h; ++y) {
    const UpTap& a = ty[y];
    for (int x = 0; x < dout.w; ++x) {
      const UpTap& b = tx[x];
      const double* s = dout.v.data() + (static_cast<std::size_t>(y) * dout.w + x) * c;
      const double w00 = (1 - a.f) * (1 - b.f);
      const double w01 = (1 - a.f) * b.f;
      const double w10 = a.f * (1 - b.f);
      const double w11 = a.f * b.f;
      double* d00 = din.v.data() + (static_cast<std::size_t>(a.i0) * din.w + b.i0) * c;
      double* d01 = din.v.data() + (static_cast<std::size_t>(a.i0) * din.w + b.i1) * c;
      double* d10 = din.v.data() + (static_cast<std::size_t>(a.i1) * din.w + b.i0) * c;
      double* d11 = din.v.data() + (static_cast<std::size_t>(a.i1) * din.w + b.i1) * c;
      for (int k = 0; k < c; ++k) {
        d00[k] += w00 * s[k];
        d01[k] += w01 * s[k];
        d10[k] += w10 * s[k];
        d11[k] += w11 * s[k];
      }
    }
  }
}

Activation concat(const Activation& a, const Activation& b) {
  Activation out = make_act(a.h, a.w, a.c + b.c);
  for (int p = 0; p < a.h * a.w; ++p) {
    double* d = out.v.data() + static_cast<std::size_t>(p) * out.c;
    std::copy_n(a.v.data() + static_cast<std::size_t>(p) * a.c, a.c, d);
    std::copy_n(b.v.data() + static_cast<std::size_t>(p) * b.c, b.c, d + a.c);
  }
  return out;
}

void split_add(const Activation& d, Activation& da, Activation& db) {
  for (int p = 0; p < d.h * d.w; ++p) {
    const double* s = d.v.data() + static_cast<std::size_t>(p) * d.c;
    double* pa = da.v.data() + static_cast<std::size_t>(p) * da.c;
    double* pb = db.v.data() + static_cast<std::size_t>(p) * db.c;
    for (int k = 0; k < da.c; ++k) pa[k] += s[k];
    for (int k = 0; k < db.c; ++k) pb[k] += s[da.c + k];
  }
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

DenseMap to_map(const Activation& a, Semantics s) {
  DenseMap m(a.h, a.w, a.c, s);
  std::copy(a.v.begin(), a.v.end(), m.values().begin());
  return m;
}

void add_map(const DenseMap& g, Activation& into, const char* what) {
  if (g.height() != into.h || g.width() != into.w || g.channels() != into.c) {
    throw Error(ErrorKind::Dimension, std::string("gradient for ") + what + " has wrong shape");
  }
  for (std::size_t i = 0; i < into.v.size(); ++i) into.v[i] += g.values()[i];
}

}  // namespace

std::int64_t Architecture::parameter_count() const {
  check();
  const std::int64_t d = depth_blocks;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < d; ++i) {
    const std::int64_t ci = stage_channels(static_cast<int>(i));
    const std::int64_t cin = i == 0 ? input_channels() : stage_channels(static_cast<int>(i - 1));
    n += 9 * cin * ci + ci + 9 * ci * ci + ci;
  }
  const std::int64_t cd = stage_channels(depth_blocks);
  const std::int64_t cl = stage_channels(depth_blocks - 1);
  n += 9 * cl * cd + cd + 9 * cd * cd + cd;
  for (std::int64_t i = 0; i < d; ++i) {
    const std::int64_t ci = stage_channels(static_cast<int>(i));
    const std::int64_t cu = stage_channels(static_cast<int>(i + 1));
    n += 9 * cu * ci + ci + 18 * ci * ci + ci;
  }
  n += static_cast<std::int64_t>(base_channels) * out_channels + out_channels;
  return n;
}

std::string Architecture::describe() const {
  std::ostringstream os;
  os << "depth_blocks=" << depth_blocks << ";base_channels=" << base_channels
     << ";in_channels=" << in_channels << ";out_channels=" << out_channels
     << ";pos_bands=" << pos_bands
     << ";head=" << (head == HeadActivation::Softplus ? "softplus" : "identity");
  return os.str();
}

Architecture Architecture::parse(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(';', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view item = text.substr(pos, end - pos);
    const std::size_t eq = item.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorKind::Format, "malformed architecture item '" + std::string(item) + "'");
    }
    kv[std::string(item.substr(0, eq))] = std::string(item.substr(eq + 1));
    pos = end + 1;
  }
  auto get_int = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error(ErrorKind::Format, std::string("architecture lacks ") + key);
    int v = 0;
    auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc()) throw Error(ErrorKind::Format, std::string("bad value for ") + key);
    return v;
  };
  Architecture a;
  a.depth_blocks = get_int("depth_blocks");
  a.base_channels = get_int("base_channels");
  a.in_channels = get_int("in_channels");
  a.out_channels = get_int("out_channels");
  a.pos_bands = kv.count("pos_bands") ? get_int("pos_bands") : 0;
  auto head = kv.find("head");
  if (head == kv.end() || (head->second != "softplus" && head->second != "identity")) {
    throw Error(ErrorKind::Format, "architecture head must be softplus or identity");
  }
  a.head = head->second == "softplus" ? HeadActivation::Softplus : HeadActivation::Identity;
  a.check();
  return a;
}

void Architecture::check() const {
  if (depth_blocks < 1 || depth_blocks > 8 || base_channels < 1 || in_channels < 1 ||
      out_channels < 1 || pos_bands < 0) {
    throw Error(ErrorKind::Architecture, "invalid architecture " + describe());
  }
}

LayerSelector LayerSelector::parse(std::string_view text) {
  if (text == "none") return none();
  if (text == "L" || text == "output") return output();
  if (text == "L-1" || text == "penultimate") return penultimate();
  if (text.size() > 2 && text.substr(0, 2) == "up") {
    int level = 0;
    auto [p, ec] = std::from_chars(text.data() + 2, text.data() + text.size(), level);
    if (ec == std::errc() && p == text.data() + text.size() && level >= 0) return up(level);
  }
  throw Error(ErrorKind::Config, "unknown layer '" + std::string(text) +
                                     "' (expected none, L, L-1 or up<N>)");
}

std::string LayerSelector::to_string() const {
  switch (kind) {
    case Kind::None: return "none";
    case Kind::Output: return "L";
    case Kind::Penultimate: return "L-1";
    case Kind::Up: return "up" + std::to_string(level);
  }
  return "none";
}

int LayerSelector::channels(const Architecture& arch) const {
  switch (kind) {
    case Kind::None: return 0;
    case Kind::Output: return arch.out_channels;
    case Kind::Penultimate: return arch.base_channels;
    case Kind::Up:
      if (level >= arch.depth_blocks) {
        throw Error(ErrorKind::Config, "layer up" + std::to_string(level) + " does not exist");
      }
      return arch.stage_channels(level);
  }
  return 0;
}

PredictorNet::PredictorNet(const Architecture& arch, std::uint64_t seed, bool zero_head)
    : arch_(arch), id_(next_net_id()) {
  arch_.check();
  build_layout();
  RandomState rng(seed);
  for (std::size_t li = 0; li < convs_.size(); ++li) {
    const Conv& cv = convs_[li];
    const double fan_in = static_cast<double>(cv.k * cv.k * cv.cin);
    const bool is_head = static_cast<int>(li) == head();
    const double bound = is_head ? 1.0 / std::sqrt(fan_in) : std::sqrt(6.0 / fan_in);
    const std::size_t nw = static_cast<std::size_t>(cv.k) * cv.k * cv.cin * cv.cout;
    for (std::size_t i = 0; i < nw; ++i) {
      const double u = rng.uniform(-bound, bound);
      params_[cv.w_offset + i] = (is_head && zero_head) ? 0.0 : u;
    }
  }
  round_to_float32();
}

void PredictorNet::build_layout() {
  convs_.clear();
  std::size_t off = 0;
  auto add = [&](int cin, int cout, int k) {
    Conv c{cin, cout, k, off, 0};
    off += static_cast<std::size_t>(k) * k * cin * cout;
    c.b_offset = off;
    off += static_cast<std::size_t>(cout);
    convs_.push_back(c);
  };
  const int d = arch_.depth_blocks;
  for (int i = 0; i < d; ++i) {
    const int cin = i == 0 ? arch_.input_channels() : arch_.stage_channels(i - 1);
    add(cin, arch_.stage_channels(i), 3);
    add(arch_.stage_channels(i), arch_.stage_channels(i), 3);
  }
  add(arch_.stage_channels(d - 1), arch_.stage_channels(d), 3);
  add(arch_.stage_channels(d), arch_.stage_channels(d), 3);
  for (int i = d - 1; i >= 0; --i) {
    add(arch_.stage_channels(i + 1), arch_.stage_channels(i), 3);
    add(2 * arch_.stage_channels(i), arch_.stage_channels(i), 3);
  }
  add(arch_.base_channels, arch_.out_channels, 1);
  params_.assign(off, 0.0);
}

// Copies get their own identity so tapes cannot cross between instances.
PredictorNet::PredictorNet(const PredictorNet& o)
    : arch_(o.arch_), convs_(o.convs_), params_(o.params_), id_(next_net_id()), version_(0) {}

PredictorNet& PredictorNet::operator=(const PredictorNet& o) {
  if (this != &o) {
    arch_ = o.arch_;
    convs_ = o.convs_;
    params_ = o.params_;
    id_ = next_net_id();
    version_ = 0;
  }
  return *this;
}

void PredictorNet::set_parameters(std::span<const double> p) {
  if (p.size() != params_.size()) {
    throw Error(ErrorKind::Architecture, "parameter vector has " + std::to_string(p.size()) +
                                             " entries, network needs " +
                                             std::to_string(params_.size()));
  }
  std::copy(p.begin(), p.end(), params_.begin());
  ++version_;
}

void PredictorNet::round_to_float32() {
  for (double& v : params_) v = static_cast<double>(static_cast<float>(v));
  ++version_;
}

ForwardResult PredictorNet::forward(const DenseMap& x, LayerSelector capture) const {
  const int d = arch_.depth_blocks;
  const int mult = 1 << d;
  if (x.height() % mult != 0 || x.width() % mult != 0 || x.height() == 0 || x.width() == 0) {
    throw Error(ErrorKind::Shape, "input " + std::to_string(x.height()) + "x" +
                                      std::to_string(x.width()) +
                                      " must be a non-empty multiple of " + std::to_string(mult));
  }
  if (x.channels() != arch_.in_channels) {
    throw Error(ErrorKind::Shape, "input has " + std::to_string(x.channels()) +
                                      " channels, network expects " +
                                      std::to_string(arch_.in_channels));
  }
  if (capture.kind == LayerSelector::Kind::Up && capture.level >= d) {
    throw Error(ErrorKind::Config, "layer up" + std::to_string(capture.level) + " does not exist");
  }

  ForwardResult r;
  ActivationTape& tape = r.tape;
  tape.net_id = id_;
  tape.version = version_;
  tape.capture = capture;
  tape.conv_inputs.resize(convs_.size());
  tape.conv_outputs.resize(convs_.size());

  RowMat col;
  auto conv = [&](int li, Activation in, bool leaky, bool relu) -> const Activation& {
    const Conv& cv = convs_[li];
    Activation out = make_act(in.h, in.w, cv.cout);
    const ConstMap wmat(params_.data() + cv.w_offset, cv.k * cv.k * cv.cin, cv.cout);
    const Eigen::Map<const Eigen::RowVectorXd> bias(params_.data() + cv.b_offset, cv.cout);
    MutMap o(out.v.data(), static_cast<Eigen::Index>(in.h) * in.w, cv.cout);
    if (cv.k == 3) {
      im2col3(in, col);
      o.noalias() = col * wmat;
    } else {
      const ConstMap inm(in.v.data(), static_cast<Eigen::Index>(in.h) * in.w, cv.cin);
      o.noalias() = inm * wmat;
    }
    o.rowwise() += bias;
    if (leaky) {
      for (double& v : out.v) v = v > 0.0 ? v : kLeakySlope * v;
    } else if (relu) {
      for (double& v : out.v) v = v > 0.0 ? v : 0.0;
    }
    tape.conv_inputs[li] = std::move(in);
    tape.conv_outputs[li] = std::move(out);
    return tape.conv_outputs[li];
  };

  Activation input = make_act(x.height(), x.width(), arch_.input_channels());
  for (int p = 0; p < x.pixels(); ++p) {
    std::copy_n(x.data() + static_cast<std::size_t>(p) * x.channels(), x.channels(),
                input.v.data() + static_cast<std::size_t>(p) * input.c);
  }
  if (arch_.pos_bands > 0) {
    for (int y = 0; y < x.height(); ++y) {
      const double v = 2.0 * (y + 0.5) / x.height() - 1.0;
      for (int xx = 0; xx < x.width(); ++xx) {
        const double u = 2.0 * (xx + 0.5) / x.width() - 1.0;
        double* dst = input.v.data() + (static_cast<std::size_t>(y) * x.width() + xx) * input.c +
                      x.channels();
        for (int b = 1; b <= arch_.pos_bands; ++b) {
          const double a = std::numbers::pi * b;
          *dst++ = std::sin(a * u);
          *dst++ = std::cos(a * u);
          *dst++ = std::sin(a * v);
          *dst++ = std::cos(a * v);
        }
      }
    }
  }

  Activation cur = std::move(input);
  for (int i = 0; i < d; ++i) {
    conv(enc_a(i), std::move(cur), true, false);
    const Activation& skip = conv(enc_b(i), tape.conv_outputs[enc_a(i)], true, false);
    cur = avg_pool2(skip);
  }
  conv(bott_a(), std::move(cur), true, false);
  const Activation* prev = &conv(bott_b(), tape.conv_outputs[bott_a()], true, false);
  for (int i = d - 1; i >= 0; --i) {
    const Activation& up = conv(dec_up(i), upsample2(*prev), false, true);
    prev = &conv(dec_fuse(i), concat(up, tape.conv_outputs[enc_b(i)]), false, true);
  }
  const Activation& pre = conv(head(), *prev, false, false);
  tape.head_preact = pre;

  Semantics out_sem = arch_.head == HeadActivation::Softplus ? Semantics::Disparity
                                                              : Semantics::Feature;
  r.output = to_map(pre, out_sem);
  if (arch_.head == HeadActivation::Softplus) {
    for (double& v : r.output.values()) v = softplus(v);
  }

  switch (capture.kind) {
    case LayerSelector::Kind::None: break;
    case LayerSelector::Kind::Output: r.captured = r.output; break;
    case LayerSelector::Kind::Penultimate:
      r.captured = to_map(tape.conv_outputs[dec_fuse(0)], Semantics::Feature);
      break;
    case LayerSelector::Kind::Up:
      r.captured = to_map(tape.conv_outputs[dec_up(capture.level)], Semantics::Feature);
      break;
  }
  return r;
}

DenseMap PredictorNet::predict(const DenseMap& x) const { return forward(x).output; }

Gradients PredictorNet::backward(const ActivationTape& tape, const DenseMap& grad_output,
                                 const DenseMap* grad_captured) const {
  if (tape.net_id != id_ || tape.version != version_ || tape.conv_inputs.size() != convs_.size()) {
    throw Error(ErrorKind::Tape, "tape does not belong to the current network parameters");
  }
  if (grad_captured != nullptr && tape.capture.kind == LayerSelector::Kind::None) {
    throw Error(ErrorKind::Tape, "captured-layer gradient given but nothing was captured");
  }
  const int d = arch_.depth_blocks;
  Gradients g;
  g.parameters.assign(params_.size(), 0.0);

  std::vector<Activation> grads(convs_.size());  // d loss / d conv output (post-activation)
  for (std::size_t li = 0; li < convs_.size(); ++li) {
    const Activation& o = tape.conv_outputs[li];
    grads[li] = make_act(o.h, o.w, o.c);
  }

  // Head: output = act(pre).
  {
    Activation& dpre = grads[head()];
    add_map(grad_output, dpre, "output");
    if (grad_captured != nullptr && tape.capture.kind == LayerSelector::Kind::Output) {
      add_map(*grad_captured, dpre, "captured output");
    }
    if (arch_.head == HeadActivation::Softplus) {
      for (std::size_t i = 0; i < dpre.v.size(); ++i) dpre.v[i] *= sigmoid(tape.head_preact.v[i]);
    }
  }
  if (grad_captured != nullptr) {
    if (tape.capture.kind == LayerSelector::Kind::Penultimate) {
      add_map(*grad_captured, grads[dec_fuse(0)], "penultimate layer");
    } else if (tape.capture.kind == LayerSelector::Kind::Up) {
      add_map(*grad_captured, grads[dec_up(tape.capture.level)], "up layer");
    }
  }

  RowMat col;
  RowMat dcol;
  // Backprop through conv `li`; `dz` holds d/d(post-activation) and is turned
  // into d/d(pre-activation) in place. Returns d/d(conv input).
  auto conv_back = [&](int li, bool leaky, bool relu) {
    const Conv& cv = convs_[li];
    const Activation& in = tape.conv_inputs[li];
    const Activation& out = tape.conv_outputs[li];
    Activation& dz = grads[li];
    if (leaky) {
      for (std::size_t i = 0; i < dz.v.size(); ++i) {
        if (!(out.v[i] > 0.0)) dz.v[i] *= kLeakySlope;
      }
    } else if (relu) {
      for (std::size_t i = 0; i < dz.v.size(); ++i) {
        if (!(out.v[i] > 0.0)) dz.v[i] = 0.0;
      }
    }
    const Eigen::Index n = static_cast<Eigen::Index>(in.h) * in.w;
    const ConstMap dzm(dz.v.data(), n, cv.cout);
    const ConstMap wmat(params_.data() + cv.w_offset, cv.k * cv.k * cv.cin, cv.cout);
    MutMap dw(g.parameters.data() + cv.w_offset, cv.k * cv.k * cv.cin, cv.cout);
    // Plain loop: Eigen's vectorized reductions peel by pointer alignment, so
    // their summation order would change from one allocation to the next.
    double* db = g.parameters.data() + cv.b_offset;
    for (Eigen::Index r = 0; r < n; ++r) {
      for (int o = 0; o < cv.cout; ++o) db[o] += dzm(r, o);
    }
    Activation din = make_act(in.h, in.w, in.c);
    if (cv.k == 3) {
      im2col3(in, col);
      dw.noalias() += col.transpose() * dzm;
      dcol.noalias() = dzm * wmat.transpose();
      col2im3_add(dcol, din);
    } else {
      const ConstMap inm(in.v.data(), n, cv.cin);
      dw.noalias() += inm.transpose() * dzm;
      MutMap dinm(din.v.data(), n, cv.cin);
      dinm.noalias() = dzm * wmat.transpose();
    }
    return din;
  };

  {
    Activation dpen = conv_back(head(), false, false);
    for (std::size_t i = 0; i < dpen.v.size(); ++i) grads[dec_fuse(0)].v[i] += dpen.v[i];
  }
  for (int i = 0; i < d; ++i) {
    Activation dcat = conv_back(dec_fuse(i), false, true);
    split_add(dcat, grads[dec_up(i)], grads[enc_b(i)]);
    Activation dup = conv_back(dec_up(i), false, true);
    const int below = i == d - 1 ? bott_b() : dec_fuse(i + 1);
    upsample2_backward_add(dup, grads[below]);
  }
  {
    Activation dmid = conv_back(bott_b(), true, false);
    for (std::size_t k = 0; k < dmid.v.size(); ++k) grads[bott_a()].v[k] += dmid.v[k];
    Activation dpool = conv_back(bott_a(), true, false);
    avg_pool2_backward_add(dpool, grads[enc_b(d - 1)]);
  }
  Activation dinput;
  for (int i = d - 1; i >= 0; --i) {
    Activation dmid = conv_back(enc_b(i), true, false);
    for (std::size_t k = 0; k < dmid.v.size(); ++k) grads[enc_a(i)].v[k] += dmid.v[k];
    Activation din = conv_back(enc_a(i), true, false);
    if (i > 0) {
      avg_pool2_backward_add(din, grads[enc_b(i - 1)]);
    } else {
      dinput = std::move(din);
    }
  }

  g.input = DenseMap(dinput.h, dinput.w, arch_.in_channels, Semantics::Feature);
  for (int p = 0; p < dinput.h * dinput.w; ++p) {
    std::copy_n(dinput.v.data() + static_cast<std::size_t>(p) * dinput.c, arch_.in_channels,
                g.input.data() + static_cast<std::size_t>(p) * arch_.in_channels);
  }
  return g;
}

DenseMap predict_semantic(const PredictorNet& net, const DenseMap& x, Semantics semantics) {
  DenseMap y = net.predict(x);
  y.set_semantics(semantics);
  return y;
}

}  // namespace eqreg
