#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eqreg/dense_map.hpp"
#include "eqreg/random.hpp"

namespace eqreg {

enum class HeadActivation { Identity, Softplus };

/// Encoder-decoder topology. Stage i carries base_channels * 2^i channels;
/// the bottleneck sits below the deepest stage.
///
/// Per stage: conv3x3 -> LeakyReLU(0.2) -> conv3x3 -> LeakyReLU -> 2x2 avg pool.
/// Per decoder stage: 2x bilinear upsample -> conv3x3 -> ReLU ("up<i>"),
/// concat with the encoder skip -> conv3x3 -> ReLU. The last fused map is the
/// penultimate layer ("L-1"); a 1x1 conv plus head activation gives "L".
///
/// parameter_count() =
///     sum_{i<D} [9 c_in(i) c_i + c_i + 9 c_i^2 + c_i]            encoder
///   + 9 c_{D-1} c_D + c_D + 9 c_D^2 + c_D                      bottleneck
///   + sum_{i<D} [9 c_{i+1} c_i + c_i + 18 c_i^2 + c_i]          decoder
///   + c_0 * out + out                                          head
/// with c_i = base * 2^i, c_in(0) = in + 4 * pos_bands, c_in(i) = c_{i-1}.
struct Architecture {
  int depth_blocks = 3;
  int base_channels = 16;
  int in_channels = 3;
  int out_channels = 1;
  /// Absolute positional-encoding bands appended to the input: for each band
  /// k, sin/cos(pi k u) and sin/cos(pi k v) with u, v in [-1, 1] across the
  /// frame. Zero gives a plain translation-equivariant CNN body.
  int pos_bands = 0;
  HeadActivation head = HeadActivation::Softplus;

  int input_channels() const { return in_channels + 4 * pos_bands; }
  int stage_channels(int i) const { return base_channels << i; }
  std::int64_t parameter_count() const;

  std::string describe() const;
  static Architecture parse(std::string_view text);
  void check() const;

  bool operator==(const Architecture&) const = default;
};

/// Which activation the equivariant loss attaches to.
struct LayerSelector {
  enum class Kind { None, Output, Penultimate, Up };
  Kind kind = Kind::None;
  int level = 0;  // decoder stage for Kind::Up

  static LayerSelector none() { return {}; }
  static LayerSelector output() { return {Kind::Output, 0}; }
  static LayerSelector penultimate() { return {Kind::Penultimate, 0}; }
  static LayerSelector up(int level) { return {Kind::Up, level}; }
  /// "none", "L", "L-1", "up0", "up1", ...
  static LayerSelector parse(std::string_view text);
  std::string to_string() const;

  /// Downsampling level of the selected map relative to the input.
  int resolution_level() const { return kind == Kind::Up ? level : 0; }
  int channels(const Architecture& arch) const;

  bool operator==(const LayerSelector&) const = default;
};

struct Activation {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> v;
};

/// Everything backward() needs from one forward pass.
struct ActivationTape {
  std::uint64_t net_id = 0;
  std::uint64_t version = 0;
  LayerSelector capture;
  std::vector<Activation> conv_inputs;  // input of every conv, in parameter order
  std::vector<Activation> conv_outputs;  // post-activation output of every conv
  Activation head_preact;
};

struct ForwardResult {
  DenseMap output;
  std::optional<DenseMap> captured;
  ActivationTape tape;
};

struct Gradients {
  std::vector<double> parameters;
  DenseMap input;
};

class PredictorNet {
 public:
  PredictorNet() = default;
  /// Fan-in scaled uniform init; weights are kept on the float32 grid so that
  /// the checkpoint format stores them exactly.
  PredictorNet(const Architecture& arch, std::uint64_t seed, bool zero_head = false);
  PredictorNet(const PredictorNet& other);
  PredictorNet& operator=(const PredictorNet& other);
  PredictorNet(PredictorNet&&) noexcept = default;
  PredictorNet& operator=(PredictorNet&&) noexcept = default;

  const Architecture& architecture() const { return arch_; }
  std::int64_t parameter_count() const { return static_cast<std::int64_t>(params_.size()); }
  std::span<const double> parameters() const { return params_; }
  /// Write access invalidates outstanding tapes.
  std::span<double> mutable_parameters() {
    ++version_;
    return params_;
  }
  void set_parameters(std::span<const double> p);
  /// Rounds every parameter to the nearest float32 value.
  void round_to_float32();

  /// Requires height and width divisible by 2^depth_blocks.
  ForwardResult forward(const DenseMap& x, LayerSelector capture = LayerSelector::none()) const;
  /// Output only, no tape retained.
  DenseMap predict(const DenseMap& x) const;

  /// grad_captured must match the map captured by the forward pass; it is
  /// accumulated on top of whatever flows back from the output.
  Gradients backward(const ActivationTape& tape, const DenseMap& grad_output,
                     const DenseMap* grad_captured = nullptr) const;

 private:
  struct Conv {
    int cin = 0;
    int cout = 0;
    int k = 3;
    std::size_t w_offset = 0;
    std::size_t b_offset = 0;
  };
  void build_layout();
  int enc_a(int i) const { return 2 * i; }
  int enc_b(int i) const { return 2 * i + 1; }
  int bott_a() const { return 2 * arch_.depth_blocks; }
  int bott_b() const { return 2 * arch_.depth_blocks + 1; }
  int dec_up(int i) const { return 2 * arch_.depth_blocks + 2 + 2 * (arch_.depth_blocks - 1 - i); }
  int dec_fuse(int i) const { return dec_up(i) + 1; }
  int head() const { return 4 * arch_.depth_blocks + 2; }

  Architecture arch_;
  std::vector<Conv> convs_;
  std::vector<double> params_;
  std::uint64_t id_ = 0;
  std::uint64_t version_ = 0;
};

/// Adapts a network to the PredictorFn signature used by the averaging code.
DenseMap predict_semantic(const PredictorNet& net, const DenseMap& x, Semantics semantics);

}  // namespace eqreg
