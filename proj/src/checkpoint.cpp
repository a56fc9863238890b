#include "eqreg/checkpoint.hpp"

#include "eqreg/binary_io.hpp"
#include "eqreg/error.hpp"

namespace eqreg {

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.magic("EQVN");
  w.u32(kCheckpointVersion);
  w.str(ckpt.net.architecture().describe());
  const auto params = ckpt.net.parameters();
  w.u64(params.size());
  for (double p : params) w.f32(static_cast<float>(p));
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const OptimizerState& o = *ckpt.optimizer;
    w.u64(o.step);
    w.f64(o.hyper.beta1);
    w.f64(o.hyper.beta2);
    w.f64(o.hyper.eps);
    w.u64(o.m.size());
    for (double v : o.m) w.f64(v);
    for (double v : o.v) w.f64(v);
  }
  w.str(ckpt.rng_state);
  w.u64(ckpt.step);
  w.crc_trailer();
  return w.buffer();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (!r.expect_magic("EQVN")) throw Error(ErrorKind::Format, "not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::Version, "checkpoint version " + std::to_string(version) +
                                        ", reader supports " + std::to_string(kCheckpointVersion));
  }
  const Architecture arch = Architecture::parse(r.str());
  Checkpoint ckpt{PredictorNet(arch, 0), std::nullopt, {}, 0};
  const std::uint64_t n = r.u64();
  if (n != static_cast<std::uint64_t>(arch.parameter_count())) {
    throw Error(ErrorKind::Architecture, "parameter block has " + std::to_string(n) +
                                             " entries, architecture needs " +
                                             std::to_string(arch.parameter_count()));
  }
  std::vector<double> params(n);
  for (auto& p : params) p = static_cast<double>(r.f32());
  ckpt.net.set_parameters(params);
  if (r.u8() != 0) {
    OptimizerState o;
    o.step = r.u64();
    o.hyper.beta1 = r.f64();
    o.hyper.beta2 = r.f64();
    o.hyper.eps = r.f64();
    const std::uint64_t m = r.u64();
    if (m > r.remaining() / 16) throw Error(ErrorKind::Truncated, "optimizer block truncated");
    o.m.resize(m);
    o.v.resize(m);
    for (auto& v : o.m) v = r.f64();
    for (auto& v : o.v) v = r.f64();
    ckpt.optimizer = std::move(o);
  }
  ckpt.rng_state = r.str();
  ckpt.step = r.u64();
  r.finish_with_crc();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ckpt));
}

void save_checkpoint(const PredictorNet& net, const std::filesystem::path& path) {
  save_checkpoint(Checkpoint{net, std::nullopt, {}, 0}, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

PredictorNet load_checkpoint(const std::filesystem::path& path, const Architecture& expected) {
  Checkpoint c = load_checkpoint(path);
  if (!(c.net.architecture() == expected)) {
    throw Error(ErrorKind::Architecture, "checkpoint holds " + c.net.architecture().describe() +
                                             ", expected " + expected.describe());
  }
  return std::move(c.net);
}

}  // namespace eqreg
