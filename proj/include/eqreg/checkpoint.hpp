#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eqreg/model.hpp"
#include "eqreg/optimizer.hpp"

namespace eqreg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// On disk: "EQVN", u32 version, u32-length-prefixed architecture descriptor,
/// u64 count + float32 parameters, u8 optimizer flag [+ u64 step, f64 betas,
/// eps, u64 n, f64 moments], length-prefixed RNG state, u64 step, CRC32.
struct Checkpoint {
  PredictorNet net;
  std::optional<OptimizerState> optimizer;
  std::string rng_state;
  std::uint64_t step = 0;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
void save_checkpoint(const PredictorNet& net, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Throws ErrorKind::Architecture when the stored topology differs.
PredictorNet load_checkpoint(const std::filesystem::path& path, const Architecture& expected);

}  // namespace eqreg
