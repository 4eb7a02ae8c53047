#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "rawformer/nn/tape.hpp"

namespace rawformer {

/// Name-addressed tensors plus key=value metadata, stored as a `.rfck` file:
/// "RFCK", u32 version, u32 tensor count, then per tensor u32 name length,
/// name bytes, u64 blob length and a `.rawimg` blob (batch folded into
/// channels; the exact 4-d shape is kept in metadata as `shape.<name>`),
/// then u32 metadata length and `key=value` lines. All integers little-endian.
struct Checkpoint {
  std::map<std::string, nn::Tensor<float>> tensors;
  std::map<std::string, std::string> meta;

  /// Stores every parameter value as `<prefix><name>`.
  void put(const std::string& prefix, const nn::ParamSet<float>& params);
  /// Loads `<prefix><name>` into every parameter of `params`; CheckpointError
  /// when a tensor is missing or has the wrong shape.
  void get(const std::string& prefix, nn::ParamSet<float>& params) const;
  bool has_prefix(const std::string& prefix) const;

  const nn::Tensor<float>& tensor(const std::string& name) const;
  const std::string& value(const std::string& key) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rawformer
