#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "config.hpp"
#include "rawformer/discriminator.hpp"
#include "rawformer/generator.hpp"
#include "rawformer/synthcam.hpp"
#include "rawformer/train.hpp"

namespace rawformer::cli {

inline constexpr int kExitOk = 0;
/// The command ran but a check it performs failed (gradcheck).
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth",    "pretrain", "train", "translate",
                                                 "eval",     "ablate",   "bench", "gradcheck"};
  return names;
}

// Typed views of a RunConfig. All validate and throw ConfigError.
DatasetConfig dataset_config(const RunConfig& c);
GeneratorConfig generator_config(const RunConfig& c);
DiscriminatorConfig discriminator_config(const RunConfig& c);
PretrainConfig pretrain_config(const RunConfig& c);
GanConfig gan_config(const RunConfig& c);

/// Runs `cmd`, reporting errors as one line on `err`. Returns the exit code.
int run_command(const std::string& cmd, const RunConfig& cfg, std::ostream& out, std::ostream& err);

// ---- attention cost --------------------------------------------------------------

struct AttentionCost {
  int tokens = 0, channels = 0, heads = 0, r = 0;
  /// Counted matmul FLOPs: the two value products of condensed attention
  /// (A_H V and A_U Z), their two score products, and dense attention's
  /// score and value products.
  std::uint64_t cqa_products = 0, cqa_scores = 0, dense = 0;
  double cqa_ms = 0, dense_ms = 0;
};

/// Counts FLOPs of one forward pass on a square token map with a FLOP ledger
/// attached; with reps > 0 also times both kernels (median of reps).
AttentionCost attention_cost(int tokens, int channels, int heads, int r, int reps);

std::string attention_cost_csv(const std::vector<AttentionCost>& rows);

}  // namespace rawformer::cli
