#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gemlab/tensor.hpp"

namespace gemlab {

/// How latent tokens carry across context-adapter insertions.
///   per_block: every block starts from its own initial tokens.
///   per_stage: tokens reset at stage boundaries, L <- L + L_c within a stage.
///   global:    one bank for the whole pass, L <- L + L_c at every insertion.
enum class Sharing { PerBlock, PerStage, Global };

Sharing parse_sharing(const std::string& s);
std::string sharing_name(Sharing s);

/// Latent tokens of one forward pass. Recreated from the learned initial
/// tokens at the start of every pass.
struct LatentState {
  struct Step {
    std::size_t block = 0;
    std::vector<double> input;    // L fed to the block, m×r
    std::vector<double> context;  // L_c produced by the block, m×r
  };

  Sharing mode = Sharing::Global;
  Tensor current;
  std::vector<Step> history;

  bool active() const { return current.defined(); }
};

}  // namespace gemlab
