#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gemlab/backbone.hpp"
#include "gemlab/latent.hpp"

namespace gemlab {

enum class Method { Linear, BitFit, Adapter, Lora, Prompt, Gem, GemSaOnly, GemCaOnly };

Method parse_method(const std::string& s);
std::string method_name(Method m);
const std::vector<Method>& all_methods();
bool uses_rank(Method m);
bool uses_tokens(Method m);
bool has_spatial_adapter(Method m);
bool has_context_adapter(Method m);

struct PeftConfig {
  Method method = Method::Gem;
  std::size_t rank = 8;
  std::size_t tokens = 4;
  Sharing sharing = Sharing::Global;
  std::size_t kernel = 3;
  /// Blocks receiving per-block hooks; empty means every block.
  std::vector<std::size_t> blocks;

  void validate(const BackboneConfig& backbone) const;
  bool inserts_at(std::size_t block) const;
  KeyValues to_kv() const;
  static PeftConfig from_kv(const KeyValues& kv);
};

/// Parameters a method adds under `peft.`, in a fixed order.
std::vector<ParamSpec> peft_layout(const BackboneConfig& backbone, const PeftConfig& cfg);

// Closed-form parameter counts.
std::size_t adapter_param_count(std::size_t d, std::size_t r, std::size_t blocks);
std::size_t lora_param_count(std::size_t d, std::size_t r, std::size_t blocks);
std::size_t prompt_param_count(std::size_t d, std::size_t m, std::size_t blocks);
std::size_t spatial_adapter_param_count(std::size_t d, std::size_t r, std::size_t k);
/// Per-block context adapter weights plus one latent bank per sharing unit.
std::size_t context_adapter_param_count(std::size_t d, std::size_t r, std::size_t m, std::size_t blocks,
                                        std::size_t latent_banks);

// ---- branches ----

/// x + relu(x·down)·up
Tensor adapter_branch(const Tensor& x, const Tensor& down, const Tensor& up);

/// x·down·up
Tensor low_rank_delta(const Tensor& x, const Tensor& down, const Tensor& up);

/// Sparse stencil convolution on projected features h (n×r): for each point,
/// every non-empty neighbouring voxel contributes mean(h over that voxel)·W_o,
/// where W_o is the kernel slice for that offset. kernels has shape k³×r×r.
Tensor stencil_aggregate(const Tensor& h, const Tensor& kernels, const NeighborIndex& nbr);

/// relu(stencil(x·down))·up. Branch only; the caller adds it to the residual.
Tensor spatial_adapter_branch(const Tensor& x, const NeighborIndex& nbr, const ParamStore& params,
                              const Instrumentation* inst = nullptr);

struct ContextOutput {
  Tensor branch;        // n×d
  Tensor latent_ctx;    // L_c, m×r
  Tensor stage1;        // m×n latent→point weights
  Tensor stage2;        // n×m point→latent weights
};

/// Latent tokens L (m×r) read all points once, then every point reads the
/// contextualized tokens. prefix names the block's adapter weights
/// ("peft.block3.ca"). Branch only; no internal residual.
ContextOutput context_adapter_branch(const Tensor& x_norm, const Tensor& latent, const ParamStore& params,
                                     const std::string& prefix, const Instrumentation* inst = nullptr,
                                     const std::string& site = "ca");

/// Unfreezes exactly the entries named *.bias or *.shift; freezes the rest.
void bitfit_select(ParamStore& store);

/// A PEFT method bound to a model's parameter store.
class PeftAttachment {
 public:
  const PeftConfig& config() const { return config_; }
  const HookTable& hooks() const { return hooks_; }
  std::vector<InsertionPoint> registered() const;

  /// Test hook: constant added to every prompt logit (large negative values
  /// switch prompts off).
  void set_prompt_logit_offset(double v) { *prompt_offset_ = v; }

 private:
  friend PeftAttachment attach(const PeftConfig&, const BackboneConfig&, ParamStore&, std::uint64_t);
  PeftConfig config_;
  HookTable hooks_;
  std::shared_ptr<double> prompt_offset_ = std::make_shared<double>(0.0);
};

/// Adds the method's `peft.` parameters (kept when already present, e.g. from
/// a checkpoint), freezes every `backbone.` entry, keeps `head.` trainable and
/// registers the method's hooks. BitFit additionally unfreezes bias/shift.
PeftAttachment attach(const PeftConfig& cfg, const BackboneConfig& backbone, ParamStore& store,
                      std::uint64_t seed);

/// Names a method is allowed to change during fine-tuning.
bool trainable_under(Method method, const std::string& name);

struct ParamCounts {
  std::size_t trainable = 0;
  std::size_t total = 0;
  double fraction() const { return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0; }
};

/// Counts by enumerating layouts (no allocation).
ParamCounts count_params(const BackboneConfig& backbone, const PeftConfig& cfg);

struct Budget {
  double fraction = 0.0;
  /// When set, the budget is a fixed rank instead of a fraction.
  std::optional<std::size_t> rank;
};

struct BudgetFit {
  PeftConfig config;
  ParamCounts counts;
};

/// Tokens paired with a rank by the default 4:32 ratio (at least one).
std::size_t scaled_tokens(std::size_t rank);

/// Largest rank (then tokens) whose trainable fraction stays within budget.
/// Throws InfeasibleError when even the smallest configuration exceeds it.
BudgetFit budget_fit(Method method, const Budget& budget, const BackboneConfig& backbone,
                     const PeftConfig& base = {});

}  // namespace gemlab
