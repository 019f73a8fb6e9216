#include "gemlab/peft.hpp"

#include <algorithm>
#include <cmath>

#include "gemlab/errors.hpp"

namespace gemlab {

namespace {

ParamSpec uniform_spec(std::string name, Shape shape, double bound) {
  return {std::move(name), std::move(shape), Init::Uniform, bound};
}

ParamSpec zero_spec(std::string name, Shape shape) {
  return {std::move(name), std::move(shape), Init::Zero, 0.0};
}

std::string ca_prefix(std::size_t block) { return "peft." + block_prefix(block) + ".ca"; }

std::string latent_name(Sharing sharing, const BackboneConfig& backbone, std::size_t block) {
  switch (sharing) {
    case Sharing::Global: return "peft.ca.latent";
    case Sharing::PerStage: return "peft.stage" + std::to_string(backbone.stage_of(block)) + ".ca.latent";
    case Sharing::PerBlock: return "peft." + block_prefix(block) + ".ca.latent";
  }
  return {};
}

std::vector<std::size_t> inserted_blocks(const BackboneConfig& backbone, const PeftConfig& cfg) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < backbone.blocks; ++b)
    if (cfg.inserts_at(b)) out.push_back(b);
  return out;
}

}  // namespace

Method parse_method(const std::string& s) {
  for (Method m : all_methods())
    if (method_name(m) == s) return m;
  throw ConfigError("unknown PEFT method '" + s +
                    "' (expected linear, bitfit, adapter, lora, prompt, gem, gem_sa_only, gem_ca_only)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Linear: return "linear";
    case Method::BitFit: return "bitfit";
    case Method::Adapter: return "adapter";
    case Method::Lora: return "lora";
    case Method::Prompt: return "prompt";
    case Method::Gem: return "gem";
    case Method::GemSaOnly: return "gem_sa_only";
    case Method::GemCaOnly: return "gem_ca_only";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::Linear, Method::BitFit,    Method::Adapter,
                                           Method::Lora,   Method::Prompt,    Method::Gem,
                                           Method::GemSaOnly, Method::GemCaOnly};
  return methods;
}

bool uses_rank(Method m) {
  return m == Method::Adapter || m == Method::Lora || has_spatial_adapter(m) || has_context_adapter(m);
}

bool uses_tokens(Method m) { return m == Method::Prompt || has_context_adapter(m); }
bool has_spatial_adapter(Method m) { return m == Method::Gem || m == Method::GemSaOnly; }
bool has_context_adapter(Method m) { return m == Method::Gem || m == Method::GemCaOnly; }

Sharing parse_sharing(const std::string& s) {
  if (s == "global") return Sharing::Global;
  if (s == "per_stage") return Sharing::PerStage;
  if (s == "per_block" || s == "none" || s == "na" || s == "n/a" || s == "N/A") return Sharing::PerBlock;
  throw ConfigError("unknown sharing mode '" + s + "' (expected per_block, per_stage, global)");
}

std::string sharing_name(Sharing s) {
  switch (s) {
    case Sharing::Global: return "global";
    case Sharing::PerStage: return "per_stage";
    case Sharing::PerBlock: return "per_block";
  }
  return "?";
}

void PeftConfig::validate(const BackboneConfig& backbone) const {
  if (rank < 1) throw ConfigError("rank must be at least 1");
  if (tokens < 1) throw ConfigError("tokens must be at least 1");
  if (kernel != 3) throw ConfigError("stencil size is fixed at 3, got " + std::to_string(kernel));
  for (auto b : blocks)
    if (b >= backbone.blocks)
      throw ConfigError("insertion block " + std::to_string(b) + " outside [0, " +
                        std::to_string(backbone.blocks) + ")");
}

bool PeftConfig::inserts_at(std::size_t block) const {
  return blocks.empty() || std::ranges::find(blocks, block) != blocks.end();
}

KeyValues PeftConfig::to_kv() const {
  KeyValues kv;
  kv.set("peft.method", method_name(method));
  kv.set("peft.rank", rank);
  kv.set("peft.tokens", tokens);
  kv.set("peft.sharing", sharing_name(sharing));
  kv.set("peft.kernel", kernel);
  std::string b;
  for (std::size_t i = 0; i < blocks.size(); ++i) b += (i ? "," : "") + std::to_string(blocks[i]);
  kv.set("peft.blocks", b.empty() ? std::string("all") : b);
  return kv;
}

PeftConfig PeftConfig::from_kv(const KeyValues& kv) {
  PeftConfig c;
  c.method = parse_method(kv.get("peft.method"));
  c.rank = static_cast<std::size_t>(kv.get_int("peft.rank"));
  c.tokens = static_cast<std::size_t>(kv.get_int("peft.tokens"));
  c.sharing = parse_sharing(kv.get("peft.sharing"));
  c.kernel = static_cast<std::size_t>(kv.get_int("peft.kernel"));
  if (kv.get_or("peft.blocks", "all") != "all")
    for (const auto& s : kv.get_list("peft.blocks")) c.blocks.push_back(static_cast<std::size_t>(parse_int(s)));
  return c;
}

std::vector<ParamSpec> peft_layout(const BackboneConfig& backbone, const PeftConfig& cfg) {
  cfg.validate(backbone);
  const std::size_t d = backbone.width, r = cfg.rank, m = cfg.tokens;
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double br = 1.0 / std::sqrt(static_cast<double>(r));
  const auto blocks = inserted_blocks(backbone, cfg);
  std::vector<ParamSpec> out;
  if (has_spatial_adapter(cfg.method)) {
    const std::size_t taps = cfg.kernel * cfg.kernel * cfg.kernel;
    out.push_back(uniform_spec("peft.sa.down", {d, r}, bd));
    out.push_back(uniform_spec("peft.sa.kernel", {taps, r, r}, bd));
    out.push_back(zero_spec("peft.sa.up", {r, d}));
  }
  if (has_context_adapter(cfg.method)) {
    std::vector<std::string> banks;
    for (auto b : blocks) {
      const auto p = ca_prefix(b);
      for (const char* w : {".q_down", ".k_down", ".v_down"}) out.push_back(uniform_spec(p + w, {d, r}, bd));
      for (const char* w : {".wq", ".wk", ".wv"}) out.push_back(uniform_spec(p + w, {r, r}, bd));
      out.push_back(zero_spec(p + ".up", {r, d}));
      auto bank = latent_name(cfg.sharing, backbone, b);
      if (std::ranges::find(banks, bank) == banks.end()) banks.push_back(bank);
    }
    for (const auto& bank : banks) out.push_back(uniform_spec(bank, {m, r}, br));
  }
  for (auto b : blocks) {
    const std::string p = "peft." + block_prefix(b);
    switch (cfg.method) {
      case Method::Adapter:
        out.push_back(uniform_spec(p + ".adapter.down", {d, r}, bd));
        out.push_back(zero_spec(p + ".adapter.up", {r, d}));
        break;
      case Method::Lora:
        for (const char* t : {".lora.q", ".lora.k"}) {
          out.push_back(uniform_spec(p + t + ".down", {d, r}, bd));
          out.push_back(zero_spec(p + t + ".up", {r, d}));
        }
        break;
      case Method::Prompt:
        out.push_back(uniform_spec(p + ".prompt.key", {m, d}, bd));
        out.push_back(uniform_spec(p + ".prompt.value", {m, d}, bd));
        break;
      default: break;
    }
  }
  return out;
}

std::size_t adapter_param_count(std::size_t d, std::size_t r, std::size_t blocks) { return 2 * d * r * blocks; }
std::size_t lora_param_count(std::size_t d, std::size_t r, std::size_t blocks) { return 4 * d * r * blocks; }
std::size_t prompt_param_count(std::size_t d, std::size_t m, std::size_t blocks) { return 2 * m * d * blocks; }

std::size_t spatial_adapter_param_count(std::size_t d, std::size_t r, std::size_t k) {
  return 2 * r * d + k * k * k * r * r;
}

std::size_t context_adapter_param_count(std::size_t d, std::size_t r, std::size_t m, std::size_t blocks,
                                        std::size_t latent_banks) {
  return (3 * d * r + 3 * r * r + r * d) * blocks + m * r * latent_banks;
}

Tensor adapter_branch(const Tensor& x, const Tensor& down, const Tensor& up) {
  return add(x, matmul(relu(matmul(x, down)), up));
}

Tensor low_rank_delta(const Tensor& x, const Tensor& down, const Tensor& up) {
  return matmul(matmul(x, down), up);
}

Tensor stencil_aggregate(const Tensor& h, const Tensor& kernels, const NeighborIndex& nbr) {
  const std::size_t n = h.rows(), r = h.cols(), taps = nbr.stencil_size();
  if (nbr.num_points() != n)
    throw ContractError("stencil_aggregate: neighbor index covers " + std::to_string(nbr.num_points()) +
                        " points, features have " + std::to_string(n));
  if (kernels.shape() != Shape{taps, r, r})
    throw DimensionError("stencil_aggregate: kernels must be " + shape_str({taps, r, r}) + ", got " +
                         shape_str(kernels.shape()));
  auto H = h.data(), W = kernels.data();
  std::vector<double> out(n * r, 0.0), avg(r);
  auto voxel_mean = [&](std::span<const std::size_t> pts, std::span<const double> src) {
    std::ranges::fill(avg, 0.0);
    for (auto j : pts)
      for (std::size_t a = 0; a < r; ++a) avg[a] += src[j * r + a];
    const double inv = 1.0 / static_cast<double>(pts.size());
    for (auto& v : avg) v *= inv;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < taps; ++o) {
      auto pts = nbr.neighbors(i, o);
      if (pts.empty()) continue;
      voxel_mean(pts, H);
      const double* Wo = W.data() + o * r * r;
      for (std::size_t a = 0; a < r; ++a)
        for (std::size_t b = 0; b < r; ++b) out[i * r + b] += avg[a] * Wo[a * r + b];
    }
  }
  return Tensor::make_result(
      {n, r}, std::move(out), {h, kernels},
      [h, kernels, nbr = &nbr, n, r, taps](std::span<const double> g) mutable {
        auto H = h.data(), W = kernels.data();
        std::span<double> gH, gW;
        if (h.requires_grad()) gH = h.grad_buffer();
        if (kernels.requires_grad()) gW = kernels.grad_buffer();
        std::vector<double> avg(r), dmean(r);
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = g.data() + i * r;
          for (std::size_t o = 0; o < taps; ++o) {
            auto pts = nbr->neighbors(i, o);
            if (pts.empty()) continue;
            const double inv = 1.0 / static_cast<double>(pts.size());
            const double* Wo = W.data() + o * r * r;
            if (!gW.empty()) {
              std::ranges::fill(avg, 0.0);
              for (auto j : pts)
                for (std::size_t a = 0; a < r; ++a) avg[a] += H[j * r + a];
              for (std::size_t a = 0; a < r; ++a)
                for (std::size_t b = 0; b < r; ++b) gW[o * r * r + a * r + b] += avg[a] * inv * gi[b];
            }
            if (!gH.empty()) {
              for (std::size_t a = 0; a < r; ++a) {
                double s = 0.0;
                for (std::size_t b = 0; b < r; ++b) s += gi[b] * Wo[a * r + b];
                dmean[a] = s * inv;
              }
              for (auto j : pts)
                for (std::size_t a = 0; a < r; ++a) gH[j * r + a] += dmean[a];
            }
          }
        }
      });
}

Tensor spatial_adapter_branch(const Tensor& x, const NeighborIndex& nbr, const ParamStore& params,
                              const Instrumentation* inst) {
  const Tensor& down = params.get("peft.sa.down");
  const Tensor& kernels = params.get("peft.sa.kernel");
  const Tensor& up = params.get("peft.sa.up");
  if (nbr.num_points() != x.rows())
    throw ContractError("spatial adapter: neighbor index built over " + std::to_string(nbr.num_points()) +
                        " points, input has " + std::to_string(x.rows()));
  Tensor h = matmul(x, down);
  Tensor agg = stencil_aggregate(h, kernels, nbr);
  Tensor branch = matmul(relu(agg), up);
  if (inst && inst->counter) {
    const std::size_t n = x.rows(), d = x.cols(), r = down.cols();
    std::uint64_t taps = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < nbr.stencil_size(); ++o) {
        auto pts = nbr.neighbors(i, o);
        if (!pts.empty()) taps += pts.size() * r + r * r;
      }
    inst->count("sa", 2ULL * n * d * r + taps);
  }
  return branch;
}

ContextOutput context_adapter_branch(const Tensor& x_norm, const Tensor& latent, const ParamStore& params,
                                     const std::string& prefix, const Instrumentation* inst,
                                     const std::string& site) {
  const Tensor& q_down = params.get(prefix + ".q_down");
  const std::size_t n = x_norm.rows(), d = x_norm.cols(), r = q_down.cols(), m = latent.rows();
  if (latent.cols() != r)
    throw ContractError("context adapter: latent width " + std::to_string(latent.cols()) +
                        " does not match rank " + std::to_string(r));
  const double sc = 1.0 / std::sqrt(static_cast<double>(r));
  Tensor qp = matmul(x_norm, q_down);
  Tensor kp = matmul(x_norm, params.get(prefix + ".k_down"));
  Tensor vp = matmul(x_norm, params.get(prefix + ".v_down"));

  ContextOutput out;
  Tensor lq = matmul(latent, params.get(prefix + ".wq"));
  out.stage1 = softmax_rows(scale(matmul_nt(lq, kp), sc));
  out.latent_ctx = matmul(out.stage1, vp);

  Tensor kl = matmul(out.latent_ctx, params.get(prefix + ".wk"));
  Tensor vl = matmul(out.latent_ctx, params.get(prefix + ".wv"));
  out.stage2 = softmax_rows(scale(matmul_nt(qp, kl), sc));
  out.branch = matmul(matmul(out.stage2, vl), params.get(prefix + ".up"));

  if (inst) {
    inst->count(site + ".stage1", 2ULL * n * d * r + 1ULL * m * r * r + 2ULL * m * n * r);
    inst->count(site + ".stage2", 1ULL * n * d * r + 2ULL * m * r * r + 2ULL * n * m * r + 1ULL * n * r * d);
  }
  return out;
}

void bitfit_select(ParamStore& store) {
  for (const auto& name : store.names())
    store.set_frozen(name, !(ends_with(name, ".bias") || ends_with(name, ".shift")));
}

std::vector<InsertionPoint> PeftAttachment::registered() const {
  std::vector<InsertionPoint> out;
  for (auto p : {InsertionPoint::PositionalEncoding, InsertionPoint::AttentionQK, InsertionPoint::AttentionPrompt,
                 InsertionPoint::AfterAttention, InsertionPoint::AfterFfn})
    if (hooks_.has(p)) out.push_back(p);
  return out;
}

bool trainable_under(Method method, const std::string& name) {
  if (starts_with(name, "head.") || starts_with(name, "peft.")) return true;
  if (method == Method::BitFit) return ends_with(name, ".bias") || ends_with(name, ".shift");
  return false;
}

PeftAttachment attach(const PeftConfig& cfg, const BackboneConfig& backbone, ParamStore& store,
                      std::uint64_t seed) {
  cfg.validate(backbone);
  std::vector<ParamSpec> missing;
  for (const auto& spec : peft_layout(backbone, cfg)) {
    if (!store.contains(spec.name)) {
      missing.push_back(spec);
    } else if (store.get(spec.name).shape() != spec.shape) {
      throw ContractError("parameter '" + spec.name + "' has shape " + shape_str(store.get(spec.name).shape()) +
                          ", method expects " + shape_str(spec.shape));
    }
  }
  materialize(missing, store, seed, "init.peft");
  for (const auto& name : store.names()) store.set_frozen(name, !trainable_under(cfg.method, name));

  PeftAttachment att;
  att.config_ = cfg;
  HookTable& hooks = att.hooks_;
  const Method method = cfg.method;

  if (has_spatial_adapter(method)) {
    hooks.spatial = [](const Tensor& x, HookContext& ctx) {
      return spatial_adapter_branch(x, ctx.cloud.nbr, ctx.params, ctx.inst);
    };
  }
  if (has_context_adapter(method)) {
    const Sharing sharing = cfg.sharing;
    hooks.init_latent = [sharing, backbone, cfg](const ParamStore& params) {
      LatentState state;
      state.mode = sharing;
      for (std::size_t b = 0; b < backbone.blocks; ++b)
        if (cfg.inserts_at(b)) {
          state.current = params.get(latent_name(sharing, backbone, b));
          break;
        }
      return state;
    };
    hooks.context = [sharing, cfg](const Tensor& x_norm, HookContext& ctx) -> Tensor {
      if (!cfg.inserts_at(ctx.block)) return {};
      LatentState& state = *ctx.latent;
      const auto bank = latent_name(sharing, ctx.cfg, ctx.block);
      Tensor input;
      if (sharing == Sharing::PerBlock || (sharing == Sharing::PerStage && ctx.cfg.first_in_stage(ctx.block)) ||
          !state.current.defined())
        input = ctx.params.get(bank);
      else
        input = state.current;
      auto out = context_adapter_branch(x_norm, input, ctx.params, ca_prefix(ctx.block), ctx.inst,
                                        block_prefix(ctx.block) + ".ca");
      state.history.push_back({ctx.block, std::vector<double>(input.data().begin(), input.data().end()),
                               std::vector<double>(out.latent_ctx.data().begin(), out.latent_ctx.data().end())});
      state.current = sharing == Sharing::PerBlock ? input : add(input, out.latent_ctx);
      if (ctx.inst && ctx.inst->attention) {
        auto copy = [&](const Tensor& t) {
          return AttnDump::Matrix{ctx.block, t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end())};
        };
        ctx.inst->attention->latent_to_points.push_back(copy(out.stage1));
        ctx.inst->attention->points_to_latent.push_back(copy(out.stage2));
      }
      return out.branch;
    };
  }
  if (method == Method::Adapter) {
    hooks.after_ffn = [cfg](const Tensor& x, HookContext& ctx) -> Tensor {
      if (!cfg.inserts_at(ctx.block)) return x;
      const std::string p = "peft." + block_prefix(ctx.block) + ".adapter";
      const Tensor& down = ctx.params.get(p + ".down");
      if (ctx.inst) ctx.inst->count(block_prefix(ctx.block) + ".adapter", 2ULL * x.rows() * x.cols() * down.cols());
      return adapter_branch(x, down, ctx.params.get(p + ".up"));
    };
  }
  if (method == Method::Lora) {
    hooks.qk_delta = [cfg](const Tensor& x_norm, HookContext& ctx) -> std::pair<Tensor, Tensor> {
      if (!cfg.inserts_at(ctx.block)) return {};
      const std::string p = "peft." + block_prefix(ctx.block) + ".lora";
      const Tensor& qd = ctx.params.get(p + ".q.down");
      if (ctx.inst) ctx.inst->count(block_prefix(ctx.block) + ".lora", 4ULL * x_norm.rows() * x_norm.cols() * qd.cols());
      return {low_rank_delta(x_norm, qd, ctx.params.get(p + ".q.up")),
              low_rank_delta(x_norm, ctx.params.get(p + ".k.down"), ctx.params.get(p + ".k.up"))};
    };
  }
  if (method == Method::Prompt) {
    hooks.prompts = [cfg, offset = att.prompt_offset_](HookContext& ctx) -> std::optional<PromptTokens> {
      if (!cfg.inserts_at(ctx.block)) return std::nullopt;
      const std::string p = "peft." + block_prefix(ctx.block) + ".prompt";
      return PromptTokens{ctx.params.get(p + ".key"), ctx.params.get(p + ".value"), *offset};
    };
  }
  return att;
}

ParamCounts count_params(const BackboneConfig& backbone, const PeftConfig& cfg) {
  ParamCounts c;
  for (const auto& spec : backbone_layout(backbone)) {
    c.total += spec.numel();
    if (trainable_under(cfg.method, spec.name)) c.trainable += spec.numel();
  }
  for (const auto& spec : peft_layout(backbone, cfg)) {
    c.total += spec.numel();
    c.trainable += spec.numel();
  }
  return c;
}

std::size_t scaled_tokens(std::size_t rank) { return std::max<std::size_t>(1, rank * 4 / 32); }

BudgetFit budget_fit(Method method, const Budget& budget, const BackboneConfig& backbone, const PeftConfig& base) {
  PeftConfig cfg = base;
  cfg.method = method;
  if (budget.rank) {
    if (*budget.rank < 1) throw ConfigError("rank budget must be at least 1");
    cfg.rank = *budget.rank;
    if (uses_rank(method)) cfg.tokens = scaled_tokens(cfg.rank);
    else if (method == Method::Prompt) cfg.tokens = 1;
    return {cfg, count_params(backbone, cfg)};
  }
  const double frac = budget.fraction;
  if (!(frac > 0.0 && frac < 1.0)) throw ConfigError("budget fraction must lie in (0, 1)");

  PeftConfig probe = cfg;
  probe.method = Method::Linear;
  const double floor = count_params(backbone, probe).fraction();
  if (frac < floor)
    throw InfeasibleError("budget " + format_double(frac) + " is below the head-only floor " + format_double(floor));

  auto fits = [&](const PeftConfig& c) { return count_params(backbone, c).fraction() <= frac; };
  auto largest = [&](auto with) -> std::size_t {
    if (!fits(with(1))) return 0;
    std::size_t lo = 1, hi = 2;
    while (hi < (std::size_t{1} << 24) && fits(with(hi))) {
      lo = hi;
      hi *= 2;
    }
    while (hi - lo > 1) {
      std::size_t mid = lo + (hi - lo) / 2;
      (fits(with(mid)) ? lo : hi) = mid;
    }
    return lo;
  };

  if (uses_rank(method)) {
    auto with_rank = [&](std::size_t r) {
      PeftConfig c = cfg;
      c.rank = r;
      c.tokens = scaled_tokens(r);
      return c;
    };
    std::size_t r = largest(with_rank);
    if (r == 0)
      throw InfeasibleError(method_name(method) + " at rank 1 needs fraction " +
                            format_double(count_params(backbone, with_rank(1)).fraction()) + " > budget " +
                            format_double(frac));
    cfg = with_rank(r);
  } else if (method == Method::Prompt) {
    auto with_tokens = [&](std::size_t m) {
      PeftConfig c = cfg;
      c.tokens = m;
      return c;
    };
    std::size_t m = largest(with_tokens);
    if (m == 0)
      throw InfeasibleError("prompt with one token needs fraction " +
                            format_double(count_params(backbone, with_tokens(1)).fraction()) + " > budget " +
                            format_double(frac));
    cfg = with_tokens(m);
  } else if (!fits(cfg)) {
    throw InfeasibleError(method_name(method) + " needs fraction " +
                          format_double(count_params(backbone, cfg).fraction()) + " > budget " + format_double(frac));
  }
  return {cfg, count_params(backbone, cfg)};
}

}  // namespace gemlab
