#include "gemlab/backbone.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "gemlab/errors.hpp"

namespace gemlab {

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

ParamSpec uniform(std::string name, Shape shape, std::size_t fan_in) {
  return {std::move(name), std::move(shape), Init::Uniform, 1.0 / std::sqrt(static_cast<double>(fan_in))};
}

ParamSpec zeros(std::string name, Shape shape) { return {std::move(name), std::move(shape), Init::Zero, 0.0}; }
ParamSpec ones(std::string name, Shape shape) { return {std::move(name), std::move(shape), Init::One, 0.0}; }

Tensor linear(const Tensor& x, const ParamStore& params, const std::string& prefix) {
  return add_row(matmul(x, params.get(prefix + ".weight")), params.get(prefix + ".bias"));
}

}  // namespace

std::string block_prefix(std::size_t block) { return "block" + std::to_string(block); }

void BackboneConfig::validate() const {
  if (blocks < 1) throw ConfigError("backbone needs at least one block");
  if (width == 0 || heads == 0 || width % heads != 0)
    throw ConfigError("width " + std::to_string(width) + " is not divisible by heads " +
                      std::to_string(heads));
  if (patch == 0 || ffn_mult == 0 || classes == 0 || in_channels == 0)
    throw ConfigError("patch, ffn_mult, classes and in_channels must be positive");
  if (std::accumulate(stage_blocks.begin(), stage_blocks.end(), std::size_t{0}) != blocks)
    throw ConfigError("stage sizes " + join_sizes(stage_blocks) + " do not cover " +
                      std::to_string(blocks) + " blocks");
  for (auto s : stage_blocks)
    if (s == 0) throw ConfigError("empty stage in " + join_sizes(stage_blocks));
  if (!(grid_size > 0.0) || !(voxel_size > 0.0)) throw ConfigError("grid and voxel sizes must be positive");
}

std::size_t BackboneConfig::stage_of(std::size_t block) const {
  std::size_t end = 0;
  for (std::size_t s = 0; s < stage_blocks.size(); ++s) {
    end += stage_blocks[s];
    if (block < end) return s;
  }
  throw RangeError("block " + std::to_string(block) + " is outside every stage");
}

bool BackboneConfig::first_in_stage(std::size_t block) const {
  std::size_t start = 0;
  for (auto s : stage_blocks) {
    if (block == start) return true;
    start += s;
  }
  return false;
}

KeyValues BackboneConfig::to_kv() const {
  KeyValues kv;
  kv.set("backbone.in_channels", in_channels);
  kv.set("backbone.width", width);
  kv.set("backbone.blocks", blocks);
  kv.set("backbone.heads", heads);
  kv.set("backbone.patch", patch);
  kv.set("backbone.ffn_mult", ffn_mult);
  kv.set("backbone.classes", classes);
  kv.set("backbone.stages", join_sizes(stage_blocks));
  kv.set("backbone.grid_size", grid_size);
  kv.set("backbone.voxel_size", voxel_size);
  return kv;
}

BackboneConfig BackboneConfig::from_kv(const KeyValues& kv) {
  BackboneConfig c;
  auto sz = [&](const char* key) { return static_cast<std::size_t>(kv.get_int(key)); };
  c.in_channels = sz("backbone.in_channels");
  c.width = sz("backbone.width");
  c.blocks = sz("backbone.blocks");
  c.heads = sz("backbone.heads");
  c.patch = sz("backbone.patch");
  c.ffn_mult = sz("backbone.ffn_mult");
  c.classes = sz("backbone.classes");
  c.stage_blocks.clear();
  for (const auto& s : kv.get_list("backbone.stages")) c.stage_blocks.push_back(static_cast<std::size_t>(parse_int(s)));
  c.grid_size = kv.get_double("backbone.grid_size");
  c.voxel_size = kv.get_double("backbone.voxel_size");
  c.validate();
  return c;
}

std::vector<ParamSpec> backbone_layout(const BackboneConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.width, h = cfg.width * cfg.ffn_mult, c = cfg.in_channels;
  std::vector<ParamSpec> out;
  out.push_back(uniform("backbone.embed.weight", {c, d}, c));
  out.push_back(zeros("backbone.embed.bias", {d}));
  out.push_back(uniform("backbone.pos.fc1.weight", {3, d}, 3));
  out.push_back(zeros("backbone.pos.fc1.bias", {d}));
  out.push_back(uniform("backbone.pos.fc2.weight", {d, d}, d));
  out.push_back(zeros("backbone.pos.fc2.bias", {d}));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "backbone." + block_prefix(b) + ".";
    out.push_back(ones(p + "norm1.scale", {d}));
    out.push_back(zeros(p + "norm1.shift", {d}));
    for (const char* proj : {"q", "k", "v", "o"}) {
      out.push_back(uniform(p + "attn." + proj + ".weight", {d, d}, d));
      out.push_back(zeros(p + "attn." + proj + ".bias", {d}));
    }
    out.push_back(ones(p + "norm2.scale", {d}));
    out.push_back(zeros(p + "norm2.shift", {d}));
    out.push_back(uniform(p + "ffn.fc1.weight", {d, h}, d));
    out.push_back(zeros(p + "ffn.fc1.bias", {h}));
    out.push_back(uniform(p + "ffn.fc2.weight", {h, d}, h));
    out.push_back(zeros(p + "ffn.fc2.bias", {d}));
  }
  out.push_back(ones("backbone.norm_out.scale", {d}));
  out.push_back(zeros("backbone.norm_out.shift", {d}));
  out.push_back(uniform("head.weight", {d, cfg.classes}, d));
  out.push_back(zeros("head.bias", {cfg.classes}));
  return out;
}

std::size_t layout_count(const std::vector<ParamSpec>& layout) {
  std::size_t n = 0;
  for (const auto& s : layout) n += s.numel();
  return n;
}

void materialize(const std::vector<ParamSpec>& layout, ParamStore& store, std::uint64_t seed,
                 std::string_view stream, bool frozen) {
  auto rng = make_stream(seed, stream);
  for (const auto& spec : layout) {
    std::vector<double> v(spec.numel(), spec.init == Init::One ? 1.0 : 0.0);
    if (spec.init == Init::Uniform) {
      std::uniform_real_distribution<double> u(-spec.bound, spec.bound);
      for (auto& x : v) x = u(rng);
    }
    store.add(spec.name, Tensor::from(spec.shape, std::move(v)), frozen);
  }
}

ParamStore init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  materialize(backbone_layout(cfg), store, seed, "init.backbone");
  return store;
}

PreparedCloud prepare_cloud(const PointCloud& cloud, const BackboneConfig& cfg) {
  cloud.validate();
  if (cloud.channels != cfg.in_channels)
    throw DimensionError("cloud has " + std::to_string(cloud.channels) +
                         " feature channels, backbone expects " + std::to_string(cfg.in_channels));
  PreparedCloud pc;
  pc.labels = cloud.labels;
  const std::size_t n = cloud.size();
  pc.coords = Tensor::from({n, 3}, cloud.coords);
  pc.feats = Tensor::from({n, cloud.channels}, cloud.feats);
  pc.part = partition(serialize_points(cloud, cfg.grid_size), n, cfg.patch);
  pc.nbr = build_neighbor_index(cloud, cfg.voxel_size, 3);
  return pc;
}

bool HookTable::has(InsertionPoint p) const {
  switch (p) {
    case InsertionPoint::PositionalEncoding: return static_cast<bool>(spatial);
    case InsertionPoint::AttentionQK: return static_cast<bool>(qk_delta);
    case InsertionPoint::AttentionPrompt: return static_cast<bool>(prompts);
    case InsertionPoint::AfterAttention: return static_cast<bool>(context);
    case InsertionPoint::AfterFfn: return static_cast<bool>(after_ffn);
  }
  return false;
}

Tensor embed(const Tensor& feats, const ParamStore& params) {
  const auto& w = params.get("backbone.embed.weight");
  if (feats.cols() != w.rows())
    throw DimensionError("embed: features have " + std::to_string(feats.cols()) +
                         " channels, weight expects " + std::to_string(w.rows()));
  return linear(feats, params, "backbone.embed");
}

Tensor pos_encode(const Tensor& coords, const ParamStore& params) {
  return linear(relu(linear(coords, params, "backbone.pos.fc1")), params, "backbone.pos.fc2");
}

Tensor ffn(const Tensor& x, const ParamStore& params, const std::string& prefix) {
  return linear(relu(linear(x, params, prefix + ".fc1")), params, prefix + ".fc2");
}

Tensor patch_attention(const Tensor& q, const Tensor& k, const Tensor& v, const PatchPartition& part,
                       std::size_t heads, const PromptTokens* prompts, AttnDump* dump, std::size_t block) {
  const std::size_t n = q.rows(), d = q.cols();
  if (part.size() != n)
    throw ContractError("patch partition covers " + std::to_string(part.size()) + " points, input has " +
                        std::to_string(n));
  if (k.shape() != q.shape() || v.shape() != q.shape())
    throw DimensionError("patch_attention: q, k, v shapes differ");
  if (heads == 0 || d % heads != 0) throw DimensionError("patch_attention: width not divisible by heads");
  const std::size_t m = prompts ? prompts->key.rows() : 0;
  if (prompts && (prompts->key.cols() != d || prompts->value.shape() != prompts->key.shape()))
    throw DimensionError("patch_attention: prompt tokens must be m x " + std::to_string(d));
  const std::size_t p = part.patch_size, dh = d / heads, slots = m + p;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const double offset = prompts ? prompts->logit_offset : 0.0;

  auto Q = q.data(), K = k.data(), V = v.data();
  std::span<const double> PK, PV;
  if (prompts) {
    PK = prompts->key.data();
    PV = prompts->value.data();
  }
  // probs[((patch * heads + h) * p + s) * slots + t]
  auto probs = std::make_shared<std::vector<double>>(part.num_patches * heads * p * slots, 0.0);
  std::vector<double> out(n * d, 0.0);
  std::vector<double> logit(slots);
  for (std::size_t b = 0; b < part.num_patches; ++b) {
    const std::size_t vb = part.valid_in(b);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t s = 0; s < vb; ++s) {
        const std::size_t i = part.point_at(b, s);
        const double* qi = Q.data() + i * d + c0;
        double mx = -INFINITY;
        for (std::size_t t = 0; t < m + vb; ++t) {
          const double* kt = t < m ? PK.data() + t * d + c0 : K.data() + part.point_at(b, t - m) * d + c0;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kt[c];
          logit[t] = dot * sc + (t < m ? offset : 0.0);
          mx = std::max(mx, logit[t]);
        }
        double z = 0.0;
        double* pr = probs->data() + ((b * heads + h) * p + s) * slots;
        for (std::size_t t = 0; t < m + vb; ++t) z += (pr[t] = std::exp(logit[t] - mx));
        double* oi = out.data() + i * d + c0;
        for (std::size_t t = 0; t < m + vb; ++t) {
          pr[t] /= z;
          const double* vt = t < m ? PV.data() + t * d + c0 : V.data() + part.point_at(b, t - m) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pr[t] * vt[c];
        }
      }
    }
  }

  if (dump && m > 0) {
    AttnDump::Matrix w{block, n, m, std::vector<double>(n * m, 0.0)};
    for (std::size_t b = 0; b < part.num_patches; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t s = 0; s < part.valid_in(b); ++s) {
          const double* pr = probs->data() + ((b * heads + h) * p + s) * slots;
          for (std::size_t t = 0; t < m; ++t) w.weights[part.point_at(b, s) * m + t] += pr[t] / heads;
        }
    dump->prompt_weights.push_back(std::move(w));
  }

  std::vector<Tensor> parents{q, k, v};
  Tensor pk, pv;
  if (prompts) {
    pk = prompts->key;
    pv = prompts->value;
    parents.push_back(pk);
    parents.push_back(pv);
  }
  return Tensor::make_result(
      {n, d}, std::move(out), parents,
      [q, k, v, pk, pv, part_copy = part, probs, heads, m, p, d, dh, slots,
       sc](std::span<const double> g) mutable {
        auto Q = q.data(), K = k.data(), V = v.data();
        std::span<const double> PK, PV;
        std::span<double> gPK, gPV;
        if (m > 0) {
          PK = pk.data();
          PV = pv.data();
          if (pk.requires_grad()) gPK = pk.grad_buffer();
          if (pv.requires_grad()) gPV = pv.grad_buffer();
        }
        std::span<double> gQ, gK, gV;
        if (q.requires_grad()) gQ = q.grad_buffer();
        if (k.requires_grad()) gK = k.grad_buffer();
        if (v.requires_grad()) gV = v.grad_buffer();
        std::vector<double> dS(slots);
        const auto& P = part_copy;
        for (std::size_t b = 0; b < P.num_patches; ++b) {
          const std::size_t vb = P.valid_in(b);
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t s = 0; s < vb; ++s) {
              const std::size_t i = P.point_at(b, s);
              const double* gi = g.data() + i * d + c0;
              const double* pr = probs->data() + ((b * heads + h) * p + s) * slots;
              double dotsum = 0.0;
              for (std::size_t t = 0; t < m + vb; ++t) {
                const std::size_t row = t < m ? t : P.point_at(b, t - m);
                const double* vt = (t < m ? PV.data() : V.data()) + row * d + c0;
                double da = 0.0;
                for (std::size_t c = 0; c < dh; ++c) da += gi[c] * vt[c];
                dS[t] = da;
                dotsum += pr[t] * da;
                std::span<double> gv = t < m ? gPV : gV;
                if (!gv.empty())
                  for (std::size_t c = 0; c < dh; ++c) gv[row * d + c0 + c] += pr[t] * gi[c];
              }
              const double* qi = Q.data() + i * d + c0;
              for (std::size_t t = 0; t < m + vb; ++t) {
                const double ds = pr[t] * (dS[t] - dotsum) * sc;
                const std::size_t row = t < m ? t : P.point_at(b, t - m);
                const double* kt = (t < m ? PK.data() : K.data()) + row * d + c0;
                if (!gQ.empty())
                  for (std::size_t c = 0; c < dh; ++c) gQ[i * d + c0 + c] += ds * kt[c];
                std::span<double> gk = t < m ? gPK : gK;
                if (!gk.empty())
                  for (std::size_t c = 0; c < dh; ++c) gk[row * d + c0 + c] += ds * qi[c];
              }
            }
          }
        }
      });
}

Tensor local_attention(const Tensor& x_norm, const PatchPartition& part, const ParamStore& params,
                       const BackboneConfig& cfg, std::size_t block, HookContext* ctx,
                       const HookTable* hooks) {
  const std::string p = "backbone." + block_prefix(block) + ".attn.";
  const std::string site = block_prefix(block);
  const std::size_t n = x_norm.rows(), d = cfg.width;
  if (part.size() != n) throw ContractError("local_attention: partition size does not match input");
  Tensor q = linear(x_norm, params, p + "q");
  Tensor k = linear(x_norm, params, p + "k");
  Tensor v = linear(x_norm, params, p + "v");
  const Instrumentation* inst = ctx ? ctx->inst : nullptr;
  if (hooks && hooks->qk_delta && ctx) {
    auto [dq, dk] = hooks->qk_delta(x_norm, *ctx);
    if (dq.defined()) q = add(q, dq);
    if (dk.defined()) k = add(k, dk);
  }
  std::optional<PromptTokens> prompts;
  if (hooks && hooks->prompts && ctx) prompts = hooks->prompts(*ctx);
  const std::size_t m = prompts ? prompts->key.rows() : 0;
  Tensor a = patch_attention(q, k, v, part, cfg.heads, prompts ? &*prompts : nullptr,
                             inst ? inst->attention : nullptr, block);
  if (inst) {
    inst->count(site + ".attn_proj", 4ULL * n * d * d);
    inst->count(site + ".local_attn", 2ULL * part.num_patches * part.patch_size * (part.patch_size + m) * d);
  }
  return linear(a, params, p + "o");
}

ForwardResult forward(const BackboneConfig& cfg, const ParamStore& params, const PreparedCloud& cloud,
                      const HookTable* hooks, const Instrumentation* inst) {
  const std::size_t n = cloud.size(), d = cfg.width;
  if (cloud.part.size() != n) throw ContractError("forward: partition built over a different cloud");
  if (cloud.nbr.num_points() != n) throw ContractError("forward: neighbor index built over a different cloud");
  ForwardResult result;
  if (hooks && hooks->init_latent) result.latent = hooks->init_latent(params);
  HookContext ctx{cfg, params, cloud, 0, &result.latent, inst};

  Tensor x0 = embed(cloud.feats, params);
  Tensor x = add(x0, pos_encode(cloud.coords, params));
  if (inst) {
    inst->count("embed", 1ULL * n * cfg.in_channels * d);
    inst->count("pos", 1ULL * n * 3 * d + 1ULL * n * d * d);
  }
  if (hooks && hooks->spatial) x = add(x, hooks->spatial(x0, ctx));

  const std::size_t hidden = d * cfg.ffn_mult;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    ctx.block = b;
    const std::string p = "backbone." + block_prefix(b) + ".";
    BlockActivations act;
    act.input = x;
    Tensor xn = layer_norm(x, params.get(p + "norm1.scale"), params.get(p + "norm1.shift"));
    Tensor next = add(x, local_attention(xn, cloud.part, params, cfg, b, &ctx, hooks));
    if (hooks && hooks->context)
      if (Tensor branch = hooks->context(xn, ctx); branch.defined()) next = add(next, branch);
    x = next;
    act.post_attention = x;
    Tensor xn2 = layer_norm(x, params.get(p + "norm2.scale"), params.get(p + "norm2.shift"));
    x = add(x, ffn(xn2, params, p + "ffn"));
    if (inst) inst->count(block_prefix(b) + ".ffn", 2ULL * n * d * hidden);
    if (hooks && hooks->after_ffn) x = hooks->after_ffn(x, ctx);
    act.post_ffn = x;
    result.blocks.push_back(std::move(act));
  }
  Tensor xo = layer_norm(x, params.get("backbone.norm_out.scale"), params.get("backbone.norm_out.shift"));
  result.logits = linear(xo, params, "head");
  if (inst) inst->count("head", 1ULL * n * d * cfg.classes);
  return result;
}

}  // namespace gemlab
