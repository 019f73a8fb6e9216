#include "gemlab/model.hpp"

#include "gemlab/errors.hpp"

namespace gemlab {

Model::Model(BackboneConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

Model Model::initialized(const BackboneConfig& cfg, std::uint64_t seed) {
  return Model(cfg, init_backbone(cfg, seed));
}

void Model::attach(const PeftConfig& cfg, std::uint64_t seed) {
  if (peft_) throw ContractError("model already carries a '" + method_name(peft_->config().method) + "' attachment");
  peft_ = gemlab::attach(cfg, cfg_, params_, seed);
}

std::optional<Method> Model::method() const {
  if (!peft_) return std::nullopt;
  return peft_->config().method;
}

ForwardResult Model::forward(const PreparedCloud& cloud, const Instrumentation* inst) const {
  return gemlab::forward(cfg_, params_, cloud, peft_ ? &peft_->hooks() : nullptr, inst);
}

Model Model::clone() const {
  Model copy(cfg_, params_.clone());
  if (peft_) copy.peft_ = gemlab::attach(peft_->config(), cfg_, copy.params_, 0);
  return copy;
}

KeyValues Model::config_kv() const {
  KeyValues kv = cfg_.to_kv();
  if (peft_) {
    const KeyValues peft_kv = peft_->config().to_kv();
    for (const auto& [k, v] : peft_kv.values()) kv.set(k, v);
  }
  return kv;
}

std::string backbone_digest(const ParamStore& params) {
  std::uint64_t h = fnv1a64("");
  for (const auto& [name, e] : params.entries()) {
    if (!starts_with(name, "backbone.")) continue;
    std::string text = name + ":";
    for (double v : e.value.data()) text += format_double(v) + " ";
    h ^= fnv1a64(text) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return hex64(h);
}

void save_backbone(const std::string& path, const Model& model, const KeyValues& extra, const std::string& command) {
  KeyValues kv = model.config().to_kv();
  for (const auto& [k, v] : extra.values()) kv.set(k, v);
  kv.set("backbone_digest", backbone_digest(model.params()));
  save_checkpoint(path, kv, model.params(), {"backbone.", "head."}, command);
}

std::pair<Model, std::string> load_backbone(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  BackboneConfig cfg = BackboneConfig::from_kv(ck.config);
  validate_layout(ck.params, init_backbone(cfg, 0));
  if (ck.config.has("backbone_digest") && ck.config.get("backbone_digest") != backbone_digest(ck.params))
    throw ContractError(path + ": backbone weights do not match the stored digest");
  for (const auto& name : ck.params.names()) ck.params.set_frozen(name, false);
  return {Model(cfg, std::move(ck.params)), ck.config.hash()};
}

void save_peft(const std::string& path, const Model& model, const std::string& backbone_hash,
               const KeyValues& extra, const std::string& command) {
  if (!model.peft()) throw ContractError("save_peft: model has no PEFT attachment");
  KeyValues kv = model.config_kv();
  for (const auto& [k, v] : extra.values()) kv.set(k, v);
  kv.set("backbone_hash", backbone_hash);
  save_checkpoint(path, kv, model.params(), {"peft.", "head."}, command);
}

Model load_peft(const std::string& path, const Model& backbone, const std::string& backbone_hash) {
  Checkpoint ck = load_checkpoint(path);
  const std::string stored = ck.config.get_or("backbone_hash", "");
  if (stored != backbone_hash)
    throw ContractError(path + ": trained on backbone " + (stored.empty() ? std::string("<unknown>") : stored) +
                        ", given backbone " + backbone_hash);
  Model model = backbone.clone();
  model.attach(PeftConfig::from_kv(ck.config), 0);
  validate_layout(ck.params, model.params(), "peft.");
  validate_layout(ck.params, model.params(), "head.");
  model.params().load_values(ck.params, "peft.");
  model.params().load_values(ck.params, "head.");
  return model;
}

}  // namespace gemlab
