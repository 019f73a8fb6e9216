#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "gemlab/backbone.hpp"
#include "gemlab/checkpoint.hpp"
#include "gemlab/peft.hpp"

namespace gemlab {

/// A backbone's parameters plus an optional PEFT attachment. Without an
/// attachment every parameter is trainable (pre-training).
class Model {
 public:
  Model(BackboneConfig cfg, ParamStore params);
  static Model initialized(const BackboneConfig& cfg, std::uint64_t seed);

  /// Freezes the backbone and binds a PEFT method (see gemlab::attach).
  void attach(const PeftConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const PeftAttachment* peft() const { return peft_ ? &*peft_ : nullptr; }
  PeftAttachment* peft() { return peft_ ? &*peft_ : nullptr; }
  /// Method of the attachment; nullopt while pre-training.
  std::optional<Method> method() const;

  PreparedCloud prepare(const PointCloud& cloud) const { return prepare_cloud(cloud, cfg_); }
  ForwardResult forward(const PreparedCloud& cloud, const Instrumentation* inst = nullptr) const;

  /// Independent copy with its own buffers and hooks.
  Model clone() const;

  /// backbone.* keys, plus peft.* when attached.
  KeyValues config_kv() const;

 private:
  BackboneConfig cfg_;
  ParamStore params_;
  std::optional<PeftAttachment> peft_;
};

/// Digest of every `backbone.` value, so a PEFT checkpoint can name the exact
/// weights it was trained against.
std::string backbone_digest(const ParamStore& params);

/// Backbone + head checkpoint.
void save_backbone(const std::string& path, const Model& model, const KeyValues& extra = {},
                   const std::string& command = {});
/// Returns the model and the checkpoint's config hash.
std::pair<Model, std::string> load_backbone(const std::string& path);

/// Stores only `peft.` and `head.` entries, the PEFT config and the hash of
/// the backbone checkpoint they were trained on.
void save_peft(const std::string& path, const Model& model, const std::string& backbone_hash,
               const KeyValues& extra = {}, const std::string& command = {});
/// Composes a PEFT checkpoint with a loaded backbone. Throws ContractError
/// when the checkpoint was trained on a different backbone.
Model load_peft(const std::string& path, const Model& backbone, const std::string& backbone_hash);

}  // namespace gemlab
