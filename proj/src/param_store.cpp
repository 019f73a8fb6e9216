#include "gemlab/param_store.hpp"

#include <algorithm>

#include "gemlab/errors.hpp"

namespace gemlab {

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

Tensor& ParamStore::add(const std::string& name, Tensor value, bool frozen) {
  if (name.empty()) throw ArgumentError("parameter name must be non-empty");
  if (!value.is_leaf()) throw ContractError("parameter '" + name + "' must be a leaf tensor");
  value.set_requires_grad(!frozen);
  auto [it, inserted] = entries_.emplace(name, ParamEntry{std::move(value), frozen});
  if (!inserted) throw ArgumentError("duplicate parameter name '" + name + "'");
  return it->second.value;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second.value;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second.value;
}

bool ParamStore::frozen(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second.frozen;
}

void ParamStore::set_frozen(const std::string& name, bool frozen) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  it->second.frozen = frozen;
  it->second.value.set_requires_grad(!frozen);
  if (frozen) it->second.value.zero_grad();
}

void ParamStore::set_frozen_prefix(std::string_view prefix, bool frozen) {
  for (auto& [name, entry] : entries_) {
    if (starts_with(name, prefix)) set_frozen(name, frozen);
  }
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.numel();
  return n;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_)
    if (!e.frozen) n += e.value.numel();
  return n;
}

std::size_t ParamStore::count_prefix(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (starts_with(name, prefix)) n += e.value.numel();
  return n;
}

std::vector<std::string> ParamStore::names(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_)
    if (starts_with(name, prefix)) out.push_back(name);
  return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_)
    if (!e.frozen) out.push_back(name);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.value.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, e] : entries_) out.add(name, e.value.detach_copy(), e.frozen);
  return out;
}

void ParamStore::load_values(const ParamStore& other, std::string_view prefix) {
  for (const auto& [name, e] : other.entries_) {
    if (!starts_with(name, prefix)) continue;
    Tensor& dst = get(name);
    if (dst.shape() != e.value.shape()) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_str(dst.shape()) +
                           " but source has " + shape_str(e.value.shape()));
    }
    std::ranges::copy(e.value.data(), dst.mutable_data().begin());
  }
}

}  // namespace gemlab
