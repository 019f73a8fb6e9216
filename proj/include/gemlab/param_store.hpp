#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gemlab/tensor.hpp"

namespace gemlab {

struct ParamEntry {
  Tensor value;
  bool frozen = false;
};

/// Named parameters keyed by dotted name ("backbone.block3.attn.q.weight").
/// A frozen entry has requires_grad off, so it never receives a gradient.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value, bool frozen = false);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  bool frozen(const std::string& name) const;
  void set_frozen(const std::string& name, bool frozen);
  /// Applies set_frozen to every entry whose name starts with prefix.
  void set_frozen_prefix(std::string_view prefix, bool frozen);

  std::size_t total_count() const;
  std::size_t trainable_count() const;
  std::size_t count_prefix(std::string_view prefix) const;
  std::vector<std::string> names(std::string_view prefix = {}) const;
  std::vector<std::string> trainable_names() const;

  void zero_grad();
  /// Deep copy; the clone shares no buffers with this store.
  ParamStore clone() const;
  /// Copies values of every entry in other (names and shapes must match).
  void load_values(const ParamStore& other, std::string_view prefix = {});

  const std::map<std::string, ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, ParamEntry> entries_;
};

bool starts_with(std::string_view s, std::string_view prefix);
bool ends_with(std::string_view s, std::string_view suffix);

}  // namespace gemlab
