#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "gemlab/config_text.hpp"
#include "gemlab/param_store.hpp"

namespace gemlab {

/// Flat text checkpoint:
///
///   #gemlab-checkpoint 1
///   #config
///   key=value              (sorted, canonical)
///   #end-config
///   #command <argv>
///   #config-hash <16 hex digits>
///   <name>\t<d0,d1,..>\t<0|1>
///   <space-separated values, shortest round-trip decimal>
///   ...
struct Checkpoint {
  KeyValues config;
  std::string command;
  ParamStore params;
};

/// Writes every entry whose name starts with one of the prefixes (all entries
/// when prefixes is empty).
void write_checkpoint(std::ostream& out, const KeyValues& config, const ParamStore& params,
                      const std::vector<std::string>& prefixes = {},
                      const std::string& command = {});
void save_checkpoint(const std::string& path, const KeyValues& config, const ParamStore& params,
                     const std::vector<std::string>& prefixes = {},
                     const std::string& command = {});

Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::string& path);

/// Throws ContractError unless loaded has exactly the names and shapes that
/// expected has under the given prefix.
void validate_layout(const ParamStore& loaded, const ParamStore& expected,
                     std::string_view prefix = {});

}  // namespace gemlab
