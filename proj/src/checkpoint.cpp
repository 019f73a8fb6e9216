#include "gemlab/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "gemlab/errors.hpp"

namespace gemlab {

namespace {

bool selected(const std::string& name, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  for (const auto& p : prefixes)
    if (starts_with(name, p)) return true;
  return false;
}

}  // namespace

void write_checkpoint(std::ostream& out, const KeyValues& config, const ParamStore& params,
                      const std::vector<std::string>& prefixes, const std::string& command) {
  out << "#gemlab-checkpoint 1\n#config\n" << config.canonical() << "#end-config\n";
  out << "#command " << command << "\n";
  out << "#config-hash " << config.hash() << "\n";
  for (const auto& [name, entry] : params.entries()) {
    if (!selected(name, prefixes)) continue;
    const auto& shape = entry.value.shape();
    out << name << '\t';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
    out << '\t' << (entry.frozen ? 1 : 0) << '\n';
    auto data = entry.value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (i) out << ' ';
      out << format_double(data[i]);
    }
    out << '\n';
  }
}

void save_checkpoint(const std::string& path, const KeyValues& config, const ParamStore& params,
                     const std::vector<std::string>& prefixes, const std::string& command) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, config, params, prefixes, command);
  if (!out) throw ArgumentError("error writing checkpoint '" + path + "'");
}

Checkpoint read_checkpoint(std::istream& in) {
  Checkpoint ck;
  std::string line;
  if (!std::getline(in, line) || line != "#gemlab-checkpoint 1")
    throw DataError("not a gemlab checkpoint (bad magic line)");
  if (!std::getline(in, line) || line != "#config") throw DataError("checkpoint: missing #config");
  std::string cfg_text;
  while (true) {
    if (!std::getline(in, line)) throw DataError("checkpoint: unterminated config block");
    if (line == "#end-config") break;
    cfg_text += line + "\n";
  }
  ck.config = KeyValues::parse(cfg_text);
  std::string stored_hash;
  while (in.peek() == '#') {
    std::getline(in, line);
    if (starts_with(line, "#command ")) ck.command = line.substr(9);
    else if (starts_with(line, "#config-hash ")) stored_hash = line.substr(13);
  }
  if (!stored_hash.empty() && stored_hash != ck.config.hash())
    throw DataError("checkpoint config hash mismatch: stored " + stored_hash + ", computed " +
                    ck.config.hash());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() != 3) throw DataError("checkpoint: bad record header '" + line + "'");
    Shape shape;
    for (const auto& d : split(fields[1], ',')) {
      auto v = parse_int(d);
      if (v <= 0) throw DataError("checkpoint: non-positive dimension in '" + line + "'");
      shape.push_back(static_cast<std::size_t>(v));
    }
    bool frozen = parse_int(fields[2]) != 0;
    std::string values_line;
    if (!std::getline(in, values_line)) throw DataError("checkpoint: missing values for " + fields[0]);
    std::vector<double> values;
    values.reserve(numel_of(shape));
    std::istringstream vs(values_line);
    std::string tok;
    while (vs >> tok) values.push_back(parse_double(tok));
    if (values.size() != numel_of(shape))
      throw DataError("checkpoint: parameter '" + fields[0] + "' has " +
                      std::to_string(values.size()) + " values, shape " + shape_str(shape));
    ck.params.add(fields[0], Tensor::from(shape, std::move(values)), frozen);
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open checkpoint '" + path + "'");
  try {
    return read_checkpoint(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void validate_layout(const ParamStore& loaded, const ParamStore& expected, std::string_view prefix) {
  auto got = loaded.names(prefix);
  auto want = expected.names(prefix);
  if (got != want) {
    std::string missing, extra;
    for (const auto& n : want)
      if (!loaded.contains(n)) missing += " " + n;
    for (const auto& n : got)
      if (!expected.contains(n)) extra += " " + n;
    throw ContractError("checkpoint parameter set mismatch; missing:" +
                        (missing.empty() ? std::string(" none") : missing) +
                        "; unexpected:" + (extra.empty() ? std::string(" none") : extra));
  }
  for (const auto& n : want) {
    if (loaded.get(n).shape() != expected.get(n).shape())
      throw ContractError("checkpoint parameter '" + n + "' has shape " +
                          shape_str(loaded.get(n).shape()) + ", expected " +
                          shape_str(expected.get(n).shape()));
  }
}

}  // namespace gemlab
