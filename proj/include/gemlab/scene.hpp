#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gemlab/config_text.hpp"
#include "gemlab/geometry.hpp"

namespace gemlab {

enum class Primitive { Floor, Wall, Box, Sphere };

Primitive parse_primitive(const std::string& name);
std::string primitive_name(Primitive p);

/// Recipe for one synthetic room. Each listed primitive gets its own point
/// budget and maps to a class label; several primitives may share a label.
struct SceneSpec {
  std::vector<Primitive> classes;
  std::vector<std::size_t> points_per_class;
  std::vector<int> labels;  // defaults to 0..k-1
  std::size_t num_classes = 0;
  double noise_sigma = 0.01;
  double scale = 1.0;
  double room_size = 2.0;
  std::uint64_t seed = 0;

  /// Keys: classes, points_per_class, noise_sigma, seed; optional labels,
  /// num_classes, scale, room_size.
  static SceneSpec from_kv(const KeyValues& kv);
  KeyValues to_kv() const;
  void validate() const;
};

/// Source-domain recipe: floor, wall, box at unit scale with sigma 0.01.
SceneSpec source_scene_spec(std::size_t points_per_class = 48);
/// Shifted target: adds spheres labelled as the box class, sigma 0.03, scale 1.5.
SceneSpec target_scene_spec(std::size_t points_per_class = 36);

/// Deterministic in (seed, spec). Features are the coordinates followed by
/// the absolute components of a PCA normal estimate over 8 nearest neighbours.
PointCloud generate_scene(std::uint64_t seed, const SceneSpec& spec);

/// Seed of the i-th scene of a dataset generated with a master seed.
std::uint64_t scene_seed(std::uint64_t master_seed, std::size_t index);

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> files;
  std::vector<std::uint64_t> seeds;
  std::string spec_hash;
};

Dataset generate_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t master_seed);
/// Writes scene_NNNN.pc files plus manifest.txt into dir.
void write_dataset(const std::string& dir, const Dataset& data, const std::string& command = {});
Dataset read_dataset(const std::string& dir);

}  // namespace gemlab
