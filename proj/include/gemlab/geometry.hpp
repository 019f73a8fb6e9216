#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace gemlab {

/// Point cloud with n points: coords n×3, feats n×channels, and optional
/// labels in [0, num_classes). Unannotated clouds carry an empty label vector.
struct PointCloud {
  std::vector<double> coords;
  std::vector<double> feats;
  std::size_t channels = 0;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return coords.size() / 3; }
  bool annotated() const { return !labels.empty(); }
  std::array<double, 3> point(std::size_t i) const {
    return {coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]};
  }
  /// Throws DataError if the arrays disagree with each other or are empty.
  void validate() const;
};

PointCloud permute_points(const PointCloud& cloud, std::span<const std::size_t> perm);

void write_point_cloud(const std::string& path, const PointCloud& cloud);
PointCloud read_point_cloud(const std::string& path);

struct VoxelKey {
  std::int64_t ix = 0, iy = 0, iz = 0;
  auto operator<=>(const VoxelKey&) const = default;
};

/// floor(coord / voxel_size) per axis.
VoxelKey voxel_key(std::span<const double, 3> p, double voxel_size);
std::vector<VoxelKey> voxel_keys(const PointCloud& cloud, double voxel_size);
std::map<VoxelKey, std::vector<std::size_t>> voxelize(const PointCloud& cloud, double voxel_size);

/// Interleaves the low 21 bits of each axis, x least significant per level.
std::uint64_t morton_code(std::uint32_t x, std::uint32_t y, std::uint32_t z);

/// Codes after shifting every axis by its minimum; throws RangeError if a
/// shifted index does not fit in 21 bits.
std::vector<std::uint64_t> morton_codes(std::span<const VoxelKey> keys);

/// Point indices sorted by Morton code, ties by original index.
std::vector<std::size_t> morton_order(std::span<const VoxelKey> keys);

/// Serialization used by the backbone: Morton code of the grid key, ties
/// broken by exact coordinates (x, y, z), then by index. The result depends
/// only on the point set, not on the order points are listed in.
std::vector<std::size_t> serialize_points(const PointCloud& cloud, double grid_size);

struct PatchPartition {
  std::vector<std::size_t> order;
  std::size_t patch_size = 1;
  std::size_t num_patches = 0;
  std::vector<bool> pad_mask;  // num_patches * patch_size slots

  std::size_t size() const { return order.size(); }
  bool is_pad(std::size_t patch, std::size_t slot) const { return pad_mask[patch * patch_size + slot]; }
  std::size_t point_at(std::size_t patch, std::size_t slot) const { return order[patch * patch_size + slot]; }
  std::size_t valid_in(std::size_t patch) const;
  /// Patch id for every point, indexed by original point index.
  std::vector<std::size_t> patch_of_point() const;
};

PatchPartition partition(std::vector<std::size_t> order, std::size_t n, std::size_t patch_size);

/// For each point and each offset of a k×k×k voxel stencil, the points whose
/// voxel key equals key(point) + offset.
class NeighborIndex {
 public:
  std::size_t num_points() const { return n_; }
  std::size_t kernel() const { return k_; }
  std::size_t stencil_size() const { return k_ * k_ * k_; }
  std::span<const std::size_t> neighbors(std::size_t point, std::size_t offset) const;
  std::array<int, 3> offset_vector(std::size_t offset) const;
  std::size_t offset_id(int dx, int dy, int dz) const;
  std::size_t center_offset() const { return stencil_size() / 2; }
  std::size_t mirror(std::size_t offset) const { return stencil_size() - 1 - offset; }

 private:
  friend NeighborIndex build_neighbor_index(const PointCloud&, double, std::size_t);
  std::size_t n_ = 0;
  std::size_t k_ = 3;
  std::vector<std::size_t> start_;  // n * k^3 + 1
  std::vector<std::size_t> flat_;
};

NeighborIndex build_neighbor_index(const PointCloud& cloud, double voxel_size, std::size_t k = 3);

}  // namespace gemlab
