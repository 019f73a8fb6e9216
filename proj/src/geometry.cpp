#include "gemlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gemlab/config_text.hpp"
#include "gemlab/errors.hpp"

namespace gemlab {

void PointCloud::validate() const {
  const std::size_t n = size();
  if (n == 0 || coords.size() % 3 != 0) throw DataError("point cloud must have at least one point");
  if (feats.size() != n * channels)
    throw DataError("point cloud has " + std::to_string(feats.size()) + " feature values for " +
                    std::to_string(n) + " points x " + std::to_string(channels) + " channels");
  for (double c : coords)
    if (!std::isfinite(c)) throw DataError("point cloud has non-finite coordinates");
  if (!labels.empty()) {
    if (labels.size() != n) throw DataError("label count does not match point count");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
        throw DataError("label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  }
}

PointCloud permute_points(const PointCloud& cloud, std::span<const std::size_t> perm) {
  PointCloud out;
  out.channels = cloud.channels;
  out.num_classes = cloud.num_classes;
  const std::size_t c = cloud.channels;
  for (std::size_t i : perm) {
    out.coords.insert(out.coords.end(), cloud.coords.begin() + 3 * i, cloud.coords.begin() + 3 * i + 3);
    out.feats.insert(out.feats.end(), cloud.feats.begin() + c * i, cloud.feats.begin() + c * (i + 1));
    if (cloud.annotated()) out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

void write_point_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write point cloud '" + path + "'");
  const std::size_t n = cloud.size(), c = cloud.channels;
  out << "#points " << n << " channels " << c << " classes " << cloud.num_classes << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) out << format_double(cloud.coords[3 * i + a]) << ' ';
    for (std::size_t j = 0; j < c; ++j) out << format_double(cloud.feats[c * i + j]) << ' ';
    out << (cloud.annotated() ? cloud.labels[i] : -1) << '\n';
  }
}

PointCloud read_point_cloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open point cloud '" + path + "'");
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string tag_points, tag_channels, tag_classes;
  long long n = 0, c = 0, classes = 0;
  hs >> tag_points >> n >> tag_channels >> c >> tag_classes >> classes;
  if (!hs || tag_points != "#points" || tag_channels != "channels" || tag_classes != "classes" ||
      n <= 0 || c < 0 || classes < 0)
    throw DataError(path + ": bad header '" + header + "'");
  PointCloud cloud;
  cloud.channels = static_cast<std::size_t>(c);
  cloud.num_classes = static_cast<std::size_t>(classes);
  std::vector<int> labels;
  std::string line;
  std::size_t read = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    std::vector<std::string> toks;
    while (ls >> tok) toks.push_back(tok);
    if (toks.size() != 3 + cloud.channels + 1)
      throw DataError(path + ": line " + std::to_string(read + 2) + " has " +
                      std::to_string(toks.size()) + " fields");
    for (std::size_t a = 0; a < 3; ++a) cloud.coords.push_back(parse_double(toks[a]));
    for (std::size_t j = 0; j < cloud.channels; ++j) cloud.feats.push_back(parse_double(toks[3 + j]));
    labels.push_back(static_cast<int>(parse_int(toks.back())));
    ++read;
  }
  if (read != static_cast<std::size_t>(n))
    throw DataError(path + ": header declares " + std::to_string(n) + " points, found " +
                    std::to_string(read));
  bool any_unlabeled = std::ranges::any_of(labels, [](int l) { return l == -1; });
  bool all_unlabeled = std::ranges::all_of(labels, [](int l) { return l == -1; });
  if (any_unlabeled && !all_unlabeled) throw DataError(path + ": mixes labeled and unlabeled points");
  if (!all_unlabeled) cloud.labels = std::move(labels);
  cloud.validate();
  return cloud;
}

VoxelKey voxel_key(std::span<const double, 3> p, double voxel_size) {
  return {static_cast<std::int64_t>(std::floor(p[0] / voxel_size)),
          static_cast<std::int64_t>(std::floor(p[1] / voxel_size)),
          static_cast<std::int64_t>(std::floor(p[2] / voxel_size))};
}

std::vector<VoxelKey> voxel_keys(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) throw ArgumentError("voxel_size must be positive");
  std::vector<VoxelKey> keys(cloud.size());
  for (std::size_t i = 0; i < keys.size(); ++i)
    keys[i] = voxel_key(std::span<const double, 3>(cloud.coords.data() + 3 * i, 3), voxel_size);
  return keys;
}

std::map<VoxelKey, std::vector<std::size_t>> voxelize(const PointCloud& cloud, double voxel_size) {
  auto keys = voxel_keys(cloud, voxel_size);
  std::map<VoxelKey, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < keys.size(); ++i) buckets[keys[i]].push_back(i);
  return buckets;
}

std::uint64_t morton_code(std::uint32_t x, std::uint32_t y, std::uint32_t z) {
  auto spread = [](std::uint64_t v) {
    v &= 0x1fffff;
    v = (v | (v << 32)) & 0x1f00000000ffffULL;
    v = (v | (v << 16)) & 0x1f0000ff0000ffULL;
    v = (v | (v << 8)) & 0x100f00f00f00f00fULL;
    v = (v | (v << 4)) & 0x10c30c30c30c30c3ULL;
    v = (v | (v << 2)) & 0x1249249249249249ULL;
    return v;
  };
  return spread(x) | (spread(y) << 1) | (spread(z) << 2);
}

std::vector<std::uint64_t> morton_codes(std::span<const VoxelKey> keys) {
  std::vector<std::uint64_t> codes(keys.size());
  if (keys.empty()) return codes;
  VoxelKey lo = keys[0];
  for (const auto& k : keys) {
    lo.ix = std::min(lo.ix, k.ix);
    lo.iy = std::min(lo.iy, k.iy);
    lo.iz = std::min(lo.iz, k.iz);
  }
  constexpr std::int64_t kLimit = std::int64_t{1} << 21;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    std::int64_t x = keys[i].ix - lo.ix, y = keys[i].iy - lo.iy, z = keys[i].iz - lo.iz;
    if (x >= kLimit || y >= kLimit || z >= kLimit)
      throw RangeError("voxel index span exceeds 21 bits at point " + std::to_string(i));
    codes[i] = morton_code(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y),
                           static_cast<std::uint32_t>(z));
  }
  return codes;
}

std::vector<std::size_t> morton_order(std::span<const VoxelKey> keys) {
  auto codes = morton_codes(keys);
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return codes[a] < codes[b]; });
  return order;
}

std::vector<std::size_t> serialize_points(const PointCloud& cloud, double grid_size) {
  auto keys = voxel_keys(cloud, grid_size);
  auto codes = morton_codes(keys);
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& xyz = cloud.coords;
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) {
    if (codes[a] != codes[b]) return codes[a] < codes[b];
    for (std::size_t ax = 0; ax < 3; ++ax)
      if (xyz[3 * a + ax] != xyz[3 * b + ax]) return xyz[3 * a + ax] < xyz[3 * b + ax];
    return a < b;
  });
  return order;
}

std::size_t PatchPartition::valid_in(std::size_t patch) const {
  std::size_t begin = patch * patch_size;
  return begin >= order.size() ? 0 : std::min(patch_size, order.size() - begin);
}

std::vector<std::size_t> PatchPartition::patch_of_point() const {
  std::vector<std::size_t> out(order.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) out[order[pos]] = pos / patch_size;
  return out;
}

PatchPartition partition(std::vector<std::size_t> order, std::size_t n, std::size_t patch_size) {
  if (patch_size == 0) throw ArgumentError("patch size must be at least 1");
  if (order.size() != n)
    throw ContractError("ordering has " + std::to_string(order.size()) + " entries for n=" +
                        std::to_string(n));
  PatchPartition part;
  part.patch_size = patch_size;
  part.num_patches = (n + patch_size - 1) / patch_size;
  part.pad_mask.assign(part.num_patches * patch_size, false);
  for (std::size_t s = n; s < part.pad_mask.size(); ++s) part.pad_mask[s] = true;
  part.order = std::move(order);
  return part;
}

std::span<const std::size_t> NeighborIndex::neighbors(std::size_t point, std::size_t offset) const {
  const std::size_t slot = point * stencil_size() + offset;
  return std::span<const std::size_t>(flat_).subspan(start_[slot], start_[slot + 1] - start_[slot]);
}

std::array<int, 3> NeighborIndex::offset_vector(std::size_t offset) const {
  const int k = static_cast<int>(k_), r = (k - 1) / 2;
  const int o = static_cast<int>(offset);
  return {o / (k * k) - r, (o / k) % k - r, o % k - r};
}

std::size_t NeighborIndex::offset_id(int dx, int dy, int dz) const {
  const int k = static_cast<int>(k_), r = (k - 1) / 2;
  return static_cast<std::size_t>(((dx + r) * k + (dy + r)) * k + (dz + r));
}

NeighborIndex build_neighbor_index(const PointCloud& cloud, double voxel_size, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ArgumentError("stencil size k must be odd, got " + std::to_string(k));
  auto buckets = voxelize(cloud, voxel_size);
  auto keys = voxel_keys(cloud, voxel_size);
  NeighborIndex index;
  index.n_ = cloud.size();
  index.k_ = k;
  const std::size_t stencil = k * k * k;
  const int r = static_cast<int>(k - 1) / 2;
  index.start_.reserve(index.n_ * stencil + 1);
  index.start_.push_back(0);
  for (std::size_t i = 0; i < index.n_; ++i) {
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz) {
          VoxelKey q{keys[i].ix + dx, keys[i].iy + dy, keys[i].iz + dz};
          if (auto it = buckets.find(q); it != buckets.end())
            index.flat_.insert(index.flat_.end(), it->second.begin(), it->second.end());
          index.start_.push_back(index.flat_.size());
        }
  }
  return index;
}

}  // namespace gemlab
