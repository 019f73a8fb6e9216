#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "gemlab/errors.hpp"
#include "gemlab/geometry.hpp"
#include "gemlab/scene.hpp"
#include "support.hpp"

using namespace gemlab;
using gemlab::testing::random_cloud;

namespace {

PointCloud cloud_of(std::vector<std::array<double, 3>> pts) {
  PointCloud c;
  c.channels = 1;
  for (const auto& p : pts) {
    c.coords.insert(c.coords.end(), p.begin(), p.end());
    c.feats.push_back(0.0);
  }
  return c;
}

}  // namespace

TEST(Voxelize, SinglePointLandsInOrigin) {
  auto buckets = voxelize(cloud_of({{0.1, 0.1, 0.1}}), 1.0);
  ASSERT_EQ(buckets.size(), 1u);
  EXPECT_EQ(buckets.begin()->first, (VoxelKey{0, 0, 0}));
}

TEST(Voxelize, SeparatesPointsAcrossUnitBoundary) {
  auto buckets = voxelize(cloud_of({{0.1, 0, 0}, {1.1, 0, 0}}), 1.0);
  ASSERT_EQ(buckets.size(), 2u);
  EXPECT_EQ(buckets.at(VoxelKey{0, 0, 0}), std::vector<std::size_t>{0});
  EXPECT_EQ(buckets.at(VoxelKey{1, 0, 0}), std::vector<std::size_t>{1});
}

TEST(Voxelize, NegativeCoordinatesFloorDown) {
  auto buckets = voxelize(cloud_of({{-0.5, 0, 0}}), 1.0);
  EXPECT_EQ(buckets.begin()->first, (VoxelKey{-1, 0, 0}));
}

TEST(Voxelize, NonPositiveSizeIsArgumentError) {
  EXPECT_THROW(voxelize(cloud_of({{0, 0, 0}}), 0.0), ArgumentError);
  EXPECT_THROW(voxelize(cloud_of({{0, 0, 0}}), -1.0), ArgumentError);
}

TEST(Voxelize, EveryPointInExactlyOneBucket) {
  auto c = random_cloud(300, 4, 2.0);
  auto buckets = voxelize(c, 0.3);
  std::vector<int> seen(c.size(), 0);
  for (const auto& [key, pts] : buckets)
    for (auto i : pts) {
      ++seen[i];
      auto p = c.point(i);
      EXPECT_EQ(key.ix, static_cast<std::int64_t>(std::floor(p[0] / 0.3)));
      EXPECT_EQ(key.iy, static_cast<std::int64_t>(std::floor(p[1] / 0.3)));
      EXPECT_EQ(key.iz, static_cast<std::int64_t>(std::floor(p[2] / 0.3)));
    }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Morton, HandInterleavedCodes) {
  EXPECT_EQ(morton_code(0, 0, 0), 0u);
  EXPECT_EQ(morton_code(1, 1, 1), 7u);
  EXPECT_EQ(morton_code(1, 0, 0), 1u);
  EXPECT_EQ(morton_code(0, 1, 0), 2u);
  EXPECT_EQ(morton_code(0, 0, 1), 4u);
  EXPECT_EQ(morton_code(2, 0, 0), 8u);
}

TEST(Morton, XNeighbourSortsBeforeYNeighbour) {
  std::vector<VoxelKey> keys{{0, 1, 0}, {1, 0, 0}};
  EXPECT_EQ(morton_order(keys), (std::vector<std::size_t>{1, 0}));
}

TEST(Morton, TiesKeepOriginalOrder) {
  std::vector<VoxelKey> keys{{3, 3, 3}, {0, 0, 0}, {3, 3, 3}, {0, 0, 0}};
  EXPECT_EQ(morton_order(keys), (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Morton, OutOfRangeIndexIsRangeError) {
  std::vector<VoxelKey> keys{{0, 0, 0}, {std::int64_t{1} << 21, 0, 0}};
  EXPECT_THROW(morton_codes(keys), RangeError);
}

TEST(Morton, OrderIsAPermutation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = random_cloud(200, seed, 3.0);
    auto keys = voxel_keys(c, 0.1);
    auto order = morton_order(keys);
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> iota(c.size());
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(order, iota);
  }
}

TEST(Partition, ExactMultipleHasNoPadding) {
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), 0);
  auto part = partition(order, 10, 5);
  EXPECT_EQ(part.num_patches, 2u);
  EXPECT_EQ(std::count(part.pad_mask.begin(), part.pad_mask.end(), true), 0);
}

TEST(Partition, RemainderPadsOnlyTheLastPatch) {
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), 0);
  auto part = partition(order, 10, 4);
  EXPECT_EQ(part.num_patches, 3u);
  EXPECT_EQ(part.valid_in(0), 4u);
  EXPECT_EQ(part.valid_in(1), 4u);
  EXPECT_EQ(part.valid_in(2), 2u);
  EXPECT_TRUE(part.is_pad(2, 2));
  EXPECT_TRUE(part.is_pad(2, 3));
  EXPECT_FALSE(part.is_pad(2, 1));
}

TEST(Partition, SinglePointInHugePatch) {
  auto part = partition({0}, 1, 1024);
  EXPECT_EQ(part.num_patches, 1u);
  EXPECT_EQ(std::count(part.pad_mask.begin(), part.pad_mask.end(), true), 1023);
}

TEST(Partition, EveryPointInExactlyOnePatch) {
  auto c = random_cloud(77, 3);
  auto part = partition(serialize_points(c, 0.05), c.size(), 8);
  auto patch_of = part.patch_of_point();
  std::vector<int> seen(c.size(), 0);
  for (std::size_t b = 0; b < part.num_patches; ++b)
    for (std::size_t s = 0; s < part.patch_size; ++s)
      if (!part.is_pad(b, s)) {
        ++seen[part.point_at(b, s)];
        EXPECT_EQ(patch_of[part.point_at(b, s)], b);
      }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Partition, ZeroPatchSizeRejected) {
  EXPECT_THROW(partition({0}, 1, 0), ArgumentError);
}

// Mean pairwise distance inside patches under Morton order beats a random
// permutation on every seed.
TEST(Serialization, MortonPatchesAreSpatiallyLocal) {
  auto mean_intra = [](const PointCloud& c, const std::vector<std::size_t>& order, std::size_t p) {
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t s = 0; s < order.size(); s += p)
      for (std::size_t i = s; i < std::min(order.size(), s + p); ++i)
        for (std::size_t j = i + 1; j < std::min(order.size(), s + p); ++j) {
          auto a = c.point(order[i]), b = c.point(order[j]);
          total += std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
          ++pairs;
        }
    return total / static_cast<double>(pairs);
  };
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    auto c = random_cloud(256, seed);
    auto morton = serialize_points(c, 0.02);
    std::vector<std::size_t> shuffled(c.size());
    std::iota(shuffled.begin(), shuffled.end(), 0);
    std::mt19937_64 rng(seed + 1000);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_LT(mean_intra(c, morton, 16), mean_intra(c, shuffled, 16)) << "seed " << seed;
  }
}

TEST(Serialization, DependsOnlyOnThePointSet) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = random_cloud(120, seed);
    // duplicate coordinates exercise the tie-break
    for (int a = 0; a < 3; ++a) c.coords[3 * 5 + a] = c.coords[3 * 9 + a];
    std::vector<std::size_t> perm(c.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto shuffled = permute_points(c, perm);
    auto a = serialize_points(c, 0.05), b = serialize_points(shuffled, 0.05);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(c.point(a[i]), shuffled.point(b[i]));
  }
}

TEST(NeighborIndex, IsolatedPointSeesOnlyItself) {
  auto nbr = build_neighbor_index(cloud_of({{0.5, 0.5, 0.5}}), 1.0);
  for (std::size_t o = 0; o < nbr.stencil_size(); ++o) {
    if (o == nbr.center_offset()) {
      ASSERT_EQ(nbr.neighbors(0, o).size(), 1u);
      EXPECT_EQ(nbr.neighbors(0, o)[0], 0u);
    } else {
      EXPECT_TRUE(nbr.neighbors(0, o).empty());
    }
  }
}

TEST(NeighborIndex, SharedVoxelListsBothPoints) {
  auto nbr = build_neighbor_index(cloud_of({{0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}}), 1.0);
  for (std::size_t i = 0; i < 2; ++i) {
    auto list = nbr.neighbors(i, nbr.center_offset());
    EXPECT_EQ(std::vector<std::size_t>(list.begin(), list.end()), (std::vector<std::size_t>{0, 1}));
  }
}

TEST(NeighborIndex, AdjacentVoxelsAlongX) {
  auto nbr = build_neighbor_index(cloud_of({{0.5, 0.5, 0.5}, {1.5, 0.5, 0.5}}), 1.0);
  auto fwd = nbr.neighbors(0, nbr.offset_id(1, 0, 0));
  auto back = nbr.neighbors(1, nbr.offset_id(-1, 0, 0));
  ASSERT_EQ(fwd.size(), 1u);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(fwd[0], 1u);
  EXPECT_EQ(back[0], 0u);
  EXPECT_EQ(nbr.offset_vector(nbr.offset_id(1, 0, 0)), (std::array<int, 3>{1, 0, 0}));
}

TEST(NeighborIndex, EvenKernelRejected) {
  EXPECT_THROW(build_neighbor_index(cloud_of({{0, 0, 0}}), 1.0, 2), ArgumentError);
}

TEST(NeighborIndex, SymmetricAndBoundedOnRandomClouds) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto c = random_cloud(seed < 3 ? 500 : 200, seed, 1.5);
    const double vs = 0.2;
    auto nbr = build_neighbor_index(c, vs);
    auto keys = voxel_keys(c, vs);
    for (std::size_t i = 0; i < c.size(); ++i) {
      std::size_t reach = 0;
      EXPECT_TRUE(std::ranges::count(nbr.neighbors(i, nbr.center_offset()), i) == 1);
      for (std::size_t o = 0; o < nbr.stencil_size(); ++o) {
        auto list = nbr.neighbors(i, o);
        reach += list.size();
        auto off = nbr.offset_vector(o);
        for (std::size_t j : list) {
          EXPECT_EQ(std::ranges::count(nbr.neighbors(j, nbr.mirror(o)), i), 1);
          EXPECT_EQ(keys[j].ix, keys[i].ix + off[0]);
          EXPECT_EQ(keys[j].iy, keys[i].iy + off[1]);
          EXPECT_EQ(keys[j].iz, keys[i].iz + off[2]);
        }
      }
      EXPECT_LE(reach, c.size());
    }
    // brute force: every pair within the stencil is listed
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = 0; j < c.size(); ++j) {
        auto dx = keys[j].ix - keys[i].ix, dy = keys[j].iy - keys[i].iy, dz = keys[j].iz - keys[i].iz;
        if (std::abs(dx) > 1 || std::abs(dy) > 1 || std::abs(dz) > 1) continue;
        auto list = nbr.neighbors(i, nbr.offset_id(static_cast<int>(dx), static_cast<int>(dy), static_cast<int>(dz)));
        EXPECT_EQ(std::ranges::count(list, j), 1);
      }
  }
}

TEST(PointCloudIo, RoundTripIsExact) {
  auto c = random_cloud(20, 9);
  c.labels[3] = 2;
  auto path = (std::filesystem::temp_directory_path() / "gemlab_io_test.pc").string();
  write_point_cloud(path, c);
  auto r = read_point_cloud(path);
  EXPECT_EQ(r.coords, c.coords);
  EXPECT_EQ(r.feats, c.feats);
  EXPECT_EQ(r.labels, c.labels);
  EXPECT_EQ(r.num_classes, c.num_classes);
  std::filesystem::remove(path);
}

TEST(PointCloudIo, UnannotatedCloudKeepsNoLabels) {
  auto c = random_cloud(5, 1);
  c.labels.clear();
  auto path = (std::filesystem::temp_directory_path() / "gemlab_io_unlabelled.pc").string();
  write_point_cloud(path, c);
  EXPECT_FALSE(read_point_cloud(path).annotated());
  std::filesystem::remove(path);
}

TEST(Scene, FloorOnlySpecLiesOnTheFloor) {
  SceneSpec spec;
  spec.classes = {Primitive::Floor};
  spec.points_per_class = {100};
  spec.noise_sigma = 0.01;
  auto c = generate_scene(3, spec);
  ASSERT_EQ(c.size(), 100u);
  EXPECT_EQ(c.channels, 6u);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c.labels[i], 0);
    EXPECT_LT(std::abs(c.coords[3 * i + 2]), 0.06);
  }
}

TEST(Scene, SameSeedIsBitwiseIdentical) {
  auto spec = target_scene_spec();
  auto a = generate_scene(42, spec), b = generate_scene(42, spec);
  EXPECT_EQ(a.coords, b.coords);
  EXPECT_EQ(a.feats, b.feats);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(generate_scene(43, spec).coords, a.coords);
}

TEST(Scene, LabelHistogramMatchesBudgets) {
  SceneSpec spec;
  spec.classes = {Primitive::Floor, Primitive::Wall, Primitive::Box};
  spec.points_per_class = {100, 100, 100};
  auto c = generate_scene(1, spec);
  std::vector<int> hist(3, 0);
  for (int l : c.labels) ++hist[l];
  EXPECT_EQ(hist, (std::vector<int>{100, 100, 100}));
}

TEST(Scene, EmptySpecIsArgumentError) {
  EXPECT_THROW(generate_scene(0, SceneSpec{}), ArgumentError);
}

TEST(Scene, SpecRoundTripsThroughText) {
  auto spec = target_scene_spec();
  auto back = SceneSpec::from_kv(KeyValues::parse(spec.to_kv().canonical()));
  EXPECT_EQ(back.to_kv().canonical(), spec.to_kv().canonical());
}

TEST(Scene, DatasetRoundTripsThroughDirectory) {
  auto data = generate_dataset(source_scene_spec(8), 3, 5);
  auto dir = (std::filesystem::temp_directory_path() / "gemlab_dataset_test").string();
  std::filesystem::remove_all(dir);
  write_dataset(dir, data, "unit");
  auto back = read_dataset(dir);
  ASSERT_EQ(back.clouds.size(), 3u);
  EXPECT_EQ(back.spec_hash, data.spec_hash);
  EXPECT_EQ(back.seeds, data.seeds);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.clouds[i].coords, data.clouds[i].coords);
  std::filesystem::remove_all(dir);
}
