#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "gemlab/backbone.hpp"
#include "gemlab/geometry.hpp"

namespace gemlab::testing {

inline PointCloud random_cloud(std::size_t n, std::uint64_t seed, double extent = 1.0, std::size_t channels = 6,
                               std::size_t classes = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, extent), f(-1.0, 1.0);
  PointCloud c;
  c.channels = channels;
  c.num_classes = classes;
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) c.coords.push_back(u(rng));
    for (std::size_t k = 0; k < channels; ++k) c.feats.push_back(f(rng));
    c.labels.push_back(static_cast<int>(rng() % classes));
  }
  return c;
}

inline BackboneConfig tiny_config(std::size_t width = 16, std::size_t blocks = 2, std::size_t patch = 8) {
  BackboneConfig c;
  c.width = width;
  c.blocks = blocks;
  c.heads = 2;
  c.patch = patch;
  c.ffn_mult = 2;
  c.stage_blocks.assign(blocks, 1);
  c.grid_size = 0.05;
  c.voxel_size = 0.25;
  return c;
}

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Dense multi-head attention over all n points with a block-diagonal mask
/// (point i may see j only when group[i] == group[j]), plus m prompt slots
/// visible to everyone. Straightforward O(n²) reference.
inline std::vector<double> dense_masked_attention(std::span<const double> q, std::span<const double> k,
                                                  std::span<const double> v, std::size_t n, std::size_t d,
                                                  std::size_t heads, const std::vector<std::size_t>& group,
                                                  std::span<const double> pk = {}, std::span<const double> pv = {},
                                                  std::size_t m = 0, double prompt_offset = 0.0) {
  const std::size_t dh = d / heads;
  std::vector<double> out(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(m + n, -INFINITY);
      auto dot = [&](const double* a, const double* b) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += a[c] * b[c];
        return s / std::sqrt(static_cast<double>(dh));
      };
      for (std::size_t t = 0; t < m; ++t) logits[t] = dot(&q[i * d + h * dh], &pk[t * d + h * dh]) + prompt_offset;
      for (std::size_t j = 0; j < n; ++j)
        if (group[i] == group[j]) logits[m + j] = dot(&q[i * d + h * dh], &k[j * d + h * dh]);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t t = 0; t < m + n; ++t) {
        const double w = logits[t] / z;
        const double* row = t < m ? &pv[t * d + h * dh] : &v[(t - m) * d + h * dh];
        for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] += w * row[c];
      }
    }
  return out;
}

}  // namespace gemlab::testing
