#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gemlab/geometry.hpp"

namespace gemlab {

/// Multiply-add tallies per call site ("block2.local_attn", "block2.ca.stage1").
/// Counts are computed from operand shapes at each site, never sampled.
class OpCounter {
 public:
  void add(const std::string& site, std::uint64_t multiply_adds) { tallies_[site] += multiply_adds; }
  std::uint64_t get(const std::string& site) const;
  /// Sum over sites whose name contains the fragment.
  std::uint64_t total_matching(std::string_view fragment) const;
  std::uint64_t total() const;
  void reset() { tallies_.clear(); }
  const std::map<std::string, std::uint64_t>& tallies() const { return tallies_; }
  /// `site,count` rows with a header line.
  std::string to_csv() const;

 private:
  std::map<std::string, std::uint64_t> tallies_;
};

/// Captured attention weights for one forward pass.
struct AttnDump {
  struct Matrix {
    std::size_t block = 0;
    std::size_t rows = 0, cols = 0;
    std::vector<double> weights;  // row-major
  };
  /// Stage-1 context attention: m latent tokens over all n points.
  std::vector<Matrix> latent_to_points;
  /// Stage-2 context attention: n points over m contextualized tokens.
  std::vector<Matrix> points_to_latent;
  /// Prompt tuning: for every point (row, original order) the softmax weight
  /// on each of the m prompt slots of its patch.
  std::vector<Matrix> prompt_weights;

  void clear();
};

/// Optional observers threaded through a forward pass. Null members are off.
struct Instrumentation {
  OpCounter* counter = nullptr;
  AttnDump* attention = nullptr;

  void count(const std::string& site, std::uint64_t n) const {
    if (counter) counter->add(site, n);
  }
};

/// Jensen–Shannon divergence (natural log) between two discrete distributions
/// of equal length.
double js_divergence(const std::vector<double>& p, const std::vector<double>& q);

/// Histograms point weights over a bins^3 grid spanning [lo, hi] per axis.
std::vector<double> spatial_histogram(const PointCloud& cloud, const std::vector<double>& weights,
                                      double lo, double hi, std::size_t bins);

}  // namespace gemlab
