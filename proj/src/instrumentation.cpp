#include "gemlab/instrumentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gemlab/errors.hpp"

namespace gemlab {

std::uint64_t OpCounter::get(const std::string& site) const {
  auto it = tallies_.find(site);
  return it == tallies_.end() ? 0 : it->second;
}

std::uint64_t OpCounter::total_matching(std::string_view fragment) const {
  std::uint64_t s = 0;
  for (const auto& [site, n] : tallies_)
    if (site.find(fragment) != std::string::npos) s += n;
  return s;
}

std::uint64_t OpCounter::total() const {
  std::uint64_t s = 0;
  for (const auto& [site, n] : tallies_) s += n;
  return s;
}

std::string OpCounter::to_csv() const {
  std::string out = "site,count\n";
  for (const auto& [site, n] : tallies_) out += site + "," + std::to_string(n) + "\n";
  return out;
}

void AttnDump::clear() {
  latent_to_points.clear();
  points_to_latent.clear();
  prompt_weights.clear();
}

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw DimensionError("js_divergence: distributions differ in length");
  const double sp = std::accumulate(p.begin(), p.end(), 0.0);
  const double sq = std::accumulate(q.begin(), q.end(), 0.0);
  if (!(sp > 0.0) || !(sq > 0.0)) throw NumericError("js_divergence: empty distribution");
  auto kl_term = [](double a, double mid) { return a > 0.0 ? a * std::log(a / mid) : 0.0; };
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw NumericError("js_divergence: negative mass");
    const double a = p[i] / sp, b = q[i] / sq, mid = 0.5 * (a + b);
    js += 0.5 * kl_term(a, mid) + 0.5 * kl_term(b, mid);
  }
  return std::max(0.0, js);
}

std::vector<double> spatial_histogram(const PointCloud& cloud, const std::vector<double>& weights, double lo,
                                      double hi, std::size_t bins) {
  if (weights.size() != cloud.size())
    throw DimensionError("spatial_histogram: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(cloud.size()) + " points");
  if (bins == 0 || !(hi > lo)) throw ArgumentError("spatial_histogram: need bins > 0 and hi > lo");
  std::vector<double> h(bins * bins * bins, 0.0);
  auto cell = [&](double v) {
    auto c = static_cast<long long>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
    return static_cast<std::size_t>(std::clamp<long long>(c, 0, static_cast<long long>(bins) - 1));
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    auto pt = cloud.point(i);
    h[(cell(pt[0]) * bins + cell(pt[1])) * bins + cell(pt[2])] += weights[i];
  }
  return h;
}

}  // namespace gemlab
