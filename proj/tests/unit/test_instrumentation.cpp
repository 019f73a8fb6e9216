#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "gemlab/errors.hpp"
#include "gemlab/profile.hpp"
#include "support.hpp"

using namespace gemlab;
using gemlab::testing::random_cloud;
using gemlab::testing::random_values;
using gemlab::testing::tiny_config;

namespace {

Model attached(Method m, std::size_t tokens = 2, const BackboneConfig& cfg = tiny_config(16, 2, 8)) {
  auto model = Model::initialized(cfg, 1);
  PeftConfig p;
  p.method = m;
  p.rank = 4;
  p.tokens = tokens;
  model.attach(p, 2);
  return model;
}

// The cloud plus a copy shifted far along x: twice the points at the same density.
PointCloud doubled(const PointCloud& c, double shift) {
  PointCloud out = c;
  for (std::size_t i = 0; i < c.size(); ++i) {
    out.coords.insert(out.coords.end(), {c.coords[3 * i] + shift, c.coords[3 * i + 1], c.coords[3 * i + 2]});
    out.feats.insert(out.feats.end(), c.feats.begin() + i * c.channels, c.feats.begin() + (i + 1) * c.channels);
    out.labels.push_back(c.labels[i]);
  }
  return out;
}

}  // namespace

TEST(OpCounter, TalliesAndCsv) {
  OpCounter c;
  c.add("block0.local_attn", 10);
  c.add("block0.ca.stage1", 5);
  c.add("block0.ca.stage1", 5);
  c.add("block1.ca.stage2", 7);
  EXPECT_EQ(c.get("block0.ca.stage1"), 10u);
  EXPECT_EQ(c.get("missing"), 0u);
  EXPECT_EQ(c.total_matching(".ca."), 17u);
  EXPECT_EQ(c.total(), 27u);
  EXPECT_EQ(c.to_csv(), "site,count\nblock0.ca.stage1,10\nblock0.local_attn,10\nblock1.ca.stage2,7\n");
  c.reset();
  EXPECT_EQ(c.total(), 0u);
}

TEST(CountPass, LocalAttentionScalesWithPatchSize) {
  auto cloud = random_cloud(96, 1);
  auto at = [&](std::size_t p) {
    auto model = attached(Method::Linear, 1, tiny_config(16, 2, p));
    return static_cast<double>(count_pass(model, cloud).total_matching("local_attn"));
  };
  const double ratio = at(16) / at(8);
  EXPECT_GE(ratio, 1.98);
  EXPECT_LE(ratio, 2.02);
}

TEST(CountPass, ContextAdapterScalesLinearlyInPoints) {
  auto model = attached(Method::Gem, 4);
  auto a = count_pass(model, random_cloud(100, 1));
  auto b = count_pass(model, random_cloud(200, 2));
  const double ratio = static_cast<double>(b.total_matching(".ca.")) / a.total_matching(".ca.");
  EXPECT_GE(ratio, 1.98);
  EXPECT_LE(ratio, 2.02);
  EXPECT_GT(a.get("block0.ca.stage1"), 0u);
  EXPECT_GT(a.get("block1.ca.stage2"), 0u);
}

TEST(CountPass, SpatialAdapterScalesLinearlyAtFixedDensity) {
  auto model = attached(Method::GemSaOnly);
  auto cloud = random_cloud(128, 3);
  auto a = count_pass(model, cloud);
  auto b = count_pass(model, doubled(cloud, 10.0));
  EXPECT_EQ(b.get("sa"), 2 * a.get("sa"));
}

TEST(Instrumentation, CountersAndDumpsAreTransparent) {
  for (Method m : {Method::Gem, Method::Prompt, Method::Lora, Method::Adapter}) {
    auto model = attached(m);
    auto cloud = random_cloud(50, 2);
    auto pc = model.prepare(cloud);
    auto plain = model.forward(pc).logits;
    OpCounter counter;
    AttnDump dump;
    Instrumentation inst{&counter, &dump};
    auto observed = model.forward(pc, &inst).logits;
    ASSERT_EQ(plain.numel(), observed.numel());
    EXPECT_EQ(std::memcmp(plain.data().data(), observed.data().data(), plain.numel() * sizeof(double)), 0)
        << method_name(m);
    EXPECT_GT(counter.total(), 0u);
  }
}

TEST(AttnDump, StageOneRowsSumToOne) {
  auto model = attached(Method::Gem, 3);
  auto dump = capture_attention(model, random_cloud(70, 4));
  ASSERT_EQ(dump.latent_to_points.size(), 2u);
  for (const auto& mtx : dump.latent_to_points) {
    EXPECT_EQ(mtx.rows, 3u);
    EXPECT_EQ(mtx.cols, 70u);
    for (std::size_t t = 0; t < mtx.rows; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < mtx.cols; ++i) s += mtx.weights[t * mtx.cols + i];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(AttnDump, WritesOneCsvPerBlockWithNRowsPerToken) {
  auto model = attached(Method::GemCaOnly, 1);
  auto cloud = random_cloud(40, 5);
  auto dir = std::filesystem::temp_directory_path() / "gemlab_dump_test";
  std::filesystem::remove_all(dir);
  EXPECT_EQ(dump_attention(model, cloud, dir.string()), 2u);
  std::ifstream in(dir / "block0.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "token_id,point_id,weight");
  std::size_t rows = 0;
  double total = 0.0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    ++rows;
    total += std::stod(line.substr(line.rfind(',') + 1));
  }
  EXPECT_EQ(rows, 40u);
  EXPECT_NEAR(total, 1.0, 1e-9);
  std::filesystem::remove_all(dir);
}

TEST(AttnDump, MethodWithoutGlobalTokensIsRejected) {
  auto model = attached(Method::Lora);
  auto dir = (std::filesystem::temp_directory_path() / "gemlab_dump_reject").string();
  EXPECT_THROW(dump_attention(model, random_cloud(10, 1), dir), ConfigError);
}

TEST(AttnDump, LatentAttentionDependsOnTheScene) {
  auto model = attached(Method::Gem, 2);
  auto a = random_cloud(64, 1), b = random_cloud(64, 2);
  for (std::size_t i = 0; i < 64; ++i) b.coords[3 * i] *= 0.3;
  auto da = capture_attention(model, a), db = capture_attention(model, b);
  const auto& wa = da.latent_to_points[0].weights;
  const auto& wb = db.latent_to_points[0].weights;
  std::vector<double> ta(wa.begin(), wa.begin() + 64), tb(wb.begin(), wb.begin() + 64);
  auto ha = spatial_histogram(a, ta, 0.0, 1.0, 4), hb = spatial_histogram(b, tb, 0.0, 1.0, 4);
  EXPECT_GT(js_divergence(ha, hb), 0.0);
}

TEST(JsDivergence, KnownValuesAndSymmetry) {
  EXPECT_NEAR(js_divergence({1, 0}, {0, 1}), std::log(2.0), 1e-15);
  EXPECT_EQ(js_divergence({0.2, 0.8}, {0.2, 0.8}), 0.0);
  EXPECT_NEAR(js_divergence({2, 8}, {1, 4}), 0.0, 1e-15);
  auto p = random_values(10, 1, 0, 1), q = random_values(10, 2, 0, 1);
  EXPECT_DOUBLE_EQ(js_divergence(p, q), js_divergence(q, p));
  EXPECT_LE(js_divergence(p, q), std::log(2.0));
  EXPECT_THROW(js_divergence({1, 2}, {1}), DimensionError);
}

TEST(SpatialHistogram, BinsWeightsByPosition) {
  PointCloud c;
  c.channels = 1;
  c.coords = {0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 5.0, 5.0, 5.0};
  c.feats = {0, 0, 0};
  auto h = spatial_histogram(c, {0.25, 0.5, 0.25}, 0.0, 1.0, 2);
  ASSERT_EQ(h.size(), 8u);
  EXPECT_DOUBLE_EQ(h[0], 0.25);
  EXPECT_DOUBLE_EQ(h[7], 0.75);
}
