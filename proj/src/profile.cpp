#include "gemlab/profile.hpp"

#include <filesystem>
#include <fstream>

#include "gemlab/errors.hpp"

namespace gemlab {

OpCounter count_pass(const Model& model, const PointCloud& cloud) {
  OpCounter counter;
  Instrumentation inst{&counter, nullptr};
  model.forward(model.prepare(cloud), &inst);
  return counter;
}

AttnDump capture_attention(const Model& model, const PointCloud& cloud) {
  AttnDump dump;
  Instrumentation inst{nullptr, &dump};
  model.forward(model.prepare(cloud), &inst);
  return dump;
}

std::size_t dump_attention(const Model& model, const PointCloud& cloud, const std::string& dir, DumpStage stage) {
  const auto method = model.method();
  const bool context = method && has_context_adapter(*method);
  if (!context && method != Method::Prompt)
    throw ConfigError("dump-attn: method '" + (method ? method_name(*method) : std::string("none")) +
                      "' has no global tokens to dump");
  AttnDump dump = capture_attention(model, cloud);
  const auto& mats = !context                           ? dump.prompt_weights
                     : stage == DumpStage::LatentToPoints ? dump.latent_to_points
                                                          : dump.points_to_latent;
  // Latent-to-point matrices are token-major; the others are point-major.
  const bool token_rows = context && stage == DumpStage::LatentToPoints;
  std::filesystem::create_directories(dir);
  for (const auto& mat : mats) {
    const auto path = std::filesystem::path(dir) / (block_prefix(mat.block) + ".csv");
    std::ofstream out(path);
    if (!out) throw ArgumentError("cannot write '" + path.string() + "'");
    out << "token_id,point_id,weight\n";
    const std::size_t tokens = token_rows ? mat.rows : mat.cols, points = token_rows ? mat.cols : mat.rows;
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t i = 0; i < points; ++i) {
        const double w = token_rows ? mat.weights[t * mat.cols + i] : mat.weights[i * mat.cols + t];
        out << t << ',' << i << ',' << format_double(w) << '\n';
      }
  }
  return mats.size();
}

}  // namespace gemlab
