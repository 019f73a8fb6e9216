#pragma once

#include <string>

#include "gemlab/instrumentation.hpp"
#include "gemlab/model.hpp"

namespace gemlab {

/// Multiply-add tallies for one forward pass of model on cloud.
OpCounter count_pass(const Model& model, const PointCloud& cloud);

/// Attention weights captured during one forward pass.
AttnDump capture_attention(const Model& model, const PointCloud& cloud);

enum class DumpStage { LatentToPoints = 1, PointsToLatent = 2 };

/// Writes one `blockB.csv` (`token_id,point_id,weight`) per block into dir.
/// Context-adapter methods dump the chosen stage; prompt tuning dumps prompt
/// slot weights. Other methods have no global tokens and raise ConfigError.
/// Returns the number of files written.
std::size_t dump_attention(const Model& model, const PointCloud& cloud, const std::string& dir,
                           DumpStage stage = DumpStage::LatentToPoints);

}  // namespace gemlab
