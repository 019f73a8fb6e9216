#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gemlab/training.hpp"

namespace gemlab {

/// Grid of fine-tuning runs. Parsed from key=value text:
///
///   methods=gem_sa_only,gem_ca_only,gem
///   ranks=8
///   tokens=1,4,8
///   sharing=per_block,per_stage,global
///   budgets=rank1,0.001,0.01      (optional; replaces ranks and tokens)
///   seeds=0,1,2
///   epochs=40  lr=0.001  batch_size=4  weight_decay=0.01
struct SweepSpec {
  std::vector<Method> methods;
  std::vector<std::size_t> ranks{8};
  std::vector<std::size_t> tokens{4};
  std::vector<Sharing> sharing{Sharing::Global};
  std::vector<std::string> budgets;
  std::vector<std::uint64_t> seeds{0};
  TrainConfig train;

  static SweepSpec from_kv(const KeyValues& kv);
};

struct SweepCell {
  std::size_t id = 0;
  PeftConfig peft;
  std::uint64_t seed = 0;
  std::string budget;  // empty when the grid fixes rank and tokens
};

/// Expands the grid. Axes a method ignores are collapsed so each distinct
/// configuration runs once per seed.
std::vector<SweepCell> expand_cells(const SweepSpec& spec);

struct SweepRow {
  SweepCell cell;
  ParamCounts counts;
  std::optional<Metrics> metrics;
  std::string error;
  int exit_code = 0;
};

/// Runs every cell on an isolated copy of backbone with up to jobs worker
/// threads. A failing cell is recorded and the sweep continues. Rows come back
/// in cell order.
std::vector<SweepRow> run_sweep(const SweepSpec& spec, const Model& backbone, const std::vector<PointCloud>& train,
                                const std::vector<PointCloud>& eval, std::size_t jobs = 1,
                                std::ostream* log = nullptr);

/// `method,rank,tokens,sharing,seed,params_pct,miou,macc,allacc`; axes a
/// method ignores print as `-`, failed cells print `nan` metrics.
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Exit code for an exception: 1 usage/config/data, 2 contract or freeze
/// violation, 3 numeric failure.
int exit_code_for(const std::exception& e);

}  // namespace gemlab
