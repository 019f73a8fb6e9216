#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "gemlab/param_store.hpp"

namespace gemlab {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares the analytic gradient of a scalar computation against central
/// differences for every scalar of every trainable entry in params. Error per
/// scalar is |analytic - numeric| / max(1, |numeric|). Frozen entries are
/// skipped. Existing gradients are cleared.
GradCheckResult check_gradients(const std::function<Tensor()>& f, ParamStore& params,
                                double h = 1e-5);

}  // namespace gemlab
