#include "gemlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace gemlab {

GradCheckResult check_gradients(const std::function<Tensor()>& f, ParamStore& params, double h) {
  params.zero_grad();
  backward(f());

  GradCheckResult result;
  for (const auto& name : params.trainable_names()) {
    Tensor& p = params.get(name);
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::ranges::copy(p.grad(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = f().item();
      values[i] = orig - h;
      const double down = f().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.checked;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_param = name;
        result.worst_index = i;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  params.zero_grad();
  return result;
}

}  // namespace gemlab
