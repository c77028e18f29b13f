#pragma once

#include <cstdint>
#include <vector>

#include "mmtvae/nn.hpp"

namespace mmtvae {

// Bias-corrected Adam kept entirely in 64-bit. One m/v pair per registered
// parameter, in registration order.
struct AdamState {
  double lr = 0.0004;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<double>> m, v;

  // Sizes the moment buffers to mirror the parameter list; zeroes them.
  void init(const std::vector<ParamRef>& params);
};

// One update over the parameters' accumulated gradients. A parameter without
// a gradient this step is treated as g = 0. Any non-finite gradient aborts
// before touching the parameters, naming the offender.
void adam_step(const std::vector<ParamRef>& params, AdamState& state);

}  // namespace mmtvae
