#pragma once

// Central-difference gradient checking. A case is a builder that constructs a
// scalar loss from fresh leaf tensors; the analytic gradient from backward()
// is compared elementwise against (f(x+h) - f(x-h)) / 2h.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

namespace gradcheck {

using Builder = std::function<mmtvae::Tensor(const std::vector<mmtvae::Tensor>&)>;

struct Input {
  mmtvae::Shape shape;
  std::vector<double> data;
};

inline Input random_input(mmtvae::Shape shape, mmtvae::Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
  std::vector<double> d(static_cast<std::size_t>(mmtvae::shape_numel(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return {std::move(shape), std::move(d)};
}

// Worst relative error over every element of every input. The denominator is
// floored at 1e-2 so near-zero gradients are judged on absolute error instead
// of amplified central-difference noise.
inline double max_rel_err(const Builder& f, const std::vector<Input>& inputs, double h = 1e-5) {
  std::vector<mmtvae::Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(mmtvae::Tensor::from_data(in.shape, in.data, true));
  mmtvae::backward(f(leaves));

  double worst = 0.0;
  std::vector<Input> probe = inputs;
  auto eval = [&]() {
    std::vector<mmtvae::Tensor> ts;
    ts.reserve(probe.size());
    for (const auto& in : probe) ts.push_back(mmtvae::Tensor::from_data(in.shape, in.data));
    return f(ts).item();
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].data.size(); ++j) {
      const double x0 = inputs[i].data[j];
      probe[i].data[j] = x0 + h;
      const double fp = eval();
      probe[i].data[j] = x0 - h;
      const double fm = eval();
      probe[i].data[j] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = leaves[i].has_grad() ? leaves[i].grad()[j] : 0.0;
      const double err = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-2});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Variant for stateful modules whose parameter leaves live inside the callee:
// `build` must reconstruct the scalar loss graph on every call. Checks
// d(loss)/d(target) for every listed leaf, optionally on a random subset of
// coordinates per target (for large models).
inline double max_param_rel_err(const std::function<mmtvae::Tensor()>& build,
                                std::vector<mmtvae::Tensor> targets, double h = 1e-5,
                                std::size_t max_coords_per_target = static_cast<std::size_t>(-1),
                                mmtvae::Rng* coord_rng = nullptr) {
  for (auto& t : targets) t.zero_grad();
  mmtvae::backward(build());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(targets.size());
  for (auto& t : targets) analytic.push_back(t.grad());

  double worst = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::size_t n = targets[i].values().size();
    std::vector<std::size_t> coords;
    if (n <= max_coords_per_target || coord_rng == nullptr) {
      coords.resize(n);
      for (std::size_t j = 0; j < n; ++j) coords[j] = j;
    } else {
      for (std::size_t c = 0; c < max_coords_per_target; ++c)
        coords.push_back(static_cast<std::size_t>(coord_rng->uniform_int(n)));
    }
    for (std::size_t j : coords) {
      auto& vals = targets[i].mutable_values();
      const double x0 = vals[j];
      vals[j] = x0 + h;
      const double fp = build().item();
      vals[j] = x0 - h;
      const double fm = build().item();
      vals[j] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i][j] - numeric) /
                         std::max({std::abs(analytic[i][j]), std::abs(numeric), 1e-2});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace gradcheck
