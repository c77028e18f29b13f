#include "mmtvae/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace mmtvae {

void AdamState::init(const std::vector<ParamRef>& params) {
  step_count = 0;
  m.assign(params.size(), {});
  v.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].tensor.values().size(), 0.0);
    v[i].assign(params[i].tensor.values().size(), 0.0);
  }
}

void adam_step(const std::vector<ParamRef>& params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not mirror the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t numel = params[i].tensor.values().size();
    if (state.m[i].size() != numel || state.v[i].size() != numel) {
      throw std::invalid_argument("optimizer moments for " + params[i].name +
                                  " do not match its shape");
    }
    if (!params[i].tensor.has_grad()) continue;
    for (double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("non-finite gradient in " + params[i].name +
                                 "; step aborted");
      }
    }
  }

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    const std::vector<double>* grad = t.has_grad() ? &t.grad() : nullptr;
    std::vector<double>& theta = t.mutable_values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad ? (*grad)[j] : 0.0;
      state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
      state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
      const double mhat = state.m[i][j] / bc1;
      const double vhat = state.v[i][j] / bc2;
      theta[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mmtvae
