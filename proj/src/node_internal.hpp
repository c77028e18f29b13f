#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mmtvae/tensor.hpp"

namespace mmtvae::detail {

// Builds a result node. Parents and backward are dropped when no input
// requires grad, so eval-mode graphs stay tape-free. Runs the finite check.
Tensor make_node(OpKind op, Shape shape, std::vector<double> value,
                 std::vector<std::shared_ptr<TensorNode>> parents,
                 std::function<void(TensorNode&)> backward_fn);

}  // namespace mmtvae::detail
