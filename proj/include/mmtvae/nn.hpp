#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

namespace mmtvae {

// Named views over a module's state: `params` are trainable leaves the
// optimizer updates, `buffers` are running statistics that checkpoints must
// carry but gradients never touch.
struct ParamRef {
  std::string name;
  Tensor tensor;
};
struct BufferRef {
  std::string name;
  std::vector<double>* data;
  std::int64_t extent;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  // Weights ~ U(-b, b) with b = sqrt(1 / fan_in); bias starts at zero.
  Conv2dLayer(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, int stride, int pad,
              Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<ParamRef>& out) const;

  Tensor weight;  // (out, in, k, k)
  Tensor bias;    // (out,)
  int stride = 1;
  int pad = 0;
};

class BatchNorm2d {
 public:
  enum class Mode { train, eval };

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels);

  // Train mode normalizes with batch statistics (and updates the running
  // ones); eval mode is a fixed affine map from the running statistics.
  Tensor forward(const Tensor& x);
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers);

  Tensor gamma, beta;  // (C,)
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  Mode mode = Mode::train;

 private:
  std::int64_t channels_ = 0;
};

// conv3x3 -> BN -> LeakyReLU(0.2) -> conv3x3 -> BN -> LeakyReLU(0.2) -> avg
// pool, plus a 1x1-conv skip through the same pooling. Halves H and W.
class ResidualDownBlock {
 public:
  ResidualDownBlock() = default;
  ResidualDownBlock(std::int64_t in_ch, std::int64_t out_ch, Rng& rng);

  Tensor forward(const Tensor& x);
  void set_mode(BatchNorm2d::Mode m);
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers);

  Conv2dLayer conv1, conv2, skip;
  BatchNorm2d bn1, bn2;
};

// nearest upsample -> conv3x3 -> BN -> LeakyReLU(0.2) -> conv3x3 -> BN ->
// LeakyReLU(0.2), plus an upsampled 1x1-conv skip. Doubles H and W.
class ResidualUpBlock {
 public:
  ResidualUpBlock() = default;
  ResidualUpBlock(std::int64_t in_ch, std::int64_t out_ch, Rng& rng);

  Tensor forward(const Tensor& x);
  void set_mode(BatchNorm2d::Mode m);
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers);

  Conv2dLayer conv1, conv2, skip;
  BatchNorm2d bn1, bn2;
};

}  // namespace mmtvae
