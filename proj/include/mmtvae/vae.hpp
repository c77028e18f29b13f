#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mmtvae/nn.hpp"
#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

namespace mmtvae {

struct ModelConfig {
  std::int64_t image_size = 64;
  std::int64_t image_channels = 3;
  std::int64_t wbt_channels = 1;
  std::int64_t latent_dim = 128;
  std::vector<std::int64_t> enc_widths{64, 128, 256, 512, 512};
  std::vector<std::int64_t> dec_widths{512, 256, 128, 64, 32, 32};

  // Full-size configuration: 64x64 inputs, 128-dim latent.
  static ModelConfig paper();
  // Small configuration for minutes-scale CPU runs: 32x32 inputs, 16-dim latent.
  static ModelConfig desk();

  // Enforces the power-of-two chain: encoders end at 2x2, decoders start at
  // 1x1 and reach image_size.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct VaeOutput {
  Tensor recon_image;  // (N, image_channels, H, W), logistic-squashed
  Tensor recon_wbt;    // (N, wbt_channels, H, W), logistic-squashed
  Tensor mu;           // (N, latent_dim)
  Tensor logvar;       // (N, latent_dim)
  Tensor z;            // (N, latent_dim)
};

// Two encoders -> channel concatenation -> mu / logvar heads -> sampled
// latent -> two decoders.
class MultiModalVae {
 public:
  MultiModalVae(ModelConfig cfg, std::uint64_t seed);

  // The buffer registry points into this object's block storage (stable
  // across moves, stale across copies), so the model is move-only.
  MultiModalVae(const MultiModalVae&) = delete;
  MultiModalVae& operator=(const MultiModalVae&) = delete;
  MultiModalVae(MultiModalVae&&) = default;
  MultiModalVae& operator=(MultiModalVae&&) = default;

  std::pair<Tensor, Tensor> encode(const Tensor& image, const Tensor& wbt);
  // z = mu + exp(0.5 * logvar) * eps with eps ~ N(0, I); eps carries no grad.
  // Deterministic embeddings use mu directly (eps = 0).
  Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng);
  std::pair<Tensor, Tensor> decode(const Tensor& z);
  VaeOutput forward(const Tensor& image, const Tensor& wbt, Rng& rng);

  void set_mode(BatchNorm2d::Mode m);
  BatchNorm2d::Mode mode() const { return mode_; }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamRef>& params() const { return params_; }
  const std::vector<BufferRef>& buffers() const { return buffers_; }
  std::int64_t param_count() const;

 private:
  ModelConfig cfg_;
  std::vector<ResidualDownBlock> enc_image_, enc_wbt_;
  Conv2dLayer mu_head_, logvar_head_;
  std::vector<ResidualUpBlock> dec_image_, dec_wbt_;
  Conv2dLayer final_image_, final_wbt_;
  BatchNorm2d::Mode mode_ = BatchNorm2d::Mode::train;
  std::vector<ParamRef> params_;
  std::vector<BufferRef> buffers_;

  void register_state();
};

}  // namespace mmtvae
