#include "mmtvae/vae.hpp"

#include <stdexcept>
#include <string>

namespace mmtvae {

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.image_size = 32;
  c.latent_dim = 16;
  c.enc_widths = {8, 16, 32, 64};
  c.dec_widths = {64, 32, 16, 8, 8};
  return c;
}

void ModelConfig::validate() const {
  if (image_channels < 1 || wbt_channels < 1 || latent_dim < 1)
    throw std::invalid_argument("model config: channel and latent counts must be positive");
  if (enc_widths.empty() || dec_widths.empty())
    throw std::invalid_argument("model config: empty width schedule");
  // Encoders halve per block down to 2x2; decoders double per block from 1x1.
  if (image_size != (std::int64_t{1} << (enc_widths.size() + 1)))
    throw std::invalid_argument("model config: image_size must be 2^(encoder blocks + 1), got " +
                                std::to_string(image_size) + " with " +
                                std::to_string(enc_widths.size()) + " blocks");
  if ((std::int64_t{1} << dec_widths.size()) != image_size)
    throw std::invalid_argument("model config: image_size must be 2^(decoder blocks), got " +
                                std::to_string(image_size) + " with " +
                                std::to_string(dec_widths.size()) + " blocks");
}

MultiModalVae::MultiModalVae(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);

  auto build_encoder = [&](std::int64_t in_ch) {
    std::vector<ResidualDownBlock> blocks;
    std::int64_t c = in_ch;
    for (std::int64_t w : cfg_.enc_widths) {
      blocks.emplace_back(c, w, rng);
      c = w;
    }
    return blocks;
  };
  enc_image_ = build_encoder(cfg_.image_channels);
  enc_wbt_ = build_encoder(cfg_.wbt_channels);

  const std::int64_t cat_ch = 2 * cfg_.enc_widths.back();
  mu_head_ = Conv2dLayer(cat_ch, cfg_.latent_dim, 2, 1, 0, rng);
  logvar_head_ = Conv2dLayer(cat_ch, cfg_.latent_dim, 2, 1, 0, rng);

  auto build_decoder = [&]() {
    std::vector<ResidualUpBlock> blocks;
    std::int64_t c = cfg_.latent_dim;
    for (std::int64_t w : cfg_.dec_widths) {
      blocks.emplace_back(c, w, rng);
      c = w;
    }
    return blocks;
  };
  dec_image_ = build_decoder();
  final_image_ = Conv2dLayer(cfg_.dec_widths.back(), cfg_.image_channels, 3, 1, 1, rng);
  dec_wbt_ = build_decoder();
  final_wbt_ = Conv2dLayer(cfg_.dec_widths.back(), cfg_.wbt_channels, 3, 1, 1, rng);

  register_state();
}

void MultiModalVae::register_state() {
  auto blocks = [&](const std::string& prefix, auto& vec) {
    for (std::size_t i = 0; i < vec.size(); ++i)
      vec[i].collect(prefix + ".block" + std::to_string(i), params_, buffers_);
  };
  blocks("enc_image", enc_image_);
  blocks("enc_wbt", enc_wbt_);
  mu_head_.collect("mu_head", params_);
  logvar_head_.collect("logvar_head", params_);
  blocks("dec_image", dec_image_);
  final_image_.collect("final_image", params_);
  blocks("dec_wbt", dec_wbt_);
  final_wbt_.collect("final_wbt", params_);
}

void MultiModalVae::set_mode(BatchNorm2d::Mode m) {
  mode_ = m;
  for (auto& b : enc_image_) b.set_mode(m);
  for (auto& b : enc_wbt_) b.set_mode(m);
  for (auto& b : dec_image_) b.set_mode(m);
  for (auto& b : dec_wbt_) b.set_mode(m);
}

std::int64_t MultiModalVae::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::pair<Tensor, Tensor> MultiModalVae::encode(const Tensor& image, const Tensor& wbt) {
  const Shape want_img{image.shape()[0], cfg_.image_channels, cfg_.image_size, cfg_.image_size};
  if (image.shape() != want_img)
    throw std::invalid_argument("encode: image shape " + shape_str(image.shape()) +
                                " does not match config " + shape_str(want_img));
  const Shape want_wbt{wbt.shape()[0], cfg_.wbt_channels, cfg_.image_size, cfg_.image_size};
  if (wbt.shape() != want_wbt)
    throw std::invalid_argument("encode: wbt shape " + shape_str(wbt.shape()) +
                                " does not match config " + shape_str(want_wbt));
  if (image.shape()[0] != wbt.shape()[0])
    throw std::invalid_argument("encode: batch size mismatch between modalities");

  Tensor hi = image;
  for (auto& b : enc_image_) hi = b.forward(hi);
  Tensor hw = wbt;
  for (auto& b : enc_wbt_) hw = b.forward(hw);
  Tensor cat = concat_channels(hi, hw);  // (N, 2*last_width, 2, 2)

  const std::int64_t n = cat.shape()[0];
  Tensor mu = reshape(mu_head_.forward(cat), {n, cfg_.latent_dim});
  Tensor logvar = reshape(logvar_head_.forward(cat), {n, cfg_.latent_dim});
  return {mu, logvar};
}

Tensor MultiModalVae::reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng) {
  if (mu.shape() != logvar.shape())
    throw std::invalid_argument("reparameterize: mu and logvar shapes differ");
  std::vector<double> eps(static_cast<std::size_t>(mu.numel()));
  for (double& v : eps) v = rng.normal();
  Tensor eps_t = Tensor::from_data(mu.shape(), std::move(eps));
  return add(mu, mul(exp(scale(logvar, 0.5)), eps_t));
}

std::pair<Tensor, Tensor> MultiModalVae::decode(const Tensor& z) {
  if (z.dim() != 2 || z.shape()[1] != cfg_.latent_dim)
    throw std::invalid_argument("decode: z must be (N," + std::to_string(cfg_.latent_dim) +
                                "), got " + shape_str(z.shape()));
  const std::int64_t n = z.shape()[0];
  Tensor seed = reshape(z, {n, cfg_.latent_dim, 1, 1});

  Tensor hi = seed;
  for (auto& b : dec_image_) hi = b.forward(hi);
  Tensor img = sigmoid(final_image_.forward(hi));

  Tensor hw = seed;
  for (auto& b : dec_wbt_) hw = b.forward(hw);
  Tensor wbt = sigmoid(final_wbt_.forward(hw));
  return {img, wbt};
}

VaeOutput MultiModalVae::forward(const Tensor& image, const Tensor& wbt, Rng& rng) {
  auto [mu, logvar] = encode(image, wbt);
  Tensor z = reparameterize(mu, logvar, rng);
  auto [ri, rw] = decode(z);
  return {ri, rw, mu, logvar, z};
}

}  // namespace mmtvae
