#include "mmtvae/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mmtvae {

Conv2dLayer::Conv2dLayer(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, int stride_,
                         int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  const std::int64_t fan_in = in_ch * k * k;
  const double b = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> w(static_cast<std::size_t>(out_ch * fan_in));
  for (double& v : w) v = rng.uniform(-b, b);
  weight = Tensor::from_data({out_ch, in_ch, k, k}, std::move(w), true);
  bias = Tensor::zeros({out_ch}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  Tensor y = conv2d(x, weight, stride, pad);
  // (N,O,H,W) + (O,1,1) broadcasts the bias over batch and space.
  return add(y, reshape(bias, {bias.shape()[0], 1, 1}));
}

void Conv2dLayer::collect(const std::string& prefix, std::vector<ParamRef>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

BatchNorm2d::BatchNorm2d(std::int64_t channels)
    : gamma(Tensor::full({channels}, 1.0, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(static_cast<std::size_t>(channels), 0.0),
      running_var(static_cast<std::size_t>(channels), 1.0),
      channels_(channels) {}

Tensor BatchNorm2d::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != channels_)
    throw std::invalid_argument("batch norm: expected (N," + std::to_string(channels_) +
                                ",H,W), got " + shape_str(s));
  const std::int64_t n = s[0], c = s[1], hw = s[2] * s[3];

  if (mode == Mode::eval) {
    // Fixed affine map from running statistics; built from primitives so
    // gradients still flow to gamma/beta if anyone asks.
    std::vector<double> sc(static_cast<std::size_t>(c)), sh(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < c; ++i) {
      sc[i] = 1.0 / std::sqrt(running_var[i] + eps);
      sh[i] = running_mean[i];
    }
    Tensor scale_t = Tensor::from_data({c, 1, 1}, std::move(sc));
    Tensor shift_t = Tensor::from_data({c, 1, 1}, std::move(sh));
    Tensor xhat = mul(sub(x, shift_t), scale_t);
    return add(mul(xhat, reshape(gamma, {c, 1, 1})), reshape(beta, {c, 1, 1}));
  }

  const std::int64_t m = n * hw;  // values per channel
  if (m < 2)
    throw std::invalid_argument("batch norm: train mode needs at least 2 values per channel");

  const double* px = x.values().data();
  std::vector<double> mean_c(static_cast<std::size_t>(c), 0.0);
  std::vector<double> var_c(static_cast<std::size_t>(c), 0.0);
  auto at = [&](std::int64_t b, std::int64_t ch) { return px + (b * c + ch) * hw; };
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const double* p = at(b, ch);
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
    }
    const double mu = acc / static_cast<double>(m);
    double vacc = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const double* p = at(b, ch);
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = p[i] - mu;
        vacc += d * d;
      }
    }
    mean_c[ch] = mu;
    var_c[ch] = vacc / static_cast<double>(m);  // biased, used for normalization
  }

  // Running stats use the unbiased variance (sample estimator).
  const double unbias = static_cast<double>(m) / static_cast<double>(m - 1);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean_c[ch];
    running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var_c[ch] * unbias;
  }

  std::vector<double> invstd(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) invstd[ch] = 1.0 / std::sqrt(var_c[ch] + eps);

  const std::size_t total = x.values().size();
  std::vector<double> xhat(total);
  std::vector<double> out(total);
  const double* pg = gamma.values().data();
  const double* pb = beta.values().data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = at(b, ch);
      double* ph = xhat.data() + (b * c + ch) * hw;
      double* po = out.data() + (b * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        ph[i] = (p[i] - mean_c[ch]) * invstd[ch];
        po[i] = pg[ch] * ph[i] + pb[ch];
      }
    }

  return custom_op(
      "batch_norm", {x, gamma, beta}, s, std::move(out),
      [n, c, hw, m, xhat = std::move(xhat), invstd = std::move(invstd)](
          const std::vector<double>& gy, const std::vector<Tensor>& inputs) {
        const Tensor& x_in = inputs[0];
        const Tensor& gamma_in = inputs[1];
        const Tensor& beta_in = inputs[2];
        const double* pg = gamma_in.values().data();

        // Per-channel reductions of the output gradient.
        std::vector<double> sum_gy(static_cast<std::size_t>(c), 0.0);
        std::vector<double> sum_gy_xhat(static_cast<std::size_t>(c), 0.0);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double* g = gy.data() + (b * c + ch) * hw;
            const double* h = xhat.data() + (b * c + ch) * hw;
            double a0 = 0.0, a1 = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
              a0 += g[i];
              a1 += g[i] * h[i];
            }
            sum_gy[ch] += a0;
            sum_gy_xhat[ch] += a1;
          }

        for (std::int64_t ch = 0; ch < c; ++ch) {
          accumulate_grad_at(gamma_in, ch, sum_gy_xhat[ch]);
          accumulate_grad_at(beta_in, ch, sum_gy[ch]);
        }

        if (x_in.requires_grad()) {
          auto* xn = x_in.node();
          xn->ensure_grad();
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const double* g = gy.data() + (b * c + ch) * hw;
              const double* h = xhat.data() + (b * c + ch) * hw;
              double* gx = xn->grad.data() + (b * c + ch) * hw;
              const double k = pg[ch] * invstd[ch] * inv_m;
              for (std::int64_t i = 0; i < hw; ++i)
                gx[i] += k * (static_cast<double>(m) * g[i] - sum_gy[ch] - h[i] * sum_gy_xhat[ch]);
            }
        }
        (void)beta_in;
      });
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<ParamRef>& params,
                          std::vector<BufferRef>& buffers) {
  params.push_back({prefix + ".gamma", gamma});
  params.push_back({prefix + ".beta", beta});
  buffers.push_back({prefix + ".running_mean", &running_mean, channels_});
  buffers.push_back({prefix + ".running_var", &running_var, channels_});
}

ResidualDownBlock::ResidualDownBlock(std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
    : conv1(in_ch, out_ch, 3, 1, 1, rng),
      conv2(out_ch, out_ch, 3, 1, 1, rng),
      skip(in_ch, out_ch, 1, 1, 0, rng),
      bn1(out_ch),
      bn2(out_ch) {}

Tensor ResidualDownBlock::forward(const Tensor& x) {
  Tensor h = leaky_relu(bn1.forward(conv1.forward(x)), 0.2);
  h = leaky_relu(bn2.forward(conv2.forward(h)), 0.2);
  h = avg_pool2(h);
  Tensor s = avg_pool2(skip.forward(x));
  return add(h, s);
}

void ResidualDownBlock::set_mode(BatchNorm2d::Mode m) {
  bn1.mode = m;
  bn2.mode = m;
}

void ResidualDownBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                                std::vector<BufferRef>& buffers) {
  conv1.collect(prefix + ".conv1", params);
  bn1.collect(prefix + ".bn1", params, buffers);
  conv2.collect(prefix + ".conv2", params);
  bn2.collect(prefix + ".bn2", params, buffers);
  skip.collect(prefix + ".skip", params);
}

ResidualUpBlock::ResidualUpBlock(std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
    : conv1(in_ch, out_ch, 3, 1, 1, rng),
      conv2(out_ch, out_ch, 3, 1, 1, rng),
      skip(in_ch, out_ch, 1, 1, 0, rng),
      bn1(out_ch),
      bn2(out_ch) {}

Tensor ResidualUpBlock::forward(const Tensor& x) {
  Tensor up = nearest_upsample2(x);
  Tensor h = leaky_relu(bn1.forward(conv1.forward(up)), 0.2);
  h = leaky_relu(bn2.forward(conv2.forward(h)), 0.2);
  Tensor s = skip.forward(up);
  return add(h, s);
}

void ResidualUpBlock::set_mode(BatchNorm2d::Mode m) {
  bn1.mode = m;
  bn2.mode = m;
}

void ResidualUpBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                              std::vector<BufferRef>& buffers) {
  conv1.collect(prefix + ".conv1", params);
  bn1.collect(prefix + ".bn1", params, buffers);
  conv2.collect(prefix + ".conv2", params);
  bn2.collect(prefix + ".bn2", params, buffers);
  skip.collect(prefix + ".skip", params);
}

}  // namespace mmtvae
