#include "mmtvae/losses.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace mmtvae {

namespace {

// Normalized 2-D Gaussian window as a depthwise (C,C,k,k) kernel: channel o
// reads only channel o, so SSIM statistics never mix channels.
Tensor gaussian_window(std::int64_t channels, int window, double sigma) {
  std::vector<double> g1(static_cast<std::size_t>(window));
  const double half = (window - 1) / 2.0;
  for (int i = 0; i < window; ++i) {
    const double d = i - half;
    g1[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  std::vector<double> g2(static_cast<std::size_t>(window * window));
  double total = 0.0;
  for (int i = 0; i < window; ++i)
    for (int j = 0; j < window; ++j) {
      g2[i * window + j] = g1[i] * g1[j];
      total += g2[i * window + j];
    }
  for (double& v : g2) v /= total;

  std::vector<double> w(static_cast<std::size_t>(channels * channels * window * window), 0.0);
  for (std::int64_t c = 0; c < channels; ++c)
    for (int i = 0; i < window * window; ++i)
      w[(c * channels + c) * window * window + i] = g2[i];
  return Tensor::from_data({channels, channels, window, window}, std::move(w));
}

}  // namespace

Tensor ssim_loss(const Tensor& x, const Tensor& y, int window, double sigma) {
  if (x.shape() != y.shape())
    throw std::invalid_argument("ssim_loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(y.shape()));
  if (x.dim() != 4) throw std::invalid_argument("ssim_loss: inputs must be NCHW");
  if (window % 2 == 0 || window < 1) throw std::invalid_argument("ssim_loss: window must be odd");
  if (x.shape()[2] < window || x.shape()[3] < window)
    throw std::invalid_argument("ssim_loss: window " + std::to_string(window) +
                                " larger than image " + shape_str(x.shape()));

  const double c1 = 0.01 * 0.01;  // (K1 L)^2 with L = 1
  const double c2 = 0.03 * 0.03;
  Tensor w = gaussian_window(x.shape()[1], window, sigma);

  Tensor mu_x = conv2d(x, w, 1, 0);
  Tensor mu_y = conv2d(y, w, 1, 0);
  Tensor var_x = sub(conv2d(mul(x, x), w, 1, 0), mul(mu_x, mu_x));
  Tensor var_y = sub(conv2d(mul(y, y), w, 1, 0), mul(mu_y, mu_y));
  Tensor cov_xy = sub(conv2d(mul(x, y), w, 1, 0), mul(mu_x, mu_y));

  Tensor num = mul(add_scalar(scale(mul(mu_x, mu_y), 2.0), c1),
                   add_scalar(scale(cov_xy, 2.0), c2));
  Tensor den = mul(add_scalar(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), c1),
                   add_scalar(add(var_x, var_y), c2));
  return add_scalar(neg(mean(div(num, den))), 1.0);
}

Tensor bce_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("bce_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  Tensor p = clamp(pred, 1e-7, 1.0 - 1e-7);
  Tensor one_minus_p = add_scalar(neg(p), 1.0);
  Tensor one_minus_t = add_scalar(neg(target), 1.0);
  Tensor ll = add(mul(target, log(p)), mul(one_minus_t, log(one_minus_p)));
  return neg(mean(ll));
}

Tensor kl_loss(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape())
    throw std::invalid_argument("kl_loss: mu and logvar shapes differ");
  if (mu.dim() != 2) throw std::invalid_argument("kl_loss: inputs must be (N, d)");
  const std::int64_t n = mu.shape()[0];
  // mean over batch of the per-sample sum = sum over all / N
  Tensor t = sub(sub(add_scalar(logvar, 1.0), mul(mu, mu)), exp(logvar));
  return scale(sum(t), -0.5 / static_cast<double>(n));
}

std::vector<Triplet> mine_semi_hard(const Tensor& mu, const std::vector<int>& labels,
                                    const TripletConfig& cfg) {
  if (mu.dim() != 2) throw std::invalid_argument("mine_semi_hard: mu must be (N, d)");
  const std::int64_t n = mu.shape()[0];
  const std::int64_t d = mu.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw std::invalid_argument("mine_semi_hard: labels length does not match batch");

  const double* p = mu.values().data();
  auto dist2 = [&](std::int64_t i, std::int64_t j) {
    double acc = 0.0;
    const double* a = p + i * d;
    const double* b = p + j * d;
    for (std::int64_t k = 0; k < d; ++k) {
      const double t = a[k] - b[k];
      acc += t * t;
    }
    return acc;
  };

  std::vector<Triplet> out;
  for (std::int64_t a = 0; a < n; ++a) {
    for (std::int64_t pos = 0; pos < n; ++pos) {
      if (pos == a || labels[pos] != labels[a]) continue;
      const double dap = dist2(a, pos);

      // Smallest d(a,n) inside the open semi-hard band, then smallest
      // d(a,n) beyond the positive as fallback. Strict > keeps ties at the
      // lowest scanned index.
      std::int64_t band_idx = -1, beyond_idx = -1;
      double band_best = std::numeric_limits<double>::infinity();
      double beyond_best = std::numeric_limits<double>::infinity();
      for (std::int64_t neg = 0; neg < n; ++neg) {
        if (labels[neg] == labels[a]) continue;
        const double dan = dist2(a, neg);
        if (dan <= dap) continue;
        if (dan < beyond_best) {
          beyond_best = dan;
          beyond_idx = neg;
        }
        if (dan < dap + cfg.margin && dan < band_best) {
          band_best = dan;
          band_idx = neg;
        }
      }
      if (band_idx >= 0)
        out.push_back({a, pos, band_idx});
      else if (beyond_idx >= 0)
        out.push_back({a, pos, beyond_idx});
      // else: every negative sits at or inside d(a,p); the pair is skipped.
    }
  }
  return out;
}

Tensor triplet_loss(const Tensor& mu, const std::vector<Triplet>& triplets,
                    const TripletConfig& cfg) {
  if (mu.dim() != 2) throw std::invalid_argument("triplet_loss: mu must be (N, d)");
  if (triplets.empty()) {
    std::fprintf(stderr, "triplet_loss: no triplets in batch, contributing 0\n");
    return Tensor::scalar(0.0);
  }
  const std::int64_t d = mu.shape()[1];
  const double* p = mu.values().data();
  auto dist2 = [d](const double* v, std::int64_t i, std::int64_t j) {
    double acc = 0.0;
    const double* a = v + i * d;
    const double* b = v + j * d;
    for (std::int64_t k = 0; k < d; ++k) {
      const double t = a[k] - b[k];
      acc += t * t;
    }
    return acc;
  };

  double acc = 0.0;
  for (const Triplet& t : triplets) {
    const double h = dist2(p, t.anchor, t.positive) - dist2(p, t.anchor, t.negative) + cfg.margin;
    if (h > 0.0) acc += h;
  }
  const double inv_t = 1.0 / static_cast<double>(triplets.size());

  const double margin = cfg.margin;
  return custom_op(
      "triplet_loss", {mu}, Shape{}, {acc * inv_t},
      [triplets, margin, d, inv_t, dist2](const std::vector<double>& gy,
                                          const std::vector<Tensor>& inputs) {
        const Tensor& mu_in = inputs[0];
        if (!mu_in.requires_grad()) return;
        const double* v = mu_in.values().data();
        auto* node = mu_in.node();
        node->ensure_grad();
        double* g = node->grad.data();
        const double go = gy[0] * inv_t;
        for (const Triplet& t : triplets) {
          const double h = dist2(v, t.anchor, t.positive) - dist2(v, t.anchor, t.negative) + margin;
          if (h <= 0.0) continue;  // inactive hinge
          const double* a = v + t.anchor * d;
          const double* p = v + t.positive * d;
          const double* nn = v + t.negative * d;
          double* ga = g + t.anchor * d;
          double* gp = g + t.positive * d;
          double* gn = g + t.negative * d;
          for (std::int64_t k = 0; k < d; ++k) {
            // d/da [|a-p|^2 - |a-n|^2] = 2(a-p) - 2(a-n) = 2(n-p)
            ga[k] += go * 2.0 * (nn[k] - p[k]);
            gp[k] += go * -2.0 * (a[k] - p[k]);
            gn[k] += go * 2.0 * (a[k] - nn[k]);
          }
        }
      });
}

Tensor total_loss(const Tensor& ssim, const Tensor& bce, const Tensor& kl, const Tensor& triplet,
                  const LossWeights& w) {
  if (w.latent_weight <= 0.0) throw std::invalid_argument("total_loss: latent weight must be > 0");
  return add(add(ssim, bce), scale(add(kl, triplet), w.latent_weight));
}

}  // namespace mmtvae
