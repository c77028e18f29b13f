#pragma once

#include <cstdint>
#include <vector>

#include "mmtvae/tensor.hpp"

namespace mmtvae {

struct LossWeights {
  double latent_weight = 0.1;  // Eq. 1 coefficient on KL + triplet
};

struct TripletConfig {
  double margin = 0.2;  // squared-Euclidean margin
};

// Batch indices; anchor/positive share a label, negative differs.
struct Triplet {
  std::int64_t anchor;
  std::int64_t positive;
  std::int64_t negative;
};

struct LossReport {
  double ssim_loss = 0.0;
  double bce_loss = 0.0;
  double kl_loss = 0.0;
  double triplet_loss = 0.0;
  double total = 0.0;
};

// 1 - mean SSIM over Gaussian windows (valid positions, per channel).
// window must be odd and fit inside the image.
Tensor ssim_loss(const Tensor& x, const Tensor& y, int window = 11, double sigma = 1.5);

// Mean over elements of -[t log p + (1-t) log(1-p)]; pred clamped to
// [1e-7, 1-1e-7] first.
Tensor bce_loss(const Tensor& pred, const Tensor& target);

// Mean over the batch of -0.5 * sum_d(1 + logvar - mu^2 - exp(logvar)).
Tensor kl_loss(const Tensor& mu, const Tensor& logvar);

// Semi-hard mining over every ordered same-label (anchor, positive) pair:
// pick the negative with smallest d(a,n) inside the open band
// (d(a,p), d(a,p) + margin); failing that, the closest negative with
// d(a,n) > d(a,p); failing that, the pair yields no triplet. Distances are
// squared Euclidean over rows of mu; ties break toward the lowest index.
std::vector<Triplet> mine_semi_hard(const Tensor& mu, const std::vector<int>& labels,
                                    const TripletConfig& cfg = {});

// Mean over triplets of max(0, d(a,p) - d(a,n) + margin). An empty list
// yields 0 and a stderr warning.
Tensor triplet_loss(const Tensor& mu, const std::vector<Triplet>& triplets,
                    const TripletConfig& cfg = {});

// ssim + bce + latent_weight * (kl + triplet).
Tensor total_loss(const Tensor& ssim, const Tensor& bce, const Tensor& kl, const Tensor& triplet,
                  const LossWeights& w = {});

}  // namespace mmtvae
