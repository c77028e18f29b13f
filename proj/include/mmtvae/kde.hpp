#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmtvae/data.hpp"
#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

namespace mmtvae {

// Per-class latent density: an equal-weight mixture of isotropic Gaussian
// kernels, one per stored latent mean, sharing a single scalar bandwidth.
struct KdeModel {
  Tensor points;  // (n, d) kernel centers
  double bandwidth = 0.0;
  Label label = Label::AOM;

  std::int64_t count() const { return points.shape()[0]; }
  std::int64_t dim() const { return points.shape()[1]; }
};

struct ClassKdeSet {
  std::array<KdeModel, kNumClasses> models;  // indexed by Label value
  std::int64_t latent_dim = 0;
};

// 20 log-spaced candidates spanning [0.05, 5] x (median pairwise distance /
// sqrt(d)), so the grid tracks the scatter scale of the points. Throws when
// all points coincide (no scale to anchor to).
std::vector<double> default_bandwidth_grid(const Tensor& points);

// Selects the bandwidth maximizing the mean held-out log-likelihood across
// `folds` cross-validation folds (fold assignment shuffled by seed), ties
// broken toward the smaller candidate. Requires n >= folds >= 2. Throws when
// every candidate yields a degenerate (-inf) held-out likelihood.
KdeModel fit_kde(const Tensor& points, Label label, std::vector<double> bandwidth_grid,
                 int folds, std::uint64_t seed);
KdeModel fit_kde(const Tensor& points, Label label, std::uint64_t seed);

double kde_log_density(const KdeModel& m, const std::vector<double>& z);
double kde_density(const KdeModel& m, const std::vector<double>& z);

// Exact mixture sampling: each draw picks a kernel center uniformly and adds
// N(0, h^2 I) noise. Returns (count, d).
Tensor sample_kde(const KdeModel& m, std::int64_t count, Rng& rng);

// One model per file: "MMKD" magic, version, JSON header (class, bandwidth,
// d, n), then the points as a tensor record. Written atomically.
void save_kde(const std::string& path, const KdeModel& m);
KdeModel load_kde(const std::string& path);

}  // namespace mmtvae
