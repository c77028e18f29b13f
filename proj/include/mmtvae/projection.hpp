#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmtvae/data.hpp"
#include "mmtvae/tensor.hpp"

namespace mmtvae {

struct TsneConfig {
  double perplexity = 30.0;  // clamped to (n - 1) / 3 for small inputs
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
};

// One point's conditional neighbor distribution, calibrated by binary search
// on the Gaussian precision until the entropy matches log(perplexity).
struct PerplexityFit {
  std::vector<double> probs;  // over the other points, in input order
  double beta = 0.0;          // precision 1 / (2 sigma^2)
  double entropy = 0.0;       // natural log units
  int iterations = 0;
};

// sq_dists: squared distances to the other points (self excluded). Converges
// to 1e-3 relative entropy error within at most 50 bisection steps.
PerplexityFit calibrate_perplexity(const std::vector<double>& sq_dists, double target_perplexity);

// Top-2 principal components of the centered covariance; coordinates are
// orientation-fixed so the largest-magnitude loading of each axis is
// positive. Throws when all points coincide (degenerate covariance).
Tensor pca_project(const Tensor& points);

// Exact t-SNE: full pairwise affinities, perplexity-calibrated Gaussians in
// the input space against a Student-t kernel in the plane, gradient descent
// with momentum and per-coordinate gains, early exaggeration up front.
Tensor tsne_project(const Tensor& points, const TsneConfig& cfg, std::uint64_t seed);

struct ProjectionResult {
  Tensor coords;  // (n, 2)
  std::string method;  // "pca" or "tsne"
  std::vector<std::string> sample_ids;
  std::vector<Label> labels;
};

struct EmbeddingTable {
  std::vector<std::string> sample_ids;
  std::vector<Label> labels;
  Tensor mus;  // (n, d)
};

// CSV artifacts: embeddings as `sample_id,label,mu_0,...,mu_{d-1}`,
// projections as `sample_id,label,x,y`. Floats are written with enough
// digits to round-trip exactly.
void write_embedding_csv(const std::string& path, const std::vector<std::string>& sample_ids,
                         const std::vector<Label>& labels, const Tensor& mus);
EmbeddingTable read_embedding_csv(const std::string& path);
void write_projection_csv(const std::string& path, const ProjectionResult& r);

}  // namespace mmtvae
