#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mmtvae/data.hpp"
#include "mmtvae/tensor.hpp"

namespace mmtvae {

// Mean silhouette over all points with Euclidean distances: per point,
// s = (b - a) / max(a, b) where a is the mean distance to the point's own
// cluster (self excluded) and b the smallest mean distance to another
// cluster. Singleton-cluster points score 0 by convention. Requires at least
// two distinct labels.
double silhouette_score(const Tensor& points, const std::vector<Label>& labels);

// Classifies a vector by the nearest per-class mean in Euclidean distance.
struct NearestClassMean {
  std::int64_t dim = 0;
  std::array<std::vector<double>, kNumClasses> means;

  // rows: (n, d); every class must appear at least once.
  void fit(const Tensor& rows, const std::vector<Label>& labels);
  Label classify(const std::vector<double>& row) const;
  double accuracy(const Tensor& rows, const std::vector<Label>& labels) const;
};

}  // namespace mmtvae
