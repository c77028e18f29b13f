#include "mmtvae/metrics.hpp"

#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace mmtvae {

double silhouette_score(const Tensor& points, const std::vector<Label>& labels) {
  if (!points.defined() || points.dim() != 2) {
    throw std::invalid_argument("silhouette needs an (n, d) point tensor");
  }
  const std::int64_t n = points.shape()[0], d = points.shape()[1];
  if (std::size_t(n) != labels.size()) {
    throw std::invalid_argument("silhouette labels do not match the points");
  }
  if (std::set<Label>(labels.begin(), labels.end()).size() < 2) {
    throw std::invalid_argument("silhouette needs at least two distinct labels");
  }

  const std::vector<double>& flat = points.values();
  auto dist = [&](std::int64_t i, std::int64_t j) {
    double sq = 0.0;
    for (std::int64_t k = 0; k < d; ++k) {
      const double t = flat[std::size_t(i * d + k)] - flat[std::size_t(j * d + k)];
      sq += t * t;
    }
    return std::sqrt(sq);
  };

  std::array<std::int64_t, kNumClasses> count{};
  for (Label l : labels) ++count[std::size_t(int(l))];

  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int own = int(labels[std::size_t(i)]);
    if (count[std::size_t(own)] < 2) continue;  // singleton scores 0

    std::array<double, kNumClasses> sum{};
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i) sum[std::size_t(int(labels[std::size_t(j)]))] += dist(i, j);
    }
    const double a = sum[std::size_t(own)] / double(count[std::size_t(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < kNumClasses; ++c) {
      if (c != own && count[std::size_t(c)] > 0) {
        b = std::min(b, sum[std::size_t(c)] / double(count[std::size_t(c)]));
      }
    }
    total += (b - a) / std::max(a, b);
  }
  return total / double(n);
}

void NearestClassMean::fit(const Tensor& rows, const std::vector<Label>& labels) {
  if (!rows.defined() || rows.dim() != 2) {
    throw std::invalid_argument("classifier needs an (n, d) tensor of rows");
  }
  const std::int64_t n = rows.shape()[0];
  dim = rows.shape()[1];
  if (std::size_t(n) != labels.size()) {
    throw std::invalid_argument("classifier labels do not match the rows");
  }
  std::array<std::int64_t, kNumClasses> count{};
  for (auto& m : means) m.assign(std::size_t(dim), 0.0);
  const std::vector<double>& flat = rows.values();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t c = std::size_t(int(labels[std::size_t(i)]));
    ++count[c];
    for (std::int64_t k = 0; k < dim; ++k) {
      means[c][std::size_t(k)] += flat[std::size_t(i * dim + k)];
    }
  }
  for (int c = 0; c < kNumClasses; ++c) {
    if (count[std::size_t(c)] == 0) {
      throw std::invalid_argument(std::string("class ") + label_name(Label(c)) +
                                  " has no rows to average");
    }
    for (double& v : means[std::size_t(c)]) v /= double(count[std::size_t(c)]);
  }
}

Label NearestClassMean::classify(const std::vector<double>& row) const {
  if (std::int64_t(row.size()) != dim) {
    throw std::invalid_argument("row dimension does not match the fitted means");
  }
  double best = std::numeric_limits<double>::infinity();
  int best_class = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    double sq = 0.0;
    for (std::int64_t k = 0; k < dim; ++k) {
      const double t = row[std::size_t(k)] - means[std::size_t(c)][std::size_t(k)];
      sq += t * t;
    }
    if (sq < best) {
      best = sq;
      best_class = c;
    }
  }
  return Label(best_class);
}

double NearestClassMean::accuracy(const Tensor& rows, const std::vector<Label>& labels) const {
  if (!rows.defined() || rows.dim() != 2 || rows.shape()[1] != dim) {
    throw std::invalid_argument("rows do not match the fitted means");
  }
  if (std::size_t(rows.shape()[0]) != labels.size() || labels.empty()) {
    throw std::invalid_argument("labels do not match the rows");
  }
  const std::vector<double>& flat = rows.values();
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < rows.shape()[0]; ++i) {
    std::vector<double> row(flat.begin() + std::ptrdiff_t(i * dim),
                            flat.begin() + std::ptrdiff_t((i + 1) * dim));
    hits += classify(row) == labels[std::size_t(i)];
  }
  return double(hits) / double(rows.shape()[0]);
}

}  // namespace mmtvae
