#include "mmtvae/kde.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mmtvae/checkpoint.hpp"

namespace mmtvae {

namespace {

constexpr double kTwoPi = 6.283185307179586;

void require_points(const Tensor& points) {
  if (!points.defined() || points.dim() != 2) {
    throw std::invalid_argument("kernel centers must form an (n, d) tensor");
  }
}

// Log-density of z under a mixture built from `rows` of the flat (n, d)
// point array restricted to the index subset; logsumexp keeps tiny kernels
// from flushing the whole sum to zero.
double subset_log_density(const std::vector<double>& flat, std::int64_t d,
                          const std::vector<std::size_t>& subset, double h, const double* z) {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> exponents(subset.size());
  for (std::size_t k = 0; k < subset.size(); ++k) {
    const double* row = flat.data() + std::size_t(subset[k]) * std::size_t(d);
    double sq = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double t = z[j] - row[j];
      sq += t * t;
    }
    exponents[k] = -0.5 * sq / (h * h);
    best = std::max(best, exponents[k]);
  }
  if (!std::isfinite(best)) return -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (double e : exponents) sum += std::exp(e - best);
  return best + std::log(sum) - std::log(double(subset.size())) -
         0.5 * double(d) * std::log(kTwoPi * h * h);
}

}  // namespace

std::vector<double> default_bandwidth_grid(const Tensor& points) {
  require_points(points);
  const std::int64_t n = points.shape()[0], d = points.shape()[1];
  const std::vector<double>& flat = points.values();
  std::vector<double> dists;
  dists.reserve(std::size_t(n) * std::size_t(n - 1) / 2);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        const double t = flat[std::size_t(i * d + k)] - flat[std::size_t(j * d + k)];
        sq += t * t;
      }
      dists.push_back(std::sqrt(sq));
    }
  }
  if (dists.empty()) throw std::invalid_argument("bandwidth grid needs at least two points");
  std::nth_element(dists.begin(), dists.begin() + std::ptrdiff_t(dists.size() / 2), dists.end());
  const double median = dists[dists.size() / 2];
  if (median <= 0.0) {
    throw std::runtime_error("all points coincide; no scale to anchor a bandwidth grid");
  }
  const double scale = median / std::sqrt(double(d));
  std::vector<double> grid(20);
  for (int i = 0; i < 20; ++i) {
    grid[std::size_t(i)] = 0.05 * scale * std::pow(5.0 / 0.05, i / 19.0);
  }
  return grid;
}

KdeModel fit_kde(const Tensor& points, Label label, std::vector<double> bandwidth_grid, int folds,
                 std::uint64_t seed) {
  require_points(points);
  const std::int64_t n = points.shape()[0], d = points.shape()[1];
  if (folds < 2) throw std::invalid_argument("cross validation needs at least 2 folds");
  if (n < folds) {
    throw std::invalid_argument("cross validation needs at least one point per fold");
  }
  if (bandwidth_grid.empty()) throw std::invalid_argument("empty bandwidth grid");
  for (double h : bandwidth_grid) {
    if (!(h > 0.0)) throw std::invalid_argument("bandwidths must be positive");
  }
  std::sort(bandwidth_grid.begin(), bandwidth_grid.end());

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> fold_of(static_cast<std::size_t>(folds));
  for (std::size_t i = 0; i < order.size(); ++i) {
    fold_of[i % std::size_t(folds)].push_back(order[i]);
  }

  const std::vector<double>& flat = points.values();
  double best_score = -std::numeric_limits<double>::infinity();
  double best_h = 0.0;
  bool any_finite = false;
  for (double h : bandwidth_grid) {
    double fold_mean_sum = 0.0;
    for (int f = 0; f < folds; ++f) {
      std::vector<std::size_t> train;
      train.reserve(std::size_t(n));
      for (int g = 0; g < folds; ++g) {
        if (g == f) continue;
        train.insert(train.end(), fold_of[std::size_t(g)].begin(), fold_of[std::size_t(g)].end());
      }
      double held_out = 0.0;
      for (std::size_t idx : fold_of[std::size_t(f)]) {
        held_out += subset_log_density(flat, d, train, h, flat.data() + idx * std::size_t(d));
      }
      fold_mean_sum += held_out / double(fold_of[std::size_t(f)].size());
    }
    const double score = fold_mean_sum / double(folds);
    if (std::isfinite(score)) {
      any_finite = true;
      // Strict improvement only, so equal scores keep the smaller bandwidth.
      if (score > best_score) {
        best_score = score;
        best_h = h;
      }
    }
  }
  if (!any_finite) {
    throw std::runtime_error("every candidate bandwidth has degenerate held-out likelihood");
  }

  KdeModel m;
  m.points = Tensor::from_data(points.shape(), points.values());
  m.bandwidth = best_h;
  m.label = label;
  return m;
}

KdeModel fit_kde(const Tensor& points, Label label, std::uint64_t seed) {
  // Small classes cannot feed five folds; shrink to leave-one-out instead of
  // refusing, so sparse held-out splits still get a density.
  const int folds = int(std::min<std::int64_t>(5, points.defined() ? points.shape()[0] : 0));
  if (folds < 2) throw std::invalid_argument("bandwidth selection needs at least 2 points");
  return fit_kde(points, label, default_bandwidth_grid(points), folds, seed);
}

double kde_log_density(const KdeModel& m, const std::vector<double>& z) {
  require_points(m.points);
  if (std::int64_t(z.size()) != m.dim()) {
    throw std::invalid_argument("query dimension does not match the kernel centers");
  }
  std::vector<std::size_t> all(std::size_t(m.count()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return subset_log_density(m.points.values(), m.dim(), all, m.bandwidth, z.data());
}

double kde_density(const KdeModel& m, const std::vector<double>& z) {
  return std::exp(kde_log_density(m, z));
}

Tensor sample_kde(const KdeModel& m, std::int64_t count, Rng& rng) {
  require_points(m.points);
  if (count < 0) throw std::invalid_argument("sample count must be non-negative");
  const std::int64_t n = m.count(), d = m.dim();
  const std::vector<double>& flat = m.points.values();
  std::vector<double> out(std::size_t(count) * std::size_t(d));
  for (std::int64_t i = 0; i < count; ++i) {
    const std::size_t pick = std::size_t(rng.uniform_int(std::uint64_t(n)));
    for (std::int64_t j = 0; j < d; ++j) {
      out[std::size_t(i * d + j)] = flat[pick * std::size_t(d) + std::size_t(j)] +
                                    m.bandwidth * rng.normal();
    }
  }
  return Tensor::from_data({count, d}, std::move(out));
}

void save_kde(const std::string& path, const KdeModel& m) {
  require_points(m.points);
  nlohmann::json header{{"class", label_name(m.label)},
                        {"bandwidth", m.bandwidth},
                        {"d", m.dim()},
                        {"n", m.count()}};
  const std::string hs = header.dump();

  std::ostringstream os(std::ios::binary);
  os.write("MMKD", 4);
  const std::uint32_t version = 1;
  const std::uint32_t hlen = std::uint32_t(hs.size());
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&hlen), 4);
  os.write(hs.data(), std::streamsize(hs.size()));
  TensorRecord rec;
  rec.name = "points";
  rec.shape = m.points.shape();
  rec.data.reserve(m.points.values().size());
  for (double v : m.points.values()) rec.data.push_back(float(v));
  write_tensor_record(os, rec);

  const std::filesystem::path tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    const std::string bytes = os.str();
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

KdeModel load_kde(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MMKD", 4) != 0) {
    throw std::runtime_error(path + " is not a density model file");
  }
  std::uint32_t version = 0, hlen = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&hlen), 4);
  if (!is || version != 1) throw std::runtime_error("unsupported density model version");
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw std::runtime_error("truncated density model header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed density model header: " + std::string(e.what()));
  }

  TensorRecord rec;
  if (!read_tensor_record(is, rec) || rec.name != "points" || rec.shape.size() != 2) {
    throw std::runtime_error(path + " is missing its points record");
  }
  KdeModel m;
  m.bandwidth = header.at("bandwidth").get<double>();
  m.label = parse_label(header.at("class").get<std::string>());
  std::vector<double> vals(rec.data.begin(), rec.data.end());
  m.points = Tensor::from_data(rec.shape, std::move(vals));
  if (m.count() != header.at("n").get<std::int64_t>() ||
      m.dim() != header.at("d").get<std::int64_t>()) {
    throw std::runtime_error(path + " header disagrees with its points record");
  }
  return m;
}

}  // namespace mmtvae
