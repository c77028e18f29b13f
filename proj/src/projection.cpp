#include "mmtvae/projection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "mmtvae/rng.hpp"

namespace mmtvae {

namespace {

void require_points(const Tensor& points, std::int64_t min_rows) {
  if (!points.defined() || points.dim() != 2) {
    throw std::invalid_argument("projection needs an (n, d) point tensor");
  }
  if (points.shape()[0] < min_rows) {
    throw std::invalid_argument("projection needs at least " + std::to_string(min_rows) +
                                " points");
  }
}

// Centered copy of the points; returns false when every point is identical.
bool center(const Tensor& points, std::vector<double>& out) {
  const std::int64_t n = points.shape()[0], d = points.shape()[1];
  out = points.values();
  std::vector<double> mean(std::size_t(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < d; ++k) mean[std::size_t(k)] += out[std::size_t(i * d + k)];
  }
  for (double& m : mean) m /= double(n);
  double spread = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < d; ++k) {
      double& v = out[std::size_t(i * d + k)];
      v -= mean[std::size_t(k)];
      spread += v * v;
    }
  }
  return spread > 0.0;
}

}  // namespace

PerplexityFit calibrate_perplexity(const std::vector<double>& sq_dists, double target_perplexity) {
  if (sq_dists.empty()) throw std::invalid_argument("no neighbors to calibrate against");
  if (!(target_perplexity > 0.0) || target_perplexity > double(sq_dists.size())) {
    throw std::invalid_argument("target perplexity must lie in (0, n-1]");
  }
  const double target_entropy = std::log(target_perplexity);
  const double tol = 1e-3 * std::max(std::abs(target_entropy), 1e-8);

  PerplexityFit fit;
  fit.probs.resize(sq_dists.size());
  fit.beta = 1.0;
  double beta_lo = 0.0, beta_hi = std::numeric_limits<double>::infinity();
  for (fit.iterations = 1; fit.iterations <= 50; ++fit.iterations) {
    // Shift by the smallest distance so the largest exponent is 0.
    const double base = *std::min_element(sq_dists.begin(), sq_dists.end());
    double sum = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < sq_dists.size(); ++j) {
      const double p = std::exp(-fit.beta * (sq_dists[j] - base));
      fit.probs[j] = p;
      sum += p;
      weighted += sq_dists[j] * p;
    }
    fit.entropy = std::log(sum) + fit.beta * (weighted / sum - base);
    for (double& p : fit.probs) p /= sum;
    const double diff = fit.entropy - target_entropy;
    if (std::abs(diff) <= tol) break;
    if (diff > 0.0) {  // entropy too high: sharpen
      beta_lo = fit.beta;
      fit.beta = std::isinf(beta_hi) ? fit.beta * 2.0 : 0.5 * (beta_lo + beta_hi);
    } else {
      beta_hi = fit.beta;
      fit.beta = beta_lo == 0.0 ? fit.beta / 2.0 : 0.5 * (beta_lo + beta_hi);
    }
  }
  fit.iterations = std::min(fit.iterations, 50);
  return fit;
}

Tensor pca_project(const Tensor& points) {
  require_points(points, 3);
  const std::int64_t n = points.shape()[0], d = points.shape()[1];
  if (d < 2) throw std::invalid_argument("projection needs at least 2 input dimensions");
  std::vector<double> centered;
  if (!center(points, centered)) {
    throw std::runtime_error("all points are identical; covariance is degenerate");
  }

  // Covariance, then a cyclic Jacobi sweep to diagonalize it. d is at most a
  // few hundred here, so the dense solve is immediate and fully
  // deterministic.
  std::vector<double> cov(std::size_t(d) * std::size_t(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = centered.data() + std::size_t(i * d);
    for (std::int64_t a = 0; a < d; ++a) {
      for (std::int64_t b = a; b < d; ++b) {
        cov[std::size_t(a * d + b)] += row[a] * row[b];
      }
    }
  }
  for (std::int64_t a = 0; a < d; ++a) {
    for (std::int64_t b = a; b < d; ++b) {
      cov[std::size_t(a * d + b)] /= double(n - 1);
      cov[std::size_t(b * d + a)] = cov[std::size_t(a * d + b)];
    }
  }

  std::vector<double> vec(std::size_t(d) * std::size_t(d), 0.0);
  for (std::int64_t a = 0; a < d; ++a) vec[std::size_t(a * d + a)] = 1.0;
  double frob = 0.0;
  for (double c : cov) frob += c * c;
  const double stop = 1e-24 * frob;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::int64_t a = 0; a < d; ++a) {
      for (std::int64_t b = a + 1; b < d; ++b) {
        off += cov[std::size_t(a * d + b)] * cov[std::size_t(a * d + b)];
      }
    }
    if (off <= stop) break;
    for (std::int64_t p = 0; p < d; ++p) {
      for (std::int64_t q = p + 1; q < d; ++q) {
        const double apq = cov[std::size_t(p * d + q)];
        if (apq == 0.0) continue;
        const double app = cov[std::size_t(p * d + p)];
        const double aqq = cov[std::size_t(q * d + q)];
        const double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
        const double c = std::cos(theta), s = std::sin(theta);
        for (std::int64_t k = 0; k < d; ++k) {
          const double ckp = cov[std::size_t(k * d + p)];
          const double ckq = cov[std::size_t(k * d + q)];
          cov[std::size_t(k * d + p)] = c * ckp - s * ckq;
          cov[std::size_t(k * d + q)] = s * ckp + c * ckq;
        }
        for (std::int64_t k = 0; k < d; ++k) {
          const double cpk = cov[std::size_t(p * d + k)];
          const double cqk = cov[std::size_t(q * d + k)];
          cov[std::size_t(p * d + k)] = c * cpk - s * cqk;
          cov[std::size_t(q * d + k)] = s * cpk + c * cqk;
        }
        for (std::int64_t k = 0; k < d; ++k) {
          const double vkp = vec[std::size_t(k * d + p)];
          const double vkq = vec[std::size_t(k * d + q)];
          vec[std::size_t(k * d + p)] = c * vkp - s * vkq;
          vec[std::size_t(k * d + q)] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::int64_t top[2] = {0, 1};
  for (std::int64_t a = 0; a < d; ++a) {
    const double lam = cov[std::size_t(a * d + a)];
    if (lam > cov[std::size_t(top[0] * d + top[0])]) {
      top[1] = top[0];
      top[0] = a;
    } else if (a != top[0] && lam > cov[std::size_t(top[1] * d + top[1])]) {
      top[1] = a;
    }
  }

  // Orientation fix: make the largest-magnitude loading of each axis
  // positive so reruns and rotated inputs agree up to exact sign.
  std::vector<double> axes(std::size_t(2) * std::size_t(d));
  for (int which = 0; which < 2; ++which) {
    std::int64_t arg = 0;
    for (std::int64_t k = 1; k < d; ++k) {
      if (std::abs(vec[std::size_t(k * d + top[which])]) >
          std::abs(vec[std::size_t(arg * d + top[which])])) {
        arg = k;
      }
    }
    const double flip = vec[std::size_t(arg * d + top[which])] < 0.0 ? -1.0 : 1.0;
    for (std::int64_t k = 0; k < d; ++k) {
      axes[std::size_t(which * d + k)] = flip * vec[std::size_t(k * d + top[which])];
    }
  }

  std::vector<double> coords(std::size_t(n) * 2);
  for (std::int64_t i = 0; i < n; ++i) {
    for (int which = 0; which < 2; ++which) {
      double dot = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        dot += centered[std::size_t(i * d + k)] * axes[std::size_t(which * d + k)];
      }
      coords[std::size_t(i * 2 + which)] = dot;
    }
  }
  return Tensor::from_data({n, 2}, std::move(coords));
}

Tensor tsne_project(const Tensor& points, const TsneConfig& cfg, std::uint64_t seed) {
  require_points(points, 3);
  if (cfg.iterations < 1 || !(cfg.perplexity > 0.0)) {
    throw std::invalid_argument("t-SNE needs positive perplexity and iterations");
  }
  const std::int64_t n = points.shape()[0], d = points.shape()[1];
  std::vector<double> centered;
  if (!center(points, centered)) {
    throw std::runtime_error("all points are identical; covariance is degenerate");
  }
  const double perplexity = std::min(cfg.perplexity, double(n - 1) / 3.0);

  std::vector<double> sq(std::size_t(n) * std::size_t(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        const double t = centered[std::size_t(i * d + k)] - centered[std::size_t(j * d + k)];
        s += t * t;
      }
      sq[std::size_t(i * n + j)] = sq[std::size_t(j * n + i)] = s;
    }
  }

  // Symmetrized affinities from per-point calibrated conditionals.
  std::vector<double> P(std::size_t(n) * std::size_t(n), 0.0);
  std::vector<double> row(std::size_t(n - 1));
  for (std::int64_t i = 0; i < n; ++i) {
    std::size_t w = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i) row[w++] = sq[std::size_t(i * n + j)];
    }
    const PerplexityFit fit = calibrate_perplexity(row, perplexity);
    w = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j != i) P[std::size_t(i * n + j)] = fit.probs[w++];
    }
  }
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      const double p = std::max(
          (P[std::size_t(i * n + j)] + P[std::size_t(j * n + i)]) / (2.0 * double(n)), 1e-12);
      P[std::size_t(i * n + j)] = P[std::size_t(j * n + i)] = p;
    }
  }

  Rng rng(seed);
  std::vector<double> y(std::size_t(n) * 2);
  for (double& v : y) v = 1e-4 * rng.normal();
  std::vector<double> velocity(y.size(), 0.0);
  std::vector<double> gain(y.size(), 1.0);
  std::vector<double> qnum(std::size_t(n) * std::size_t(n), 0.0);
  std::vector<double> grad(y.size());

  for (int it = 0; it < cfg.iterations; ++it) {
    const double exaggeration = it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
    double z = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = i + 1; j < n; ++j) {
        const double dx = y[std::size_t(i * 2)] - y[std::size_t(j * 2)];
        const double dy = y[std::size_t(i * 2 + 1)] - y[std::size_t(j * 2 + 1)];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        qnum[std::size_t(i * n + j)] = qnum[std::size_t(j * n + i)] = q;
        z += 2.0 * q;
      }
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = qnum[std::size_t(i * n + j)];
        const double coeff =
            4.0 * (exaggeration * P[std::size_t(i * n + j)] - std::max(q / z, 1e-12)) * q;
        grad[std::size_t(i * 2)] += coeff * (y[std::size_t(i * 2)] - y[std::size_t(j * 2)]);
        grad[std::size_t(i * 2 + 1)] +=
            coeff * (y[std::size_t(i * 2 + 1)] - y[std::size_t(j * 2 + 1)]);
      }
    }
    const double momentum = it < 250 ? 0.5 : 0.8;
    for (std::size_t k = 0; k < y.size(); ++k) {
      gain[k] = (grad[k] > 0.0) != (velocity[k] > 0.0) ? gain[k] + 0.2
                                                       : std::max(gain[k] * 0.8, 0.01);
      velocity[k] = momentum * velocity[k] - cfg.learning_rate * gain[k] * grad[k];
      y[k] += velocity[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      mx += y[std::size_t(i * 2)];
      my += y[std::size_t(i * 2 + 1)];
    }
    mx /= double(n);
    my /= double(n);
    for (std::int64_t i = 0; i < n; ++i) {
      y[std::size_t(i * 2)] -= mx;
      y[std::size_t(i * 2 + 1)] -= my;
    }
  }
  return Tensor::from_data({n, 2}, std::move(y));
}

namespace {

void write_csv_atomic(const std::string& path, const std::string& body) {
  const std::filesystem::path tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << body;
    if (!os) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_embedding_csv(const std::string& path, const std::vector<std::string>& sample_ids,
                         const std::vector<Label>& labels, const Tensor& mus) {
  if (!mus.defined() || mus.dim() != 2) {
    throw std::invalid_argument("embedding tensor must be (n, d)");
  }
  const std::int64_t n = mus.shape()[0], d = mus.shape()[1];
  if (sample_ids.size() != std::size_t(n) || labels.size() != std::size_t(n)) {
    throw std::invalid_argument("embedding ids and labels must match the rows");
  }
  std::string body = "sample_id,label";
  for (std::int64_t k = 0; k < d; ++k) body += ",mu_" + std::to_string(k);
  body += "\n";
  for (std::int64_t i = 0; i < n; ++i) {
    body += sample_ids[std::size_t(i)];
    body += ",";
    body += label_name(labels[std::size_t(i)]);
    for (std::int64_t k = 0; k < d; ++k) {
      body += ",";
      body += fmt(mus.values()[std::size_t(i * d + k)]);
    }
    body += "\n";
  }
  write_csv_atomic(path, body);
}

EmbeddingTable read_embedding_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding csv '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("embedding csv '" + path + "' is empty");
  std::int64_t d = 0;
  {
    std::stringstream header(line);
    std::string cell;
    if (!std::getline(header, cell, ',') || cell != "sample_id" ||
        !std::getline(header, cell, ',') || cell != "label")
      throw std::runtime_error("embedding csv '" + path + "': bad header '" + line + "'");
    while (std::getline(header, cell, ',')) {
      if (cell != "mu_" + std::to_string(d))
        throw std::runtime_error("embedding csv '" + path + "': bad header column '" + cell + "'");
      ++d;
    }
    if (d == 0) throw std::runtime_error("embedding csv '" + path + "': no coordinate columns");
  }

  EmbeddingTable table;
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    if (!std::getline(row, cell, ','))
      throw std::runtime_error("embedding csv '" + path + "': short row '" + line + "'");
    table.sample_ids.push_back(cell);
    if (!std::getline(row, cell, ','))
      throw std::runtime_error("embedding csv '" + path + "': short row '" + line + "'");
    table.labels.push_back(parse_label(cell));
    for (std::int64_t k = 0; k < d; ++k) {
      if (!std::getline(row, cell, ','))
        throw std::runtime_error("embedding csv '" + path + "': short row '" + line + "'");
      char* end = nullptr;
      values.push_back(std::strtod(cell.c_str(), &end));
      if (end == cell.c_str() || *end != '\0')
        throw std::runtime_error("embedding csv '" + path + "': bad number '" + cell + "'");
    }
  }
  const std::int64_t n = std::int64_t(table.sample_ids.size());
  if (n == 0) throw std::runtime_error("embedding csv '" + path + "' has no rows");
  table.mus = Tensor::from_data({n, d}, std::move(values));
  return table;
}

void write_projection_csv(const std::string& path, const ProjectionResult& r) {
  if (!r.coords.defined() || r.coords.dim() != 2 || r.coords.shape()[1] != 2) {
    throw std::invalid_argument("projection coordinates must be (n, 2)");
  }
  const std::int64_t n = r.coords.shape()[0];
  if (r.sample_ids.size() != std::size_t(n) || r.labels.size() != std::size_t(n)) {
    throw std::invalid_argument("projection ids and labels must match the rows");
  }
  std::string body = "sample_id,label,x,y\n";
  for (std::int64_t i = 0; i < n; ++i) {
    body += r.sample_ids[std::size_t(i)];
    body += ",";
    body += label_name(r.labels[std::size_t(i)]);
    body += ",";
    body += fmt(r.coords.values()[std::size_t(i * 2)]);
    body += ",";
    body += fmt(r.coords.values()[std::size_t(i * 2 + 1)]);
    body += "\n";
  }
  write_csv_atomic(path, body);
}

}  // namespace mmtvae
