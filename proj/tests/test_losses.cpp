#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gradcheck.hpp"
#include "mmtvae/losses.hpp"
#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

using namespace mmtvae;

namespace {

const bool finite_checks_on = [] {
  set_finite_checks(true);
  return true;
}();

std::vector<double> random_values(std::int64_t n, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Reference miner: materialize every candidate and order explicitly, instead
// of tracking minima in one pass.
std::vector<Triplet> reference_miner(const std::vector<double>& mu, std::int64_t n, std::int64_t d,
                                     const std::vector<int>& labels, double margin) {
  auto dist2 = [&](std::int64_t i, std::int64_t j) {
    double acc = 0.0;
    for (std::int64_t k = 0; k < d; ++k) {
      const double t = mu[i * d + k] - mu[j * d + k];
      acc += t * t;
    }
    return acc;
  };
  std::vector<Triplet> out;
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t p = 0; p < n; ++p) {
      if (a == p || labels[a] != labels[p]) continue;
      const double dap = dist2(a, p);
      std::vector<std::pair<double, std::int64_t>> band, beyond;
      for (std::int64_t neg = 0; neg < n; ++neg) {
        if (labels[neg] == labels[a]) continue;
        const double dan = dist2(a, neg);
        if (dan > dap && dan < dap + margin) band.push_back({dan, neg});
        if (dan > dap) beyond.push_back({dan, neg});
      }
      auto pick = [](std::vector<std::pair<double, std::int64_t>>& v) {
        std::sort(v.begin(), v.end());
        return v.front().second;
      };
      if (!band.empty())
        out.push_back({a, p, pick(band)});
      else if (!beyond.empty())
        out.push_back({a, p, pick(beyond)});
    }
  return out;
}

bool same_triplets(const std::vector<Triplet>& a, const std::vector<Triplet>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].anchor != b[i].anchor || a[i].positive != b[i].positive ||
        a[i].negative != b[i].negative)
      return false;
  return true;
}

}  // namespace

TEST_CASE("kl loss analytic values") {
  CHECK(std::abs(kl_loss(Tensor::zeros({1, 1}), Tensor::zeros({1, 1})).item()) < 1e-9);
  CHECK(std::abs(kl_loss(Tensor::full({1, 1}, 1.0), Tensor::zeros({1, 1})).item() - 0.5) < 1e-9);
  const double expected = 1.5 - std::log(2.0);
  CHECK(std::abs(kl_loss(Tensor::zeros({1, 1}), Tensor::full({1, 1}, std::log(4.0))).item() -
                 expected) < 1e-9);

  // Batch mean: two identical rows give the same value as one.
  Tensor mu2 = Tensor::full({2, 1}, 1.0);
  Tensor lv2 = Tensor::zeros({2, 1});
  CHECK(kl_loss(mu2, lv2).item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("kl loss is nonnegative everywhere") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Tensor mu = Tensor::from_data({4, 3}, random_values(12, rng, -3.0, 3.0));
    Tensor lv = Tensor::from_data({4, 3}, random_values(12, rng, -3.0, 3.0));
    CHECK(kl_loss(mu, lv).item() >= -1e-12);
  }
}

TEST_CASE("ssim loss: identity, constant-image case, symmetry, range") {
  Rng rng(5);
  Tensor x = Tensor::from_data({1, 3, 16, 16}, random_values(3 * 256, rng));
  CHECK(std::abs(ssim_loss(x, x, 11, 1.5).item()) < 1e-9);

  // Constant 0 vs constant 1: SSIM collapses to C1/(1+C1).
  Tensor zeros = Tensor::zeros({1, 1, 16, 16});
  Tensor ones = Tensor::full({1, 1, 16, 16}, 1.0);
  const double c1 = 1e-4;
  const double expected_ssim = c1 / (1.0 + c1);
  const double loss = ssim_loss(zeros, ones, 11, 1.5).item();
  CHECK(std::abs((1.0 - loss) - expected_ssim) < 1e-9);

  Tensor y = Tensor::from_data({1, 3, 16, 16}, random_values(3 * 256, rng));
  CHECK(ssim_loss(x, y, 11, 1.5).item() ==
        doctest::Approx(ssim_loss(y, x, 11, 1.5).item()).epsilon(1e-12));
  const double l = ssim_loss(x, y, 7, 1.5).item();
  CHECK(l >= 0.0);
  CHECK(l <= 2.0);

  CHECK_THROWS_AS(ssim_loss(Tensor::zeros({1, 1, 8, 8}), Tensor::zeros({1, 1, 8, 8}), 11, 1.5),
                  std::invalid_argument);  // window larger than image
  CHECK_THROWS_AS(ssim_loss(x, Tensor::zeros({1, 3, 8, 8}), 7, 1.5), std::invalid_argument);
}

TEST_CASE("bce loss analytic values and entropy bound") {
  Tensor half = Tensor::full({2, 2}, 0.5);
  CHECK(std::abs(bce_loss(half, half).item() - std::log(2.0)) < 1e-9);

  // Perfect confident prediction: clamp keeps the loss tiny but finite.
  Tensor target = Tensor::from_data({4}, {0.0, 1.0, 1.0, 0.0});
  CHECK(bce_loss(target, target).item() < 1e-6);
  CHECK(bce_loss(target, target).item() > 0.0);

  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    Tensor p = Tensor::from_data({8}, random_values(8, rng, 0.01, 0.99));
    Tensor t = Tensor::from_data({8}, random_values(8, rng));
    CHECK(bce_loss(p, t).item() >= bce_loss(t, t).item() - 1e-12);
  }
}

TEST_CASE("semi-hard miner: hand example from 1-D means") {
  // a=0 and p=0.5 share a class; negatives at 0.6 and 5.0.
  Tensor mu = Tensor::from_data({4, 1}, {0.0, 0.5, 0.6, 5.0});
  std::vector<int> labels{0, 0, 1, 1};
  auto trips = mine_semi_hard(mu, labels, {0.2});
  // Pair (0,1): d(a,p)=0.25, band (0.25,0.45); d(a, 0.6)=0.36 qualifies.
  bool found = false;
  for (const auto& t : trips)
    if (t.anchor == 0 && t.positive == 1) {
      found = true;
      CHECK(t.negative == 2);
    }
  CHECK(found);
}

TEST_CASE("semi-hard miner: collapsed batch produces no triplets") {
  Tensor mu = Tensor::from_data({4, 2}, {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0});
  std::vector<int> labels{0, 0, 1, 1};
  CHECK(mine_semi_hard(mu, labels, {0.2}).empty());
}

TEST_CASE("semi-hard miner: singleton classes yield no pairs but no error") {
  Tensor mu = Tensor::from_data({3, 1}, {0.0, 1.0, 2.0});
  std::vector<int> labels{0, 1, 2};
  CHECK(mine_semi_hard(mu, labels, {0.2}).empty());
}

TEST_CASE("semi-hard miner matches the reference miner on random batches") {
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const std::int64_t n = 6 + static_cast<std::int64_t>(rng.uniform_int(55));
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng.uniform_int(8));
    std::vector<double> vals = random_values(n * d, rng, -2.0, 2.0);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(3));
    // Guarantee every class appears twice so pairs exist.
    for (int c = 0; c < 3; ++c) {
      labels[static_cast<std::size_t>(2 * c)] = c;
      labels[static_cast<std::size_t>(2 * c + 1)] = c;
    }
    Tensor mu = Tensor::from_data({n, d}, vals);
    auto fast = mine_semi_hard(mu, labels, {0.2});
    auto slow = reference_miner(vals, n, d, labels, 0.2);
    CHECK(same_triplets(fast, slow));
  }
}

TEST_CASE("semi-hard miner: scaling coordinates x2 with margin x4 keeps the set") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t n = 12;
    const std::int64_t d = 3;
    std::vector<double> vals = random_values(n * d, rng, -1.0, 1.0);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    std::vector<double> scaled = vals;
    for (double& v : scaled) v *= 2.0;
    auto base = mine_semi_hard(Tensor::from_data({n, d}, vals), labels, {0.2});
    auto big = mine_semi_hard(Tensor::from_data({n, d}, scaled), labels, {0.8});
    CHECK(same_triplets(base, big));
  }
}

TEST_CASE("triplet loss: analytic cases") {
  // 1-D: a=0, p=sqrt(2) -> d(a,p)=2; n=1 -> d(a,n)=1; hinge = 2-1+0.2.
  Tensor mu = Tensor::from_data({3, 1}, {0.0, std::sqrt(2.0), 1.0});
  std::vector<Triplet> one{{0, 1, 2}};
  CHECK(triplet_loss(mu, one, {0.2}).item() == doctest::Approx(1.2).epsilon(1e-12));

  // Satisfied margin: d(a,p)=1, d(a,n)=3 -> 0.
  Tensor mu2 = Tensor::from_data({3, 1}, {0.0, 1.0, std::sqrt(3.0)});
  CHECK(triplet_loss(mu2, one, {0.2}).item() == 0.0);

  CHECK(triplet_loss(mu, {}, {0.2}).item() == 0.0);  // empty list warns, returns 0

  // Mean over triplets.
  Tensor mu3 = Tensor::from_data({4, 1}, {0.0, std::sqrt(2.0), 1.0, 10.0});
  std::vector<Triplet> two{{0, 1, 2}, {0, 1, 3}};  // hinges 1.2 and 0
  CHECK(triplet_loss(mu3, two, {0.2}).item() == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("total loss combines terms per the training objective") {
  Tensor one = Tensor::scalar(1.0);
  const double total = total_loss(one, one, one, one).item();
  CHECK(total == 1.0 + 1.0 + 0.1 * (1.0 + 1.0));
  CHECK(total == doctest::Approx(2.2).epsilon(1e-12));

  Tensor zero = Tensor::scalar(0.0);
  CHECK(total_loss(zero, zero, zero, zero).item() == 0.0);

  LossWeights w;
  w.latent_weight = 0.0;
  CHECK_THROWS_AS(total_loss(one, one, one, one, w), std::invalid_argument);
}

TEST_CASE("gradient check: bce") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(9000 + s);
    auto p = gradcheck::random_input({2, 5}, rng, 0.05, 0.95);
    auto t = gradcheck::random_input({2, 5}, rng, 0.0, 1.0);
    INFO("bce instance " << s);
    CHECK(gradcheck::max_rel_err(
              [&](const std::vector<Tensor>& in) { return bce_loss(in[0], in[1]); }, {p, t}) <
          1e-4);
  }
}

TEST_CASE("gradient check: kl") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(9100 + s);
    auto mu = gradcheck::random_input({3, 4}, rng, -2.0, 2.0);
    auto lv = gradcheck::random_input({3, 4}, rng, -2.0, 2.0);
    INFO("kl instance " << s);
    CHECK(gradcheck::max_rel_err(
              [&](const std::vector<Tensor>& in) { return kl_loss(in[0], in[1]); }, {mu, lv}) <
          1e-4);
  }
}

TEST_CASE("gradient check: ssim") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(9200 + s);
    const int window = (s % 2) ? 5 : 3;
    auto x = gradcheck::random_input({1, 2, 6, 6}, rng, 0.1, 0.9);
    auto y = gradcheck::random_input({1, 2, 6, 6}, rng, 0.1, 0.9);
    INFO("ssim instance " << s << " window " << window);
    CHECK(gradcheck::max_rel_err(
              [&](const std::vector<Tensor>& in) { return ssim_loss(in[0], in[1], window, 1.5); },
              {x, y}) < 1e-4);
  }
}

TEST_CASE("gradient check: triplet loss on mined triplets") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(9300 + s);
    const std::int64_t n = 6, d = 3;
    auto mu = gradcheck::random_input({n, d}, rng, -1.0, 1.0);
    std::vector<int> labels{0, 0, 1, 1, 2, 2};
    auto triplets = mine_semi_hard(Tensor::from_data({n, d}, mu.data), labels, {0.2});
    if (triplets.empty()) continue;
    INFO("triplet instance " << s);
    CHECK(gradcheck::max_rel_err(
              [&](const std::vector<Tensor>& in) { return triplet_loss(in[0], triplets, {0.2}); },
              {mu}) < 1e-4);
  }
}

TEST_CASE("gradient check: combined objective") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(9400 + s);
    auto img_x = gradcheck::random_input({1, 1, 5, 5}, rng, 0.1, 0.9);
    auto img_y = gradcheck::random_input({1, 1, 5, 5}, rng, 0.1, 0.9);
    auto wbt_p = gradcheck::random_input({1, 1, 5, 5}, rng, 0.1, 0.9);
    auto wbt_t = gradcheck::random_input({1, 1, 5, 5}, rng, 0.1, 0.9);
    auto mu = gradcheck::random_input({4, 2}, rng, -1.0, 1.0);
    auto lv = gradcheck::random_input({4, 2}, rng, -1.0, 1.0);
    std::vector<int> labels{0, 0, 1, 1};
    auto triplets = mine_semi_hard(Tensor::from_data({4, 2}, mu.data), labels, {0.2});
    INFO("combined instance " << s);
    CHECK(gradcheck::max_rel_err(
              [&](const std::vector<Tensor>& in) {
                return total_loss(ssim_loss(in[0], in[1], 3, 1.5), bce_loss(in[2], in[3]),
                                  kl_loss(in[4], in[5]), triplet_loss(in[4], triplets, {0.2}));
              },
              {img_x, img_y, wbt_p, wbt_t, mu, lv}) < 1e-4);
  }
}
