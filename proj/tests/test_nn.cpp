#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "mmtvae/nn.hpp"
#include "mmtvae/rng.hpp"
#include "mmtvae/tensor.hpp"

using namespace mmtvae;

namespace {

const bool finite_checks_on = [] {
  set_finite_checks(true);
  return true;
}();

std::vector<double> random_values(std::int64_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("conv layer init: deterministic, zero bias, fan-in-scaled uniform") {
  Rng r1(3), r2(3);
  Conv2dLayer a(40, 30, 3, 1, 1, r1);
  Conv2dLayer b(40, 30, 3, 1, 1, r2);
  CHECK(a.weight.values() == b.weight.values());
  for (double v : a.bias.values()) CHECK(v == 0.0);

  // 40*30*9 = 10800 draws; uniform on (-b,b) has std b/sqrt(3).
  const double bound = std::sqrt(1.0 / (40 * 9));
  double s2 = 0.0, mx = 0.0;
  for (double v : a.weight.values()) {
    s2 += v * v;
    mx = std::max(mx, std::abs(v));
  }
  const double stddev = std::sqrt(s2 / static_cast<double>(a.weight.numel()));
  CHECK(stddev == doctest::Approx(bound / std::sqrt(3.0)).epsilon(0.05));
  CHECK(mx <= bound);
}

TEST_CASE("conv layer applies bias per output channel") {
  Rng r(1);
  Conv2dLayer layer(1, 2, 1, 1, 0, r);
  layer.weight.mutable_values() = {1.0, 2.0};  // two 1x1 filters
  layer.bias.mutable_values() = {10.0, 20.0};
  Tensor x = Tensor::from_data({1, 1, 1, 2}, {3.0, 4.0});
  CHECK(layer.forward(x).values() == std::vector<double>{13.0, 14.0, 26.0, 28.0});
}

TEST_CASE("batch norm train mode normalizes per channel") {
  BatchNorm2d bn(3);
  Rng rng(5);
  // Spread the data wide so the eps in the denominator is negligible.
  std::vector<double> data = random_values(2 * 3 * 4 * 4, rng, -40.0, 40.0);
  Tensor x = Tensor::from_data({2, 3, 4, 4}, data);
  Tensor y = bn.forward(x);

  const std::int64_t hw = 16, c = 3, n = 2, m = n * hw;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s1 = 0.0, s2 = 0.0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < hw; ++i) {
        const double v = y.values()[(b * c + ch) * hw + i];
        s1 += v;
        s2 += v * v;
      }
    const double mean = s1 / m;
    const double var = s2 / m - mean * mean;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("batch norm running stats follow the momentum update") {
  BatchNorm2d bn(1);
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  bn.forward(x);
  const double mean = 2.5;
  const double biased_var = 1.25;          // mean of squared deviations
  const double unbiased = biased_var * 4.0 / 3.0;
  CHECK(bn.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * mean).epsilon(1e-12));
  CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * unbiased).epsilon(1e-12));
}

TEST_CASE("batch norm eval mode is a fixed affine map, bit-stable") {
  BatchNorm2d bn(2);
  Rng rng(7);
  // One train pass to move the running stats off their defaults.
  bn.forward(Tensor::from_data({2, 2, 2, 2}, random_values(16, rng)));
  bn.mode = BatchNorm2d::Mode::eval;

  std::vector<double> data = random_values(16, rng);
  Tensor y1 = bn.forward(Tensor::from_data({2, 2, 2, 2}, data));
  Tensor y2 = bn.forward(Tensor::from_data({2, 2, 2, 2}, data));
  CHECK(y1.values() == y2.values());

  // Affine check: doubling gamma doubles the centered output.
  auto centered = y1.values();
  bn.gamma.mutable_values() = {2.0, 2.0};
  Tensor y3 = bn.forward(Tensor::from_data({2, 2, 2, 2}, data));
  for (std::size_t i = 0; i < centered.size(); ++i)
    CHECK(y3.values()[i] == doctest::Approx(2.0 * centered[i]).epsilon(1e-12));
}

TEST_CASE("batch norm rejects single-value-per-channel train batches") {
  BatchNorm2d bn(2);
  CHECK_THROWS_AS(bn.forward(Tensor::zeros({1, 2, 1, 1})), std::invalid_argument);
  CHECK_THROWS_AS(bn.forward(Tensor::zeros({2, 3, 1, 1})), std::invalid_argument);  // C mismatch
}

TEST_CASE("down block halves space, up block doubles, across schedules") {
  Rng rng(11);
  for (auto [cin, cout] : std::vector<std::pair<std::int64_t, std::int64_t>>{
           {3, 64}, {1, 16}, {16, 32}, {8, 8}}) {
    ResidualDownBlock down(cin, cout, rng);
    Tensor x = Tensor::from_data({1, cin, 8, 8}, random_values(cin * 64, rng));
    CHECK(down.forward(x).shape() == Shape{1, cout, 4, 4});

    ResidualUpBlock up(cin, cout, rng);
    Tensor u = Tensor::from_data({2, cin, 2, 2}, random_values(2 * cin * 4, rng));
    CHECK(up.forward(u).shape() == Shape{2, cout, 4, 4});
  }

  // The full-size entry case: 64x64 3-channel input into a 64-wide block.
  ResidualDownBlock entry(3, 64, rng);
  Tensor img = Tensor::from_data({1, 3, 64, 64}, random_values(3 * 64 * 64, rng));
  CHECK(entry.forward(img).shape() == Shape{1, 64, 32, 32});

  // Latent entry case: 128 channels at 1x1 up to 512 at 2x2.
  ResidualUpBlock latent_entry(128, 512, rng);
  Tensor z = Tensor::from_data({1, 128, 1, 1}, random_values(128, rng));
  CHECK(latent_entry.forward(z).shape() == Shape{1, 512, 2, 2});
}

TEST_CASE("six chained up blocks go from 1x1 to 64x64") {
  Rng rng(13);
  std::vector<ResidualUpBlock> chain;
  for (int i = 0; i < 6; ++i) chain.emplace_back(4, 4, rng);
  Tensor h = Tensor::from_data({1, 4, 1, 1}, random_values(4, rng));
  for (auto& b : chain) h = b.forward(h);
  CHECK(h.shape() == Shape{1, 4, 64, 64});
}

TEST_CASE("zeroed blocks output zero; zeroed main path reduces to the skip") {
  Rng rng(17);
  ResidualDownBlock down(2, 3, rng);
  Tensor x = Tensor::from_data({2, 2, 4, 4}, random_values(2 * 2 * 16, rng));

  auto zero_layer = [](Conv2dLayer& l) {
    for (double& v : l.weight.mutable_values()) v = 0.0;
    for (double& v : l.bias.mutable_values()) v = 0.0;
  };
  zero_layer(down.conv1);
  zero_layer(down.conv2);
  Tensor skip_only = avg_pool2(down.skip.forward(x));
  CHECK(down.forward(x).values() == skip_only.values());

  zero_layer(down.skip);
  Tensor all_zeroed = down.forward(x);
  for (double v : all_zeroed.values()) CHECK(v == 0.0);

  ResidualUpBlock up(2, 3, rng);
  Tensor u = Tensor::from_data({1, 2, 2, 2}, random_values(8, rng));
  zero_layer(up.conv1);
  zero_layer(up.conv2);
  Tensor up_skip = up.skip.forward(nearest_upsample2(u));
  CHECK(up.forward(u).values() == up_skip.values());
}

TEST_CASE("gradient check: batch norm (train mode)") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(7000 + s);
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_int(3));
    BatchNorm2d bn(c);
    // Nudge gamma/beta off their init so their gradients are generic.
    for (double& v : bn.gamma.mutable_values()) v = rng.uniform(0.5, 1.5);
    for (double& v : bn.beta.mutable_values()) v = rng.uniform(-0.5, 0.5);
    Tensor x = Tensor::from_data({2, c, 3, 3}, random_values(2 * c * 9, rng), true);
    Rng wr(80 + s);
    std::vector<double> w = random_values(2 * c * 9, wr);
    auto build = [&]() {
      return sum(mul(bn.forward(x), Tensor::from_data({2, c, 3, 3}, w)));
    };
    INFO("batch norm instance " << s);
    CHECK(gradcheck::max_param_rel_err(build, {x, bn.gamma, bn.beta}) < 1e-4);
  }
}

TEST_CASE("gradient check: residual blocks end to end") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(8000 + s);
    const bool use_down = (s % 2 == 0);
    Rng wr(90 + s);
    if (use_down) {
      ResidualDownBlock block(2, 2, rng);
      Tensor x = Tensor::from_data({2, 2, 4, 4}, random_values(2 * 2 * 16, rng), true);
      std::vector<double> w = random_values(2 * 2 * 4, wr);
      auto build = [&]() {
        return sum(mul(block.forward(x), Tensor::from_data({2, 2, 2, 2}, w)));
      };
      std::vector<Tensor> targets{x, block.conv1.weight, block.conv2.weight, block.skip.weight,
                                  block.conv1.bias, block.bn1.gamma, block.bn2.beta};
      INFO("down block instance " << s);
      CHECK(gradcheck::max_param_rel_err(build, targets) < 1e-4);
    } else {
      ResidualUpBlock block(2, 2, rng);
      Tensor x = Tensor::from_data({2, 2, 2, 2}, random_values(2 * 2 * 4, rng), true);
      std::vector<double> w = random_values(2 * 2 * 16, wr);
      auto build = [&]() {
        return sum(mul(block.forward(x), Tensor::from_data({2, 2, 4, 4}, w)));
      };
      std::vector<Tensor> targets{x, block.conv1.weight, block.conv2.weight, block.skip.weight,
                                  block.conv2.bias, block.bn2.gamma, block.bn1.beta};
      INFO("up block instance " << s);
      CHECK(gradcheck::max_param_rel_err(build, targets) < 1e-4);
    }
  }
}
