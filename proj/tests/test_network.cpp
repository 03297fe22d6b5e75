#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <vector>

#include "evisurro/network.hpp"

using namespace evisurro;
using Catch::Matchers::WithinAbs;

namespace {

NetConfig small_config(std::uint64_t seed) {
  NetConfig c;
  c.input_dim = 2;
  c.hidden_sizes = {4, 4};
  c.grid_shape = GridShape{{2, 4}};
  c.seed = seed;
  return c;
}

// Random net with O(1) weights everywhere, so the head sees varied inputs.
EvidentialNet scrambled(const NetConfig& c, std::mt19937_64& rng, double scale = 1.0) {
  auto net = EvidentialNet::init(c);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& p : net.parameters()) p = u(rng);
  return net;
}

double field_objective(const EvidentialNet& net, std::span<const double> x,
                       std::span<const double> y, const LossWeights& w) {
  return field_loss(net.forward(x), y, w).total;
}

}  // namespace

TEST_CASE("head activations") {
  const auto m = apply_head(0, 0, 0, 0);
  CHECK(m.gamma == 0.0);
  CHECK_THAT(m.nu, WithinAbs(std::numbers::ln2, 1e-15));
  CHECK_THAT(m.alpha_shape, WithinAbs(1.0 + std::numbers::ln2, 1e-15));
  CHECK_THAT(m.beta_scale, WithinAbs(std::numbers::ln2, 1e-15));
  CHECK_THAT(m.nu, WithinAbs(0.6931, 1e-4));
  CHECK_THAT(m.alpha_shape, WithinAbs(1.6931, 1e-4));

  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-30.0) > 0.0);
  CHECK_THAT(softplus(1.3), WithinAbs(std::log1p(std::exp(1.3)), 1e-15));
  CHECK_THAT(sigmoid(0.0), WithinAbs(0.5, 1e-15));
}

TEST_CASE("init is deterministic in the seed") {
  NetConfig c;
  c.input_dim = 3;
  c.grid_shape = GridShape{{8, 8}};
  c.seed = 17;
  const auto a = EvidentialNet::init(c);
  const auto b = EvidentialNet::init(c);
  REQUIRE(a.parameter_count() == b.parameter_count());
  CHECK(std::memcmp(a.parameters().data(), b.parameters().data(),
                    a.parameter_count() * sizeof(double)) == 0);
  c.seed = 18;
  const auto d = EvidentialNet::init(c);
  CHECK(std::memcmp(a.parameters().data(), d.parameters().data(),
                    a.parameter_count() * sizeof(double)) != 0);
  // 3*64+64 + 64*128+128 + 128*256+256 + 256*256+256
  CHECK(a.parameter_count() == 256u + 8320u + 33024u + 65792u);
}

TEST_CASE("fresh net starts near the neutral head values") {
  NetConfig c;
  c.input_dim = 3;
  c.grid_shape = GridShape{{8, 8}};
  const auto net = EvidentialNet::init(c);
  const std::vector<double> x{0.3, -0.8, 0.1};
  const auto f = net.forward(x);
  CHECK(f.valid());
  for (const auto& m : f.params) {
    CHECK(std::fabs(m.gamma) < 0.05);
    CHECK(std::fabs(m.nu - std::numbers::ln2) < 0.05);
    CHECK(std::fabs(m.alpha_shape - 1.0 - std::numbers::ln2) < 0.05);
    CHECK(std::fabs(m.beta_scale - std::numbers::ln2) < 0.05);
  }
}

TEST_CASE("zero net yields a uniform neutral field") {
  const auto c = small_config(1);
  auto net = EvidentialNet::init(c);
  for (double& p : net.parameters()) p = 0.0;
  const std::vector<double> x{0.5, -0.5};
  const auto f = net.forward(x);
  for (const auto& m : f.params) {
    CHECK(m.gamma == 0.0);
    CHECK(m.nu == std::log1p(1.0));
    CHECK(m.alpha_shape == 1.0 + std::log1p(1.0));
    CHECK(m.beta_scale == std::log1p(1.0));
  }
}

TEST_CASE("head invariants hold over random nets and inputs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ux(-1, 1);
  NetConfig c;
  c.input_dim = 3;
  c.hidden_sizes = {6, 6};
  c.grid_shape = GridShape{{1, 1}};
  for (int i = 0; i < 10000; ++i) {
    const auto net = scrambled(c, rng, 1.0);
    const std::vector<double> x{ux(rng), ux(rng), ux(rng)};
    const auto m = net.forward(x).params[0];
    REQUIRE(m.gamma > -1.0);
    REQUIRE(m.gamma < 1.0);
    REQUIRE(m.nu > 0.0);
    REQUIRE(m.alpha_shape > 1.0);
    REQUIRE(m.beta_scale > 0.0);
  }
}

TEST_CASE("forward rejects bad inputs") {
  const auto net = EvidentialNet::init(small_config(1));
  CHECK_THROWS_AS(net.forward(std::vector<double>{1.0}), ShapeError);
  CHECK_THROWS_AS(net.forward(std::vector<double>{1.0, std::nan("")}), DomainError);
  std::vector<ParamGrad> up(3);
  CHECK_THROWS_AS(net.backward(std::vector<double>{0.0, 0.0}, up), ShapeError);
  NetConfig bad = small_config(1);
  bad.hidden_sizes.clear();
  CHECK_THROWS_AS(EvidentialNet::init(bad), DomainError);
  CHECK_THROWS_AS(EvidentialNet::from_parameters(small_config(1), std::vector<double>(3)), ShapeError);
}

TEST_CASE("forward is continuous in the input") {
  std::mt19937_64 rng(4);
  const auto net = scrambled(small_config(2), rng);
  const std::vector<double> x{0.2, -0.3}, xp{0.2 + 1e-7, -0.3};
  const auto a = net.forward(x), b = net.forward(xp);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::fabs(a.params[i].gamma - b.params[i].gamma) < 1e-5);
    CHECK(std::fabs(a.params[i].beta_scale - b.params[i].beta_scale) < 1e-5);
  }
}

TEST_CASE("zero upstream gives zero gradient") {
  std::mt19937_64 rng(5);
  const auto net = scrambled(small_config(3), rng);
  const std::vector<ParamGrad> up(net.grid_size(), ParamGrad{0, 0, 0, 0});
  const auto g = net.backward(std::vector<double>{0.1, 0.9}, up);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("tanh head multiplier is one at zero pre-activation") {
  auto net = EvidentialNet::init(small_config(1));
  for (double& p : net.parameters()) p = 0.0;
  std::vector<ParamGrad> up(net.grid_size(), ParamGrad{0, 0, 0, 0});
  up[0][0] = 1.0;
  const auto g = net.backward(std::vector<double>{0.0, 0.0}, up);
  // The head bias for gamma of element 0 is the first bias entry of the
  // last layer; with every layer zero it receives exactly tanh'(0) * 1.
  const std::size_t last_b = net.parameter_count() - 4 * net.grid_size();
  CHECK(g[last_b] == 1.0);
}

TEST_CASE("backward matches finite differences on a 2-4-4 net with 8 outputs") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ux(-1, 1), uw(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    auto net = scrambled(small_config(trial), rng, 0.8);
    REQUIRE(net.parameter_count() <= 1000u);
    const std::vector<double> x{ux(rng), ux(rng)};
    std::vector<double> y(net.grid_size());
    for (auto& v : y) v = ux(rng);
    const LossWeights w{uw(rng), uw(rng)};

    const auto f = net.forward(x);
    std::vector<ParamGrad> up(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
      up[i] = loss_gradients(f.params[i], y[i], w);
      for (double& v : up[i]) v /= static_cast<double>(f.size());
    }
    const auto g = net.backward(x, up);

    const double h = 1e-5;
    auto params = net.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
      const double keep = params[p];
      params[p] = keep + h;
      const double fp = field_objective(net, x, y, w);
      params[p] = keep - h;
      const double fm = field_objective(net, x, y, w);
      params[p] = keep;
      const double fd = (fp - fm) / (2 * h);
      INFO("trial " << trial << " param " << p << " analytic " << g[p] << " fd " << fd);
      CHECK(std::fabs(g[p] - fd) <= std::max(1e-8, 1e-4 * std::fabs(fd)));
    }
  }
}

TEST_CASE("forward and backward are bit-reproducible") {
  std::mt19937_64 rng(7);
  const auto net = scrambled(small_config(9), rng);
  const std::vector<double> x{0.4, 0.1};
  std::vector<ParamGrad> up(net.grid_size(), ParamGrad{0.3, -0.2, 0.1, 0.5});
  const auto a = net.backward(x, up), b = net.backward(x, up);
  CHECK(a == b);
  const auto f1 = net.forward(x), f2 = net.forward(x);
  for (std::size_t i = 0; i < f1.size(); ++i) {
    CHECK(f1.params[i].gamma == f2.params[i].gamma);
    CHECK(f1.params[i].beta_scale == f2.params[i].beta_scale);
  }
}

TEST_CASE("batched forward equals per-sample forward") {
  std::mt19937_64 rng(8);
  const auto net = scrambled(small_config(4), rng);
  Eigen::MatrixXd xb(2, 3);
  xb << 0.1, -0.5, 0.9, 0.3, 0.2, -0.7;
  const auto z = net.forward_raw(xb);
  for (int c = 0; c < 3; ++c) {
    const std::vector<double> x{xb(0, c), xb(1, c)};
    const auto f = net.forward(x);
    const auto fb = net.head_field(z.col(c));
    for (std::size_t i = 0; i < f.size(); ++i)
      CHECK_THAT(f.params[i].gamma, WithinAbs(fb.params[i].gamma, 1e-14));
  }
}
