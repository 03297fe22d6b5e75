#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <numeric>
#include <vector>

#include "evisurro/metrics.hpp"

using namespace evisurro;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<double> smooth_field(std::size_t h, std::size_t w, double phase) {
  std::vector<double> f(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      f[r * w + c] = std::sin(0.3 * static_cast<double>(r) + phase) * std::cos(0.2 * static_cast<double>(c));
  return f;
}

// Textbook two-pass Pearson correlation.
double naive_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("psnr values") {
  const std::vector<double> t{0.0, 0.5, 1.0, 0.25};
  CHECK(psnr(t, t, 1.0) == 100.0);

  std::vector<double> p = t;
  for (auto& v : p) v += 0.1;  // mse 0.01
  CHECK_THAT(psnr(p, t, 1.0), WithinAbs(20.0, 1e-12));
  CHECK_THAT(psnr(p, t, 2.0), WithinAbs(26.0206, 1e-4));
  CHECK_THAT(psnr(p, t, 2.0), WithinAbs(20.0 + 20.0 * std::log10(2.0), 1e-12));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0, 1);
  std::vector<double> base(256), noise(256);
  for (auto& v : base) v = z(rng);
  for (auto& v : noise) v = z(rng);
  double prev = 1e300;
  for (double amp : {0.01, 0.05, 0.1, 0.5, 1.0}) {
    std::vector<double> q(base.size());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = base[i] + amp * noise[i];
    const double v = psnr(q, base, 4.0);
    CHECK(v < prev);
    prev = v;
  }
  CHECK_THROWS_AS(psnr(p, t, 0.0), DomainError);
  CHECK_THROWS_AS(psnr(std::vector<double>{1.0}, t, 1.0), ShapeError);
}

TEST_CASE("ssim values") {
  const auto a = smooth_field(24, 20, 0.0);
  const auto b = smooth_field(24, 20, 0.4);
  CHECK_THAT(ssim_2d(a, a, 24, 20, 2.0), WithinAbs(1.0, 1e-12));
  CHECK_THAT(ssim_2d(a, b, 24, 20, 2.0), WithinAbs(ssim_2d(b, a, 24, 20, 2.0), 1e-12));
  CHECK(ssim_2d(a, b, 24, 20, 2.0) < 1.0);

  std::vector<double> shifted = a;
  for (auto& v : shifted) v += 0.3;
  CHECK(ssim_2d(a, shifted, 24, 20, 2.0) < 1.0);

  std::vector<double> board(16 * 16), inverted(16 * 16);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      board[r * 16 + c] = (r + c) % 2 ? 1.0 : 0.0;
      inverted[r * 16 + c] = 1.0 - board[r * 16 + c];
    }
  CHECK(ssim_2d(board, inverted, 16, 16, 1.0) < 0.0);

  const std::vector<double> small(10 * 10, 0.5);
  CHECK_THROWS_AS(ssim_2d(small, small, 10, 10, 1.0), DomainError);
  CHECK_THROWS_AS(ssim(a, b, GridShape{{20, 20}}, 2.0), ShapeError);
  CHECK_THAT(ssim(a, b, GridShape{{24, 20}}, 2.0), WithinAbs(ssim_2d(a, b, 24, 20, 2.0), 0.0));
}

TEST_CASE("ssim on 3D fields averages the center slices") {
  const std::size_t n = 12;
  std::vector<double> a(n * n * n), b(n * n * n);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = u(rng);
    b[i] = a[i] + 0.2 * u(rng);
  }
  const GridShape g{{n, n, n}};
  CHECK_THAT(ssim(a, a, g, 1.5), WithinAbs(1.0, 1e-12));
  const double s = ssim(a, b, g, 1.5);
  CHECK(s < 1.0);
  CHECK(s > 0.0);
  CHECK_THROWS_AS(ssim(std::vector<double>(16), std::vector<double>(16), GridShape{{2, 2, 2, 2}}, 1.0),
                  DomainError);
}

TEST_CASE("voxel-level correlation") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0, 1);
  std::vector<std::vector<double>> u(5, std::vector<double>(400)), e = u, neg = u;
  for (std::size_t m = 0; m < u.size(); ++m)
    for (std::size_t i = 0; i < u[m].size(); ++i) {
      u[m][i] = z(rng);
      e[m][i] = u[m][i];
      neg[m][i] = -u[m][i];
    }
  CHECK_THAT(voxel_level_corr(u, e).voxel_level, WithinAbs(1.0, 1e-12));
  CHECK_THAT(voxel_level_corr(u, neg).voxel_level, WithinAbs(-1.0, 1e-12));

  // e = u + noise of equal variance: correlation 1/sqrt(2).
  std::vector<std::vector<double>> big_u(20, std::vector<double>(5000)), big_e = big_u;
  for (std::size_t m = 0; m < big_u.size(); ++m)
    for (std::size_t i = 0; i < big_u[m].size(); ++i) {
      big_u[m][i] = z(rng);
      big_e[m][i] = big_u[m][i] + z(rng);
    }
  CHECK_THAT(voxel_level_corr(big_u, big_e).voxel_level, WithinAbs(1.0 / std::sqrt(2.0), 0.02));
}

TEST_CASE("correlations agree with a direct computation") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> uu(0, 3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t members = 4 + trial, n = 30 + 7 * trial;
    std::vector<std::vector<double>> u(members, std::vector<double>(n)), e = u;
    for (std::size_t m = 0; m < members; ++m)
      for (std::size_t i = 0; i < n; ++i) {
        u[m][i] = uu(rng);
        e[m][i] = 0.5 * u[m][i] + uu(rng);
      }
    double acc = 0.0;
    std::vector<double> ub(members), eb(members);
    for (std::size_t m = 0; m < members; ++m) {
      acc += naive_pearson(u[m], e[m]);
      for (std::size_t i = 0; i < n; ++i) {
        ub[m] += u[m][i] / static_cast<double>(n);
        eb[m] += e[m][i] / static_cast<double>(n);
      }
    }
    const auto rep = correlation_report(u, e);
    CHECK_THAT(rep.voxel_level, WithinAbs(acc / static_cast<double>(members), 1e-12));
    CHECK_THAT(rep.member_level, WithinAbs(naive_pearson(ub, eb), 1e-12));
    CHECK(rep.excluded_members == 0u);
  }
}

TEST_CASE("member-level correlation") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uu(0, 1);
  std::vector<std::vector<double>> u(8, std::vector<double>(50)), e = u;
  for (std::size_t m = 0; m < u.size(); ++m)
    for (std::size_t i = 0; i < 50; ++i) {
      u[m][i] = uu(rng) + 0.1 * static_cast<double>(m);
      e[m][i] = uu(rng) + 0.2 * static_cast<double>(m);
    }
  const double c = member_level_corr(u, e);
  CHECK(c > 0.5);

  std::vector<std::size_t> perm(u.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<double>> up, ep;
  for (auto p : perm) {
    up.push_back(u[p]);
    ep.push_back(e[p]);
  }
  CHECK_THAT(member_level_corr(up, ep), WithinAbs(c, 1e-12));

  const std::vector<std::vector<double>> two(u.begin(), u.begin() + 2), two_e(e.begin(), e.begin() + 2);
  CHECK_THROWS_AS(member_level_corr(two, two_e), DomainError);
  CHECK(std::isnan(correlation_report(two, two_e).member_level));
}

TEST_CASE("constant members are excluded and counted") {
  std::vector<std::vector<double>> u{{1, 2, 3, 4}, {2, 2, 2, 2}, {4, 1, 3, 2}, {0, 1, 0, 1}};
  std::vector<std::vector<double>> e{{1, 3, 2, 5}, {1, 2, 3, 4}, {5, 5, 5, 5}, {1, 0, 1, 1}};
  const auto rep = voxel_level_corr(u, e);
  CHECK(rep.excluded_members == 2u);
  CHECK(rep.per_member.size() == 2u);
  CHECK_THAT(rep.voxel_level, WithinAbs(0.5 * (naive_pearson(u[0], e[0]) + naive_pearson(u[3], e[3])), 1e-12));
  CHECK(std::isnan(pearson(u[1], e[1])));
}
