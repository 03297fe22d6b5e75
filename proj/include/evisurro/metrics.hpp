#ifndef EVISURRO_METRICS_HPP_
#define EVISURRO_METRICS_HPP_

// Accuracy and uncertainty-quality metrics: PSNR, SSIM, and voxel-level /
// member-level Pearson correlation between predicted uncertainty and error.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "evisurro/errors.hpp"
#include "evisurro/numeric.hpp"

namespace evisurro {

inline constexpr double kPsnrCap = 100.0;

inline double psnr(std::span<const double> pred, std::span<const double> truth,
                   double data_range) {
  if (pred.size() != truth.size()) throw ShapeError("psnr: shape mismatch");
  if (!(data_range > 0.0)) throw DomainError("psnr: data_range must be positive");
  std::vector<double> sq(pred.size());
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = (pred[i] - truth[i]) * (pred[i] - truth[i]);
  const double mse = mean(sq);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over all fully contained windows of a 2D (H x W) field.
inline double ssim_2d(std::span<const double> a, std::span<const double> b, std::size_t height,
                      std::size_t width, double data_range, const SsimOptions& opt = {}) {
  if (a.size() != b.size() || a.size() != height * width) throw ShapeError("ssim: shape mismatch");
  if (!(data_range > 0.0)) throw DomainError("ssim: data_range must be positive");
  const std::size_t w = opt.window;
  if (height < w || width < w)
    throw DomainError("ssim: field " + std::to_string(height) + "x" + std::to_string(width) +
                      " smaller than the " + std::to_string(w) + "x" + std::to_string(w) +
                      " window");
  std::vector<double> g(w);
  double gsum = 0.0;
  const double c = 0.5 * static_cast<double>(w - 1);
  for (std::size_t i = 0; i < w; ++i) {
    const double t = static_cast<double>(i) - c;
    g[i] = std::exp(-t * t / (2.0 * opt.sigma * opt.sigma));
    gsum += g[i];
  }
  for (auto& v : g) v /= gsum;

  const double c1 = (opt.k1 * data_range) * (opt.k1 * data_range);
  const double c2 = (opt.k2 * data_range) * (opt.k2 * data_range);
  std::vector<double> local;
  local.reserve((height - w + 1) * (width - w + 1));
  for (std::size_t r = 0; r + w <= height; ++r) {
    for (std::size_t col = 0; col + w <= width; ++col) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double wt = g[i] * g[j];
          const double va = a[(r + i) * width + col + j];
          const double vb = b[(r + i) * width + col + j];
          ma += wt * va;
          mb += wt * vb;
          saa += wt * va * va;
          sbb += wt * vb * vb;
          sab += wt * va * vb;
        }
      const double var_a = saa - ma * ma;
      const double var_b = sbb - mb * mb;
      const double cov = sab - ma * mb;
      local.push_back(((2 * ma * mb + c1) * (2 * cov + c2)) /
                      ((ma * ma + mb * mb + c1) * (var_a + var_b + c2)));
    }
  }
  return mean(local);
}

// 2D fields directly; 3D (D x H x W) fields as the mean SSIM over the three
// axis-aligned center slices.
inline double ssim(std::span<const double> pred, std::span<const double> truth,
                   const GridShape& shape, double data_range, const SsimOptions& opt = {}) {
  if (pred.size() != truth.size() || pred.size() != shape.size())
    throw ShapeError("ssim: shape mismatch");
  if (shape.rank() == 2)
    return ssim_2d(pred, truth, shape.dims[0], shape.dims[1], data_range, opt);
  if (shape.rank() != 3) throw DomainError("ssim: only 2D and 3D fields are supported");
  const std::size_t D = shape.dims[0], H = shape.dims[1], W = shape.dims[2];
  auto slice = [&](std::span<const double> f, int axis) {
    std::vector<double> s;
    if (axis == 0)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t x = 0; x < W; ++x) s.push_back(f[(D / 2 * H + h) * W + x]);
    else if (axis == 1)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t x = 0; x < W; ++x) s.push_back(f[(d * H + H / 2) * W + x]);
    else
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h) s.push_back(f[(d * H + h) * W + W / 2]);
    return s;
  };
  const std::size_t dims[3][2] = {{H, W}, {D, W}, {D, H}};
  double acc = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    const auto a = slice(pred, axis), b = slice(truth, axis);
    acc += ssim_2d(a, b, dims[axis][0], dims[axis][1], data_range, opt);
  }
  return acc / 3.0;
}

// Pearson correlation; NaN when either side is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("pearson: size mismatch");
  const double ma = mean(a), mb = mean(b);
  std::vector<double> ab(a.size()), aa(a.size()), bb(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab[i] = (a[i] - ma) * (b[i] - mb);
    aa[i] = (a[i] - ma) * (a[i] - ma);
    bb[i] = (b[i] - mb) * (b[i] - mb);
  }
  const double saa = pairwise_sum(aa), sbb = pairwise_sum(bb);
  if (saa == 0.0 || sbb == 0.0) return std::nan("");
  return pairwise_sum(ab) / std::sqrt(saa * sbb);
}

struct CorrelationReport {
  double voxel_level = 0.0;
  double member_level = 0.0;  // NaN when fewer than 3 members or no spread
  std::vector<double> per_member;
  std::size_t excluded_members = 0;  // constant uncertainty or error vectors
};

// Mean over members of Corr(u^m, e^m).  Members with a constant vector are
// skipped and counted.
inline CorrelationReport voxel_level_corr(const std::vector<std::vector<double>>& u,
                                          const std::vector<std::vector<double>>& e) {
  if (u.size() != e.size()) throw ShapeError("voxel_level_corr: member count mismatch");
  CorrelationReport rep;
  for (std::size_t m = 0; m < u.size(); ++m) {
    const double c = pearson(u[m], e[m]);
    if (std::isnan(c)) {
      ++rep.excluded_members;
      continue;
    }
    rep.per_member.push_back(c);
  }
  rep.voxel_level = rep.per_member.empty() ? std::nan("") : mean(rep.per_member);
  return rep;
}

// Corr over members of the per-member mean uncertainty and mean error.
inline double member_level_corr(const std::vector<std::vector<double>>& u,
                                const std::vector<std::vector<double>>& e) {
  if (u.size() != e.size()) throw ShapeError("member_level_corr: member count mismatch");
  if (u.size() < 3) throw DomainError("member_level_corr: need at least 3 members");
  std::vector<double> ub(u.size()), eb(e.size());
  for (std::size_t m = 0; m < u.size(); ++m) {
    if (u[m].size() != e[m].size()) throw ShapeError("member_level_corr: field size mismatch");
    ub[m] = mean(u[m]);
    eb[m] = mean(e[m]);
  }
  const double c = pearson(ub, eb);
  if (std::isnan(c)) throw DomainError("member_level_corr: zero variance across members");
  return c;
}

inline CorrelationReport correlation_report(const std::vector<std::vector<double>>& u,
                                            const std::vector<std::vector<double>>& e) {
  CorrelationReport rep = voxel_level_corr(u, e);
  try {
    rep.member_level = member_level_corr(u, e);
  } catch (const DomainError&) {
    rep.member_level = std::nan("");
  }
  return rep;
}

}  // namespace evisurro

#endif  // EVISURRO_METRICS_HPP_
