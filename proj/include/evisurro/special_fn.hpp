#ifndef EVISURRO_SPECIAL_FN_HPP_
#define EVISURRO_SPECIAL_FN_HPP_

// Special functions behind the Normal-Inverse-Gamma / Student-t math.
//
// Everything here is a pure function of its arguments and safe to call
// concurrently.  Arguments outside the documented domain raise DomainError.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "evisurro/errors.hpp"

namespace evisurro {

// Location-scale Student-t.  `scale` is the square root of the scale
// parameter, i.e. the t variable is (y - loc) / scale.
struct StudentTDist {
  double loc = 0.0;
  double scale = 1.0;
  double df = 1.0;

  bool valid() const {
    return std::isfinite(loc) && scale > 0.0 && std::isfinite(scale) && df > 0.0;
  }
};

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw DomainError(what);
}

// Lanczos approximation, g = 7, nine coefficients.
inline constexpr double kLanczosG = 7.0;
inline constexpr std::array<double, 9> kLanczosCoef = {
    0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
    771.32342877765313,   -176.61502916214059,   12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};

inline double lanczos_log_gamma(double x) {
  // x >= 0.5 here.
  const double z = x - 1.0;
  double a = kLanczosCoef[0];
  for (std::size_t i = 1; i < kLanczosCoef.size(); ++i)
    a += kLanczosCoef[i] / (z + static_cast<double>(i));
  const double t = z + kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (z + 0.5) * std::log(t) - t +
         std::log(a);
}

}  // namespace detail

// ln Gamma(x) for x > 0.
inline double log_gamma(double x) {
  detail::require(x > 0.0 && !std::isnan(x), "log_gamma: x must be > 0");
  if (std::isinf(x)) return x;
  if (x == 1.0 || x == 2.0) return 0.0;
  if (x < 0.5) {
    // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x).
    return std::log(std::numbers::pi / std::sin(std::numbers::pi * x)) -
           detail::lanczos_log_gamma(1.0 - x);
  }
  return detail::lanczos_log_gamma(x);
}

// psi(x) = d/dx ln Gamma(x), x > 0.
inline double digamma(double x) {
  detail::require(x > 0.0 && !std::isnan(x), "digamma: x must be > 0");
  double result = 0.0;
  while (x < 10.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli-number asymptotic series.
  const double series =
      inv2 * (1.0 / 12 -
              inv2 * (1.0 / 120 -
                      inv2 * (1.0 / 252 -
                              inv2 * (1.0 / 240 -
                                      inv2 * (1.0 / 132 - inv2 * (691.0 / 32760))))));
  return result + std::log(x) - 0.5 * inv - series;
}

inline double log_beta(double a, double b) {
  return log_gamma(a) + log_gamma(b) - log_gamma(a + b);
}

namespace detail {

// Continued fraction for I_x(a,b) (modified Lentz).  Converges quickly for
// x < (a+1)/(a+b+2).
inline double inc_beta_cf(double a, double b, double x) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-16;
  constexpr int kMaxIter = 20000;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  return h;
}

// I_x(a,b) given both x and y = 1 - x, so callers that know 1 - x exactly
// (Student-t near the center) avoid the cancellation.
inline double reg_inc_beta_xy(double a, double b, double x, double y) {
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double log_front =
      a * std::log(x) + b * std::log(y) - log_beta(a, b);
  if (x < (a + 1.0) / (a + b + 2.0))
    return std::exp(log_front) * inc_beta_cf(a, b, x) / a;
  return 1.0 - std::exp(log_front) * inc_beta_cf(b, a, y) / b;
}

}  // namespace detail

// Regularized incomplete beta I_x(a,b).
inline double reg_inc_beta(double a, double b, double x) {
  detail::require(a > 0.0 && b > 0.0, "reg_inc_beta: a and b must be > 0");
  detail::require(x >= 0.0 && x <= 1.0, "reg_inc_beta: x must lie in [0,1]");
  return detail::reg_inc_beta_xy(a, b, x, 1.0 - x);
}

// x such that I_x(a,b) = p.  Safeguarded Newton on a shrinking bracket.
inline double inv_reg_inc_beta(double a, double b, double p) {
  detail::require(a > 0.0 && b > 0.0, "inv_reg_inc_beta: a and b must be > 0");
  detail::require(p >= 0.0 && p <= 1.0, "inv_reg_inc_beta: p must lie in [0,1]");
  if (p == 0.0) return 0.0;
  if (p == 1.0) return 1.0;

  // Initial guess (Numerical Recipes, invbetai).
  double x;
  if (a >= 1.0 && b >= 1.0) {
    const double pp = p < 0.5 ? p : 1.0 - p;
    const double t = std::sqrt(-2.0 * std::log(pp));
    double z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t;
    if (p < 0.5) z = -z;
    const double al = (z * z - 3.0) / 6.0;
    const double h = 2.0 / (1.0 / (2.0 * a - 1.0) + 1.0 / (2.0 * b - 1.0));
    const double w = z * std::sqrt(al + h) / h -
                     (1.0 / (2.0 * b - 1.0) - 1.0 / (2.0 * a - 1.0)) *
                         (al + 5.0 / 6.0 - 2.0 / (3.0 * h));
    x = a / (a + b * std::exp(2.0 * w));
  } else {
    const double lna = std::log(a / (a + b));
    const double lnb = std::log(b / (a + b));
    const double t = std::exp(a * lna) / a;
    const double u = std::exp(b * lnb) / b;
    const double w = t + u;
    x = p < t / w ? std::pow(a * w * p, 1.0 / a) : 1.0 - std::pow(b * w * (1.0 - p), 1.0 / b);
  }
  if (!(x > 0.0 && x < 1.0)) x = 0.5;

  const double lb = log_beta(a, b);
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double f = reg_inc_beta(a, b, x) - p;
    if (f == 0.0) return x;
    if (f < 0.0) lo = x; else hi = x;
    const double dens =
        std::exp((a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - lb);
    double next = x - f / dens;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::fabs(next - x) <= 1e-16 * std::max(x, 1e-300) || hi - lo < 1e-300)
      return next;
    x = next;
  }
  return x;
}

inline double student_t_logpdf(double y, const StudentTDist& dist) {
  detail::require(dist.valid(), "student_t_logpdf: invalid distribution");
  const double df = dist.df;
  const double z = (y - dist.loc) / dist.scale;
  return log_gamma(0.5 * (df + 1.0)) - log_gamma(0.5 * df) -
         0.5 * std::log(df * std::numbers::pi) - std::log(dist.scale) -
         0.5 * (df + 1.0) * std::log1p(z * z / df);
}

inline double student_t_pdf(double y, const StudentTDist& dist) {
  return std::exp(student_t_logpdf(y, dist));
}

// CDF of the standard t with `df` degrees of freedom.
inline double student_t_cdf(double t, double df) {
  detail::require(df > 0.0, "student_t_cdf: df must be > 0");
  if (std::isnan(t)) return t;
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double t2 = t * t;
  const double x = df / (df + t2);
  const double y = t2 / (df + t2);
  const double tail = 0.5 * detail::reg_inc_beta_xy(0.5 * df, 0.5, x, y);
  return t > 0.0 ? 1.0 - tail : tail;
}

inline double student_t_cdf(double y, const StudentTDist& dist) {
  detail::require(dist.valid(), "student_t_cdf: invalid distribution");
  return student_t_cdf((y - dist.loc) / dist.scale, dist.df);
}

// t such that CDF(t; df) = p.
inline double student_t_quantile(double df, double p) {
  detail::require(df > 0.0, "student_t_quantile: df must be > 0");
  detail::require(p > 0.0 && p < 1.0, "student_t_quantile: p must lie in (0,1)");
  if (p == 0.5) return 0.0;
  if (p > 0.5) return -student_t_quantile(df, 1.0 - p);

  // Lower tail from here on, t < 0.  2p = I_x(df/2, 1/2), x = df/(df+t^2).
  const double x = inv_reg_inc_beta(0.5 * df, 0.5, 2.0 * p);
  double t = -std::sqrt(df * (1.0 - x) / x);
  if (!std::isfinite(t) || t >= 0.0) t = -1.0;

  const StudentTDist standard{0.0, 1.0, df};
  // Bracket [lo, hi] around the root, then safeguarded Newton.
  double lo = t, hi = 0.0;
  while (student_t_cdf(lo, df) > p) {
    hi = lo;
    lo *= 2.0;
    if (!std::isfinite(lo)) return -std::numeric_limits<double>::infinity();
  }
  if (!(t >= lo && t <= hi)) t = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = student_t_cdf(t, df) - p;
    if (f == 0.0) break;
    if (f > 0.0) hi = t; else lo = t;
    double next = t - f / student_t_pdf(t, standard);
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::fabs(next - t) <= 4 * std::numeric_limits<double>::epsilon() * std::fabs(t)) {
      t = next;
      break;
    }
    t = next;
  }
  return t;
}

inline double student_t_quantile(double p, const StudentTDist& dist) {
  detail::require(dist.valid(), "student_t_quantile: invalid distribution");
  return dist.loc + dist.scale * student_t_quantile(dist.df, p);
}

}  // namespace evisurro

#endif  // EVISURRO_SPECIAL_FN_HPP_
