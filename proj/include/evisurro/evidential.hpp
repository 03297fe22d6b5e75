#ifndef EVISURRO_EVIDENTIAL_HPP_
#define EVISURRO_EVIDENTIAL_HPP_

// Normal-Inverse-Gamma evidential layer.
//
// A prediction is the hyperparameter set (gamma, nu, alpha, beta) of an NIG
// prior over the mean and variance of a Gaussian likelihood:
//
//   y ~ N(mu, sigma^2),  mu ~ N(gamma, sigma^2 / nu),  sigma^2 ~ InvGamma(alpha, beta)
//
// Marginalizing out (mu, sigma^2) gives a Student-t with location gamma,
// squared scale beta (1 + nu) / (nu alpha) and 2 alpha degrees of freedom.

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "evisurro/errors.hpp"
#include "evisurro/numeric.hpp"
#include "evisurro/special_fn.hpp"

namespace evisurro {

struct EvidentialParams {
  double gamma = 0.0;
  double nu = 1.0;
  double alpha_shape = 2.0;
  double beta_scale = 1.0;

  bool valid() const {
    return std::isfinite(gamma) && nu > 0.0 && alpha_shape > 1.0 &&
           beta_scale > 0.0 && std::isfinite(nu) && std::isfinite(alpha_shape) &&
           std::isfinite(beta_scale);
  }
};

// Per-element parameters over the output grid, row-major.
struct EvidentialField {
  GridShape shape;
  std::vector<EvidentialParams> params;

  std::size_t size() const { return params.size(); }
  bool valid() const {
    if (params.size() != shape.size()) return false;
    for (const auto& m : params)
      if (!m.valid()) return false;
    return true;
  }
};

struct UncertaintySummary {
  double prediction = 0.0;
  double aleatoric = 0.0;
  double epistemic = 0.0;
};

struct RawInterval {
  double lo = 0.0;
  double hi = 0.0;
  double confidence = 0.0;  // 1 - delta
};

struct LossWeights {
  double lambda_reg = 0.01;
  double xi_reg = 0.05;

  bool valid() const {
    return std::isfinite(lambda_reg) && std::isfinite(xi_reg) && lambda_reg >= 0.0 &&
           xi_reg >= 0.0;
  }
};

// Gradient of a per-element loss with respect to (gamma, nu, alpha, beta).
using ParamGrad = std::array<double, 4>;

struct LossTerms {
  double nll = 0.0;
  double reg = 0.0;
  double u = 0.0;
  double total = 0.0;
};

inline double predict_mean(const EvidentialParams& m) { return m.gamma; }

// E[sigma^2] = beta / (alpha - 1).
inline double aleatoric(const EvidentialParams& m) {
  if (!(m.alpha_shape > 1.0)) throw DomainError("aleatoric: alpha must exceed 1");
  return m.beta_scale / (m.alpha_shape - 1.0);
}

// Var[mu] = beta / (nu (alpha - 1)).
inline double epistemic(const EvidentialParams& m) {
  if (!(m.alpha_shape > 1.0)) throw DomainError("epistemic: alpha must exceed 1");
  if (!(m.nu > 0.0)) throw DomainError("epistemic: nu must be positive");
  return m.beta_scale / (m.nu * (m.alpha_shape - 1.0));
}

inline UncertaintySummary summarize(const EvidentialParams& m) {
  return {predict_mean(m), aleatoric(m), epistemic(m)};
}

inline StudentTDist predictive_dist(const EvidentialParams& m) {
  const double scale2 = m.beta_scale * (1.0 + m.nu) / (m.nu * m.alpha_shape);
  return {m.gamma, std::sqrt(scale2), 2.0 * m.alpha_shape};
}

// Central interval of the Student-t predictive at confidence 1 - delta.
inline RawInterval raw_interval(const EvidentialParams& m, double delta) {
  if (!(delta > 0.0 && delta < 1.0))
    throw DomainError("raw_interval: delta must lie in (0,1)");
  const StudentTDist st = predictive_dist(m);
  const double half = student_t_quantile(st.df, 1.0 - 0.5 * delta) * st.scale;
  return {m.gamma - half, m.gamma + half, 1.0 - delta};
}

// -log St(y; gamma, beta(1+nu)/(nu alpha), 2 alpha), written in terms of
// Omega = 2 beta (1 + nu) and evaluated entirely in the log domain.
inline double nll_loss(const EvidentialParams& m, double y) {
  const double r = y - m.gamma;
  const double omega = 2.0 * m.beta_scale * (1.0 + m.nu);
  const double a = m.alpha_shape;
  return 0.5 * std::log(std::numbers::pi / m.nu) - a * std::log(omega) +
         (a + 0.5) * std::log(m.nu * r * r + omega) + log_gamma(a) -
         log_gamma(a + 0.5);
}

inline double reg_loss(const EvidentialParams& m, double y) {
  return std::fabs(y - m.gamma) * (2.0 * m.nu + m.alpha_shape);
}

// Squared error scaled by the inverse of (aleatoric + epistemic).
inline double u_loss(const EvidentialParams& m, double y) {
  const double r = y - m.gamma;
  return r * r * m.nu * (m.alpha_shape - 1.0) / (m.beta_scale * (m.nu + 1.0));
}

inline LossTerms loss_terms(const EvidentialParams& m, double y, const LossWeights& w) {
  LossTerms t;
  t.nll = nll_loss(m, y);
  t.reg = reg_loss(m, y);
  t.u = u_loss(m, y);
  t.total = t.nll + w.lambda_reg * t.reg + w.xi_reg * t.u;
  return t;
}

inline double total_loss(const EvidentialParams& m, double y, const LossWeights& w) {
  return loss_terms(m, y, w).total;
}

// Analytic d(total_loss)/d(gamma, nu, alpha, beta).  At y == gamma the
// |y - gamma| term contributes the zero subgradient.
inline ParamGrad loss_gradients(const EvidentialParams& m, double y, const LossWeights& w) {
  const double g = m.gamma, nu = m.nu, a = m.alpha_shape, b = m.beta_scale;
  const double r = y - g;
  const double r2 = r * r;
  const double omega = 2.0 * b * (1.0 + nu);
  const double denom = nu * r2 + omega;
  const double ap = a + 0.5;

  ParamGrad nll;
  nll[0] = -2.0 * ap * nu * r / denom;
  nll[1] = -0.5 / nu - a * 2.0 * b / omega + ap * (r2 + 2.0 * b) / denom;
  nll[2] = std::log(denom) - std::log(omega) + digamma(a) - digamma(ap);
  nll[3] = -a / b + ap * 2.0 * (1.0 + nu) / denom;

  const double abs_r = std::fabs(r);
  const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
  const ParamGrad reg = {-sign * (2.0 * nu + a), 2.0 * abs_r, abs_r, 0.0};

  const double c = nu * (a - 1.0) / (b * (nu + 1.0));
  const ParamGrad u = {-2.0 * r * c,
                       r2 * (a - 1.0) / (b * (nu + 1.0) * (nu + 1.0)),
                       r2 * nu / (b * (nu + 1.0)),
                       -r2 * c / b};

  ParamGrad out;
  for (int k = 0; k < 4; ++k) out[k] = nll[k] + w.lambda_reg * reg[k] + w.xi_reg * u[k];
  return out;
}

// Field-level helpers.

inline std::vector<double> mean_field(const EvidentialField& f) {
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = predict_mean(f.params[i]);
  return out;
}

inline std::vector<double> aleatoric_field(const EvidentialField& f) {
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = aleatoric(f.params[i]);
  return out;
}

inline std::vector<double> epistemic_field(const EvidentialField& f) {
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = epistemic(f.params[i]);
  return out;
}

// Mean of per-element losses over a field (pairwise summation).
inline LossTerms field_loss(const EvidentialField& f, std::span<const double> y,
                            const LossWeights& w) {
  if (y.size() != f.size()) throw ShapeError("field_loss: target size mismatch");
  std::vector<double> nll(f.size()), reg(f.size()), u(f.size()), tot(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const LossTerms t = loss_terms(f.params[i], y[i], w);
    nll[i] = t.nll;
    reg[i] = t.reg;
    u[i] = t.u;
    tot[i] = t.total;
  }
  return {mean(nll), mean(reg), mean(u), mean(tot)};
}

}  // namespace evisurro

#endif  // EVISURRO_EVIDENTIAL_HPP_
