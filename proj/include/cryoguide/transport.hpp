#pragma once

#include "cryoguide/core.hpp"
#include "cryoguide/pointcloud.hpp"

#include <Eigen/Dense>

#include <limits>

namespace cryoguide {

inline constexpr double kBalanced = std::numeric_limits<double>::infinity();

struct SinkhornConfig {
  double epsilon = 1.0;   // entropic regularization, Å^2
  double reach = 10.0;    // marginal relaxation scale, Å; kBalanced for exact marginals
  std::size_t max_iters = 500;
  double tol = 1e-6;      // stop when the largest potential update / epsilon drops below this
  bool use_weights = false;  // false: uniform masses 1/N, 1/M; true: the clouds' own weights

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("sinkhorn epsilon must be > 0");
    if (!(reach > 0.0)) throw ConfigError("sinkhorn reach must be > 0 (or infinite)");
    if (max_iters < 1) throw ConfigError("sinkhorn max_iters must be >= 1");
  }
  bool balanced() const { return std::isinf(reach); }
  // KL marginal penalty strength for the squared-distance/2 cost.
  double rho() const { return reach * reach; }
};

struct TransportPlan {
  Eigen::MatrixXd gamma;  // N x M
  Eigen::VectorXd f;      // length N
  Eigen::VectorXd g;      // length M
  std::size_t iterations = 0;
  bool converged = false;
};

struct OtResult {
  double cost = 0.0;
  TransportPlan plan;
};

namespace detail {

inline Eigen::VectorXd masses(const PointCloud& c, bool use_weights) {
  Eigen::VectorXd m(static_cast<Eigen::Index>(c.size()));
  for (std::size_t i = 0; i < c.size(); ++i)
    m[Eigen::Index(i)] = use_weights ? c.weights()[i] : 1.0 / static_cast<double>(c.size());
  return m;
}

inline Eigen::MatrixXd half_sq_dist(const Coords& x, const Coords& y) {
  Eigen::MatrixXd c(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) c(Eigen::Index(i), Eigen::Index(j)) = 0.5 * (x[i] - y[j]).squaredNorm();
  return c;
}

// -eps * log sum_j exp(log b_j + (h_j - C_ij)/eps), row-wise.
inline Eigen::VectorXd softmin_rows(const Eigen::MatrixXd& c, const Eigen::VectorXd& log_b, const Eigen::VectorXd& h,
                                    double eps) {
  Eigen::VectorXd out(c.rows());
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < c.cols(); ++j) mx = std::max(mx, log_b[j] + (h[j] - c(i, j)) / eps);
    double s = 0.0;
    for (Eigen::Index j = 0; j < c.cols(); ++j) s += std::exp(log_b[j] + (h[j] - c(i, j)) / eps - mx);
    out[i] = -eps * (mx + std::log(s));
  }
  return out;
}

}  // namespace detail

/// Entropy-regularized transport between two clouds with cost C_ij = |x_i - y_j|^2 / 2.
/// Returns the dual objective at the computed potentials, which equals
/// <gamma, C> + eps KL(gamma | a b^T) (+ marginal penalties when reach is finite) at convergence.
inline OtResult ot_epsilon(const PointCloud& X, const PointCloud& Y, const SinkhornConfig& cfg = {}) {
  cfg.validate();
  if (X.empty() || Y.empty()) throw EmptySelectionError("ot_epsilon: empty point cloud");
  const double eps = cfg.epsilon;
  const Eigen::VectorXd a = detail::masses(X, cfg.use_weights);
  const Eigen::VectorXd b = detail::masses(Y, cfg.use_weights);
  const Eigen::VectorXd log_a = a.array().log();
  const Eigen::VectorXd log_b = b.array().log();
  const Eigen::MatrixXd C = detail::half_sq_dist(X.points(), Y.points());
  const Eigen::MatrixXd Ct = C.transpose();
  const double damping = cfg.balanced() ? 1.0 : cfg.rho() / (cfg.rho() + eps);

  OtResult res;
  auto& plan = res.plan;
  plan.f = Eigen::VectorXd::Zero(C.rows());
  plan.g = Eigen::VectorXd::Zero(C.cols());
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const Eigen::VectorXd f_new = damping * detail::softmin_rows(C, log_b, plan.g, eps);
    const Eigen::VectorXd g_new = damping * detail::softmin_rows(Ct, log_a, f_new, eps);
    const double change = std::max((f_new - plan.f).cwiseAbs().maxCoeff(), (g_new - plan.g).cwiseAbs().maxCoeff());
    plan.f = f_new;
    plan.g = g_new;
    plan.iterations = it + 1;
    if (!plan.f.allFinite() || !plan.g.allFinite()) throw NumericError("sinkhorn: non-finite potentials");
    if (change / eps < cfg.tol) {
      plan.converged = true;
      break;
    }
  }

  plan.gamma.resize(C.rows(), C.cols());
  for (Eigen::Index i = 0; i < C.rows(); ++i)
    for (Eigen::Index j = 0; j < C.cols(); ++j)
      plan.gamma(i, j) = std::exp(log_a[i] + log_b[j] + (plan.f[i] + plan.g[j] - C(i, j)) / eps);

  const double mass_term = -eps * (plan.gamma.sum() - a.sum() * b.sum());
  if (cfg.balanced()) {
    res.cost = a.dot(plan.f) + b.dot(plan.g) + mass_term;
  } else {
    const double rho = cfg.rho();
    const auto phi = [rho](const Eigen::VectorXd& h) {
      return Eigen::VectorXd(rho * (1.0 - (-h.array() / rho).exp()));
    };
    res.cost = a.dot(phi(plan.f)) + b.dot(phi(plan.g)) + mass_term;
  }
  return res;
}

/// Debiased divergence OT(X,Y) - OT(X,X)/2 - OT(Y,Y)/2.
inline double sinkhorn_divergence(const PointCloud& X, const PointCloud& Y, const SinkhornConfig& cfg = {}) {
  const double xy = ot_epsilon(X, Y, cfg).cost;
  const double xx = ot_epsilon(X, X, cfg).cost;
  const double yy = ot_epsilon(Y, Y, cfg).cost;
  return xy - 0.5 * xx - 0.5 * yy;
}

struct DivergenceGradient {
  Coords grad;            // d D / d x_i
  bool converged = true;  // all inner Sinkhorn solves converged
};

/// Gradient of the divergence with respect to the positions of X, with the converged plans
/// held fixed. The OT(Y,Y) term does not depend on X.
inline DivergenceGradient divergence_grad_checked(const PointCloud& X, const PointCloud& Y,
                                                  const SinkhornConfig& cfg = {}) {
  const OtResult xy = ot_epsilon(X, Y, cfg);
  const OtResult xx = ot_epsilon(X, X, cfg);
  const auto& xp = X.points();
  const auto& yp = Y.points();
  DivergenceGradient out;
  out.converged = xy.plan.converged && xx.plan.converged;
  out.grad.assign(xp.size(), Vec3::Zero());
  for (std::size_t i = 0; i < xp.size(); ++i) {
    Vec3 gi = Vec3::Zero();
    for (std::size_t j = 0; j < yp.size(); ++j) gi += xy.plan.gamma(Eigen::Index(i), Eigen::Index(j)) * (xp[i] - yp[j]);
    // X appears in both slots of OT(X,X): sum row and column contributions, halved.
    Vec3 self = Vec3::Zero();
    for (std::size_t l = 0; l < xp.size(); ++l) {
      const double w = xx.plan.gamma(Eigen::Index(i), Eigen::Index(l)) + xx.plan.gamma(Eigen::Index(l), Eigen::Index(i));
      self += w * (xp[i] - xp[l]);
    }
    out.grad[i] = gi - 0.5 * self;
  }
  return out;
}

inline Coords divergence_grad(const PointCloud& X, const PointCloud& Y, const SinkhornConfig& cfg = {}) {
  return divergence_grad_checked(X, Y, cfg).grad;
}

}  // namespace cryoguide
