#pragma once

// Reference computations written with plain loops and explicit matrices.
// They share no code with the library.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace oracle {

inline Eigen::VectorXd l96_tendency(const Eigen::VectorXd& x, double f) {
  const int n = static_cast<int>(x.size());
  Eigen::VectorXd out(n);
  for (int e = 0; e < n; ++e) {
    const double xp1 = x((e + 1) % n);
    const double xm1 = x((e - 1 + n) % n);
    const double xm2 = x((e - 2 + 2 * n) % n);
    out(e) = (xp1 - xm2) * xm1 - x(e) + f;
  }
  return out;
}

inline Eigen::VectorXd rk4(const Eigen::VectorXd& x, double dt, double f) {
  const Eigen::VectorXd k1 = l96_tendency(x, f);
  const Eigen::VectorXd k2 = l96_tendency(x + 0.5 * dt * k1, f);
  const Eigen::VectorXd k3 = l96_tendency(x + 0.5 * dt * k2, f);
  const Eigen::VectorXd k4 = l96_tendency(x + dt * k3, f);
  return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline double gaspari_cohn(double z) {
  if (z <= 1.0)
    return -std::pow(z, 5) / 4 + std::pow(z, 4) / 2 + 5 * std::pow(z, 3) / 8 - 5 * z * z / 3 + 1;
  if (z <= 2.0)
    return std::pow(z, 5) / 12 - std::pow(z, 4) / 2 + 5 * std::pow(z, 3) / 8 + 5 * z * z / 3 - 5 * z +
           4 - 2.0 / (3.0 * z);
  return 0.0;
}

// Perturbed-observation Kalman update with explicit H, covariance and inverse.
// delta has one entry (single inflation) or one per state component.
inline Eigen::MatrixXd kalman_update(const Eigen::MatrixXd& bg, const Eigen::MatrixXd& perturbed,
                                     const Eigen::MatrixXd& cd, int stride,
                                     const Eigen::VectorXd& delta, double lambda,
                                     bool inflate_members = true) {
  const int n = static_cast<int>(bg.rows());
  const int ne = static_cast<int>(bg.cols());
  const bool single = delta.size() == 1;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(perturbed.rows(), n);
  for (int t = 0; t < h.rows(); ++t) h(t, t * stride) = 1.0;

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < ne; ++j) mean += bg.col(j) / ne;
  Eigen::MatrixXd inflated = bg;
  for (int j = 0; j < ne; ++j)
    for (int s = 0; s < n; ++s)
      inflated(s, j) = mean(s) + (1.0 + delta(single ? 0 : s)) * (bg(s, j) - mean(s));

  const Eigen::MatrixXd& src = single ? bg : inflated;
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < ne; ++j) m2 += src.col(j) / ne;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (int j = 0; j < ne; ++j) cov += (src.col(j) - m2) * (src.col(j) - m2).transpose() / (ne - 1);
  const Eigen::MatrixXd r = single ? Eigen::MatrixXd(cd / std::pow(1.0 + delta(0), 2)) : cd;
  Eigen::MatrixXd k = cov * h.transpose() * (h * cov * h.transpose() + r).inverse();
  for (int s = 0; s < n; ++s)
    for (int t = 0; t < k.cols(); ++t) {
      const double frac = std::abs(s - t * stride) / static_cast<double>(n);
      k(s, t) *= gaspari_cohn(std::min(frac, 1.0 - frac) / lambda);
    }
  const Eigen::MatrixXd start = inflate_members ? inflated : bg;
  return start + k * (perturbed - h * start);
}

inline double rmse(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += (a(i) - b(i)) * (a(i) - b(i));
  return std::sqrt(s / static_cast<double>(a.size()));
}

inline double spread(const Eigen::MatrixXd& ens) {
  const Eigen::Index m = ens.rows();
  const Eigen::Index ne = ens.cols();
  double var_sum = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    double mu = 0.0;
    for (Eigen::Index j = 0; j < ne; ++j) mu += ens(i, j) / static_cast<double>(ne);
    double v = 0.0;
    for (Eigen::Index j = 0; j < ne; ++j) v += (ens(i, j) - mu) * (ens(i, j) - mu);
    var_sum += v / static_cast<double>(ne - 1);
  }
  return std::sqrt(var_sum / static_cast<double>(m));
}

inline double mean_member_rmse(const Eigen::MatrixXd& ens, const Eigen::VectorXd& ref) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < ens.cols(); ++j) s += rmse(ens.col(j), ref);
  return s / static_cast<double>(ens.cols());
}

inline double mismatch(const Eigen::VectorXd& pred, const Eigen::VectorXd& obs, const Eigen::MatrixXd& cd) {
  const Eigen::MatrixXd inv = cd.inverse();
  double q = 0.0;
  for (Eigen::Index a = 0; a < pred.size(); ++a)
    for (Eigen::Index b = 0; b < pred.size(); ++b) q += (obs(a) - pred(a)) * inv(a, b) * (obs(b) - pred(b));
  return q;
}

}  // namespace oracle
