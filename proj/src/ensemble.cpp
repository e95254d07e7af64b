#include "chop/ensemble.hpp"

#include "chop/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace chop {

MeanAndAnomalies mean_and_anomalies(const Eigen::MatrixXd& ensemble) {
  const Eigen::Index n = ensemble.cols();
  if (n < 2)
    throw Error(ErrorCode::DegenerateEnsemble,
                "need at least 2 members, got " + std::to_string(n));
  MeanAndAnomalies out;
  out.mean = ensemble.rowwise().mean();
  out.anomalies = (ensemble.colwise() - out.mean) / std::sqrt(static_cast<double>(n - 1));
  return out;
}

Eigen::Index truncation_rank(const Eigen::VectorXd& singular_values, double threshold) {
  const double total = singular_values.sum();
  if (!(total > 0.0)) return 1;
  // Inclusive rule: a cumulative fraction equal to the threshold keeps that
  // value.  The relative slack absorbs round-off in the cumulative sum.
  const double limit = threshold * total * (1.0 + 1e-12);
  double cumulative = 0.0;
  Eigen::Index r = 0;
  for (Eigen::Index l = 0; l < singular_values.size(); ++l) {
    cumulative += singular_values(l);
    if (cumulative > limit) break;
    r = l + 1;
  }
  return std::max<Eigen::Index>(r, 1);
}

TruncatedSvd truncated_svd(const Eigen::MatrixXd& matrix, double threshold) {
  if (!matrix.allFinite()) throw Error(ErrorCode::DegenerateMatrix, "non-finite matrix");
  if (matrix.size() == 0 || matrix.cwiseAbs().maxCoeff() == 0.0)
    throw Error(ErrorCode::DegenerateMatrix, "all-zero matrix has no leading direction");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(matrix, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const Eigen::Index r = truncation_rank(s, threshold);
  const double total = s.sum();

  TruncatedSvd out;
  out.full_rank = s.size();
  out.u = svd.matrixU().leftCols(r);
  out.singular_values = s.head(r);
  out.v = svd.matrixV().leftCols(r);
  out.energy_kept = s.head(r).sum() / total;
  out.energy_next = r < s.size() ? s.head(r + 1).sum() / total : 1.0;
  return out;
}

double gaspari_cohn(double z) {
  if (!(z >= 0.0)) throw Error(ErrorCode::Domain, "Gaspari-Cohn argument must be >= 0");
  if (z <= 1.0) {
    // -z^5/4 + z^4/2 + 5z^3/8 - 5z^2/3 + 1
    return (((((-0.25 * z) + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z) * z + 1.0;
  }
  if (z <= 2.0) {
    // z^5/12 - z^4/2 + 5z^3/8 + 5z^2/3 - 5z + 4 - 2/(3z)
    const double poly = ((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0;
    return std::max(0.0, poly - 2.0 / (3.0 * z));
  }
  return 0.0;
}

Eigen::MatrixXd latin_hypercube(std::span<const Range> ranges, int n, Rng& rng) {
  if (ranges.empty()) throw Error(ErrorCode::InvalidConfig, "no sampling ranges");
  if (n < 1) throw Error(ErrorCode::InvalidConfig, "sample count must be positive");
  for (const Range& r : ranges)
    if (!(r.lo < r.hi)) throw Error(ErrorCode::InvalidConfig, "empty sampling range");

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ranges.size()), n);
  std::vector<int> strata(static_cast<std::size_t>(n));
  for (std::size_t dim = 0; dim < ranges.size(); ++dim) {
    std::iota(strata.begin(), strata.end(), 0);
    std::shuffle(strata.begin(), strata.end(), rng);
    const Range& r = ranges[dim];
    const double width = (r.hi - r.lo) / n;
    for (int j = 0; j < n; ++j) {
      const double x = r.lo + (strata[static_cast<std::size_t>(j)] + unit(rng)) * width;
      out(static_cast<Eigen::Index>(dim), j) = std::min(x, r.hi);
    }
  }
  return out;
}

Eigen::MatrixXd latin_hypercube(std::span<const Range> ranges, int n, std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::HyperParams);
  return latin_hypercube(ranges, n, rng);
}

namespace {

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> symmetric_eigen(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw Error(ErrorCode::InvalidDimension, "matrix is not square");
  if (!m.allFinite()) throw Error(ErrorCode::Factorization, "non-finite covariance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  if (eig.info() != Eigen::Success)
    throw Error(ErrorCode::Factorization, "symmetric eigendecomposition failed");
  return eig;
}

bool is_diagonal(const Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      if (i != j && m(i, j) != 0.0) return false;
  return true;
}

}  // namespace

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& covariance) {
  if (covariance.size() == 0) return covariance;
  if (is_diagonal(covariance)) {
    const Eigen::VectorXd diag = covariance.diagonal();
    if ((diag.array() < 0.0).any())
      throw Error(ErrorCode::Factorization, "negative variance on the diagonal");
    return diag.cwiseSqrt().asDiagonal();
  }
  const auto eig = symmetric_eigen(covariance);
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double scale = std::max(lambda.cwiseAbs().maxCoeff(), 1e-300);
  if (lambda.minCoeff() < -1e-10 * scale)
    throw Error(ErrorCode::Factorization, "covariance is indefinite");
  const Eigen::VectorXd root = lambda.cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

Eigen::MatrixXd spd_inverse_sqrt(const Eigen::MatrixXd& covariance) {
  if (is_diagonal(covariance)) {
    const Eigen::VectorXd diag = covariance.diagonal();
    if (!(diag.array() > 0.0).all())
      throw Error(ErrorCode::Factorization, "observation error covariance is not positive definite");
    return diag.cwiseSqrt().cwiseInverse().asDiagonal();
  }
  const auto eig = symmetric_eigen(covariance);
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  if (!(lambda.minCoeff() > 0.0))
    throw Error(ErrorCode::Factorization, "observation error covariance is not positive definite");
  const Eigen::VectorXd inv_root = lambda.cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * inv_root.asDiagonal() * eig.eigenvectors().transpose();
}

GaussianSampler::GaussianSampler(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance)
    : mean_(std::move(mean)) {
  if (covariance.rows() != mean_.size() || covariance.cols() != mean_.size())
    throw Error(ErrorCode::InvalidDimension, "mean and covariance sizes differ");
  const auto eig = symmetric_eigen(covariance);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  sqrt_ = eig.eigenvectors() * root.asDiagonal();
}

Eigen::VectorXd GaussianSampler::draw(Rng& rng) const {
  return mean_ + sqrt_ * standard_normal(rng, mean_.size());
}

Eigen::MatrixXd GaussianSampler::draw(Rng& rng, Eigen::Index count) const {
  Eigen::MatrixXd z = standard_normal(rng, mean_.size(), count);
  return (sqrt_ * z).colwise() + mean_;
}

Eigen::VectorXd row_std(const Eigen::MatrixXd& samples) {
  const Eigen::Index n = samples.cols();
  if (n < 2) throw Error(ErrorCode::DegenerateEnsemble, "need at least 2 samples");
  const Eigen::VectorXd mean = samples.rowwise().mean();
  return ((samples.colwise() - mean).rowwise().squaredNorm() / static_cast<double>(n - 1))
      .cwiseSqrt();
}

}  // namespace chop
