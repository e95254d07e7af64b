#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace chop {

using Rng = std::mt19937_64;

/// Named random streams derived from one experiment seed.  Each (seed, stream,
/// index) triple yields an independent generator, so results never depend on
/// the order in which streams are consumed.
enum class Stream : std::uint32_t {
  Climatology = 1,
  Truth = 2,
  Background = 3,
  ObservationNoise = 4,
  Perturbation = 5,
  HyperParams = 6,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(index & 0xffffffffu),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = normal(rng);
  return z;
}

inline Eigen::MatrixXd standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd z(rows, cols);
  // Column-major fill: column j is the j-th draw.
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) z(i, j) = normal(rng);
  return z;
}

}  // namespace chop
