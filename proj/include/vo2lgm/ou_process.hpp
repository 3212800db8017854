#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Sparse>

namespace vo2lgm {

/// Ornstein-Uhlenbeck parameters. `phi` is the mean-reversion rate in 1/seconds,
/// `tau_s` the stationary precision.
struct OuParams {
  double phi = 0.0;
  double tau_s = 0.0;

  void validate() const;
};

struct OuPath {
  std::vector<double> times;
  std::vector<double> values;
};

struct OuConditional {
  double mean = 0.0;
  double precision = 0.0;
};

/// Law of s(t + dt) given s(t) = s_prev.
OuConditional ou_conditional(double s_prev, double dt, const OuParams& p);

/// Tridiagonal precision of the path at `times` with a stationary initial state.
Eigen::SparseMatrix<double> ou_precision(std::span<const double> times, const OuParams& p);

/// Diagonal and sub-diagonal of ou_precision(times, p).
struct OuTridiagonal {
  std::vector<double> diag;
  std::vector<double> sub;  // sub[k-1] couples states k and k-1
};
OuTridiagonal ou_tridiagonal(std::span<const double> times, const OuParams& p);

/// Closed-form log-determinant of ou_precision(times, p).
double ou_log_det_precision(std::span<const double> times, const OuParams& p);

/// Stationary initial-state density plus the sequential conditional densities.
double ou_logpdf(const OuPath& path, const OuParams& p);

OuPath ou_sample(std::span<const double> times, const OuParams& p, std::uint64_t seed);

/// Throws std::invalid_argument unless `times` is strictly increasing.
void require_increasing(std::span<const double> times);

}  // namespace vo2lgm
