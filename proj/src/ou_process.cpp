#include "vo2lgm/ou_process.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace vo2lgm {

void OuParams::validate() const {
  if (!(phi > 0.0)) throw std::invalid_argument("O-U phi must be positive");
  if (!(tau_s > 0.0)) throw std::invalid_argument("O-U tau_s must be positive");
}

void require_increasing(std::span<const double> times) {
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw std::invalid_argument("times must be strictly increasing (index " + std::to_string(i) +
                                  ")");
}

namespace {

// 1 - exp(-2 phi dt), without cancellation when phi*dt is small.
double innovation_fraction(double phi, double dt) { return -std::expm1(-2.0 * phi * dt); }

double normal_logpdf(double x, double mean, double precision) {
  const double d = x - mean;
  return 0.5 * (std::log(precision) - std::log(2.0 * std::numbers::pi) - precision * d * d);
}

}  // namespace

OuConditional ou_conditional(double s_prev, double dt, const OuParams& p) {
  p.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("O-U conditional needs dt > 0");
  return {s_prev * std::exp(-p.phi * dt), p.tau_s / innovation_fraction(p.phi, dt)};
}

OuTridiagonal ou_tridiagonal(std::span<const double> times, const OuParams& p) {
  p.validate();
  if (times.empty()) throw std::invalid_argument("O-U precision needs at least one time");
  require_increasing(times);
  const std::size_t n = times.size();
  // Q = tau_s e_0 e_0^T + sum_k tau_k (e_k - rho_k e_{k-1})(e_k - rho_k e_{k-1})^T
  OuTridiagonal tri;
  tri.diag.assign(n, 0.0);
  tri.sub.assign(n - 1, 0.0);
  tri.diag[0] = p.tau_s;
  for (std::size_t k = 1; k < n; ++k) {
    const double dt = times[k] - times[k - 1];
    const double rho = std::exp(-p.phi * dt);
    const double tk = p.tau_s / innovation_fraction(p.phi, dt);
    tri.diag[k] += tk;
    tri.diag[k - 1] += tk * rho * rho;
    tri.sub[k - 1] = -tk * rho;
  }
  return tri;
}

Eigen::SparseMatrix<double> ou_precision(std::span<const double> times, const OuParams& p) {
  const OuTridiagonal tri = ou_tridiagonal(times, p);
  const int n = static_cast<int>(times.size());
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(3 * static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) trips.emplace_back(k, k, tri.diag[k]);
  for (int k = 1; k < n; ++k) {
    trips.emplace_back(k, k - 1, tri.sub[k - 1]);
    trips.emplace_back(k - 1, k, tri.sub[k - 1]);
  }
  Eigen::SparseMatrix<double> Q(n, n);
  Q.setFromTriplets(trips.begin(), trips.end());
  return Q;
}

double ou_log_det_precision(std::span<const double> times, const OuParams& p) {
  p.validate();
  require_increasing(times);
  const double n = static_cast<double>(times.size());
  double ld = n * std::log(p.tau_s);
  for (std::size_t k = 1; k < times.size(); ++k)
    ld -= std::log(innovation_fraction(p.phi, times[k] - times[k - 1]));
  return ld;
}

double ou_logpdf(const OuPath& path, const OuParams& p) {
  p.validate();
  if (path.times.size() != path.values.size())
    throw std::invalid_argument("O-U path times and values differ in length");
  require_increasing(path.times);
  if (path.times.empty()) return 0.0;
  double lp = normal_logpdf(path.values[0], 0.0, p.tau_s);
  for (std::size_t k = 1; k < path.times.size(); ++k) {
    const auto c = ou_conditional(path.values[k - 1], path.times[k] - path.times[k - 1], p);
    lp += normal_logpdf(path.values[k], c.mean, c.precision);
  }
  return lp;
}

OuPath ou_sample(std::span<const double> times, const OuParams& p, std::uint64_t seed) {
  if (!(p.phi > 0.0) || !(p.tau_s > 0.0))
    throw std::invalid_argument("O-U parameters must be positive");
  require_increasing(times);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  OuPath path;
  path.times.assign(times.begin(), times.end());
  path.values.resize(times.size());
  // Infinite precision or rate are accepted here so simulators can switch the
  // process off; the draw is then degenerate at the conditional mean.
  auto draw = [&](double mean, double precision) {
    const double z = normal(rng);
    return std::isinf(precision) ? mean : mean + z / std::sqrt(precision);
  };
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (k == 0) {
      path.values[k] = draw(0.0, p.tau_s);
    } else {
      const double dt = times[k] - times[k - 1];
      const double mean = path.values[k - 1] * std::exp(-p.phi * dt);
      const double precision = p.tau_s / innovation_fraction(p.phi, dt);
      path.values[k] = draw(mean, precision);
    }
  }
  return path;
}

}  // namespace vo2lgm
