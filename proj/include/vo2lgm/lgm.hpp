#pragma once

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "vo2lgm/dataset.hpp"
#include "vo2lgm/ou_process.hpp"

namespace vo2lgm {

using SpMat = Eigen::SparseMatrix<double>;
using SpMatRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// The four hyperparameters explored by grid integration. Optimisation and
/// integration work on the unconstrained vector of their logs.
struct HyperParams {
  double tau_alpha = 1.0;  // session-intercept precision
  double tau_beta1 = 1.0;  // patient log(VT)-slope precision
  double tau_s = 1.0;      // O-U stationary precision
  double phi = 1.0;        // O-U mean-reversion rate, 1/s

  static constexpr int kDim = 4;
  static const std::vector<std::string>& names();

  Eigen::VectorXd to_log() const;
  static HyperParams from_log(const Eigen::VectorXd& psi);
  void validate() const;
  OuParams ou() const { return {phi, tau_s}; }

  bool operator==(const HyperParams&) const = default;
};

struct GammaPrior {
  double shape = 1.0;
  double rate = 1.0;
};

struct PriorSpec {
  double fixed_precision = 0.1;
  GammaPrior tau_alpha{1.0, 5e-5};
  GammaPrior tau_beta1{1.0, 5e-5};
  GammaPrior tau_s{50.0, 1.0};
  double log_phi_mean = 0.0;
  double log_phi_precision = 0.1;
  /// Observation precision is the constant exp(log_obs_precision).
  double log_obs_precision = 15.0;

  double obs_precision() const;
  void validate() const;
};

/// Slot map of the latent field
///   [ fixed effects | session intercept deviations | patient slope deviations | O-U states ].
/// O-U slots are ordered by session, then time.
struct LatentLayout {
  int n_fixed = 0;
  int n_sessions = 0;
  int n_patients = 0;
  int n_obs = 0;

  std::vector<std::string> fixed_names;
  std::vector<std::string> session_ids;
  std::vector<std::string> patient_ids;
  std::vector<int> session_patient;

  std::vector<int> obs_slot_of_row;                 // frame row -> O-U slot offset
  std::vector<std::vector<double>> session_times;   // sorted times per session
  std::vector<std::vector<int>> session_rows;       // frame rows per session, time order

  int dimension() const { return n_fixed + n_sessions + n_patients + n_obs; }
  int n_effects() const { return n_fixed + n_sessions + n_patients; }
  int fixed_slot(int k) const { return k; }
  int session_slot(int j) const { return n_fixed + j; }
  int patient_slot(int i) const { return n_fixed + n_sessions + i; }
  int obs_slot_of(int row) const { return n_effects() + obs_slot_of_row[row]; }

  int find_patient(const std::string& id) const;  // -1 when absent
  int find_session(const std::string& id) const;

  bool operator==(const LatentLayout&) const = default;
};

LatentLayout layout(const ModelFrame& frame);

/// Q(theta): block diagonal with fixed, session, patient and per-session O-U blocks.
SpMat prior_precision(const LatentLayout& layout, const HyperParams& theta, const PriorSpec& priors);

/// log|Q(theta)| as the sum of the block log-determinants.
double prior_log_det(const LatentLayout& layout, const HyperParams& theta, const PriorSpec& priors);

/// Nonzeros (slot, value) of the design row mapping the latent field to the
/// linear predictor of frame row r. Exact zeros are omitted.
std::vector<std::pair<int, double>> design_row(const ModelFrame& frame, int r,
                                               const LatentLayout& layout);

SpMatRow design_matrix(const ModelFrame& frame, const LatentLayout& layout);

/// Log density of the hyperparameters on the internal log scale.
double log_hyperprior(const HyperParams& theta, const PriorSpec& priors);

/// Log density of Gamma(shape, rate) for log(tau), Jacobian included.
double log_gamma_on_log_scale(double log_tau, const GammaPrior& g);

}  // namespace vo2lgm
