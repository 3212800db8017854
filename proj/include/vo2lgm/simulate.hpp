#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vo2lgm/dataset.hpp"
#include "vo2lgm/lgm.hpp"

namespace vo2lgm {

/// Synthetic covariate laws. They are stand-ins chosen so that simulated
/// V̇O₂ spans all four intensity bands; they are not physiological models.
struct CovariateConfig {
  // Within-session log-scale AR(1) walks, one step per breath.
  double log_vt_mean = -0.8;      // vt around 0.45 L
  double log_vt_sd = 0.25;
  double log_petco2_mean = 1.5;   // around 4.5 kPa
  double log_petco2_sd = 0.12;
  double log_rr_mean = 2.9;       // around 18 breaths/min
  double log_rr_sd = 0.2;
  double persistence = 0.9;

  double age_min = 40.0;
  double age_max = 85.0;
  double log_bmi_mean = 3.26;     // around 26
  double log_bmi_sd = 0.15;
  double p_male = 0.5;
  int sofa_max = 12;
  double p_good = 0.5;
  double p_reasonable = 0.3;      // remainder is poor
};

struct GenerativeConfig {
  FrameOptions options;
  /// True coefficients in the order of fixed_effect_names(options).
  Eigen::VectorXd fixed;
  HyperParams theta{38.63, 44.30, 46.75, 0.09};
  double log_obs_precision = 15.0;
  double response_offset = 0.0;  // added to every log V̇O₂

  int n_patients = 8;
  int sessions_per_patient = 3;
  int breaths_per_session = 150;
  double mean_gap = 3.0;  // seconds between breaths
  double jitter = 0.5;
  CovariateConfig covariates;

  // Optional cough-like artifacts: with probability spike_rate a breath has
  // vt, rr and V̇O₂ multiplied by spike_factor (applied after the linear predictor).
  double spike_rate = 0.0;
  double spike_factor = 2.5;

  std::uint64_t seed = 1;

  GenerativeConfig();
  void validate() const;
};

/// Default coefficients for all fourteen terms.
Eigen::VectorXd default_fixed_effects();

struct SimTruth {
  Eigen::VectorXd fixed;
  HyperParams theta;
  std::vector<std::string> session_ids;
  std::vector<std::string> patient_ids;
  Eigen::VectorXd session_effects;        // a_ij per session
  Eigen::VectorXd patient_slopes;         // b_i per patient
  std::vector<std::vector<double>> ou;    // O-U path per session, record order
  Eigen::VectorXd eta;                    // noiseless linear predictor per record
  Eigen::VectorXd latent;                 // full latent vector in LatentLayout slot order
  CenteringConstants centering;           // covariate centering used for eta
  std::vector<int> spike_rows;

  bool operator==(const SimTruth&) const = default;
};

struct Simulation {
  Dataset data;
  SimTruth truth;
};

Simulation simulate(const GenerativeConfig& cfg);

/// n increasing times: cumulative sums of gaps uniform in mean_gap * [1 - jitter, 1 + jitter].
std::vector<double> irregular_grid(int n, double mean_gap, double jitter, std::uint64_t seed);

void write_truth_json(const SimTruth& truth, const std::string& path);

}  // namespace vo2lgm
