#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "vo2lgm/dataset.hpp"
#include "vo2lgm/evaluate.hpp"
#include "vo2lgm/inference.hpp"
#include "vo2lgm/predict.hpp"
#include "vo2lgm/simulate.hpp"

namespace vo2lgm {

/// Settings shared by every subcommand. Each field has a key; the same keys
/// are accepted as `--key value` flags and as `key = value` lines in a config
/// file.
struct RunConfig {
  // data
  std::string breaths;
  std::string sessions;
  std::string patients;
  std::string bundle;       // fit bundle to read (predict) or write (fit)
  std::string predictions;  // stored predictions (eval)
  std::string out;          // output directory or file
  // training data for in_sample / known_session prediction; defaults to the
  // prediction data
  std::string train_breaths;
  std::string train_sessions;
  std::string train_patients;

  // preprocessing
  int smooth_window = 1;  // 1 = raw data; 3 = three-value rolling mean
  bool smooth_vo2 = true;
  std::string qualities = "good,reasonable,poor";
  double min_age = 0.0;
  double vt_min = 0.0, vt_max = 1e300;
  double rr_min = 0.0, rr_max = 1e300;
  double petco2_min = 0.0, petco2_max = 1e300;
  double vo2_min = 0.0, vo2_max = 1e300;

  // model terms and priors
  bool sofa = true;
  bool gppaq = true;
  bool sex = true;
  bool age_bmi = true;
  PriorSpec priors;

  // inference
  double grid_step = 1.0;
  double grid_threshold = 2.5;
  double fd_step = 1e-4;
  double grad_tol = 1e-5;
  int max_iter = 200;

  // prediction and classification
  std::string mode = "new_patient";
  int samples = 1000;
  double alert_threshold = 0.20;
  double boundary_low = 3.5;
  double boundary_medium = 5.0;
  double boundary_high = 7.5;

  // posterior predictive check
  std::string session;
  double t_cut = 1000.0;

  // simulation
  int sim_patients = 8;
  int sim_sessions = 3;
  int sim_breaths = 150;
  double sim_mean_gap = 3.0;
  double sim_jitter = 0.5;
  double sim_spike_rate = 0.0;
  double sim_spike_factor = 2.5;
  double sim_response_offset = 0.0;

  std::uint64_t seed = 1;
  int threads = 0;  // 0 = all available cores

  /// Keys in canonical order.
  static std::vector<std::string> keys();
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Applies `key = value` lines; '#' starts a comment.
  void load_file(const std::string& path);

  /// `key=value` lines of every setting that can change results (execution
  /// settings such as threads and output locations are left out).
  std::string canonical() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;

  int thread_count() const;
  FrameOptions frame_options() const;
  InferenceConfig inference() const;
  CategoryThresholds thresholds() const;
  std::set<Quality> quality_set() const;
  ScreenBounds bounds() const;
  GenerativeConfig generative() const;
  CvConfig cv() const;
};

/// FNV-1a, 64 bit.
std::uint64_t fnv1a64(const std::string& text);

}  // namespace vo2lgm
