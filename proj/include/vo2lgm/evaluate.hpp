#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vo2lgm/dataset.hpp"
#include "vo2lgm/inference.hpp"
#include "vo2lgm/predict.hpp"

namespace vo2lgm {

/// Counts indexed (observed, predicted).
struct ConfusionMatrix {
  std::array<std::array<long, kCategories>, kCategories> counts{};

  long total() const;
  long correct() const;
  /// Row-normalized proportions; rows of absent observed classes stay zero.
  Eigen::Matrix4d normalized() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

double zero_one_loss(std::span<const Category> predicted, std::span<const Category> observed);
ConfusionMatrix confusion(std::span<const Category> predicted, std::span<const Category> observed);

/// Ranked probability score over the four ordered categories.
double rps(const CategoryProbs& p, Category observed);
double mean_rps(std::span<const CategoryProbs> p, std::span<const Category> observed);

struct CvConfig {
  FrameOptions options;
  PriorSpec priors;
  InferenceConfig inference;
  int n_samples = 1000;
  CategoryThresholds thresholds;
  int threads = 1;
};

struct CvRow {
  std::string patient_id;
  std::string session_id;
  Quality quality = Quality::good;
  double t = 0.0;
  double observed_vo2 = 0.0;
  Category observed = Category::rest;
  RowPrediction prediction;
};

struct FoldResult {
  std::string patient_id;
  bool ok = false;
  std::string error;
  CenteringConstants centering;
  Eigen::VectorXd fixed_means;   // posterior means of the fold's fixed effects
  Eigen::VectorXd hyper_means;   // posterior means of the fold's hyperparameters
  ConfusionMatrix confusion;
  double zero_one = 0.0;
  double mean_rps = 0.0;
  std::vector<CvRow> rows;
};

struct QualityAccuracy {
  Quality quality = Quality::good;
  int sessions = 0;
  long rows = 0;
  double session_mean = 0.0;  // mean of per-session accuracies
  double row_pooled = 0.0;    // correct rows / rows
};

struct CvReport {
  std::vector<FoldResult> folds;
  ConfusionMatrix pooled;
  double zero_one = 0.0;      // pooled over all rows
  double mean_rps = 0.0;      // mean over all rows
  double fold_mean_zero_one = 0.0;
  double fold_mean_rps = 0.0;
  std::vector<QualityAccuracy> by_quality;
  int failed_folds = 0;
};

/// Fits on every patient except `patient_id` (fresh centering constants) and
/// predicts the held-out patient's rows in new_patient mode.
FoldResult run_fold(const Dataset& ds, const std::string& patient_id, const CvConfig& cfg, std::uint64_t seed);

/// Leave-one-patient-out cross-validation. A failing fold is reported in its
/// FoldResult and excluded from the pooled scores.
CvReport lopo_cv(const Dataset& ds, const CvConfig& cfg, std::uint64_t seed);

/// Target session rows with t < t_cut and every other session go to train;
/// the target session's remaining rows form the test set.
std::pair<Dataset, Dataset> ppc_split(const Dataset& ds, const std::string& session_id, double t_cut = 1000.0);

struct PlausibilityCurve {
  std::vector<double> thresholds;
  std::array<std::vector<double>, kCategories> proportion;  // NaN for absent categories
  std::array<long, kCategories> counts{};
};

/// For category c and threshold q: share of rows observed in c whose p_c >= q.
PlausibilityCurve plausibility_curve(std::span<const CategoryProbs> probs, std::span<const Category> observed,
                                     std::span<const double> thresholds);

}  // namespace vo2lgm
