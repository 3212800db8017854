#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vo2lgm/dataset.hpp"
#include "vo2lgm/inference.hpp"

namespace vo2lgm {

enum class Category { rest = 0, low = 1, medium = 2, high = 3 };
constexpr int kCategories = 4;

std::string to_string(Category c);
Category parse_category(const std::string& s);

/// V̇O₂ boundaries between rest/low, low/medium and medium/high. Intervals are
/// [lo, hi): a value on a boundary belongs to the higher category.
struct CategoryThresholds {
  std::array<double, 3> boundaries{3.5, 5.0, 7.5};

  void validate() const;
  std::array<double, 3> log_boundaries() const;
};

Category category_of(double vo2, const CategoryThresholds& th = {});

struct CategoryProbs {
  std::array<double, kCategories> p{0.0, 0.0, 0.0, 0.0};

  double rest() const { return p[0]; }
  double low() const { return p[1]; }
  double medium() const { return p[2]; }
  double high() const { return p[3]; }
  double operator[](int i) const { return p[static_cast<std::size_t>(i)]; }
};

/// Predictive mean and variance of log V̇O₂ for one joint-posterior sample.
struct PredictiveDraw {
  double mean = 0.0;
  double var = 0.0;
};
using RowDraws = std::vector<PredictiveDraw>;

CategoryProbs classify(const RowDraws& draws, const CategoryThresholds& th = {});
/// Ties go to the higher category.
Category argmax_category(const CategoryProbs& p);
/// p_high >= threshold; threshold must lie in (0, 1).
bool high_alert(const CategoryProbs& p, double threshold = 0.20);

enum class PredictMode {
  new_patient,    // fixed effects only; both random effects and O-U integrated out
  new_session,    // known patient: sampled slope deviation, new session intercept
  in_sample,      // training rows: conditional law of the linear predictor
  known_session,  // later rows of a training session: O-U forecast from the nearest fitted state
};

std::string to_string(PredictMode m);
PredictMode parse_predict_mode(const std::string& s);

/// Draws joint-posterior samples once and evaluates per-row predictive
/// Gaussians on demand. `training` is needed for in_sample and known_session.
class Predictor {
 public:
  Predictor(const FitResult& fit, const ModelFrame& frame, PredictMode mode, int n_samples,
            std::uint64_t seed, const GaussianLatentModel* training = nullptr, int threads = 1);

  int rows() const { return frame_->rows(); }
  int samples() const { return n_; }
  RowDraws row(int r) const;

 private:
  const FitResult* fit_;
  const ModelFrame* frame_;
  PredictMode mode_;
  int n_;
  std::vector<JointDraw> draws_;
  std::vector<int> session_of_row_;  // fitted session index (known patient/session modes)
  std::vector<int> patient_of_row_;
  std::vector<int> training_row_;    // in_sample: matching training row
};

std::vector<RowDraws> predict_rows(const FitResult& fit, const ModelFrame& frame, PredictMode mode,
                                   int n_samples, std::uint64_t seed,
                                   const GaussianLatentModel* training = nullptr, int threads = 1);

struct RowPrediction {
  double mean_log = 0.0;  // mixture mean of log V̇O₂
  double sd_log = 0.0;
  double q025_log = 0.0;
  double q975_log = 0.0;
  CategoryProbs probs;
  Category category = Category::rest;
};

RowPrediction summarize(const RowDraws& draws, const CategoryThresholds& th = {}, bool quantiles = false);

/// predict_rows followed by summarize, without keeping all draws in memory.
std::vector<RowPrediction> predict_summaries(const FitResult& fit, const ModelFrame& frame,
                                             PredictMode mode, int n_samples, std::uint64_t seed,
                                             const CategoryThresholds& th = {},
                                             const GaussianLatentModel* training = nullptr,
                                             int threads = 1, bool quantiles = false);

}  // namespace vo2lgm
