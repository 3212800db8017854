#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "vo2lgm/dataset.hpp"
#include "vo2lgm/lgm.hpp"
#include "vo2lgm/sparse_factor.hpp"

namespace vo2lgm {

/// Gaussian conditional of the latent field given the hyperparameters and the
/// data. The likelihood is Gaussian with known precision, so this is exact:
/// Q* = Q(theta) + tau A^T A and Q* mean = tau A^T y.
struct ConditionalGaussian {
  HyperParams theta;
  Eigen::VectorXd mean;
  std::shared_ptr<const SparseFactor> factor;  // of Q*; null unless requested
  /// Cholesky factor of the effect-slot marginal precision (sessions,
  /// patients, fixed effects), positions in that order.
  std::shared_ptr<const SparseFactor> effect_factor;
  double log_det_prior = 0.0;                  // log|Q(theta)|
  double log_det_posterior = 0.0;              // log|Q*(theta)|
};

/// Fixed parts of the Gaussian latent model (design, response, Q* pattern)
/// shared by every hyperparameter evaluation. Immutable and thread-safe.
class GaussianLatentModel {
 public:
  GaussianLatentModel(const ModelFrame& frame, const PriorSpec& priors);
  GaussianLatentModel(LatentLayout layout, SpMatRow design, Eigen::VectorXd y, PriorSpec priors);

  /// With `with_factor` false only the mean and log-determinants are formed.
  ConditionalGaussian conditional(const HyperParams& theta, bool with_factor = true) const;
  /// log pi(theta | y) up to a theta-free constant (the marginal likelihood
  /// constants of the Gaussian observation model are included).
  double log_marginal(const HyperParams& theta) const;
  double log_marginal(const ConditionalGaussian& cond) const;

  /// Q*(theta) in slot order, both triangles stored.
  SpMat posterior_precision(const HyperParams& theta) const;
  /// Conditional variances of the linear predictor of every observation row.
  Eigen::VectorXd linear_predictor_variance(const SelectedInverse& sigma) const;

  const LatentLayout& layout() const { return layout_; }
  const SpMatRow& design() const { return A_; }
  const Eigen::VectorXd& response() const { return y_; }
  const PriorSpec& priors() const { return priors_; }
  /// Elimination ordering used for factorization: O-U states first, then
  /// session and patient deviations, fixed effects last.
  const std::vector<int>& ordering() const { return perm_; }

 private:
  // Rows of one session in time order with the effect slots they touch.
  struct SessionBlock {
    int obs_offset = 0;
    std::vector<int> effects;  // effect positions in elimination order
    Eigen::MatrixXd A;         // rows x effects
    Eigen::VectorXd y;
  };

  void prepare();
  double prior_quadratic(const Eigen::VectorXd& x, const HyperParams& theta) const;

  LatentLayout layout_;
  SpMatRow A_;
  Eigen::VectorXd y_;
  PriorSpec priors_;
  std::vector<int> perm_;
  std::vector<SessionBlock> blocks_;
};

/// Inverse elimination ordering helper: the arrowhead ordering for `layout`.
std::vector<int> arrowhead_ordering(const LatentLayout& layout);

ConditionalGaussian conditional(const HyperParams& theta, const ModelFrame& frame,
                                const PriorSpec& priors);
double log_marginal(const HyperParams& theta, const ModelFrame& frame, const PriorSpec& priors);

// ---------------------------------------------------------------------------
// Hyperparameter posterior: mode and grid

using LogDensity = std::function<double(const Eigen::VectorXd&)>;

struct ModeSearchConfig {
  double fd_step = 1e-4;       // gradient
  double hessian_step = 1e-2;  // curvature at the mode
  double grad_tol = 1e-5;
  int max_iter = 200;
  double max_step = 2.0;  // longest accepted move in log-theta per iteration
  int threads = 1;
};

struct ModeResult {
  Eigen::VectorXd psi;        // log-theta at the mode
  double log_post = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;    // finite-difference Hessian of log pi at psi
  bool converged = false;
  bool hessian_negative_definite = false;
  int iterations = 0;
  std::vector<double> trace;  // log_post at each accepted iterate
};

/// Quasi-Newton ascent with central-difference gradients, finished by
/// Newton steps on a finite-difference Hessian.
ModeResult find_mode(const LogDensity& f, const Eigen::VectorXd& init, const ModeSearchConfig& cfg);
ModeResult find_mode(const GaussianLatentModel& model, const HyperParams& init,
                     const ModeSearchConfig& cfg);

struct GridConfig {
  double step = 1.0;
  double threshold = 2.5;
  int max_axis_steps = 12;
  int threads = 1;
};

struct GridPoint {
  Eigen::VectorXd z;    // standardized coordinates
  Eigen::VectorXd psi;  // log-theta
  double log_post = 0.0;
  double weight = 0.0;
};

struct HyperGrid {
  std::vector<GridPoint> points;
  int mode_index = 0;
  Eigen::VectorXd mode;
  Eigen::MatrixXd curvature;  // Hessian of log pi at the mode
  Eigen::MatrixXd z_to_psi;   // psi = mode + z_to_psi * z
  bool axis_fallback = false;
  std::vector<std::string> warnings;
};

/// Walks each standardized axis from the mode while the log density stays
/// within `threshold` of the mode (the first step either side is always kept),
/// then fills off-axis lattice points predicted to lie within the threshold.
HyperGrid explore_grid(const LogDensity& f, const ModeResult& mode, const GridConfig& cfg);

// ---------------------------------------------------------------------------
// Fit

struct MarginalSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0;
  double q975 = 0.0;
};

double mixture_cdf(std::span<const double> weights, std::span<const double> means,
                   std::span<const double> sds, double x);
double mixture_quantile(std::span<const double> weights, std::span<const double> means,
                        std::span<const double> sds, double p);
MarginalSummary mixture_summary(std::span<const double> weights, std::span<const double> means,
                                std::span<const double> variances, std::string name = {});

/// Conditional posterior at one grid point.
struct PointPosterior {
  HyperParams theta;
  double log_post = 0.0;
  double weight = 0.0;

  Eigen::VectorXd effect_mean;  // slots [0, n_effects)
  Eigen::VectorXd effect_var;
  /// Lower Cholesky factor of the marginal precision of the effect slots, in
  /// elimination order (sessions, patients, fixed effects).
  SpMat effect_factor;

  // Whole-field quantities; empty when the fit was loaded from a bundle.
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
  Eigen::VectorXd eta_var;  // conditional variance of each training linear predictor
};

/// Slot of effect position e in the elimination order used by effect_factor.
int effect_slot(const LatentLayout& layout, int e);

struct InferenceConfig {
  HyperParams init{10.0, 10.0, 49.0, 0.1};
  ModeSearchConfig mode;
  GridConfig grid;
  int threads = 1;
  bool keep_full_field = true;
};

struct FitResult {
  LatentLayout layout;
  CenteringConstants centering;
  FrameOptions options;
  PriorSpec priors;
  ModeResult mode;
  HyperGrid grid;
  std::vector<PointPosterior> points;
  std::vector<MarginalSummary> fixed_summary;
  std::vector<MarginalSummary> hyper_summary;
  Eigen::VectorXd hyper_log_mean;  // grid-weighted posterior mean of log-theta
  std::vector<std::string> warnings;

  bool has_full_field() const { return !points.empty() && points.front().mean.size() > 0; }
};

/// Conditional posterior at a fixed hyperparameter point.
PointPosterior evaluate_point(const GaussianLatentModel& model, const HyperParams& theta,
                              bool keep_full_field);

FitResult fit(const ModelFrame& frame, const PriorSpec& priors, const InferenceConfig& cfg);

/// Re-evaluates the conditionals of an existing fit's grid on `frame`
/// (which must be built with the fit's centering constants).
FitResult rehydrate(const FitResult& fit, const ModelFrame& frame, int threads = 1);

/// Mixture-of-Gaussians marginals of latent slots over the grid. Needs the full
/// field for O-U slots.
std::vector<MarginalSummary> marginals(const FitResult& fit, std::span<const int> slots);

/// Hyperparameter summaries from the Laplace (log-normal) approximation at the mode.
std::vector<MarginalSummary> hyper_summaries(const ModeResult& mode, const HyperGrid& grid);

struct JointDraw {
  int point = 0;
  HyperParams theta;
  Eigen::VectorXd x;
};

/// Draws (theta, effects) pairs: theta from the grid weights, then the effect
/// slots [0, n_effects) from that point's Gaussian via its Cholesky factor.
std::vector<JointDraw> sample_joint(const FitResult& fit, int n, std::uint64_t seed);

/// Same, for the whole latent field. Refactorizes each grid point that is drawn.
std::vector<JointDraw> sample_joint_full(const FitResult& fit, const GaussianLatentModel& model,
                                         int n, std::uint64_t seed, int threads = 1);

/// Grid indices drawn for `n` joint samples (shared by both samplers).
std::vector<int> draw_grid_indices(const FitResult& fit, int n, std::uint64_t seed);

}  // namespace vo2lgm
