#include "vo2lgm/predict.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "vo2lgm/parallel.hpp"

namespace vo2lgm {

std::string to_string(Category c) {
  switch (c) {
    case Category::rest: return "rest";
    case Category::low: return "low";
    case Category::medium: return "medium";
    case Category::high: return "high";
  }
  return "?";
}

Category parse_category(const std::string& s) {
  for (int i = 0; i < kCategories; ++i)
    if (to_string(static_cast<Category>(i)) == s) return static_cast<Category>(i);
  throw std::invalid_argument("unknown category '" + s + "'");
}

void CategoryThresholds::validate() const {
  if (!(boundaries[0] > 0.0 && boundaries[0] < boundaries[1] && boundaries[1] < boundaries[2]) ||
      !std::isfinite(boundaries[2]))
    throw std::invalid_argument("category boundaries must be positive and strictly increasing");
}

std::array<double, 3> CategoryThresholds::log_boundaries() const {
  validate();
  return {std::log(boundaries[0]), std::log(boundaries[1]), std::log(boundaries[2])};
}

Category category_of(double vo2, const CategoryThresholds& th) {
  th.validate();
  int c = 0;
  for (double b : th.boundaries)
    if (vo2 >= b) ++c;
  return static_cast<Category>(c);
}

CategoryProbs classify(const RowDraws& draws, const CategoryThresholds& th) {
  if (draws.empty()) throw std::invalid_argument("classify needs at least one draw");
  const auto lb = th.log_boundaries();
  CategoryProbs out;
  for (const auto& d : draws) {
    if (!(d.var >= 0.0) || !std::isfinite(d.mean)) throw std::invalid_argument("invalid predictive draw");
    std::array<double, kCategories> p{};
    if (d.var == 0.0) {
      int c = 0;
      for (double b : lb)
        if (d.mean >= b) ++c;
      p[static_cast<std::size_t>(c)] = 1.0;
    } else {
      const double sd = std::sqrt(d.var);
      std::array<double, 3> below{};
      for (int k = 0; k < 3; ++k) below[k] = 0.5 * std::erfc(-(lb[k] - d.mean) / (sd * std::numbers::sqrt2));
      p[0] = below[0];
      p[1] = below[1] - below[0];
      p[2] = below[2] - below[1];
      p[3] = 0.5 * std::erfc((lb[2] - d.mean) / (sd * std::numbers::sqrt2));
    }
    for (int k = 0; k < kCategories; ++k) out.p[k] += p[k];
  }
  for (auto& v : out.p) v = std::clamp(v / static_cast<double>(draws.size()), 0.0, 1.0);
  return out;
}

Category argmax_category(const CategoryProbs& p) {
  int best = 0;
  for (int i = 1; i < kCategories; ++i)
    if (p[i] >= p[best]) best = i;
  return static_cast<Category>(best);
}

bool high_alert(const CategoryProbs& p, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("alert threshold must lie in (0, 1)");
  return p.high() >= threshold;
}

std::string to_string(PredictMode m) {
  switch (m) {
    case PredictMode::new_patient: return "new_patient";
    case PredictMode::new_session: return "new_session";
    case PredictMode::in_sample: return "in_sample";
    case PredictMode::known_session: return "known_session";
  }
  return "?";
}

PredictMode parse_predict_mode(const std::string& s) {
  for (auto m : {PredictMode::new_patient, PredictMode::new_session, PredictMode::in_sample,
                 PredictMode::known_session})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown prediction mode '" + s + "'");
}

// ---------------------------------------------------------------------------

Predictor::Predictor(const FitResult& fit, const ModelFrame& frame, PredictMode mode, int n_samples,
                     std::uint64_t seed, const GaussianLatentModel* training, int threads)
    : fit_(&fit), frame_(&frame), mode_(mode), n_(n_samples) {
  if (n_samples < 1) throw std::invalid_argument("number of predictive samples must be positive");
  if (!(frame.centering == fit.centering))
    throw std::invalid_argument("centering constants of the new data do not match the fit");
  if (frame.fixed_names != fit.layout.fixed_names)
    throw std::invalid_argument("fixed-effect terms of the new data do not match the fit");
  const auto& L = fit.layout;
  const int rows = frame.rows();

  auto fitted_patient = [&](int r) {
    const auto& id = frame.patient_ids[static_cast<std::size_t>(frame.patient_index[r])];
    const int i = L.find_patient(id);
    if (i < 0) throw std::invalid_argument("patient '" + id + "' is not in the fitted data");
    return i;
  };

  switch (mode) {
    case PredictMode::new_patient:
      draws_ = sample_joint(fit, n_samples, seed);
      break;
    case PredictMode::new_session:
      draws_ = sample_joint(fit, n_samples, seed);
      patient_of_row_.resize(static_cast<std::size_t>(rows));
      for (int r = 0; r < rows; ++r) patient_of_row_[r] = fitted_patient(r);
      break;
    case PredictMode::in_sample: {
      if (!fit.has_full_field()) throw std::invalid_argument("in-sample prediction needs the full fitted field");
      if (!(layout(frame) == L)) throw std::invalid_argument("in-sample prediction needs the training data");
      for (int idx : draw_grid_indices(fit, n_samples, seed)) {
        JointDraw d;
        d.point = idx;
        d.theta = fit.points[static_cast<std::size_t>(idx)].theta;
        draws_.push_back(std::move(d));
      }
      break;
    }
    case PredictMode::known_session: {
      if (training == nullptr) throw std::invalid_argument("session forecasts need the training model");
      draws_ = sample_joint_full(fit, *training, n_samples, seed, threads);
      std::vector<int> offset(static_cast<std::size_t>(L.n_sessions) + 1, 0);
      for (int j = 0; j < L.n_sessions; ++j)
        offset[j + 1] = offset[j] + static_cast<int>(L.session_times[j].size());
      session_of_row_.resize(static_cast<std::size_t>(rows));
      patient_of_row_.resize(static_cast<std::size_t>(rows));
      training_row_.resize(static_cast<std::size_t>(rows));
      for (int r = 0; r < rows; ++r) {
        const auto& sid = frame.session_ids[static_cast<std::size_t>(frame.session_index[r])];
        const int j = L.find_session(sid);
        if (j < 0) throw std::invalid_argument("session '" + sid + "' is not in the fitted data");
        session_of_row_[r] = j;
        patient_of_row_[r] = fitted_patient(r);
        const auto& times = L.session_times[j];
        if (times.empty()) throw std::invalid_argument("session '" + sid + "' has no fitted states");
        auto it = std::upper_bound(times.begin(), times.end(), frame.time[r]);
        const int k = it == times.begin() ? 0 : static_cast<int>(it - times.begin()) - 1;
        training_row_[r] = L.n_effects() + offset[j] + k;
      }
      break;
    }
  }
}

RowDraws Predictor::row(int r) const {
  const auto& L = fit_->layout;
  const auto& F = *frame_;
  const double cy = fit_->centering.log_vo2;
  const double lvt = F.log_vt[r];
  RowDraws out(static_cast<std::size_t>(n_));

  if (mode_ == PredictMode::in_sample) {
    const auto row = design_row(F, r, L);
    for (int d = 0; d < n_; ++d) {
      const auto& p = fit_->points[static_cast<std::size_t>(draws_[d].point)];
      double m = cy;
      for (const auto& [slot, v] : row) m += v * p.mean[slot];
      out[d] = {m, std::max(0.0, p.eta_var[r])};
    }
    return out;
  }

  for (int d = 0; d < n_; ++d) {
    const auto& jd = draws_[static_cast<std::size_t>(d)];
    const auto& th = jd.theta;
    double m = cy;
    for (int k = 0; k < L.n_fixed; ++k) m += F.fixed(r, k) * jd.x[L.fixed_slot(k)];
    double v = 0.0;
    switch (mode_) {
      case PredictMode::new_patient:
        v = 1.0 / th.tau_alpha + lvt * lvt / th.tau_beta1 + 1.0 / th.tau_s;
        break;
      case PredictMode::new_session:
        m += jd.x[L.patient_slot(patient_of_row_[r])] * lvt;
        v = 1.0 / th.tau_alpha + 1.0 / th.tau_s;
        break;
      case PredictMode::known_session: {
        const int j = session_of_row_[r];
        const int slot = training_row_[r];
        // Nearest fitted state of this session at or before t (or the first one).
        const auto& times = L.session_times[j];
        auto it = std::upper_bound(times.begin(), times.end(), F.time[r]);
        const double t0 = it == times.begin() ? times.front() : *(it - 1);
        const double dt = std::abs(F.time[r] - t0);
        m += jd.x[L.session_slot(j)] + jd.x[L.patient_slot(patient_of_row_[r])] * lvt +
             jd.x[slot] * std::exp(-th.phi * dt);
        v = -std::expm1(-2.0 * th.phi * dt) / th.tau_s;
        break;
      }
      case PredictMode::in_sample:
        break;
    }
    out[static_cast<std::size_t>(d)] = {m, v};
  }
  return out;
}

std::vector<RowDraws> predict_rows(const FitResult& fit, const ModelFrame& frame, PredictMode mode,
                                   int n_samples, std::uint64_t seed, const GaussianLatentModel* training,
                                   int threads) {
  Predictor pred(fit, frame, mode, n_samples, seed, training, threads);
  std::vector<RowDraws> out(static_cast<std::size_t>(frame.rows()));
  parallel_for(out.size(), threads, [&](std::size_t r) { out[r] = pred.row(static_cast<int>(r)); });
  return out;
}

RowPrediction summarize(const RowDraws& draws, const CategoryThresholds& th, bool quantiles) {
  if (draws.empty()) throw std::invalid_argument("no predictive draws");
  const double n = static_cast<double>(draws.size());
  double mean = 0.0, second = 0.0;
  for (const auto& d : draws) {
    mean += d.mean;
    second += d.var + d.mean * d.mean;
  }
  mean /= n;
  second /= n;
  RowPrediction out;
  out.mean_log = mean;
  out.sd_log = std::sqrt(std::max(0.0, second - mean * mean));
  out.probs = classify(draws, th);
  out.category = argmax_category(out.probs);
  if (quantiles) {
    std::vector<double> w(draws.size(), 1.0 / n), m, s;
    for (const auto& d : draws) {
      m.push_back(d.mean);
      s.push_back(std::sqrt(d.var));
    }
    if (out.sd_log == 0.0) {
      out.q025_log = out.q975_log = mean;
    } else {
      out.q025_log = mixture_quantile(w, m, s, 0.025);
      out.q975_log = mixture_quantile(w, m, s, 0.975);
    }
  }
  return out;
}

std::vector<RowPrediction> predict_summaries(const FitResult& fit, const ModelFrame& frame, PredictMode mode,
                                             int n_samples, std::uint64_t seed, const CategoryThresholds& th,
                                             const GaussianLatentModel* training, int threads, bool quantiles) {
  th.validate();
  Predictor pred(fit, frame, mode, n_samples, seed, training, threads);
  std::vector<RowPrediction> out(static_cast<std::size_t>(frame.rows()));
  parallel_for(out.size(), threads,
               [&](std::size_t r) { out[r] = summarize(pred.row(static_cast<int>(r)), th, quantiles); });
  return out;
}

}  // namespace vo2lgm
