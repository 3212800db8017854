#include "vo2lgm/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "vo2lgm/parallel.hpp"

namespace vo2lgm {

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts)
    for (long c : row) t += c;
  return t;
}

long ConfusionMatrix::correct() const {
  long t = 0;
  for (int i = 0; i < kCategories; ++i) t += counts[i][i];
  return t;
}

Eigen::Matrix4d ConfusionMatrix::normalized() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  for (int i = 0; i < kCategories; ++i) {
    long row = 0;
    for (long c : counts[i]) row += c;
    if (row == 0) continue;
    for (int j = 0; j < kCategories; ++j) m(i, j) = static_cast<double>(counts[i][j]) / static_cast<double>(row);
  }
  return m;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  for (int i = 0; i < kCategories; ++i)
    for (int j = 0; j < kCategories; ++j) counts[i][j] += o.counts[i][j];
  return *this;
}

double zero_one_loss(std::span<const Category> predicted, std::span<const Category> observed) {
  if (predicted.size() != observed.size()) throw std::invalid_argument("prediction and observation lengths differ");
  if (predicted.empty()) throw std::invalid_argument("zero-one loss needs at least one row");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) wrong += predicted[i] != observed[i];
  return static_cast<double>(wrong) / static_cast<double>(predicted.size());
}

ConfusionMatrix confusion(std::span<const Category> predicted, std::span<const Category> observed) {
  if (predicted.size() != observed.size()) throw std::invalid_argument("prediction and observation lengths differ");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    ++m.counts[static_cast<int>(observed[i])][static_cast<int>(predicted[i])];
  return m;
}

double rps(const CategoryProbs& p, Category observed) {
  double cum = 0.0, s = 0.0;
  for (int i = 0; i < kCategories - 1; ++i) {
    cum += p[i] - (static_cast<int>(observed) == i ? 1.0 : 0.0);
    s += cum * cum;
  }
  return s / (kCategories - 1);
}

double mean_rps(std::span<const CategoryProbs> p, std::span<const Category> observed) {
  if (p.size() != observed.size()) throw std::invalid_argument("forecast and observation lengths differ");
  if (p.empty()) throw std::invalid_argument("mean RPS needs at least one row");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += rps(p[i], observed[i]);
  return s / static_cast<double>(p.size());
}

// ---------------------------------------------------------------------------

FoldResult run_fold(const Dataset& ds, const std::string& patient_id, const CvConfig& cfg, std::uint64_t seed) {
  FoldResult fold;
  fold.patient_id = patient_id;
  try {
    if (ds.find_patient(patient_id) == nullptr) throw std::invalid_argument("unknown patient '" + patient_id + "'");
    const Dataset train = drop_patient(ds, patient_id);
    const Dataset test = select_patients(ds, {patient_id});
    if (train.empty()) throw std::invalid_argument("training fold is empty");

    const ModelFrame train_frame = build_frame(train, cfg.options);
    InferenceConfig ic = cfg.inference;
    ic.keep_full_field = false;
    const FitResult fr = fit(train_frame, cfg.priors, ic);
    fold.centering = fr.centering;
    fold.fixed_means.resize(static_cast<Eigen::Index>(fr.fixed_summary.size()));
    for (std::size_t k = 0; k < fr.fixed_summary.size(); ++k) fold.fixed_means[static_cast<Eigen::Index>(k)] = fr.fixed_summary[k].mean;
    fold.hyper_means.resize(static_cast<Eigen::Index>(fr.hyper_summary.size()));
    for (std::size_t k = 0; k < fr.hyper_summary.size(); ++k) fold.hyper_means[static_cast<Eigen::Index>(k)] = fr.hyper_summary[k].mean;

    const ModelFrame test_frame = build_frame(test, cfg.options, fr.centering);
    const auto preds = predict_summaries(fr, test_frame, PredictMode::new_patient, cfg.n_samples, seed,
                                         cfg.thresholds, nullptr, ic.threads);
    std::vector<Category> pred_cat, obs_cat;
    std::vector<CategoryProbs> probs;
    std::size_t r = 0;
    for (const auto& p : test.patients)
      for (const auto& s : p.sessions)
        for (const auto& rec : s.records) {
          if (!rec.vo2) throw DataError("held-out record without V̇O₂ in session '" + s.id + "'");
          CvRow row;
          row.patient_id = p.id;
          row.session_id = s.id;
          row.quality = test.session_meta.at(s.id).quality;
          row.t = rec.t;
          row.observed_vo2 = *rec.vo2;
          row.observed = category_of(*rec.vo2, cfg.thresholds);
          row.prediction = preds[r++];
          pred_cat.push_back(row.prediction.category);
          obs_cat.push_back(row.observed);
          probs.push_back(row.prediction.probs);
          fold.rows.push_back(std::move(row));
        }
    fold.confusion = confusion(pred_cat, obs_cat);
    fold.zero_one = zero_one_loss(pred_cat, obs_cat);
    fold.mean_rps = mean_rps(probs, obs_cat);
    fold.ok = true;
  } catch (const std::exception& e) {
    fold.ok = false;
    fold.error = e.what();
    fold.rows.clear();
  }
  return fold;
}

CvReport lopo_cv(const Dataset& ds, const CvConfig& cfg, std::uint64_t seed) {
  if (ds.patients.size() < 2) throw std::invalid_argument("cross-validation needs at least two patients");
  CvReport rep;
  rep.folds.resize(ds.patients.size());
  CvConfig inner = cfg;
  const int n_folds = static_cast<int>(ds.patients.size());
  const int fold_threads = std::min(std::max(1, cfg.threads), n_folds);
  inner.inference.threads = std::max(1, cfg.threads / fold_threads);
  parallel_for(rep.folds.size(), fold_threads, [&](std::size_t i) {
    rep.folds[i] = run_fold(ds, ds.patients[i].id, inner, mix_seed(seed, i));
  });

  std::vector<Category> pred, obs;
  std::vector<CategoryProbs> probs;
  std::map<std::string, std::pair<long, long>> per_session;  // correct, rows
  std::map<std::string, Quality> session_quality;
  int ok = 0;
  for (const auto& f : rep.folds) {
    if (!f.ok) {
      ++rep.failed_folds;
      continue;
    }
    ++ok;
    rep.pooled += f.confusion;
    rep.fold_mean_zero_one += f.zero_one;
    rep.fold_mean_rps += f.mean_rps;
    for (const auto& r : f.rows) {
      pred.push_back(r.prediction.category);
      obs.push_back(r.observed);
      probs.push_back(r.prediction.probs);
      auto& ps = per_session[r.session_id];
      ps.first += r.prediction.category == r.observed;
      ++ps.second;
      session_quality[r.session_id] = r.quality;
    }
  }
  if (ok == 0) throw std::runtime_error("every cross-validation fold failed: " + rep.folds.front().error);
  rep.fold_mean_zero_one /= ok;
  rep.fold_mean_rps /= ok;
  rep.zero_one = zero_one_loss(pred, obs);
  rep.mean_rps = mean_rps(probs, obs);

  for (Quality q : {Quality::good, Quality::reasonable, Quality::poor}) {
    QualityAccuracy qa;
    qa.quality = q;
    long correct = 0;
    double acc_sum = 0.0;
    for (const auto& [sid, cr] : per_session) {
      if (session_quality[sid] != q) continue;
      ++qa.sessions;
      qa.rows += cr.second;
      correct += cr.first;
      acc_sum += static_cast<double>(cr.first) / static_cast<double>(cr.second);
    }
    if (qa.sessions > 0) {
      qa.session_mean = acc_sum / qa.sessions;
      qa.row_pooled = static_cast<double>(correct) / static_cast<double>(qa.rows);
    } else {
      qa.session_mean = qa.row_pooled = std::numeric_limits<double>::quiet_NaN();
    }
    rep.by_quality.push_back(qa);
  }
  return rep;
}

std::pair<Dataset, Dataset> ppc_split(const Dataset& ds, const std::string& session_id, double t_cut) {
  const Session* target = ds.find_session(session_id);
  if (target == nullptr) throw std::invalid_argument("unknown session '" + session_id + "'");
  if (target->records.empty()) throw std::invalid_argument("session '" + session_id + "' has no records");
  const double t0 = target->records.front().t;
  const double t1 = target->records.back().t;
  if (!(t_cut > t0 && t_cut <= t1))
    throw std::invalid_argument("t_cut must lie inside the span of session '" + session_id + "'");

  Dataset train = ds;
  Dataset test;
  for (auto& p : train.patients)
    for (auto& s : p.sessions) {
      if (s.id != session_id) continue;
      Session tail{s.id, {}};
      std::vector<BreathRecord> head;
      for (const auto& r : s.records) (r.t < t_cut ? head : tail.records).push_back(r);
      s.records = std::move(head);
      test.patients.push_back(Patient{p.id, {std::move(tail)}});
      test.session_meta[session_id] = ds.session_meta.at(session_id);
      test.patient_meta[p.id] = ds.patient_meta.at(p.id);
    }
  return {std::move(train), std::move(test)};
}

PlausibilityCurve plausibility_curve(std::span<const CategoryProbs> probs, std::span<const Category> observed,
                                     std::span<const double> thresholds) {
  if (probs.size() != observed.size()) throw std::invalid_argument("forecast and observation lengths differ");
  PlausibilityCurve out;
  out.thresholds.assign(thresholds.begin(), thresholds.end());
  for (double q : thresholds)
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("plausibility thresholds must lie in (0, 1]");
  for (Category c : observed) ++out.counts[static_cast<int>(c)];
  for (int c = 0; c < kCategories; ++c) {
    for (double q : thresholds) {
      if (out.counts[c] == 0) {
        out.proportion[c].push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      long hit = 0;
      for (std::size_t i = 0; i < probs.size(); ++i)
        if (static_cast<int>(observed[i]) == c && probs[i][c] >= q) ++hit;
      out.proportion[c].push_back(static_cast<double>(hit) / static_cast<double>(out.counts[c]));
    }
  }
  return out;
}

}  // namespace vo2lgm
