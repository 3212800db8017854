#include "vo2lgm/lgm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace vo2lgm {

const std::vector<std::string>& HyperParams::names() {
  static const std::vector<std::string> n = {"tau_alpha", "tau_beta1", "tau_s", "phi"};
  return n;
}

Eigen::VectorXd HyperParams::to_log() const {
  Eigen::VectorXd psi(kDim);
  psi << std::log(tau_alpha), std::log(tau_beta1), std::log(tau_s), std::log(phi);
  return psi;
}

HyperParams HyperParams::from_log(const Eigen::VectorXd& psi) {
  if (psi.size() != kDim) throw std::invalid_argument("hyperparameter vector must have 4 entries");
  return {std::exp(psi[0]), std::exp(psi[1]), std::exp(psi[2]), std::exp(psi[3])};
}

void HyperParams::validate() const {
  for (double v : {tau_alpha, tau_beta1, tau_s, phi})
    if (!(v > 0.0) || !std::isfinite(v))
      throw std::invalid_argument("hyperparameters must be positive and finite");
}

double PriorSpec::obs_precision() const { return std::exp(log_obs_precision); }

void PriorSpec::validate() const {
  auto pos = [](double v, const char* what) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string("prior ") + what + " must be positive");
  };
  pos(fixed_precision, "fixed-effect precision");
  pos(tau_alpha.shape, "tau_alpha shape");
  pos(tau_alpha.rate, "tau_alpha rate");
  pos(tau_beta1.shape, "tau_beta1 shape");
  pos(tau_beta1.rate, "tau_beta1 rate");
  pos(tau_s.shape, "tau_s shape");
  pos(tau_s.rate, "tau_s rate");
  pos(log_phi_precision, "log phi precision");
  if (!std::isfinite(log_obs_precision)) throw std::invalid_argument("log_obs_precision must be finite");
}

int LatentLayout::find_patient(const std::string& id) const {
  auto it = std::find(patient_ids.begin(), patient_ids.end(), id);
  return it == patient_ids.end() ? -1 : static_cast<int>(it - patient_ids.begin());
}

int LatentLayout::find_session(const std::string& id) const {
  auto it = std::find(session_ids.begin(), session_ids.end(), id);
  return it == session_ids.end() ? -1 : static_cast<int>(it - session_ids.begin());
}

LatentLayout layout(const ModelFrame& frame) {
  LatentLayout L;
  L.n_fixed = frame.n_fixed();
  L.fixed_names = frame.fixed_names;
  L.session_ids = frame.session_ids;
  L.patient_ids = frame.patient_ids;
  L.session_patient = frame.session_patient;
  L.n_sessions = static_cast<int>(frame.session_ids.size());
  L.n_patients = static_cast<int>(frame.patient_ids.size());
  L.n_obs = frame.rows();

  L.session_rows.assign(L.n_sessions, {});
  for (int r = 0; r < frame.rows(); ++r) L.session_rows[frame.session_index[r]].push_back(r);
  L.obs_slot_of_row.assign(L.n_obs, -1);
  L.session_times.assign(L.n_sessions, {});
  int next = 0;
  for (int j = 0; j < L.n_sessions; ++j) {
    auto& rows = L.session_rows[j];
    std::stable_sort(rows.begin(), rows.end(),
                     [&](int a, int b) { return frame.time[a] < frame.time[b]; });
    for (int r : rows) {
      L.obs_slot_of_row[r] = next++;
      L.session_times[j].push_back(frame.time[r]);
    }
    require_increasing(L.session_times[j]);
  }
  return L;
}

SpMat prior_precision(const LatentLayout& L, const HyperParams& theta, const PriorSpec& priors) {
  theta.validate();
  const int n = L.dimension();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(L.n_effects()) + 3 * static_cast<std::size_t>(L.n_obs));
  for (int k = 0; k < L.n_fixed; ++k) trips.emplace_back(k, k, priors.fixed_precision);
  for (int j = 0; j < L.n_sessions; ++j)
    trips.emplace_back(L.session_slot(j), L.session_slot(j), theta.tau_alpha);
  for (int i = 0; i < L.n_patients; ++i)
    trips.emplace_back(L.patient_slot(i), L.patient_slot(i), theta.tau_beta1);
  int offset = L.n_effects();
  for (int j = 0; j < L.n_sessions; ++j) {
    const auto& times = L.session_times[j];
    if (times.empty()) continue;
    SpMat block = ou_precision(times, theta.ou());
    for (int c = 0; c < block.outerSize(); ++c)
      for (SpMat::InnerIterator it(block, c); it; ++it)
        trips.emplace_back(offset + static_cast<int>(it.row()), offset + c, it.value());
    offset += static_cast<int>(times.size());
  }
  SpMat Q(n, n);
  Q.setFromTriplets(trips.begin(), trips.end());
  return Q;
}

double prior_log_det(const LatentLayout& L, const HyperParams& theta, const PriorSpec& priors) {
  theta.validate();
  double ld = L.n_fixed * std::log(priors.fixed_precision) + L.n_sessions * std::log(theta.tau_alpha) +
              L.n_patients * std::log(theta.tau_beta1);
  for (const auto& times : L.session_times)
    if (!times.empty()) ld += ou_log_det_precision(times, theta.ou());
  return ld;
}

std::vector<std::pair<int, double>> design_row(const ModelFrame& frame, int r, const LatentLayout& L) {
  std::vector<std::pair<int, double>> row;
  row.reserve(static_cast<std::size_t>(L.n_fixed) + 3);
  for (int k = 0; k < L.n_fixed; ++k) {
    const double v = frame.fixed(r, k);
    if (v != 0.0) row.emplace_back(L.fixed_slot(k), v);
  }
  row.emplace_back(L.session_slot(frame.session_index[r]), 1.0);
  const double lvt = frame.log_vt[r];
  if (lvt != 0.0) row.emplace_back(L.patient_slot(frame.patient_index[r]), lvt);
  row.emplace_back(L.obs_slot_of(r), 1.0);
  return row;
}

SpMatRow design_matrix(const ModelFrame& frame, const LatentLayout& L) {
  SpMatRow A(frame.rows(), L.dimension());
  A.reserve(Eigen::VectorXi::Constant(frame.rows(), L.n_fixed + 3));
  for (int r = 0; r < frame.rows(); ++r)
    for (const auto& [slot, v] : design_row(frame, r, L)) A.insert(r, slot) = v;
  A.makeCompressed();
  return A;
}

double log_gamma_on_log_scale(double log_tau, const GammaPrior& g) {
  return g.shape * std::log(g.rate) - std::lgamma(g.shape) + g.shape * log_tau -
         g.rate * std::exp(log_tau);
}

double log_hyperprior(const HyperParams& theta, const PriorSpec& priors) {
  theta.validate();
  const double lphi = std::log(theta.phi);
  const double d = lphi - priors.log_phi_mean;
  const double normal = 0.5 * (std::log(priors.log_phi_precision) - std::log(2.0 * std::numbers::pi) -
                               priors.log_phi_precision * d * d);
  return log_gamma_on_log_scale(std::log(theta.tau_alpha), priors.tau_alpha) +
         log_gamma_on_log_scale(std::log(theta.tau_beta1), priors.tau_beta1) +
         log_gamma_on_log_scale(std::log(theta.tau_s), priors.tau_s) + normal;
}

}  // namespace vo2lgm
