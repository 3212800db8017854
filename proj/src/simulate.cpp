#include "vo2lgm/simulate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

#include "vo2lgm/parallel.hpp"

namespace vo2lgm {

Eigen::VectorXd default_fixed_effects() {
  Eigen::VectorXd b(14);
  b << 1.32, 1.56, 1.92, 1.11, -0.20, 0.33, -0.01, -0.01, 0.01, 0.31, -0.08, 0.35, -1.13, -2.12;
  return b;
}

GenerativeConfig::GenerativeConfig() : fixed(default_fixed_effects()) {}

void GenerativeConfig::validate() const {
  if (fixed.size() != static_cast<Eigen::Index>(fixed_effect_names(options).size()))
    throw std::invalid_argument("true fixed effects do not match the selected terms");
  for (double v : {theta.tau_alpha, theta.tau_beta1, theta.tau_s, theta.phi})
    if (!(v > 0.0)) throw std::invalid_argument("true hyperparameters must be positive");
  if (n_patients < 1 || sessions_per_patient < 1 || breaths_per_session < 1)
    throw std::invalid_argument("simulation layout counts must be at least 1");
  if (!(mean_gap > 0.0)) throw std::invalid_argument("mean_gap must be positive");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw std::invalid_argument("jitter must lie in [0, 1)");
  if (!(spike_rate >= 0.0 && spike_rate <= 1.0)) throw std::invalid_argument("spike_rate must lie in [0, 1]");
  if (!(spike_factor > 0.0)) throw std::invalid_argument("spike_factor must be positive");
  const auto& c = covariates;
  if (!(c.persistence >= 0.0 && c.persistence < 1.0))
    throw std::invalid_argument("covariate persistence must lie in [0, 1)");
  if (!(c.age_min > 0.0 && c.age_max >= c.age_min)) throw std::invalid_argument("invalid age range");
  if (!(c.p_good >= 0.0 && c.p_reasonable >= 0.0 && c.p_good + c.p_reasonable <= 1.0))
    throw std::invalid_argument("invalid session quality probabilities");
  if (c.sofa_max < 0) throw std::invalid_argument("sofa_max must be non-negative");
}

std::vector<double> irregular_grid(int n, double mean_gap, double jitter, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("number of breaths must be non-negative");
  if (!(mean_gap > 0.0)) throw std::invalid_argument("mean_gap must be positive");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw std::invalid_argument("jitter must lie in [0, 1)");
  std::vector<double> t(static_cast<std::size_t>(n));
  if (jitter == 0.0) {
    for (int k = 0; k < n; ++k) t[k] = (k + 1) * mean_gap;
    return t;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> gap(mean_gap * (1.0 - jitter), mean_gap * (1.0 + jitter));
  double acc = 0.0;
  for (int k = 0; k < n; ++k) t[k] = (acc += gap(rng));
  return t;
}

namespace {

std::string padded(int value, int width) {
  std::string s = std::to_string(value);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

double normal_draw(std::mt19937_64& rng, double precision) {
  std::normal_distribution<double> normal;
  const double z = normal(rng);
  return std::isinf(precision) ? 0.0 : z / std::sqrt(precision);
}

std::vector<double> ar1_walk(int n, double mean, double sd, double rho, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> out(static_cast<std::size_t>(n));
  double z = normal(rng);
  const double innov = std::sqrt(1.0 - rho * rho);
  for (int k = 0; k < n; ++k) {
    if (k > 0) z = rho * z + innov * normal(rng);
    out[k] = std::exp(mean + sd * z);
  }
  return out;
}

}  // namespace

Simulation simulate(const GenerativeConfig& cfg) {
  cfg.validate();
  const auto& cv = cfg.covariates;
  Simulation sim;
  Dataset& ds = sim.data;
  SimTruth& truth = sim.truth;
  truth.fixed = cfg.fixed;
  truth.theta = cfg.theta;

  std::mt19937_64 meta_rng(mix_seed(cfg.seed, 1));
  const int pw = std::max(2, static_cast<int>(std::to_string(cfg.n_patients).size()));
  for (int i = 0; i < cfg.n_patients; ++i) {
    PatientMeta pm;
    pm.patient_id = "P" + padded(i + 1, pw);
    pm.age = std::uniform_real_distribution<double>(cv.age_min, cv.age_max)(meta_rng);
    pm.bmi = std::exp(cv.log_bmi_mean + cv.log_bmi_sd * std::normal_distribution<double>()(meta_rng));
    pm.sex = std::bernoulli_distribution(cv.p_male)(meta_rng) ? 1 : 0;
    pm.gppaq = std::uniform_int_distribution<int>(1, 4)(meta_rng);
    ds.patient_meta[pm.patient_id] = pm;

    Patient p;
    p.id = pm.patient_id;
    for (int s = 0; s < cfg.sessions_per_patient; ++s) {
      SessionMeta sm;
      sm.session_id = p.id + "-S" + std::to_string(s + 1);
      sm.patient_id = p.id;
      sm.sofa = std::uniform_int_distribution<int>(0, cv.sofa_max)(meta_rng);
      const double u = std::uniform_real_distribution<double>()(meta_rng);
      sm.quality = u < cv.p_good ? Quality::good : (u < cv.p_good + cv.p_reasonable ? Quality::reasonable : Quality::poor);
      sm.days_since_admission = s + 1;
      ds.session_meta[sm.session_id] = sm;

      const std::uint64_t stream = static_cast<std::uint64_t>(i) * 1000 + static_cast<std::uint64_t>(s);
      const auto times = irregular_grid(cfg.breaths_per_session, cfg.mean_gap, cfg.jitter,
                                        mix_seed(cfg.seed, 10 + 4 * stream));
      std::mt19937_64 cov_rng(mix_seed(cfg.seed, 11 + 4 * stream));
      const auto vt = ar1_walk(cfg.breaths_per_session, cv.log_vt_mean, cv.log_vt_sd, cv.persistence, cov_rng);
      const auto pet = ar1_walk(cfg.breaths_per_session, cv.log_petco2_mean, cv.log_petco2_sd, cv.persistence, cov_rng);
      const auto rr = ar1_walk(cfg.breaths_per_session, cv.log_rr_mean, cv.log_rr_sd, cv.persistence, cov_rng);
      Session sess;
      sess.id = sm.session_id;
      for (int k = 0; k < cfg.breaths_per_session; ++k) sess.records.push_back({times[k], std::nullopt, vt[k], rr[k], pet[k]});
      p.sessions.push_back(std::move(sess));
    }
    ds.patients.push_back(std::move(p));
  }

  // Linear predictor in the centered parameterization the model fits.
  const ModelFrame frame = build_frame(ds, cfg.options);
  const LatentLayout lay = layout(frame);
  truth.centering = frame.centering;
  truth.session_ids = frame.session_ids;
  truth.patient_ids = frame.patient_ids;

  std::mt19937_64 effect_rng(mix_seed(cfg.seed, 2));
  truth.session_effects.resize(lay.n_sessions);
  for (int j = 0; j < lay.n_sessions; ++j) truth.session_effects[j] = normal_draw(effect_rng, cfg.theta.tau_alpha);
  truth.patient_slopes.resize(lay.n_patients);
  for (int i = 0; i < lay.n_patients; ++i) truth.patient_slopes[i] = normal_draw(effect_rng, cfg.theta.tau_beta1);

  truth.latent = Eigen::VectorXd::Zero(lay.dimension());
  truth.latent.head(lay.n_fixed) = cfg.fixed;
  truth.latent.segment(lay.n_fixed, lay.n_sessions) = truth.session_effects;
  truth.latent.segment(lay.n_fixed + lay.n_sessions, lay.n_patients) = truth.patient_slopes;
  truth.ou.resize(static_cast<std::size_t>(lay.n_sessions));
  for (int j = 0; j < lay.n_sessions; ++j) {
    const auto path = ou_sample(lay.session_times[j], cfg.theta.ou(), mix_seed(mix_seed(cfg.seed, 5), static_cast<std::uint64_t>(j)));
    truth.ou[j] = path.values;
    const auto& rows = lay.session_rows[j];
    for (std::size_t k = 0; k < rows.size(); ++k) truth.latent[lay.obs_slot_of(rows[k])] = path.values[k];
  }
  truth.eta = design_matrix(frame, lay) * truth.latent;

  std::mt19937_64 noise_rng(mix_seed(cfg.seed, 3));
  std::mt19937_64 spike_rng(mix_seed(cfg.seed, 4));
  const double obs_precision = std::exp(cfg.log_obs_precision);
  int r = 0;
  for (auto& p : ds.patients)
    for (auto& s : p.sessions)
      for (auto& rec : s.records) {
        const double log_vo2 = cfg.response_offset + truth.eta[r] + normal_draw(noise_rng, obs_precision);
        rec.vo2 = std::exp(log_vo2);
        if (cfg.spike_rate > 0.0 && std::bernoulli_distribution(cfg.spike_rate)(spike_rng)) {
          rec.vt *= cfg.spike_factor;
          rec.rr *= cfg.spike_factor;
          *rec.vo2 *= cfg.spike_factor;
          truth.spike_rows.push_back(r);
        }
        ++r;
      }
  return sim;
}

void write_truth_json(const SimTruth& truth, const std::string& path) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["fixed"] = vec(truth.fixed);
  j["theta"] = {{"tau_alpha", truth.theta.tau_alpha},
                {"tau_beta1", truth.theta.tau_beta1},
                {"tau_s", truth.theta.tau_s},
                {"phi", truth.theta.phi}};
  j["session_ids"] = truth.session_ids;
  j["patient_ids"] = truth.patient_ids;
  j["session_effects"] = vec(truth.session_effects);
  j["patient_slopes"] = vec(truth.patient_slopes);
  j["ou"] = truth.ou;
  j["eta"] = vec(truth.eta);
  j["centering"] = {{"log_vo2", truth.centering.log_vo2}, {"log_vt", truth.centering.log_vt},
                    {"log_petco2", truth.centering.log_petco2}, {"log_rr", truth.centering.log_rr},
                    {"log_age", truth.centering.log_age}, {"log_bmi", truth.centering.log_bmi}};
  j["spike_rows"] = truth.spike_rows;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(1) << '\n';
}

}  // namespace vo2lgm
