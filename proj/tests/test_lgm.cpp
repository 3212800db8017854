#include "doctest.h"

#include <cmath>
#include <numbers>

#include "toys.hpp"
#include "vo2lgm/lgm.hpp"

using namespace vo2lgm;

TEST_CASE("layout dimension and slot ranges") {
  const ModelFrame f = build_frame(toy::dataset(2, 2, 4, 1));
  const LatentLayout L = layout(f);
  CHECK(L.n_fixed == 14);
  CHECK(L.n_sessions == 4);
  CHECK(L.n_patients == 2);
  CHECK(L.n_obs == 16);
  CHECK(L.dimension() == 14 + 4 + 2 + 16);
  CHECK(L.session_slot(0) == 14);
  CHECK(L.patient_slot(1) == 19);
  CHECK(L.obs_slot_of(0) == 20);
  CHECK(L.obs_slot_of(15) == 35);
  CHECK(L.session_patient == std::vector<int>{0, 0, 1, 1});
  CHECK(L.find_session("P02-S1") == 2);
  CHECK(L.find_patient("nope") == -1);
  CHECK(layout(f) == L);
}

TEST_CASE("layout for 2 patients, 3 sessions, 10 observations") {
  Dataset ds = toy::dataset(2, 2, 3, 2);
  // Drop one session and pad another so there are 3 sessions and 10 breaths.
  ds.patients[1].sessions.pop_back();
  auto& recs = ds.patients[0].sessions[0].records;
  recs.push_back({recs.back().t + 2.0, 3.0, 0.5, 18.0, 4.5});
  const LatentLayout L = layout(build_frame(ds));
  CHECK(L.n_sessions == 3);
  CHECK(L.n_obs == 10);
  CHECK(L.dimension() == 29);
}

TEST_CASE("prior precision blocks") {
  const ModelFrame f = build_frame(toy::dataset(2, 2, 5, 3));
  const LatentLayout L = layout(f);
  const HyperParams th{3.0, 7.0, 40.0, 0.2};
  PriorSpec pr;
  const Eigen::MatrixXd Q = Eigen::MatrixXd(prior_precision(L, th, pr));
  const toy::Dense d = toy::dense(f, th, pr);
  CHECK((Q - d.Q).norm() <= 1e-10 * d.Q.norm());
  CHECK(Q.isApprox(Q.transpose(), 0.0));
  CHECK(prior_log_det(L, th, pr) == doctest::Approx(oracle::log_det_spd(d.Q)).epsilon(1e-11));
}

TEST_CASE("single observation prior is diagonal") {
  Dataset ds = toy::dataset(1, 1, 1, 4);
  const LatentLayout L = layout(build_frame(ds));
  const HyperParams th{1.0, 1.0, 46.75, 0.09};
  const Eigen::MatrixXd Q = Eigen::MatrixXd(prior_precision(L, th, PriorSpec{}));
  Eigen::VectorXd expect = Eigen::VectorXd::Constant(17, 0.1);
  expect[14] = 1.0;
  expect[15] = 1.0;
  expect[16] = 46.75;
  CHECK(Q.diagonal() == expect);
  CHECK(Eigen::MatrixXd(Q.diagonal().asDiagonal()) == Q);
}

TEST_CASE("doubling tau_alpha adds n_sessions log 2") {
  const LatentLayout L = layout(build_frame(toy::dataset(3, 2, 4, 5)));
  HyperParams th{5.0, 2.0, 30.0, 0.1};
  const double a = prior_log_det(L, th, PriorSpec{});
  th.tau_alpha *= 2.0;
  CHECK(prior_log_det(L, th, PriorSpec{}) - a == doctest::Approx(6.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("design rows reproduce the linear predictor") {
  const ModelFrame f = build_frame(toy::dataset(2, 2, 5, 6));
  const LatentLayout L = layout(f);
  const toy::Dense d = toy::dense(f, HyperParams{1, 1, 1, 1}, PriorSpec{});
  const Eigen::MatrixXd A = Eigen::MatrixXd(design_matrix(f, L));
  CHECK((A - d.A).cwiseAbs().maxCoeff() == 0.0);

  Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(L.dimension(), -1.0, 2.0);
  for (int r = 0; r < f.rows(); ++r) {
    double eta = f.fixed.row(r).dot(x.head(14));
    eta += x[L.session_slot(f.session_index[r])] + f.log_vt[r] * x[L.patient_slot(f.patient_index[r])];
    eta += x[L.obs_slot_of(r)];
    CHECK((A.row(r) * x)(0) == doctest::Approx(eta).epsilon(1e-12));
    const auto row = design_row(f, r, L);
    const long nonzero_fixed = (f.fixed.row(r).array() != 0.0).count();
    CHECK(static_cast<long>(row.size()) == nonzero_fixed + 2 + (f.log_vt[r] != 0.0 ? 1 : 0));
  }
}

TEST_CASE("at the centering means eta is intercept plus session plus state") {
  Dataset ds = toy::dataset(1, 1, 1, 7);
  ds.patients[0].sessions[0].records[0] = {1.0, 3.0, 0.5, 18.0, 4.5};
  ds.patient_meta["P01"].gppaq = 1;
  ds.session_meta["P01-S1"].sofa = 0;
  ds.patient_meta["P01"].sex = 0;
  const ModelFrame f = build_frame(ds);
  const LatentLayout L = layout(f);
  const auto row = design_row(f, 0, L);
  std::vector<int> slots;
  for (const auto& [slot, v] : row) {
    slots.push_back(slot);
    CHECK(v == 1.0);
  }
  CHECK(slots == std::vector<int>{0, L.session_slot(0), L.obs_slot_of(0)});
}

TEST_CASE("hyperprior against textbook densities") {
  PriorSpec pr;
  const HyperParams th{38.63, 44.3, 49.0, 0.09};
  CHECK(log_hyperprior(th, pr) == doctest::Approx(toy::log_hyperprior(th, pr)).epsilon(1e-12));

  // tau_s at the Gamma(50, 1) mode: density of log tau = Gamma pdf times tau.
  const double direct = 50.0 * std::log(1.0) - std::lgamma(50.0) + 49.0 * std::log(49.0) - 49.0 + std::log(49.0);
  CHECK(log_gamma_on_log_scale(std::log(49.0), pr.tau_s) == doctest::Approx(direct).epsilon(1e-13));

  // log phi at the prior mean leaves -1/2 log(2 pi 10).
  HyperParams at_mean = th;
  at_mean.phi = 1.0;
  const double gammas = log_gamma_on_log_scale(std::log(th.tau_alpha), pr.tau_alpha) +
                        log_gamma_on_log_scale(std::log(th.tau_beta1), pr.tau_beta1) +
                        log_gamma_on_log_scale(std::log(th.tau_s), pr.tau_s);
  CHECK(log_hyperprior(at_mean, pr) - gammas == doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi * 10.0)));
}

TEST_CASE("log-scale Gamma density integrates to one") {
  for (const GammaPrior g : {GammaPrior{50.0, 1.0}, GammaPrior{2.0, 0.5}, GammaPrior{1.0, 5e-5}}) {
    const double lo = -40.0, hi = 25.0;
    const int n = 200000;
    const double h = (hi - lo) / n;
    double acc = 0.0;
    for (int k = 0; k <= n; ++k) {
      const double w = (k == 0 || k == n) ? 1.0 : (k % 2 == 1 ? 4.0 : 2.0);
      acc += w * std::exp(log_gamma_on_log_scale(lo + k * h, g));
    }
    CHECK(acc * h / 3.0 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("hyperparameter log transform") {
  const HyperParams th{2.0, 3.0, 4.0, 0.5};
  const Eigen::VectorXd psi = th.to_log();
  CHECK(psi[3] == std::log(0.5));
  const HyperParams back = HyperParams::from_log(psi);
  CHECK(back.tau_alpha == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(back.phi == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS((HyperParams{0.0, 1.0, 1.0, 1.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS(prior_precision(LatentLayout{}, HyperParams{1, 1, -1, 1}, PriorSpec{}), std::invalid_argument);
  PriorSpec bad;
  bad.tau_s.rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(PriorSpec{}.obs_precision() == doctest::Approx(std::exp(15.0)));
}
