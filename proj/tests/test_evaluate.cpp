#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "toys.hpp"
#include "vo2lgm/evaluate.hpp"

using namespace vo2lgm;

namespace {

CategoryProbs point_mass(int c) {
  CategoryProbs p;
  p.p[static_cast<std::size_t>(c)] = 1.0;
  return p;
}

std::vector<Category> cats(std::initializer_list<int> xs) {
  std::vector<Category> out;
  for (int x : xs) out.push_back(static_cast<Category>(x));
  return out;
}

CvConfig quick_cv() {
  CvConfig c;
  c.n_samples = 200;
  return c;
}

}  // namespace

TEST_CASE("ranked probability score values") {
  const CategoryProbs uniform{{0.25, 0.25, 0.25, 0.25}};
  CHECK(std::abs(rps(uniform, Category::rest) - 0.2916666666666667) <= 1e-12);
  CHECK(std::abs(rps(uniform, Category::rest) - (0.5625 + 0.25 + 0.0625) / 3.0) <= 1e-15);

  for (int obs = 0; obs < 4; ++obs) {
    CHECK(rps(point_mass(obs), static_cast<Category>(obs)) == 0.0);
    for (int c = 0; c < 4; ++c) {
      const double expected = std::abs(c - obs) / 3.0;
      CHECK(rps(point_mass(c), static_cast<Category>(obs)) == doctest::Approx(expected).epsilon(1e-15));
    }
  }
  CHECK(rps(point_mass(1), Category::rest) < rps(point_mass(2), Category::rest));
  CHECK(rps(point_mass(2), Category::rest) < rps(point_mass(3), Category::rest));
  CHECK(rps(point_mass(3), Category::rest) == 1.0);
}

TEST_CASE("rps agrees with the direct sum and stays in [0, 1]") {
  std::mt19937_64 rng(5);
  std::gamma_distribution<double> g(0.7, 1.0);
  std::uniform_int_distribution<int> c(0, 3);
  for (int i = 0; i < 2000; ++i) {
    double w[4], s = 0.0;
    for (double& x : w) s += (x = g(rng));
    for (double& x : w) x /= s;
    const int obs = c(rng);
    const double v = rps({{w[0], w[1], w[2], w[3]}}, static_cast<Category>(obs));
    CHECK(v == doctest::Approx(oracle::rps4(w, obs)).epsilon(1e-13));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("mean rps is smallest for the true distribution") {
  std::mt19937_64 rng(7);
  const double truth[4] = {0.4, 0.3, 0.2, 0.1};
  std::discrete_distribution<int> draw(truth, truth + 4);
  std::vector<Category> obs;
  for (int i = 0; i < 10000; ++i) obs.push_back(static_cast<Category>(draw(rng)));

  auto score = [&](const double q[4]) {
    std::vector<CategoryProbs> p(obs.size(), CategoryProbs{{q[0], q[1], q[2], q[3]}});
    return mean_rps(p, obs);
  };
  const double best = score(truth);
  const double distorted[5][4] = {{0.25, 0.25, 0.25, 0.25},
                                  {0.1, 0.2, 0.3, 0.4},
                                  {0.5, 0.3, 0.15, 0.05},
                                  {0.3, 0.4, 0.2, 0.1},
                                  {0.4, 0.2, 0.3, 0.1}};
  for (const auto& q : distorted) CHECK(best <= score(q));
}

TEST_CASE("zero-one loss") {
  const auto a = cats({0, 1, 2, 3, 1});
  CHECK(zero_one_loss(a, a) == 0.0);
  CHECK(zero_one_loss(cats({0, 0, 1}), cats({1, 2, 3})) == 1.0);
  CHECK(zero_one_loss(cats({0, 1, 2, 3, 1}), cats({0, 1, 3, 3, 0})) == doctest::Approx(0.4));
  CHECK_THROWS(zero_one_loss(cats({0, 1}), cats({0})));
  CHECK_THROWS(zero_one_loss(cats({}), cats({})));
  CHECK_THROWS(mean_rps(std::vector<CategoryProbs>{}, cats({})));
}

TEST_CASE("confusion matrix by hand") {
  // observed:  0 0 1 1 2 3 3 3
  // predicted: 0 1 1 1 3 3 2 3
  const auto obs = cats({0, 0, 1, 1, 2, 3, 3, 3});
  const auto pred = cats({0, 1, 1, 1, 3, 3, 2, 3});
  const ConfusionMatrix m = confusion(pred, obs);
  const long expected[4][4] = {{1, 1, 0, 0}, {0, 2, 0, 0}, {0, 0, 0, 1}, {0, 0, 1, 2}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(m.counts[i][j] == expected[i][j]);
  CHECK(m.total() == 8);
  CHECK(m.correct() == 5);
  const Eigen::Matrix4d n = m.normalized();
  CHECK(n(0, 0) == 0.5);
  CHECK(n(3, 3) == doctest::Approx(2.0 / 3.0));
  CHECK(n(2, 3) == 1.0);

  const ConfusionMatrix perfect = confusion(obs, obs);
  CHECK(perfect.normalized().isApprox(Eigen::Matrix4d::Identity()));

  const ConfusionMatrix one = confusion(cats({2}), cats({1}));
  CHECK(one.counts[1][2] == 1);
  CHECK(one.total() == 1);
  CHECK(one.normalized().row(0).isZero());
}

TEST_CASE("loss and confusion identities on random vectors") {
  std::mt19937_64 rng(19);
  std::uniform_int_distribution<int> c(0, 3), len(1, 60);
  for (int i = 0; i < 1000; ++i) {
    const int n = len(rng);
    std::vector<Category> a, b;
    for (int k = 0; k < n; ++k) {
      a.push_back(static_cast<Category>(c(rng)));
      b.push_back(static_cast<Category>(c(rng)));
    }
    const ConfusionMatrix m = confusion(a, b);
    CHECK(m.total() == n);
    CHECK(zero_one_loss(a, b) == doctest::Approx(1.0 - static_cast<double>(m.correct()) / n).epsilon(1e-15));
    const Eigen::Matrix4d norm = m.normalized();
    for (int r = 0; r < 4; ++r) {
      const double s = norm.row(r).sum();
      CHECK((s == 0.0 || std::abs(s - 1.0) < 1e-12));
    }
    ConfusionMatrix split = confusion(std::span(a).first(static_cast<std::size_t>(n / 2)),
                                      std::span(b).first(static_cast<std::size_t>(n / 2)));
    split += confusion(std::span(a).subspan(static_cast<std::size_t>(n / 2)),
                       std::span(b).subspan(static_cast<std::size_t>(n / 2)));
    CHECK(split == m);
  }
}

TEST_CASE("two-patient cross-validation bookkeeping") {
  const Dataset ds = toy::dataset(2, 2, 25, 41);
  const CvReport rep = lopo_cv(ds, quick_cv(), 3);
  REQUIRE(rep.folds.size() == 2);
  CHECK(rep.failed_folds == 0);
  ConfusionMatrix sum;
  long rows = 0;
  for (const auto& f : rep.folds) {
    CHECK(f.ok);
    sum += f.confusion;
    rows += static_cast<long>(f.rows.size());
    for (const auto& r : f.rows) CHECK(r.patient_id == f.patient_id);
  }
  CHECK(sum == rep.pooled);
  CHECK(rows == static_cast<long>(ds.n_records()));
  CHECK(rep.pooled.total() == rows);
  CHECK(rep.zero_one == doctest::Approx(1.0 - static_cast<double>(rep.pooled.correct()) / rows));

  long by_quality_rows = 0;
  int by_quality_sessions = 0;
  for (const auto& q : rep.by_quality) {
    by_quality_rows += q.rows;
    by_quality_sessions += q.sessions;
  }
  CHECK(by_quality_rows == rows);
  CHECK(by_quality_sessions == static_cast<int>(ds.n_sessions()));

  CHECK_THROWS(lopo_cv(select_patients(ds, {ds.patients[0].id}), quick_cv(), 3));
}

TEST_CASE("held-out rows do not reach the fold fit") {
  const Dataset ds = toy::dataset(4, 2, 25, 43);
  const std::string held = ds.patients[2].id;
  Dataset probe = ds;
  for (auto& p : probe.patients) {
    if (p.id != held) continue;
    for (auto& s : p.sessions)
      for (auto& r : s.records) {
        *r.vo2 *= 3.0;
        r.vt *= 0.5;
        r.rr += 7.0;
        r.petco2 *= 1.3;
      }
  }
  probe.patient_meta[held].age += 20.0;
  probe.patient_meta[held].bmi *= 1.4;

  const FoldResult a = run_fold(ds, held, quick_cv(), 5);
  const FoldResult b = run_fold(probe, held, quick_cv(), 5);
  REQUIRE(a.ok);
  REQUIRE(b.ok);
  CHECK(a.centering == b.centering);
  CHECK(a.fixed_means.size() == 14);
  for (Eigen::Index k = 0; k < a.fixed_means.size(); ++k) CHECK(a.fixed_means[k] == b.fixed_means[k]);
  for (Eigen::Index k = 0; k < a.hyper_means.size(); ++k) CHECK(a.hyper_means[k] == b.hyper_means[k]);
}

TEST_CASE("failing fold is reported, not thrown") {
  const Dataset ds = toy::dataset(2, 1, 10, 45);
  const FoldResult f = run_fold(ds, "nobody", quick_cv(), 1);
  CHECK_FALSE(f.ok);
  CHECK(f.error.find("nobody") != std::string::npos);
  CHECK(f.rows.empty());
}

TEST_CASE("cross-validation is deterministic across thread counts") {
  const Dataset ds = toy::dataset(3, 1, 20, 47);
  CvConfig one = quick_cv(), many = quick_cv();
  many.threads = 3;
  const CvReport a = lopo_cv(ds, one, 11);
  const CvReport b = lopo_cv(ds, many, 11);
  CHECK(a.pooled == b.pooled);
  CHECK(a.mean_rps == b.mean_rps);
  for (std::size_t f = 0; f < a.folds.size(); ++f)
    for (std::size_t r = 0; r < a.folds[f].rows.size(); ++r)
      CHECK(a.folds[f].rows[r].prediction.probs.p == b.folds[f].rows[r].prediction.probs.p);
}

TEST_CASE("posterior predictive split") {
  const Dataset ds = toy::dataset(2, 2, 400, 49);  // sessions run past 1000 s
  const std::string sid = ds.patients[1].sessions[0].id;
  const auto& target = ds.find_session(sid)->records;
  REQUIRE(target.back().t > 1000.0);
  const auto [train, test] = ppc_split(ds, sid);
  CHECK(train.n_records() + test.n_records() == ds.n_records());
  for (const auto& r : train.find_session(sid)->records) CHECK(r.t < 1000.0);
  REQUIRE(test.patients.size() == 1);
  CHECK(test.patients[0].id == ds.patients[1].id);
  for (const auto& r : test.find_session(sid)->records) CHECK(r.t >= 1000.0);
  for (const auto& p : ds.patients)
    for (const auto& s : p.sessions)
      if (s.id != sid) CHECK(train.find_session(s.id)->records.size() == s.records.size());
  CHECK(test.session_meta.count(sid) == 1);

  CHECK_THROWS(ppc_split(ds, sid, target.back().t + 1.0));
  CHECK_THROWS(ppc_split(ds, sid, target.front().t));
  CHECK_THROWS(ppc_split(ds, "missing", 10.0));
}

TEST_CASE("plausibility curve") {
  const std::vector<CategoryProbs> p{{{1.0, 0.0, 0.0, 0.0}}, {{0.6, 0.4, 0.0, 0.0}}, {{0.1, 0.7, 0.2, 0.0}},
                                     {{0.0, 0.3, 0.7, 0.0}}, {{0.2, 0.2, 0.2, 0.4}}};
  const auto obs = cats({0, 0, 1, 1, 2});
  const std::vector<double> q{1e-9, 0.3, 0.5, 0.7, 1.0};
  const PlausibilityCurve c = plausibility_curve(p, obs, q);
  CHECK(c.counts[0] == 2);
  CHECK(c.counts[3] == 0);
  for (int k = 0; k < 3; ++k) CHECK(c.proportion[k][0] == 1.0);
  CHECK(std::isnan(c.proportion[3][0]));
  CHECK(c.proportion[0][4] == 0.5);  // one rest row has p_rest = 1
  CHECK(c.proportion[1][4] == 0.0);
  CHECK(c.proportion[1][1] == 1.0);
  CHECK(c.proportion[1][2] == 0.5);
  CHECK(c.proportion[2][1] == 0.0);
  CHECK_THROWS(plausibility_curve(p, obs, std::vector<double>{0.0}));
  CHECK_THROWS(plausibility_curve(p, cats({0}), q));

  std::mt19937_64 rng(29);
  std::gamma_distribution<double> g(0.5, 1.0);
  std::uniform_int_distribution<int> ci(0, 3);
  std::vector<CategoryProbs> rp;
  std::vector<Category> ro;
  for (int i = 0; i < 500; ++i) {
    double w[4], s = 0.0;
    for (double& x : w) s += (x = g(rng));
    rp.push_back({{w[0] / s, w[1] / s, w[2] / s, w[3] / s}});
    ro.push_back(static_cast<Category>(ci(rng)));
  }
  std::vector<double> grid;
  for (int i = 1; i <= 100; ++i) grid.push_back(i / 100.0);
  const PlausibilityCurve rc = plausibility_curve(rp, ro, grid);
  for (int k = 0; k < 4; ++k)
    for (std::size_t i = 1; i < grid.size(); ++i) CHECK(rc.proportion[k][i] <= rc.proportion[k][i - 1]);
}
