#include "doctest.h"

#include <cmath>

#include "tmpfiles.hpp"
#include "vo2lgm/dataset.hpp"
#include "vo2lgm/simulate.hpp"

using namespace vo2lgm;

namespace {

const char* kSessions =
    "session_id,patient_id,sofa,quality,days_since_admission\n"
    "S1,P1,3,good,2\n"
    "S2,P1,5,poor,4\n"
    "S3,P2,1,reasonable,1\n";
const char* kPatients =
    "patient_id,age,bmi,sex,gppaq\n"
    "P1,61,27.5,1,4\n"
    "P2,55,22.0,0,1\n";

std::string breaths_row(const char* p, const char* s, double t, double vo2, double vt, double rr, double pet) {
  std::ostringstream o;
  o << p << ',' << s << ',' << t << ',' << vo2 << ',' << vt << ',' << rr << ',' << pet << '\n';
  return o.str();
}

const std::string kHeader = "patient_id,session_id,t_seconds,vo2,vt,rr,petco2\n";

Dataset session_of(std::vector<double> values) {
  Dataset ds;
  Session s{"S", {}};
  for (std::size_t k = 0; k < values.size(); ++k)
    s.records.push_back({static_cast<double>(k + 1), values[k], values[k], values[k], values[k]});
  ds.patients.push_back(Patient{"P", {s}});
  return ds;
}

double variance(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace

TEST_CASE("three-row file parses into one patient and session") {
  testutil::TempDir dir("ds");
  const auto b = dir.write("b.csv", kHeader + breaths_row("P1", "S1", 0, 3, 0.4, 18, 4.5) +
                                        breaths_row("P1", "S1", 3, 4, 0.5, 19, 4.6) +
                                        breaths_row("P1", "S1", 6, 5, 0.6, 20, 4.7));
  const Dataset ds = parse_breath_csv(b);
  REQUIRE(ds.patients.size() == 1);
  REQUIRE(ds.patients[0].sessions.size() == 1);
  CHECK(ds.patients[0].sessions[0].records.size() == 3);
  CHECK(ds.patients[0].sessions[0].records[2].vt == 0.6);
  CHECK(ds.n_records() == 3);
  CHECK(ds.has_vo2());
}

TEST_CASE("two sessions of one patient nest under the patient") {
  testutil::TempDir dir("ds");
  const auto b = dir.write("b.csv", kHeader + breaths_row("P1", "S1", 0, 3, 0.4, 18, 4.5) +
                                        breaths_row("P1", "S2", 0, 4, 0.5, 19, 4.6) +
                                        breaths_row("P1", "S1", 3, 5, 0.6, 20, 4.7));
  const Dataset ds = load_dataset(b, dir.write("s.csv", kSessions), dir.write("p.csv", kPatients));
  REQUIRE(ds.patients.size() == 1);
  REQUIRE(ds.patients[0].sessions.size() == 2);
  CHECK(ds.patients[0].sessions[0].id == "S1");
  CHECK(ds.patients[0].sessions[0].records.size() == 2);
  CHECK(ds.patient_of_session("S2")->id == "P1");
}

TEST_CASE("parse errors name the row") {
  testutil::TempDir dir("ds");
  std::string text = kHeader;
  for (int r = 1; r <= 8; ++r) text += breaths_row("P1", "S1", r, 3, r == 7 ? 0.0 : 0.5, 18, 4.5);
  const auto bad = dir.write("b.csv", text);
  try {
    parse_breath_csv(bad);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(e.row() == 7);
    CHECK(std::string(e.what()).find("row 7") != std::string::npos);
  }

  const auto dup = dir.write("d.csv", kHeader + breaths_row("P1", "S1", 1, 3, 0.5, 18, 4.5) +
                                          breaths_row("P1", "S1", 1, 3, 0.5, 18, 4.5));
  CHECK_THROWS_AS(parse_breath_csv(dup), DataError);
  const auto missing = dir.write("m.csv", "patient_id,session_id,t_seconds,vo2,vt,rr\nP1,S1,1,3,0.5,18\n");
  CHECK_THROWS_WITH_AS(parse_breath_csv(missing), doctest::Contains("petco2"), DataError);
  const auto junk = dir.write("j.csv", kHeader + "P1,S1,1,3,abc,18,4.5\n");
  CHECK_THROWS_AS(parse_breath_csv(junk), DataError);
  CHECK_THROWS_AS(parse_breath_csv(dir.file("none.csv")), DataError);
}

TEST_CASE("metadata tables are required") {
  testutil::TempDir dir("ds");
  const auto b = dir.write("b.csv", kHeader + breaths_row("P3", "S9", 0, 3, 0.4, 18, 4.5));
  CHECK_THROWS_WITH_AS(load_dataset(b, dir.write("s.csv", kSessions), dir.write("p.csv", kPatients)),
                       doctest::Contains("P3"), DataError);
  CHECK_THROWS_AS(parse_session_csv(dir.write("bad.csv", "session_id,patient_id,sofa,quality,days_since_admission\n"
                                                         "S1,P1,3,excellent,2\n")),
                  DataError);
  CHECK_THROWS_AS(parse_patient_csv(dir.write("badp.csv", "patient_id,age,bmi,sex,gppaq\nP1,61,27,1,5\n")), DataError);
}

TEST_CASE("missing V̇O₂ column is allowed for prediction data") {
  testutil::TempDir dir("ds");
  const auto b = dir.write("b.csv", "patient_id,session_id,t_seconds,vt,rr,petco2\nP1,S1,0,0.4,18,4.5\nP1,S1,2,0.5,18,4.5\n");
  const Dataset ds = parse_breath_csv(b);
  CHECK_FALSE(ds.has_vo2());
  CHECK_FALSE(ds.patients[0].sessions[0].records[0].vo2.has_value());
}

TEST_CASE("CSV writers round-trip") {
  GenerativeConfig g;
  g.n_patients = 2;
  g.sessions_per_patient = 2;
  g.breaths_per_session = 10;
  const Dataset ds = simulate(g).data;
  testutil::TempDir dir("ds");
  write_breath_csv(ds, dir.file("b.csv"));
  write_session_csv(ds, dir.file("s.csv"));
  write_patient_csv(ds, dir.file("p.csv"));
  const Dataset back = load_dataset(dir.file("b.csv"), dir.file("s.csv"), dir.file("p.csv"));
  REQUIRE(back.n_records() == ds.n_records());
  for (std::size_t p = 0; p < ds.patients.size(); ++p)
    for (std::size_t s = 0; s < ds.patients[p].sessions.size(); ++s)
      for (std::size_t r = 0; r < ds.patients[p].sessions[s].records.size(); ++r) {
        const auto& a = ds.patients[p].sessions[s].records[r];
        const auto& c = back.patients[p].sessions[s].records[r];
        CHECK(a.t == c.t);
        CHECK(*a.vo2 == *c.vo2);
        CHECK(a.vt == c.vt);
        CHECK(a.rr == c.rr);
        CHECK(a.petco2 == c.petco2);
      }
  CHECK(back.patient_meta.at("P01").age == ds.patient_meta.at("P01").age);
}

TEST_CASE("smoothing with a truncated centered window") {
  const Dataset s = smooth(session_of({2, 4, 6}), 3);
  const auto& r = s.patients[0].sessions[0].records;
  CHECK(r[0].vt == doctest::Approx(3.0));
  CHECK(r[1].vt == doctest::Approx(4.0));
  CHECK(r[2].vt == doctest::Approx(5.0));
  CHECK(*r[0].vo2 == doctest::Approx(3.0));
  CHECK(r[2].t == 3.0);

  const Dataset raw = smooth(session_of({2, 4, 6}), 3, false);
  CHECK(*raw.patients[0].sessions[0].records[0].vo2 == 2.0);
  CHECK(raw.patients[0].sessions[0].records[0].rr == doctest::Approx(3.0));

  // window 5 on (1, 2, 3, 4, 10): truncated means 2, 2.5, 4, 4.75, 17/3
  const Dataset w5 = smooth(session_of({1, 2, 3, 4, 10}), 5);
  const auto& q = w5.patients[0].sessions[0].records;
  CHECK(q[0].petco2 == doctest::Approx(2.0));
  CHECK(q[1].petco2 == doctest::Approx(2.5));
  CHECK(q[2].petco2 == doctest::Approx(4.0));
  CHECK(q[3].petco2 == doctest::Approx(4.75));
  CHECK(q[4].petco2 == doctest::Approx(17.0 / 3.0));
}

TEST_CASE("smoothing identities") {
  const Dataset c = session_of({5, 5, 5, 5});
  const Dataset s = smooth(c, 3);
  for (const auto& r : s.patients[0].sessions[0].records) CHECK(r.vt == 5.0);
  const Dataset once = smooth(session_of({1, 7, 2, 9, 3}), 1);
  CHECK(once.patients[0].sessions[0].records[1].vt == 7.0);
  CHECK_THROWS_AS(smooth(c, 2), std::invalid_argument);
  CHECK_THROWS_AS(smooth(c, 0), std::invalid_argument);
  const Dataset single = smooth(session_of({4.0}), 3);
  CHECK(single.patients[0].sessions[0].records[0].vt == 4.0);
}

TEST_CASE("smoothing keeps lengths and times and does not add variance on simulated sessions") {
  GenerativeConfig g;
  g.n_patients = 3;
  g.spike_rate = 0.05;
  const Dataset ds = simulate(g).data;
  const Dataset s = smooth(ds, 3);
  for (std::size_t p = 0; p < ds.patients.size(); ++p)
    for (std::size_t j = 0; j < ds.patients[p].sessions.size(); ++j) {
      const auto& a = ds.patients[p].sessions[j].records;
      const auto& b = s.patients[p].sessions[j].records;
      REQUIRE(a.size() == b.size());
      std::vector<double> va, vb;
      for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].t == b[k].t);
        va.push_back(a[k].vt);
        vb.push_back(b[k].vt);
      }
      CHECK(variance(vb) <= variance(va));
    }
}

TEST_CASE("quality filter") {
  testutil::TempDir dir("ds");
  const auto b = dir.write("b.csv", kHeader + breaths_row("P1", "S1", 0, 3, 0.4, 18, 4.5) +
                                        breaths_row("P1", "S2", 0, 4, 0.5, 19, 4.6) +
                                        breaths_row("P2", "S3", 0, 5, 0.6, 20, 4.7));
  const Dataset ds = load_dataset(b, dir.write("s.csv", kSessions), dir.write("p.csv", kPatients));
  const auto all = filter_quality(ds, {Quality::good, Quality::reasonable, Quality::poor});
  CHECK(all.data.n_sessions() == 3);
  CHECK(all.warnings.empty());
  const auto good = filter_quality(ds, {Quality::good});
  CHECK(good.data.n_sessions() == 1);
  CHECK(good.data.patients.size() == 1);
  const auto none = filter_quality(ds, {});
  CHECK(none.data.empty());
  CHECK(none.warnings.size() == 1);
  const auto old = exclude_patients_younger_than(ds, 60);
  CHECK(old.data.patients.size() == 1);
  CHECK(old.data.patients[0].id == "P1");
}

TEST_CASE("screening drops records outside inclusive bounds") {
  const Dataset ds = session_of({1, 2, 3, 4});
  ScreenBounds b;
  b.ranges["vt"] = {2.0, 3.0};
  const auto out = screen(ds, b);
  CHECK(out.data.n_records() == 2);
  CHECK(out.warnings.size() == 1);
  CHECK(screen(ds, ScreenBounds{}).data.n_records() == 4);
}

TEST_CASE("model frame columns") {
  GenerativeConfig g;
  g.n_patients = 3;
  g.sessions_per_patient = 2;
  g.breaths_per_session = 20;
  const Dataset ds = simulate(g).data;
  const ModelFrame f = build_frame(ds);
  REQUIRE(f.rows() == 120);
  REQUIRE(f.n_fixed() == 14);
  // Centered continuous columns average to zero.
  for (int k : {1, 2, 3, 11, 12}) CHECK(std::abs(f.fixed.col(k).mean()) < 1e-12);
  CHECK(std::abs(f.response->mean()) < 1e-12);
  // Interactions are products of the centered logs.
  for (int r = 0; r < 5; ++r) {
    CHECK(f.fixed(r, 4) == f.fixed(r, 1) * f.fixed(r, 2));
    CHECK(f.fixed(r, 5) == f.fixed(r, 1) * f.fixed(r, 3));
    CHECK(f.fixed(r, 13) == f.fixed(r, 11) * f.fixed(r, 12));
    CHECK(f.log_vt[r] == f.fixed(r, 1));
  }
  // GPPAQ dummies against level 1.
  for (int r = 0; r < f.rows(); ++r) {
    const int level = ds.patient_meta.at(f.patient_ids[static_cast<std::size_t>(f.patient_index[r])]).gppaq;
    CHECK(f.fixed(r, 7) == (level == 2 ? 1.0 : 0.0));
    CHECK(f.fixed(r, 8) == (level == 3 ? 1.0 : 0.0));
    CHECK(f.fixed(r, 9) == (level == 4 ? 1.0 : 0.0));
  }
  // Stored constants reproduce the training frame exactly.
  const ModelFrame again = build_frame(ds, {}, f.centering);
  CHECK(again.fixed == f.fixed);
  CHECK(*again.response == *f.response);
  CHECK(f.observed_vo2(3) == doctest::Approx(*ds.patients[0].sessions[0].records[3].vo2).epsilon(1e-14));
}

TEST_CASE("a row at the training means centers to zero") {
  Dataset ds = session_of({2.0});
  ds.session_meta["S"] = SessionMeta{"S", "P", 0, Quality::good, 1};
  ds.patient_meta["P"] = PatientMeta{"P", 50, 25, 0, 4};
  CenteringConstants c{std::log(2.0), std::log(2.0), std::log(2.0), std::log(2.0), std::log(50.0), std::log(25.0)};
  const ModelFrame f = build_frame(ds, {}, c);
  for (int k : {1, 2, 3, 4, 5, 11, 12, 13}) CHECK(f.fixed(0, k) == 0.0);
  CHECK(f.fixed(0, 9) == 1.0);
  CHECK((*f.response)[0] == 0.0);
}

TEST_CASE("frame options drop terms") {
  FrameOptions o;
  o.include_gppaq = false;
  o.include_age_bmi = false;
  const auto names = fixed_effect_names(o);
  CHECK(names.size() == 8);
  CHECK(names.back() == "Sex");
  CHECK(fixed_effect_names({}).size() == 14);
}

TEST_CASE("frame errors") {
  Dataset ds = session_of({2.0});
  CHECK_THROWS_AS(build_frame(ds), DataError);  // no metadata
  ds.session_meta["S"] = SessionMeta{"S", "P", 0, Quality::good, 1};
  ds.patient_meta["P"] = PatientMeta{"P", 50, 25, 0, 1};
  ds.patients[0].sessions[0].records[0].vt = -1.0;
  CHECK_THROWS_AS(build_frame(ds), DataError);
  CHECK_THROWS_AS(validate(ds), DataError);
}
