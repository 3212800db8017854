#include "vo2lgm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "csv.hpp"

namespace vo2lgm {

std::string to_string(Quality q) {
  switch (q) {
    case Quality::good: return "good";
    case Quality::reasonable: return "reasonable";
    case Quality::poor: return "poor";
  }
  return "good";
}

Quality parse_quality(const std::string& text) {
  if (text == "good") return Quality::good;
  if (text == "reasonable") return Quality::reasonable;
  if (text == "poor") return Quality::poor;
  throw DataError("unknown session quality '" + text + "' (expected good, reasonable or poor)");
}

std::size_t Dataset::n_records() const {
  std::size_t n = 0;
  for (const auto& p : patients)
    for (const auto& s : p.sessions) n += s.records.size();
  return n;
}

std::size_t Dataset::n_sessions() const {
  std::size_t n = 0;
  for (const auto& p : patients) n += p.sessions.size();
  return n;
}

bool Dataset::has_vo2() const {
  if (n_records() == 0) return false;
  for (const auto& p : patients)
    for (const auto& s : p.sessions)
      for (const auto& r : s.records)
        if (!r.vo2) return false;
  return true;
}

const Session* Dataset::find_session(const std::string& session_id) const {
  for (const auto& p : patients)
    for (const auto& s : p.sessions)
      if (s.id == session_id) return &s;
  return nullptr;
}

const Patient* Dataset::find_patient(const std::string& patient_id) const {
  for (const auto& p : patients)
    if (p.id == patient_id) return &p;
  return nullptr;
}

const Patient* Dataset::patient_of_session(const std::string& session_id) const {
  for (const auto& p : patients)
    for (const auto& s : p.sessions)
      if (s.id == session_id) return &p;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

double positive_field(const csv::Table& t, std::size_t row, std::size_t col, const std::string& name,
                      const std::string& path) {
  long line = static_cast<long>(row) + 1;
  auto v = csv::to_double(t.rows[row][col]);
  if (!v || !std::isfinite(*v))
    throw DataError(path + ": row " + std::to_string(line) + ": unparseable " + name + " '" +
                        t.rows[row][col] + "'",
                    line);
  if (*v <= 0.0)
    throw DataError(path + ": row " + std::to_string(line) + ": " + name +
                        " must be strictly positive, got " + t.rows[row][col],
                    line);
  return *v;
}

}  // namespace

Dataset parse_breath_csv(const std::string& path, const BreathSchema& schema) {
  csv::Table t = csv::read(path);
  const std::size_t c_pid = t.require(schema.patient_id, path);
  const std::size_t c_sid = t.require(schema.session_id, path);
  const std::size_t c_t = t.require(schema.t, path);
  const std::size_t c_vt = t.require(schema.vt, path);
  const std::size_t c_rr = t.require(schema.rr, path);
  const std::size_t c_pet = t.require(schema.petco2, path);
  const auto c_vo2 = t.column(schema.vo2);

  Dataset ds;
  std::unordered_map<std::string, std::size_t> patient_pos;
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> session_pos;

  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& f = t.rows[i];
    const long line = static_cast<long>(i) + 1;
    const std::string& pid = f[c_pid];
    const std::string& sid = f[c_sid];
    if (pid.empty() || sid.empty())
      throw DataError(path + ": row " + std::to_string(line) + ": empty identifier", line);

    BreathRecord rec;
    auto tv = csv::to_double(f[c_t]);
    if (!tv || !std::isfinite(*tv))
      throw DataError(path + ": row " + std::to_string(line) + ": unparseable time '" + f[c_t] + "'",
                      line);
    if (*tv < 0.0)
      throw DataError(path + ": row " + std::to_string(line) + ": negative time", line);
    rec.t = *tv;
    rec.vt = positive_field(t, i, c_vt, "vt", path);
    rec.rr = positive_field(t, i, c_rr, "rr", path);
    rec.petco2 = positive_field(t, i, c_pet, "petco2", path);
    if (c_vo2 && !f[*c_vo2].empty()) rec.vo2 = positive_field(t, i, *c_vo2, "vo2", path);

    auto pit = patient_pos.find(pid);
    if (pit == patient_pos.end()) {
      pit = patient_pos.emplace(pid, ds.patients.size()).first;
      ds.patients.push_back(Patient{pid, {}});
    }
    Patient& patient = ds.patients[pit->second];

    auto sit = session_pos.find(sid);
    if (sit == session_pos.end()) {
      sit = session_pos.emplace(sid, std::make_pair(pit->second, patient.sessions.size())).first;
      patient.sessions.push_back(Session{sid, {}});
    } else if (sit->second.first != pit->second) {
      throw DataError(path + ": row " + std::to_string(line) + ": session '" + sid +
                          "' appears under more than one patient",
                      line);
    }
    Session& session = patient.sessions[sit->second.second];
    if (!session.records.empty() && !(rec.t > session.records.back().t))
      throw DataError(path + ": row " + std::to_string(line) + ": timestamps in session '" + sid +
                          "' are not strictly increasing",
                      line);
    session.records.push_back(rec);
  }
  return ds;
}

std::map<std::string, SessionMeta> parse_session_csv(const std::string& path) {
  csv::Table t = csv::read(path);
  const auto c_sid = t.require("session_id", path);
  const auto c_pid = t.require("patient_id", path);
  const auto c_sofa = t.require("sofa", path);
  const auto c_q = t.require("quality", path);
  const auto c_days = t.require("days_since_admission", path);
  std::map<std::string, SessionMeta> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& f = t.rows[i];
    const long line = static_cast<long>(i) + 1;
    SessionMeta m;
    m.session_id = f[c_sid];
    m.patient_id = f[c_pid];
    auto sofa = csv::to_long(f[c_sofa]);
    auto days = csv::to_long(f[c_days]);
    if (!sofa || !days)
      throw DataError(path + ": row " + std::to_string(line) + ": unparseable integer field", line);
    m.sofa = static_cast<int>(*sofa);
    m.days_since_admission = static_cast<int>(*days);
    try {
      m.quality = parse_quality(f[c_q]);
    } catch (const DataError& e) {
      throw DataError(path + ": row " + std::to_string(line) + ": " + e.what(), line);
    }
    if (!out.emplace(m.session_id, m).second)
      throw DataError(path + ": row " + std::to_string(line) + ": duplicate session '" +
                          m.session_id + "'",
                      line);
  }
  return out;
}

std::map<std::string, PatientMeta> parse_patient_csv(const std::string& path) {
  csv::Table t = csv::read(path);
  const auto c_pid = t.require("patient_id", path);
  const auto c_age = t.require("age", path);
  const auto c_bmi = t.require("bmi", path);
  const auto c_sex = t.require("sex", path);
  const auto c_g = t.require("gppaq", path);
  std::map<std::string, PatientMeta> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& f = t.rows[i];
    const long line = static_cast<long>(i) + 1;
    PatientMeta m;
    m.patient_id = f[c_pid];
    m.age = positive_field(t, i, c_age, "age", path);
    m.bmi = positive_field(t, i, c_bmi, "bmi", path);
    auto sex = csv::to_long(f[c_sex]);
    auto g = csv::to_long(f[c_g]);
    if (!sex || (*sex != 0 && *sex != 1))
      throw DataError(path + ": row " + std::to_string(line) + ": sex must be 0 or 1", line);
    if (!g || *g < 1 || *g > 4)
      throw DataError(path + ": row " + std::to_string(line) + ": gppaq must be in 1..4", line);
    m.sex = static_cast<int>(*sex);
    m.gppaq = static_cast<int>(*g);
    if (!out.emplace(m.patient_id, m).second)
      throw DataError(path + ": row " + std::to_string(line) + ": duplicate patient '" +
                          m.patient_id + "'",
                      line);
  }
  return out;
}

Dataset load_dataset(const std::string& breaths_path, const std::string& sessions_path,
                     const std::string& patients_path, const BreathSchema& schema) {
  Dataset ds = parse_breath_csv(breaths_path, schema);
  ds.session_meta = parse_session_csv(sessions_path);
  ds.patient_meta = parse_patient_csv(patients_path);
  for (const auto& p : ds.patients) {
    if (!ds.patient_meta.count(p.id))
      throw DataError(patients_path + ": no metadata for patient '" + p.id + "'");
    for (const auto& s : p.sessions) {
      auto it = ds.session_meta.find(s.id);
      if (it == ds.session_meta.end())
        throw DataError(sessions_path + ": no metadata for session '" + s.id + "'");
      if (it->second.patient_id != p.id)
        throw DataError(sessions_path + ": session '" + s.id + "' belongs to patient '" +
                        it->second.patient_id + "' but breaths list patient '" + p.id + "'");
    }
  }
  return ds;
}

void write_breath_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "patient_id,session_id,t_seconds,vo2,vt,rr,petco2\n";
  for (const auto& p : ds.patients)
    for (const auto& s : p.sessions)
      for (const auto& r : s.records) {
        out << p.id << ',' << s.id << ',' << csv::fmt(r.t) << ',';
        if (r.vo2) out << csv::fmt(*r.vo2);
        out << ',' << csv::fmt(r.vt) << ',' << csv::fmt(r.rr) << ',' << csv::fmt(r.petco2) << '\n';
      }
}

void write_session_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "session_id,patient_id,sofa,quality,days_since_admission\n";
  for (const auto& p : ds.patients)
    for (const auto& s : p.sessions) {
      const SessionMeta& m = ds.session_meta.at(s.id);
      out << m.session_id << ',' << m.patient_id << ',' << m.sofa << ',' << to_string(m.quality)
          << ',' << m.days_since_admission << '\n';
    }
}

void write_patient_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "patient_id,age,bmi,sex,gppaq\n";
  for (const auto& p : ds.patients) {
    const PatientMeta& m = ds.patient_meta.at(p.id);
    out << m.patient_id << ',' << csv::fmt(m.age) << ',' << csv::fmt(m.bmi) << ',' << m.sex << ','
        << m.gppaq << '\n';
  }
}

void validate(const Dataset& ds) {
  std::set<std::string> seen_sessions, seen_patients;
  for (const auto& p : ds.patients) {
    if (!seen_patients.insert(p.id).second) throw DataError("duplicate patient '" + p.id + "'");
    for (const auto& s : p.sessions) {
      if (!seen_sessions.insert(s.id).second) throw DataError("duplicate session '" + s.id + "'");
      for (std::size_t i = 0; i < s.records.size(); ++i) {
        const auto& r = s.records[i];
        if (i > 0 && !(r.t > s.records[i - 1].t))
          throw DataError("session '" + s.id + "': timestamps not strictly increasing");
        if (!(r.vt > 0) || !(r.rr > 0) || !(r.petco2 > 0) || (r.vo2 && !(*r.vo2 > 0)))
          throw DataError("session '" + s.id + "': non-positive physiological value");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Transformations

namespace {

template <class Get, class Set>
void rolling_mean(std::vector<BreathRecord>& out, const std::vector<BreathRecord>& in, int half,
                  Get get, Set set) {
  const int n = static_cast<int>(in.size());
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    double sum = 0.0;
    int count = 0;
    for (int k = lo; k <= hi; ++k) {
      auto v = get(in[k]);
      if (v) {
        sum += *v;
        ++count;
      }
    }
    if (count > 0) set(out[i], sum / count);
  }
}

FilterOutcome prune_empty(Dataset ds, std::vector<std::string> warnings) {
  Dataset out;
  out.session_meta = std::move(ds.session_meta);
  out.patient_meta = std::move(ds.patient_meta);
  for (auto& p : ds.patients) {
    Patient kept{p.id, {}};
    for (auto& s : p.sessions)
      if (!s.records.empty()) kept.sessions.push_back(std::move(s));
    if (!kept.sessions.empty()) out.patients.push_back(std::move(kept));
  }
  if (out.empty()) warnings.push_back("filter removed every session; dataset is empty");
  return {std::move(out), std::move(warnings)};
}

}  // namespace

Dataset smooth(const Dataset& ds, int window, bool include_vo2) {
  if (window < 1 || window % 2 == 0)
    throw std::invalid_argument("smoothing window must be an odd positive integer, got " +
                                std::to_string(window));
  Dataset out = ds;
  if (window == 1) return out;
  const int half = window / 2;
  for (std::size_t pi = 0; pi < ds.patients.size(); ++pi) {
    for (std::size_t si = 0; si < ds.patients[pi].sessions.size(); ++si) {
      const auto& in = ds.patients[pi].sessions[si].records;
      auto& dst = out.patients[pi].sessions[si].records;
      using R = BreathRecord;
      rolling_mean(dst, in, half, [](const R& r) { return std::optional<double>(r.vt); },
                   [](R& r, double v) { r.vt = v; });
      rolling_mean(dst, in, half, [](const R& r) { return std::optional<double>(r.rr); },
                   [](R& r, double v) { r.rr = v; });
      rolling_mean(dst, in, half, [](const R& r) { return std::optional<double>(r.petco2); },
                   [](R& r, double v) { r.petco2 = v; });
      if (include_vo2)
        rolling_mean(dst, in, half, [](const R& r) { return r.vo2; },
                     [](R& r, double v) {
                       if (r.vo2) r.vo2 = v;
                     });
    }
  }
  return out;
}

FilterOutcome filter_quality(const Dataset& ds, const std::set<Quality>& allowed) {
  Dataset out = ds;
  for (auto& p : out.patients)
    for (auto& s : p.sessions) {
      auto it = ds.session_meta.find(s.id);
      if (it == ds.session_meta.end())
        throw DataError("no metadata for session '" + s.id + "'");
      if (!allowed.count(it->second.quality)) s.records.clear();
    }
  return prune_empty(std::move(out), {});
}

FilterOutcome screen(const Dataset& ds, const ScreenBounds& bounds) {
  auto range = [&](const char* key) {
    auto it = bounds.ranges.find(key);
    return it == bounds.ranges.end() ? ScreenBounds::Range{} : it->second;
  };
  const auto vt = range("vt"), rr = range("rr"), pet = range("petco2"), vo2 = range("vo2");
  auto inside = [](double v, const ScreenBounds::Range& r) { return v >= r.lo && v <= r.hi; };

  Dataset out = ds;
  std::size_t dropped = 0;
  for (auto& p : out.patients)
    for (auto& s : p.sessions) {
      std::vector<BreathRecord> kept;
      kept.reserve(s.records.size());
      for (const auto& r : s.records) {
        bool ok = inside(r.vt, vt) && inside(r.rr, rr) && inside(r.petco2, pet) &&
                  (!r.vo2 || inside(*r.vo2, vo2));
        if (ok)
          kept.push_back(r);
        else
          ++dropped;
      }
      s.records = std::move(kept);
    }
  std::vector<std::string> warnings;
  if (dropped > 0) warnings.push_back("screening removed " + std::to_string(dropped) + " records");
  return prune_empty(std::move(out), std::move(warnings));
}

FilterOutcome exclude_patients_younger_than(const Dataset& ds, double min_age) {
  Dataset out = ds;
  for (auto& p : out.patients) {
    auto it = ds.patient_meta.find(p.id);
    if (it == ds.patient_meta.end()) throw DataError("no metadata for patient '" + p.id + "'");
    if (it->second.age < min_age)
      for (auto& s : p.sessions) s.records.clear();
  }
  return prune_empty(std::move(out), {});
}

Dataset select_patients(const Dataset& ds, const std::set<std::string>& patient_ids) {
  Dataset out;
  out.session_meta = ds.session_meta;
  out.patient_meta = ds.patient_meta;
  for (const auto& p : ds.patients)
    if (patient_ids.count(p.id)) out.patients.push_back(p);
  return out;
}

Dataset drop_patient(const Dataset& ds, const std::string& patient_id) {
  Dataset out;
  out.session_meta = ds.session_meta;
  out.patient_meta = ds.patient_meta;
  for (const auto& p : ds.patients)
    if (p.id != patient_id) out.patients.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Frame

std::vector<std::string> fixed_effect_names(const FrameOptions& o) {
  std::vector<std::string> names = {"Intercept",           "log(VT)",        "log(PETCO2)",
                                    "log(RR)",             "log(VT):log(PETCO2)",
                                    "log(VT):log(RR)"};
  if (o.include_sofa) names.push_back("SOFA");
  if (o.include_gppaq) {
    names.push_back("GPPAQ=2");
    names.push_back("GPPAQ=3");
    names.push_back("GPPAQ=4");
  }
  if (o.include_sex) names.push_back("Sex");
  if (o.include_age_bmi) {
    names.push_back("log(age)");
    names.push_back("log(BMI)");
    names.push_back("log(age):log(BMI)");
  }
  return names;
}

double ModelFrame::observed_vo2(int r) const {
  if (!response) throw std::logic_error("frame has no response");
  return std::exp((*response)[r] + centering.log_vo2);
}

namespace {

double checked_log(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v))
    throw DataError(std::string("non-positive value reaching log transform: ") + what);
  return std::log(v);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

ModelFrame build_frame(const Dataset& ds, const FrameOptions& options,
                       const std::optional<CenteringConstants>& centering) {
  ModelFrame f;
  f.options = options;
  f.fixed_names = fixed_effect_names(options);

  const std::size_t n = ds.n_records();
  std::size_t with_vo2 = 0;
  std::vector<double> lvt, lpet, lrr, lvo2, lage, lbmi;
  std::vector<const SessionMeta*> smeta;
  std::vector<const PatientMeta*> pmeta;
  lvt.reserve(n);
  lpet.reserve(n);
  lrr.reserve(n);
  lage.reserve(n);
  lbmi.reserve(n);

  for (const auto& p : ds.patients) {
    auto pit = ds.patient_meta.find(p.id);
    if (pit == ds.patient_meta.end()) throw DataError("no metadata for patient '" + p.id + "'");
    const PatientMeta& pm = pit->second;
    if (pm.gppaq < 1 || pm.gppaq > 4)
      throw DataError("patient '" + p.id + "': gppaq must be in 1..4");
    const int patient_idx = static_cast<int>(f.patient_ids.size());
    f.patient_ids.push_back(p.id);
    const double la = checked_log(pm.age, "age");
    const double lb = checked_log(pm.bmi, "bmi");
    for (const auto& s : p.sessions) {
      auto sit = ds.session_meta.find(s.id);
      if (sit == ds.session_meta.end()) throw DataError("no metadata for session '" + s.id + "'");
      const int session_idx = static_cast<int>(f.session_ids.size());
      f.session_ids.push_back(s.id);
      f.session_patient.push_back(patient_idx);
      f.session_quality.push_back(sit->second.quality);
      for (const auto& r : s.records) {
        f.session_index.push_back(session_idx);
        f.patient_index.push_back(patient_idx);
        f.time.push_back(r.t);
        lvt.push_back(checked_log(r.vt, "vt"));
        lpet.push_back(checked_log(r.petco2, "petco2"));
        lrr.push_back(checked_log(r.rr, "rr"));
        lage.push_back(la);
        lbmi.push_back(lb);
        if (r.vo2) {
          lvo2.push_back(checked_log(*r.vo2, "vo2"));
          ++with_vo2;
        }
        smeta.push_back(&sit->second);
        pmeta.push_back(&pm);
      }
    }
  }
  if (with_vo2 != 0 && with_vo2 != n)
    throw DataError("V̇O₂ is present on some records but not others");

  if (centering) {
    f.centering = *centering;
  } else {
    f.centering.log_vt = mean_of(lvt);
    f.centering.log_petco2 = mean_of(lpet);
    f.centering.log_rr = mean_of(lrr);
    f.centering.log_age = mean_of(lage);
    f.centering.log_bmi = mean_of(lbmi);
    f.centering.log_vo2 = mean_of(lvo2);
  }
  const CenteringConstants& c = f.centering;

  f.fixed.resize(static_cast<Eigen::Index>(n), f.n_fixed());
  f.log_vt.resize(static_cast<Eigen::Index>(n));
  if (with_vo2 == n && n > 0) f.response = Eigen::VectorXd(static_cast<Eigen::Index>(n));

  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    const double v = lvt[i] - c.log_vt;
    const double pe = lpet[i] - c.log_petco2;
    const double rr = lrr[i] - c.log_rr;
    int k = 0;
    f.fixed(r, k++) = 1.0;
    f.fixed(r, k++) = v;
    f.fixed(r, k++) = pe;
    f.fixed(r, k++) = rr;
    f.fixed(r, k++) = v * pe;
    f.fixed(r, k++) = v * rr;
    if (options.include_sofa) f.fixed(r, k++) = smeta[i]->sofa;
    if (options.include_gppaq) {
      f.fixed(r, k++) = pmeta[i]->gppaq == 2 ? 1.0 : 0.0;
      f.fixed(r, k++) = pmeta[i]->gppaq == 3 ? 1.0 : 0.0;
      f.fixed(r, k++) = pmeta[i]->gppaq == 4 ? 1.0 : 0.0;
    }
    if (options.include_sex) f.fixed(r, k++) = pmeta[i]->sex;
    if (options.include_age_bmi) {
      const double a = lage[i] - c.log_age;
      const double b = lbmi[i] - c.log_bmi;
      f.fixed(r, k++) = a;
      f.fixed(r, k++) = b;
      f.fixed(r, k++) = a * b;
    }
    f.log_vt[r] = v;
    if (f.response) (*f.response)[r] = lvo2[i] - c.log_vo2;
  }
  return f;
}

}  // namespace vo2lgm
