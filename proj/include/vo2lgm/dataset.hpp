#pragma once

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace vo2lgm {

/// Raised for malformed input data. `row()` is the 1-based data row (header
/// excluded) when the problem can be traced to one, otherwise 0.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what, long row = 0)
      : std::runtime_error(what), row_(row) {}
  long row() const { return row_; }

 private:
  long row_;
};

enum class Quality { good, reasonable, poor };

std::string to_string(Quality q);
Quality parse_quality(const std::string& text);

struct BreathRecord {
  double t = 0.0;              // seconds since session start
  std::optional<double> vo2;   // mL/kg/min, absent at prediction time
  double vt = 0.0;             // L
  double rr = 0.0;             // breaths/min
  double petco2 = 0.0;
};

struct SessionMeta {
  std::string session_id;
  std::string patient_id;
  int sofa = 0;
  Quality quality = Quality::good;
  int days_since_admission = 0;
};

struct PatientMeta {
  std::string patient_id;
  double age = 0.0;
  double bmi = 0.0;
  int sex = 0;
  int gppaq = 1;
};

struct Session {
  std::string id;
  std::vector<BreathRecord> records;
};

struct Patient {
  std::string id;
  std::vector<Session> sessions;
};

/// Breath records grouped patient -> session -> time, plus the session and
/// patient metadata tables. Patients and sessions keep first-appearance order.
struct Dataset {
  std::vector<Patient> patients;
  std::map<std::string, SessionMeta> session_meta;
  std::map<std::string, PatientMeta> patient_meta;

  std::size_t n_records() const;
  std::size_t n_sessions() const;
  bool empty() const { return patients.empty(); }
  bool has_vo2() const;  // every record carries a V̇O₂ value

  const Session* find_session(const std::string& session_id) const;
  const Patient* find_patient(const std::string& patient_id) const;
  const Patient* patient_of_session(const std::string& session_id) const;
};

/// Maps canonical field names to the header names used by a breath CSV.
struct BreathSchema {
  std::string patient_id = "patient_id";
  std::string session_id = "session_id";
  std::string t = "t_seconds";
  std::string vo2 = "vo2";
  std::string vt = "vt";
  std::string rr = "rr";
  std::string petco2 = "petco2";
};

Dataset parse_breath_csv(const std::string& path, const BreathSchema& schema = {});
std::map<std::string, SessionMeta> parse_session_csv(const std::string& path);
std::map<std::string, PatientMeta> parse_patient_csv(const std::string& path);

/// Breaths plus both metadata tables; every session and patient referenced by
/// the breaths must have metadata.
Dataset load_dataset(const std::string& breaths_path, const std::string& sessions_path,
                     const std::string& patients_path, const BreathSchema& schema = {});

void write_breath_csv(const Dataset& ds, const std::string& path);
void write_session_csv(const Dataset& ds, const std::string& path);
void write_patient_csv(const Dataset& ds, const std::string& path);

/// Throws DataError if a session has non-increasing times, a physiological
/// value is not strictly positive, or ids are duplicated across patients.
void validate(const Dataset& ds);

/// Centered rolling mean with the window truncated at session boundaries.
/// Applied to vt, rr, petco2 and, when `include_vo2`, to V̇O₂.
Dataset smooth(const Dataset& ds, int window = 3, bool include_vo2 = true);

struct FilterOutcome {
  Dataset data;
  std::vector<std::string> warnings;
};

FilterOutcome filter_quality(const Dataset& ds, const std::set<Quality>& allowed);

/// Inclusive per-variable bounds; unset bounds do not screen.
struct ScreenBounds {
  struct Range {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
  };
  std::map<std::string, Range> ranges;  // keys: vt, rr, petco2, vo2
};

/// Drops records outside the configured bounds, then empty sessions and patients.
FilterOutcome screen(const Dataset& ds, const ScreenBounds& bounds);

FilterOutcome exclude_patients_younger_than(const Dataset& ds, double min_age);

Dataset select_patients(const Dataset& ds, const std::set<std::string>& patient_ids);
Dataset drop_patient(const Dataset& ds, const std::string& patient_id);

// ---------------------------------------------------------------------------
// Model frame

struct CenteringConstants {
  double log_vo2 = 0.0;
  double log_vt = 0.0;
  double log_petco2 = 0.0;
  double log_rr = 0.0;
  double log_age = 0.0;
  double log_bmi = 0.0;

  bool operator==(const CenteringConstants&) const = default;
};

/// Which session/patient-level adjustments enter the linear predictor. The
/// physiological terms and the intercept are always present.
struct FrameOptions {
  bool include_sofa = true;
  bool include_gppaq = true;
  bool include_sex = true;
  bool include_age_bmi = true;

  bool operator==(const FrameOptions&) const = default;
};

std::vector<std::string> fixed_effect_names(const FrameOptions& options);

struct ModelFrame {
  std::vector<std::string> fixed_names;
  Eigen::MatrixXd fixed;                   // rows x n_fixed, column 0 is the intercept
  std::optional<Eigen::VectorXd> response; // centered log V̇O₂
  Eigen::VectorXd log_vt;                  // centered log(vt); patient-slope covariate

  std::vector<int> session_index;
  std::vector<int> patient_index;
  std::vector<double> time;

  std::vector<std::string> session_ids;
  std::vector<std::string> patient_ids;
  std::vector<int> session_patient;
  std::vector<Quality> session_quality;

  CenteringConstants centering;
  FrameOptions options;

  int rows() const { return static_cast<int>(time.size()); }
  int n_fixed() const { return static_cast<int>(fixed_names.size()); }
  /// Observed V̇O₂ on the original scale, row r (requires a response).
  double observed_vo2(int r) const;
};

constexpr int kLogVtColumn = 1;

ModelFrame build_frame(const Dataset& ds, const FrameOptions& options = {},
                       const std::optional<CenteringConstants>& centering = std::nullopt);

}  // namespace vo2lgm
