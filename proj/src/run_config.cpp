#include "vo2lgm/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "csv.hpp"
#include "vo2lgm/parallel.hpp"

namespace vo2lgm {

namespace {

struct Field {
  std::string key;
  bool provenance;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

double parse_double(const std::string& key, const std::string& v) {
  auto d = csv::to_double(v);
  if (!d) throw std::invalid_argument("setting '" + key + "': '" + v + "' is not a number");
  return *d;
}

long parse_long(const std::string& key, const std::string& v) {
  auto d = csv::to_long(v);
  if (!d) throw std::invalid_argument("setting '" + key + "': '" + v + "' is not an integer");
  return *d;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("setting '" + key + "': '" + v + "' is not a boolean");
}

template <class T>
Field make(const std::string& key, T RunConfig::*member, bool provenance = true) {
  Field f{key, provenance, {}, {}};
  if constexpr (std::is_same_v<T, double>) {
    f.get = [member](const RunConfig& c) { return csv::fmt(c.*member); };
    f.set = [member, key](RunConfig& c, const std::string& v) { c.*member = parse_double(key, v); };
  } else if constexpr (std::is_same_v<T, int>) {
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
    f.set = [member, key](RunConfig& c, const std::string& v) { c.*member = static_cast<int>(parse_long(key, v)); };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.get = [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); };
    f.set = [member, key](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); };
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    f.get = [member](const RunConfig& c) { return std::to_string(c.*member); };
    f.set = [member, key](RunConfig& c, const std::string& v) {
      try {
        std::size_t used = 0;
        c.*member = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw std::invalid_argument("setting '" + key + "': '" + v + "' is not an unsigned integer");
      }
    };
  } else {
    f.get = [member](const RunConfig& c) { return c.*member; };
    f.set = [member](RunConfig& c, const std::string& v) { c.*member = v; };
  }
  return f;
}

Field prior(const std::string& key, double PriorSpec::*member) {
  return Field{key, true, [member](const RunConfig& c) { return csv::fmt(c.priors.*member); },
               [member, key](RunConfig& c, const std::string& v) { c.priors.*member = parse_double(key, v); }};
}

Field gamma(const std::string& key, GammaPrior PriorSpec::*g, double GammaPrior::*member) {
  return Field{key, true, [g, member](const RunConfig& c) { return csv::fmt(c.priors.*g.*member); },
               [g, member, key](RunConfig& c, const std::string& v) { c.priors.*g.*member = parse_double(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      make("breaths", &RunConfig::breaths),
      make("sessions", &RunConfig::sessions),
      make("patients", &RunConfig::patients),
      make("bundle", &RunConfig::bundle),
      make("predictions", &RunConfig::predictions),
      make("out", &RunConfig::out, false),
      make("train_breaths", &RunConfig::train_breaths),
      make("train_sessions", &RunConfig::train_sessions),
      make("train_patients", &RunConfig::train_patients),
      make("smooth_window", &RunConfig::smooth_window),
      make("smooth_vo2", &RunConfig::smooth_vo2),
      make("qualities", &RunConfig::qualities),
      make("min_age", &RunConfig::min_age),
      make("vt_min", &RunConfig::vt_min),
      make("vt_max", &RunConfig::vt_max),
      make("rr_min", &RunConfig::rr_min),
      make("rr_max", &RunConfig::rr_max),
      make("petco2_min", &RunConfig::petco2_min),
      make("petco2_max", &RunConfig::petco2_max),
      make("vo2_min", &RunConfig::vo2_min),
      make("vo2_max", &RunConfig::vo2_max),
      make("sofa", &RunConfig::sofa),
      make("gppaq", &RunConfig::gppaq),
      make("sex", &RunConfig::sex),
      make("age_bmi", &RunConfig::age_bmi),
      prior("fixed_precision", &PriorSpec::fixed_precision),
      gamma("tau_alpha_shape", &PriorSpec::tau_alpha, &GammaPrior::shape),
      gamma("tau_alpha_rate", &PriorSpec::tau_alpha, &GammaPrior::rate),
      gamma("tau_beta1_shape", &PriorSpec::tau_beta1, &GammaPrior::shape),
      gamma("tau_beta1_rate", &PriorSpec::tau_beta1, &GammaPrior::rate),
      gamma("tau_s_shape", &PriorSpec::tau_s, &GammaPrior::shape),
      gamma("tau_s_rate", &PriorSpec::tau_s, &GammaPrior::rate),
      prior("log_phi_mean", &PriorSpec::log_phi_mean),
      prior("log_phi_precision", &PriorSpec::log_phi_precision),
      prior("log_obs_precision", &PriorSpec::log_obs_precision),
      make("grid_step", &RunConfig::grid_step),
      make("grid_threshold", &RunConfig::grid_threshold),
      make("fd_step", &RunConfig::fd_step),
      make("grad_tol", &RunConfig::grad_tol),
      make("max_iter", &RunConfig::max_iter),
      make("mode", &RunConfig::mode),
      make("samples", &RunConfig::samples),
      make("alert_threshold", &RunConfig::alert_threshold),
      make("boundary_low", &RunConfig::boundary_low),
      make("boundary_medium", &RunConfig::boundary_medium),
      make("boundary_high", &RunConfig::boundary_high),
      make("session", &RunConfig::session),
      make("t_cut", &RunConfig::t_cut),
      make("sim_patients", &RunConfig::sim_patients),
      make("sim_sessions", &RunConfig::sim_sessions),
      make("sim_breaths", &RunConfig::sim_breaths),
      make("sim_mean_gap", &RunConfig::sim_mean_gap),
      make("sim_jitter", &RunConfig::sim_jitter),
      make("sim_spike_rate", &RunConfig::sim_spike_rate),
      make("sim_spike_factor", &RunConfig::sim_spike_factor),
      make("sim_response_offset", &RunConfig::sim_response_offset),
      make("seed", &RunConfig::seed),
      make("threads", &RunConfig::threads, false),
  };
  return f;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw std::invalid_argument("unknown setting '" + key + "'");
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = csv::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ": line " + std::to_string(n) + " is not 'key = value'");
    set(csv::trim(t.substr(0, eq)), csv::trim(t.substr(eq + 1)));
  }
}

std::string RunConfig::canonical() const {
  std::string s;
  for (const auto& f : fields())
    if (f.provenance) s += f.key + "=" + f.get(*this) + "\n";
  return s;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical()); }

std::string RunConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

int RunConfig::thread_count() const { return threads > 0 ? threads : default_threads(); }

FrameOptions RunConfig::frame_options() const { return {sofa, gppaq, sex, age_bmi}; }

InferenceConfig RunConfig::inference() const {
  InferenceConfig ic;
  ic.mode.fd_step = fd_step;
  ic.mode.grad_tol = grad_tol;
  ic.mode.max_iter = max_iter;
  ic.grid.step = grid_step;
  ic.grid.threshold = grid_threshold;
  ic.threads = thread_count();
  return ic;
}

CategoryThresholds RunConfig::thresholds() const {
  CategoryThresholds th{{boundary_low, boundary_medium, boundary_high}};
  th.validate();
  return th;
}

std::set<Quality> RunConfig::quality_set() const {
  std::set<Quality> out;
  for (const auto& q : csv::split(qualities))
    if (!q.empty()) out.insert(parse_quality(q));
  if (out.empty()) throw std::invalid_argument("setting 'qualities' selects no session quality");
  return out;
}

ScreenBounds RunConfig::bounds() const {
  ScreenBounds b;
  b.ranges["vt"] = {vt_min, vt_max};
  b.ranges["rr"] = {rr_min, rr_max};
  b.ranges["petco2"] = {petco2_min, petco2_max};
  b.ranges["vo2"] = {vo2_min, vo2_max};
  return b;
}

GenerativeConfig RunConfig::generative() const {
  GenerativeConfig g;
  g.options = frame_options();
  if (!(g.options == FrameOptions{})) {
    // Keep the default coefficients of the terms that remain.
    const auto all = fixed_effect_names(FrameOptions{});
    const auto kept = fixed_effect_names(g.options);
    const Eigen::VectorXd full = default_fixed_effects();
    g.fixed.resize(static_cast<Eigen::Index>(kept.size()));
    for (std::size_t k = 0; k < kept.size(); ++k)
      for (std::size_t a = 0; a < all.size(); ++a)
        if (all[a] == kept[k]) g.fixed[static_cast<Eigen::Index>(k)] = full[static_cast<Eigen::Index>(a)];
  }
  g.log_obs_precision = priors.log_obs_precision;
  g.response_offset = sim_response_offset;
  g.n_patients = sim_patients;
  g.sessions_per_patient = sim_sessions;
  g.breaths_per_session = sim_breaths;
  g.mean_gap = sim_mean_gap;
  g.jitter = sim_jitter;
  g.spike_rate = sim_spike_rate;
  g.spike_factor = sim_spike_factor;
  g.seed = seed;
  return g;
}

CvConfig RunConfig::cv() const {
  CvConfig c;
  c.options = frame_options();
  c.priors = priors;
  c.inference = inference();
  c.n_samples = samples;
  c.thresholds = thresholds();
  c.threads = thread_count();
  return c;
}

}  // namespace vo2lgm
