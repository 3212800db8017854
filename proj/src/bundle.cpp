#include "vo2lgm/bundle.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace vo2lgm {

using nlohmann::json;

namespace {

// NaN and infinities are written as null and read back as NaN.
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double num(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!j.is_number()) throw std::runtime_error("fit bundle: expected a number");
  return j.get<double>();
}

json vec(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v[i]));
  return a;
}

Eigen::VectorXd read_vec(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = num(j[i]);
  return v;
}

json mat(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(vec(m.row(r).transpose()));
  return a;
}

Eigen::MatrixXd read_mat(const json& j) {
  if (j.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (j[r].size() != static_cast<std::size_t>(m.cols())) throw std::runtime_error("fit bundle: ragged matrix");
    m.row(static_cast<Eigen::Index>(r)) = read_vec(j[r]).transpose();
  }
  return m;
}

json sparse(const SpMat& m) {
  SpMat c = m;
  c.makeCompressed();
  json j;
  j["rows"] = c.rows();
  j["cols"] = c.cols();
  j["outer"] = std::vector<int>(c.outerIndexPtr(), c.outerIndexPtr() + c.cols() + 1);
  j["inner"] = std::vector<int>(c.innerIndexPtr(), c.innerIndexPtr() + c.nonZeros());
  j["values"] = vec(Eigen::Map<const Eigen::VectorXd>(c.valuePtr(), c.nonZeros()));
  return j;
}

SpMat read_sparse(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto outer = j.at("outer").get<std::vector<int>>();
  const auto inner = j.at("inner").get<std::vector<int>>();
  const Eigen::VectorXd values = read_vec(j.at("values"));
  if (outer.size() != static_cast<std::size_t>(cols) + 1 || inner.size() != static_cast<std::size_t>(values.size()) ||
      outer.front() != 0 || outer.back() != static_cast<int>(inner.size()))
    throw std::runtime_error("fit bundle: inconsistent sparse matrix");
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index c = 0; c < cols; ++c)
    for (int k = outer[c]; k < outer[c + 1]; ++k) {
      if (inner[k] < 0 || inner[k] >= rows) throw std::runtime_error("fit bundle: sparse index out of range");
      t.emplace_back(inner[k], static_cast<int>(c), values[k]);
    }
  SpMat m(rows, cols);
  m.setFromTriplets(t.begin(), t.end());
  return m;
}

json theta_json(const HyperParams& t) {
  return {{"tau_alpha", num(t.tau_alpha)}, {"tau_beta1", num(t.tau_beta1)}, {"tau_s", num(t.tau_s)}, {"phi", num(t.phi)}};
}

HyperParams theta_from(const json& j) {
  return {num(j.at("tau_alpha")), num(j.at("tau_beta1")), num(j.at("tau_s")), num(j.at("phi"))};
}

json gamma_json(const GammaPrior& g) { return {{"shape", num(g.shape)}, {"rate", num(g.rate)}}; }
GammaPrior gamma_from(const json& j) { return {num(j.at("shape")), num(j.at("rate"))}; }

json summaries(const std::vector<MarginalSummary>& s) {
  json a = json::array();
  for (const auto& m : s)
    a.push_back({{"name", m.name}, {"mean", num(m.mean)}, {"sd", num(m.sd)}, {"q025", num(m.q025)}, {"q975", num(m.q975)}});
  return a;
}

std::vector<MarginalSummary> read_summaries(const json& j) {
  std::vector<MarginalSummary> out;
  for (const auto& m : j)
    out.push_back({m.at("name").get<std::string>(), num(m.at("mean")), num(m.at("sd")), num(m.at("q025")),
                   num(m.at("q975"))});
  return out;
}

}  // namespace

std::string bundle_to_json(const FitBundle& b) {
  const FitResult& f = b.fit;
  json j;
  j["format"] = kBundleFormat;
  j["version"] = kBundleVersion;
  j["config_hash"] = b.config_hash;
  j["seed"] = b.seed;
  j["config"] = b.config;

  const auto& p = f.priors;
  j["priors"] = {{"fixed_precision", num(p.fixed_precision)},
                 {"tau_alpha", gamma_json(p.tau_alpha)},
                 {"tau_beta1", gamma_json(p.tau_beta1)},
                 {"tau_s", gamma_json(p.tau_s)},
                 {"log_phi_mean", num(p.log_phi_mean)},
                 {"log_phi_precision", num(p.log_phi_precision)},
                 {"log_obs_precision", num(p.log_obs_precision)}};
  j["options"] = {{"sofa", f.options.include_sofa},
                  {"gppaq", f.options.include_gppaq},
                  {"sex", f.options.include_sex},
                  {"age_bmi", f.options.include_age_bmi}};
  const auto& c = f.centering;
  j["centering"] = {{"log_vo2", num(c.log_vo2)}, {"log_vt", num(c.log_vt)},   {"log_petco2", num(c.log_petco2)},
                    {"log_rr", num(c.log_rr)},   {"log_age", num(c.log_age)}, {"log_bmi", num(c.log_bmi)}};
  const auto& L = f.layout;
  j["layout"] = {{"n_fixed", L.n_fixed},         {"n_sessions", L.n_sessions},   {"n_patients", L.n_patients},
                 {"n_obs", L.n_obs},             {"fixed_names", L.fixed_names}, {"session_ids", L.session_ids},
                 {"patient_ids", L.patient_ids}, {"session_patient", L.session_patient}};

  const auto& m = f.mode;
  j["mode"] = {{"psi", vec(m.psi)},
               {"log_post", num(m.log_post)},
               {"gradient", vec(m.gradient)},
               {"hessian", mat(m.hessian)},
               {"converged", m.converged},
               {"hessian_negative_definite", m.hessian_negative_definite},
               {"iterations", m.iterations},
               {"trace", vec(Eigen::Map<const Eigen::VectorXd>(m.trace.data(), static_cast<Eigen::Index>(m.trace.size())))}};

  const auto& g = f.grid;
  json gp = json::array();
  for (const auto& pt : g.points)
    gp.push_back({{"z", vec(pt.z)}, {"psi", vec(pt.psi)}, {"log_post", num(pt.log_post)}, {"weight", num(pt.weight)}});
  j["grid"] = {{"points", gp},
               {"mode_index", g.mode_index},
               {"mode", vec(g.mode)},
               {"curvature", mat(g.curvature)},
               {"z_to_psi", mat(g.z_to_psi)},
               {"axis_fallback", g.axis_fallback},
               {"warnings", g.warnings}};

  json pts = json::array();
  for (const auto& pt : f.points)
    pts.push_back({{"theta", theta_json(pt.theta)},
                   {"log_post", num(pt.log_post)},
                   {"weight", num(pt.weight)},
                   {"effect_mean", vec(pt.effect_mean)},
                   {"effect_var", vec(pt.effect_var)},
                   {"effect_factor", sparse(pt.effect_factor)}});
  j["points"] = pts;
  j["fixed_summary"] = summaries(f.fixed_summary);
  j["hyper_summary"] = summaries(f.hyper_summary);
  j["hyper_log_mean"] = vec(f.hyper_log_mean);
  j["warnings"] = f.warnings;
  return j.dump(1);
}

FitBundle bundle_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("fit bundle is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", std::string()) != kBundleFormat) throw std::runtime_error("not a fit bundle");
    if (j.at("version").get<int>() != kBundleVersion)
      throw std::runtime_error("unsupported fit bundle version " + std::to_string(j.at("version").get<int>()));
    FitBundle b;
    b.config_hash = j.at("config_hash").get<std::string>();
    b.seed = j.at("seed").get<std::uint64_t>();
    b.config = j.at("config").get<std::string>();
    FitResult& f = b.fit;

    const auto& p = j.at("priors");
    f.priors.fixed_precision = num(p.at("fixed_precision"));
    f.priors.tau_alpha = gamma_from(p.at("tau_alpha"));
    f.priors.tau_beta1 = gamma_from(p.at("tau_beta1"));
    f.priors.tau_s = gamma_from(p.at("tau_s"));
    f.priors.log_phi_mean = num(p.at("log_phi_mean"));
    f.priors.log_phi_precision = num(p.at("log_phi_precision"));
    f.priors.log_obs_precision = num(p.at("log_obs_precision"));

    const auto& o = j.at("options");
    f.options = {o.at("sofa").get<bool>(), o.at("gppaq").get<bool>(), o.at("sex").get<bool>(),
                 o.at("age_bmi").get<bool>()};
    const auto& c = j.at("centering");
    f.centering = {num(c.at("log_vo2")), num(c.at("log_vt")),  num(c.at("log_petco2")),
                   num(c.at("log_rr")),  num(c.at("log_age")), num(c.at("log_bmi"))};

    const auto& l = j.at("layout");
    auto& L = f.layout;
    L.n_fixed = l.at("n_fixed").get<int>();
    L.n_sessions = l.at("n_sessions").get<int>();
    L.n_patients = l.at("n_patients").get<int>();
    L.n_obs = l.at("n_obs").get<int>();
    L.fixed_names = l.at("fixed_names").get<std::vector<std::string>>();
    L.session_ids = l.at("session_ids").get<std::vector<std::string>>();
    L.patient_ids = l.at("patient_ids").get<std::vector<std::string>>();
    L.session_patient = l.at("session_patient").get<std::vector<int>>();
    if (L.fixed_names.size() != static_cast<std::size_t>(L.n_fixed) ||
        L.session_ids.size() != static_cast<std::size_t>(L.n_sessions) ||
        L.patient_ids.size() != static_cast<std::size_t>(L.n_patients) ||
        L.session_patient.size() != static_cast<std::size_t>(L.n_sessions))
      throw std::runtime_error("layout counts do not match its id lists");
    if (L.fixed_names != fixed_effect_names(f.options))
      throw std::runtime_error("fixed-effect names do not match the model options");

    const auto& m = j.at("mode");
    f.mode.psi = read_vec(m.at("psi"));
    f.mode.log_post = num(m.at("log_post"));
    f.mode.gradient = read_vec(m.at("gradient"));
    f.mode.hessian = read_mat(m.at("hessian"));
    f.mode.converged = m.at("converged").get<bool>();
    f.mode.hessian_negative_definite = m.at("hessian_negative_definite").get<bool>();
    f.mode.iterations = m.at("iterations").get<int>();
    const Eigen::VectorXd trace = read_vec(m.at("trace"));
    f.mode.trace.assign(trace.data(), trace.data() + trace.size());

    const auto& g = j.at("grid");
    for (const auto& pt : g.at("points"))
      f.grid.points.push_back({read_vec(pt.at("z")), read_vec(pt.at("psi")), num(pt.at("log_post")), num(pt.at("weight"))});
    f.grid.mode_index = g.at("mode_index").get<int>();
    f.grid.mode = read_vec(g.at("mode"));
    f.grid.curvature = read_mat(g.at("curvature"));
    f.grid.z_to_psi = read_mat(g.at("z_to_psi"));
    f.grid.axis_fallback = g.at("axis_fallback").get<bool>();
    f.grid.warnings = g.at("warnings").get<std::vector<std::string>>();

    const int nE = L.n_effects();
    for (const auto& pt : j.at("points")) {
      PointPosterior pp;
      pp.theta = theta_from(pt.at("theta"));
      pp.log_post = num(pt.at("log_post"));
      pp.weight = num(pt.at("weight"));
      pp.effect_mean = read_vec(pt.at("effect_mean"));
      pp.effect_var = read_vec(pt.at("effect_var"));
      pp.effect_factor = read_sparse(pt.at("effect_factor"));
      if (pp.effect_mean.size() != nE || pp.effect_var.size() != nE || pp.effect_factor.rows() != nE ||
          pp.effect_factor.cols() != nE)
        throw std::runtime_error("grid point dimensions do not match the layout");
      f.points.push_back(std::move(pp));
    }
    if (f.points.empty() || f.points.size() != f.grid.points.size())
      throw std::runtime_error("grid points and conditionals disagree");
    f.fixed_summary = read_summaries(j.at("fixed_summary"));
    f.hyper_summary = read_summaries(j.at("hyper_summary"));
    f.hyper_log_mean = read_vec(j.at("hyper_log_mean"));
    f.warnings = j.at("warnings").get<std::vector<std::string>>();
    return b;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed fit bundle: ") + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string("malformed fit bundle: ") + e.what());
  }
}

void save_bundle(const FitBundle& bundle, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << bundle_to_json(bundle) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

FitBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open fit bundle '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return bundle_from_json(ss.str());
}

}  // namespace vo2lgm
