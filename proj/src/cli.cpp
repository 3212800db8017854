#include "vo2lgm/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "CLI11.hpp"
#include "csv.hpp"
#include "vo2lgm/bundle.hpp"
#include "vo2lgm/evaluate.hpp"
#include "vo2lgm/run_config.hpp"
#include "vo2lgm/simulate.hpp"

namespace vo2lgm {

namespace fs = std::filesystem;

namespace {

struct Context {
  std::string command;
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

std::string provenance(const Context& c) {
  return "# vo2lgm " + c.command + " config_hash=" + c.cfg.hash_hex() + " seed=" + std::to_string(c.cfg.seed);
}

std::ofstream open_output(const Context& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << provenance(c) << '\n';
  return f;
}

std::string require(const std::string& value, const std::string& key) {
  if (value.empty()) throw std::invalid_argument("--" + key + " is required");
  return value;
}

fs::path output_dir(const Context& c) {
  const fs::path dir = require(c.cfg.out, "out");
  fs::create_directories(dir);
  return dir;
}

void write_config(const Context& c, const fs::path& dir) {
  std::ofstream f(dir / "run_config.txt");
  if (!f) throw std::runtime_error("cannot write '" + (dir / "run_config.txt").string() + "'");
  f << provenance(c) << '\n' << c.cfg.canonical();
}

void warn(const Context& c, const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) c.err << "warning: " << w << '\n';
}

std::string fmt(double v) { return std::isfinite(v) ? csv::fmt(v) : std::string(); }

Dataset prepare(const Context& c, const std::string& breaths, const std::string& sessions,
                const std::string& patients) {
  const RunConfig& cfg = c.cfg;
  Dataset ds = load_dataset(require(breaths, "breaths"), require(sessions, "sessions"), require(patients, "patients"));
  validate(ds);
  auto step = filter_quality(ds, cfg.quality_set());
  warn(c, step.warnings);
  if (cfg.min_age > 0.0) {
    step = exclude_patients_younger_than(step.data, cfg.min_age);
    warn(c, step.warnings);
  }
  step = screen(step.data, cfg.bounds());
  warn(c, step.warnings);
  if (step.data.empty()) throw std::runtime_error("no records remain after filtering");
  return smooth(step.data, cfg.smooth_window, cfg.smooth_vo2);
}

Dataset prepare(const Context& c) { return prepare(c, c.cfg.breaths, c.cfg.sessions, c.cfg.patients); }

void write_probs(std::ostream& f, const CategoryProbs& p) {
  for (int k = 0; k < kCategories; ++k) f << ',' << fmt(p[k]);
}

// ---------------------------------------------------------------------------

void cmd_fit(const Context& c) {
  const Dataset ds = prepare(c);
  const fs::path dir = output_dir(c);
  const ModelFrame frame = build_frame(ds, c.cfg.frame_options());
  InferenceConfig ic = c.cfg.inference();
  ic.keep_full_field = false;
  FitBundle b;
  b.fit = fit(frame, c.cfg.priors, ic);
  b.config_hash = c.cfg.hash_hex();
  b.seed = c.cfg.seed;
  b.config = c.cfg.canonical();
  warn(c, b.fit.warnings);

  const std::string bundle_path = c.cfg.bundle.empty() ? (dir / "fit.json").string() : c.cfg.bundle;
  save_bundle(b, bundle_path);
  auto f = open_output(c, (dir / "summary.csv").string());
  f << "term,mean,sd,q025,q975\n";
  for (const auto* list : {&b.fit.fixed_summary, &b.fit.hyper_summary})
    for (const auto& m : *list)
      f << m.name << ',' << fmt(m.mean) << ',' << fmt(m.sd) << ',' << fmt(m.q025) << ',' << fmt(m.q975) << '\n';
  write_config(c, dir);
  c.out << "fit: " << frame.rows() << " breaths, " << b.fit.points.size() << " grid points, mode "
        << (b.fit.mode.converged ? "converged" : "not converged") << "\n";
  c.out << "wrote " << bundle_path << " and " << (dir / "summary.csv").string() << "\n";
}

void write_predictions(const Context& c, const std::string& path, const ModelFrame& frame,
                       const std::vector<RowPrediction>& preds) {
  auto f = open_output(c, path);
  f << "patient_id,session_id,t,mean_log_vo2,sd_log_vo2,p_rest,p_low,p_medium,p_high,category,high_alert,observed_vo2\n";
  for (int r = 0; r < frame.rows(); ++r) {
    const auto& p = preds[static_cast<std::size_t>(r)];
    const auto s = static_cast<std::size_t>(frame.session_index[r]);
    f << frame.patient_ids[static_cast<std::size_t>(frame.patient_index[r])] << ',' << frame.session_ids[s] << ','
      << fmt(frame.time[static_cast<std::size_t>(r)]) << ',' << fmt(p.mean_log) << ',' << fmt(p.sd_log);
    write_probs(f, p.probs);
    f << ',' << to_string(p.category) << ',' << (high_alert(p.probs, c.cfg.alert_threshold) ? 1 : 0) << ',';
    if (frame.response) f << fmt(frame.observed_vo2(r));
    f << '\n';
  }
}

void cmd_predict(const Context& c) {
  const RunConfig& cfg = c.cfg;
  const std::string out_path = require(cfg.out, "out");
  FitBundle b = load_bundle(require(cfg.bundle, "bundle"));
  FitResult& fr = b.fit;
  const PredictMode mode = parse_predict_mode(cfg.mode);
  const CategoryThresholds th = cfg.thresholds();
  const Dataset ds = prepare(c);

  std::unique_ptr<GaussianLatentModel> model;
  if (mode == PredictMode::in_sample || mode == PredictMode::known_session) {
    const bool separate = !cfg.train_breaths.empty();
    const Dataset train = separate ? prepare(c, cfg.train_breaths, cfg.train_sessions, cfg.train_patients) : ds;
    const ModelFrame train_frame = build_frame(train, fr.options);
    fr = rehydrate(fr, train_frame, cfg.thread_count());
    model = std::make_unique<GaussianLatentModel>(train_frame, fr.priors);
  }
  const ModelFrame frame = build_frame(ds, fr.options, fr.centering);
  const auto preds = predict_summaries(fr, frame, mode, cfg.samples, cfg.seed, th, model.get(), cfg.thread_count());
  write_predictions(c, out_path, frame, preds);
  c.out << "predict: " << frame.rows() << " rows (" << to_string(mode) << ") -> " << out_path << "\n";
}

void write_confusion(std::ostream& f, const ConfusionMatrix& m, double loss, double score) {
  const Eigen::Matrix4d p = m.normalized();
  f << "observed,rest,low,medium,high,n\n";
  for (int i = 0; i < kCategories; ++i) {
    long n = 0;
    for (long v : m.counts[i]) n += v;
    f << to_string(static_cast<Category>(i));
    for (int j = 0; j < kCategories; ++j) f << ',' << (n > 0 ? fmt(p(i, j)) : std::string());
    f << ',' << n << '\n';
  }
  f << "zero_one_loss," << fmt(loss) << ",,,,\n";
  f << "rps," << fmt(score) << ",,,,\n";
}

void write_counts(std::ostream& f, const ConfusionMatrix& m) {
  f << "observed,rest,low,medium,high\n";
  for (int i = 0; i < kCategories; ++i) {
    f << to_string(static_cast<Category>(i));
    for (int j = 0; j < kCategories; ++j) f << ',' << m.counts[i][j];
    f << '\n';
  }
}

void cmd_cv(const Context& c) {
  const Dataset ds = prepare(c);
  const fs::path dir = output_dir(c);
  const CvReport rep = lopo_cv(ds, c.cfg.cv(), c.cfg.seed);

  {
    auto f = open_output(c, (dir / "cv_folds.csv").string());
    f << "patient_id,ok,rows,zero_one_loss,rps,error\n";
    for (const auto& fold : rep.folds) {
      std::string e = fold.error;
      for (char& ch : e)
        if (ch == ',' || ch == '\n') ch = ';';
      f << fold.patient_id << ',' << (fold.ok ? 1 : 0) << ',' << fold.rows.size() << ','
        << (fold.ok ? fmt(fold.zero_one) : "") << ',' << (fold.ok ? fmt(fold.mean_rps) : "") << ',' << e << '\n';
    }
    f << "pooled,1," << rep.pooled.total() << ',' << fmt(rep.zero_one) << ',' << fmt(rep.mean_rps) << ",\n";
    f << "fold_mean,1,," << fmt(rep.fold_mean_zero_one) << ',' << fmt(rep.fold_mean_rps) << ",\n";
  }
  std::vector<CategoryProbs> probs;
  std::vector<Category> obs;
  {
    auto f = open_output(c, (dir / "cv_rows.csv").string());
    f << "patient_id,session_id,quality,t,observed_vo2,observed,mean_log_vo2,sd_log_vo2,p_rest,p_low,p_medium,p_high,"
         "category,rps\n";
    for (const auto& fold : rep.folds)
      for (const auto& r : fold.rows) {
        f << r.patient_id << ',' << r.session_id << ',' << to_string(r.quality) << ',' << fmt(r.t) << ','
          << fmt(r.observed_vo2) << ',' << to_string(r.observed) << ',' << fmt(r.prediction.mean_log) << ','
          << fmt(r.prediction.sd_log);
        write_probs(f, r.prediction.probs);
        f << ',' << to_string(r.prediction.category) << ',' << fmt(rps(r.prediction.probs, r.observed)) << '\n';
        probs.push_back(r.prediction.probs);
        obs.push_back(r.observed);
      }
  }
  {
    auto f = open_output(c, (dir / "cv_confusion.csv").string());
    write_confusion(f, rep.pooled, rep.zero_one, rep.mean_rps);
  }
  {
    auto f = open_output(c, (dir / "cv_quality.csv").string());
    f << "quality,sessions,rows,session_mean_accuracy,row_accuracy\n";
    for (const auto& q : rep.by_quality)
      f << to_string(q.quality) << ',' << q.sessions << ',' << q.rows << ',' << fmt(q.session_mean) << ','
        << fmt(q.row_pooled) << '\n';
  }
  {
    std::vector<double> qs;
    for (int k = 1; k <= 20; ++k) qs.push_back(k / 20.0);
    const auto curve = plausibility_curve(probs, obs, qs);
    auto f = open_output(c, (dir / "plausibility.csv").string());
    f << "category,threshold,proportion,n\n";
    for (int k = 0; k < kCategories; ++k)
      for (std::size_t i = 0; i < qs.size(); ++i)
        f << to_string(static_cast<Category>(k)) << ',' << fmt(qs[i]) << ',' << fmt(curve.proportion[k][i]) << ','
          << curve.counts[k] << '\n';
  }
  write_config(c, dir);
  for (const auto& fold : rep.folds)
    if (!fold.ok) c.err << "warning: fold " << fold.patient_id << " failed: " << fold.error << '\n';
  c.out << "cv: " << rep.folds.size() << " folds (" << rep.failed_folds << " failed), accuracy "
        << csv::fmt(1.0 - rep.zero_one) << ", zero-one loss " << csv::fmt(rep.zero_one) << ", RPS "
        << csv::fmt(rep.mean_rps) << "\n";
}

void cmd_ppc(const Context& c) {
  const RunConfig& cfg = c.cfg;
  const Dataset ds = prepare(c);
  const fs::path dir = output_dir(c);
  const auto [train, test] = ppc_split(ds, require(cfg.session, "session"), cfg.t_cut);
  const ModelFrame train_frame = build_frame(train, cfg.frame_options());
  InferenceConfig ic = cfg.inference();
  ic.keep_full_field = false;
  const FitResult fr = fit(train_frame, cfg.priors, ic);
  warn(c, fr.warnings);
  const GaussianLatentModel model(train_frame, cfg.priors);
  const ModelFrame test_frame = build_frame(test, cfg.frame_options(), fr.centering);
  const CategoryThresholds th = cfg.thresholds();
  const auto preds = predict_summaries(fr, test_frame, PredictMode::known_session, cfg.samples, cfg.seed, th, &model,
                                       cfg.thread_count(), true);

  auto f = open_output(c, (dir / "ppc.csv").string());
  f << "patient_id,session_id,t,observed_vo2,observed,mean_log_vo2,sd_log_vo2,q025_log_vo2,q975_log_vo2,"
       "median_vo2,lo_vo2,hi_vo2,p_rest,p_low,p_medium,p_high,category\n";
  for (int r = 0; r < test_frame.rows(); ++r) {
    const auto& p = preds[static_cast<std::size_t>(r)];
    const double v = test_frame.observed_vo2(r);
    f << test_frame.patient_ids[static_cast<std::size_t>(test_frame.patient_index[r])] << ','
      << test_frame.session_ids[static_cast<std::size_t>(test_frame.session_index[r])] << ','
      << fmt(test_frame.time[static_cast<std::size_t>(r)]) << ',' << fmt(v) << ',' << to_string(category_of(v, th))
      << ',' << fmt(p.mean_log) << ',' << fmt(p.sd_log) << ',' << fmt(p.q025_log) << ',' << fmt(p.q975_log) << ','
      << fmt(std::exp(p.mean_log)) << ',' << fmt(std::exp(p.q025_log)) << ',' << fmt(std::exp(p.q975_log));
    write_probs(f, p.probs);
    f << ',' << to_string(p.category) << '\n';
  }
  write_config(c, dir);
  c.out << "ppc: " << train_frame.rows() << " training breaths, " << test_frame.rows() << " forecast rows after t = "
        << csv::fmt(cfg.t_cut) << "\n";
}

void cmd_simulate(const Context& c) {
  const fs::path dir = output_dir(c);
  const Simulation sim = simulate(c.cfg.generative());
  write_breath_csv(sim.data, (dir / "breaths.csv").string());
  write_session_csv(sim.data, (dir / "sessions.csv").string());
  write_patient_csv(sim.data, (dir / "patients.csv").string());
  write_truth_json(sim.truth, (dir / "truth.json").string());
  write_config(c, dir);
  c.out << "simulate: " << sim.data.patients.size() << " patients, " << sim.data.n_sessions() << " sessions, "
        << sim.data.n_records() << " breaths -> " << dir.string() << "\n";
}

void cmd_eval(const Context& c) {
  const RunConfig& cfg = c.cfg;
  const std::string path = require(cfg.predictions, "predictions");
  const csv::Table t = csv::read(path);
  const CategoryThresholds th = cfg.thresholds();
  const std::size_t cols[4] = {t.require("p_rest", path), t.require("p_low", path), t.require("p_medium", path),
                               t.require("p_high", path)};
  const std::size_t cat_col = t.require("category", path);
  const std::size_t obs_col = t.require("observed_vo2", path);
  std::vector<CategoryProbs> probs;
  std::vector<Category> pred, obs;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    const auto v = csv::to_double(row[obs_col]);
    if (!v) throw DataError(path + ": row " + std::to_string(i + 1) + " has no observed_vo2");
    CategoryProbs p;
    for (int k = 0; k < kCategories; ++k) {
      const auto x = csv::to_double(row[cols[k]]);
      if (!x) throw DataError(path + ": row " + std::to_string(i + 1) + " has a non-numeric probability");
      p.p[static_cast<std::size_t>(k)] = *x;
    }
    probs.push_back(p);
    pred.push_back(parse_category(row[cat_col]));
    obs.push_back(category_of(*v, th));
  }
  const double loss = zero_one_loss(pred, obs);
  const double score = mean_rps(probs, obs);
  const ConfusionMatrix m = confusion(pred, obs);
  if (cfg.out.empty()) {
    c.out << provenance(c) << '\n';
    c.out << "rows," << pred.size() << "\nzero_one_loss," << fmt(loss) << "\nrps," << fmt(score) << '\n';
    write_counts(c.out, m);
    return;
  }
  const fs::path dir = output_dir(c);
  {
    auto f = open_output(c, (dir / "metrics.csv").string());
    f << "metric,value\nrows," << pred.size() << "\nzero_one_loss," << fmt(loss) << "\nrps," << fmt(score) << '\n';
  }
  {
    auto f = open_output(c, (dir / "confusion.csv").string());
    write_confusion(f, m, loss, score);
  }
  {
    auto f = open_output(c, (dir / "confusion_counts.csv").string());
    write_counts(f, m);
  }
  c.out << "eval: " << pred.size() << " rows, zero-one loss " << csv::fmt(loss) << ", RPS " << csv::fmt(score) << "\n";
}

struct Command {
  const char* name;
  const char* help;
  void (*run)(const Context&);
};

constexpr Command kCommands[] = {
    {"fit", "fit the model and write a fit bundle plus a posterior summary", cmd_fit},
    {"predict", "predict intensity categories for breaths from a fit bundle", cmd_predict},
    {"cv", "leave-one-patient-out cross-validation", cmd_cv},
    {"ppc", "fit on a session prefix and forecast the rest of the session", cmd_ppc},
    {"simulate", "write a synthetic dataset and its generating truth", cmd_simulate},
    {"eval", "score stored predictions against observed V̇O₂", cmd_eval},
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian latent Gaussian model of breath-by-breath V̇O₂ and exercise intensity"};
  app.name("vo2lgm");
  app.require_subcommand(1);
  const RunConfig defaults;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;  // key -> option on the parsed subcommand
  std::string config_path;
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  std::vector<std::map<std::string, CLI::Option*>> sub_options;
  for (const auto& cmd : kCommands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path, "key = value file applied after the flags (its values win)");
    std::map<std::string, CLI::Option*> opts;
    for (const auto& key : RunConfig::keys())
      opts[key] = sub->add_option("--" + key, values[key], "default: " + defaults.get(key));
    subs.emplace_back(sub, &cmd);
    sub_options.push_back(std::move(opts));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i].first->parsed()) continue;
    try {
      Context ctx{subs[i].second->name, RunConfig{}, out, err};
      for (const auto& [key, opt] : sub_options[i])
        if (opt->count() > 0) ctx.cfg.set(key, values[key]);
      if (!config_path.empty()) ctx.cfg.load_file(config_path);
      subs[i].second->run(ctx);
      return 0;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}

}  // namespace vo2lgm
