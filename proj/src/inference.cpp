#include "vo2lgm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

#include "vo2lgm/parallel.hpp"

namespace vo2lgm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

std::vector<int> arrowhead_ordering(const LatentLayout& L) {
  std::vector<int> perm(static_cast<std::size_t>(L.dimension()));
  const int base = L.n_obs;
  for (int j = 0; j < L.n_sessions; ++j) perm[L.session_slot(j)] = base + j;
  for (int i = 0; i < L.n_patients; ++i) perm[L.patient_slot(i)] = base + L.n_sessions + i;
  for (int k = 0; k < L.n_fixed; ++k) perm[L.fixed_slot(k)] = base + L.n_sessions + L.n_patients + k;
  for (int o = 0; o < L.n_obs; ++o) perm[L.n_effects() + o] = o;
  return perm;
}

int effect_slot(const LatentLayout& L, int e) {
  if (e < L.n_sessions) return L.session_slot(e);
  if (e < L.n_sessions + L.n_patients) return L.patient_slot(e - L.n_sessions);
  return L.fixed_slot(e - L.n_sessions - L.n_patients);
}

// ---------------------------------------------------------------------------

GaussianLatentModel::GaussianLatentModel(const ModelFrame& frame, const PriorSpec& priors)
    : layout_(vo2lgm::layout(frame)), priors_(priors) {
  if (!frame.response) throw std::invalid_argument("model frame has no response");
  A_ = design_matrix(frame, layout_);
  y_ = *frame.response;
  prepare();
}

GaussianLatentModel::GaussianLatentModel(LatentLayout layout, SpMatRow design, Eigen::VectorXd y,
                                         PriorSpec priors)
    : layout_(std::move(layout)), A_(std::move(design)), y_(std::move(y)), priors_(priors) {
  if (A_.rows() != y_.size() || A_.cols() != layout_.dimension())
    throw std::invalid_argument("design matrix does not match layout and response");
  prepare();
}

void GaussianLatentModel::prepare() {
  priors_.validate();
  const auto& L = layout_;
  const int nE = L.n_effects();
  perm_ = arrowhead_ordering(L);

  blocks_.clear();
  blocks_.reserve(static_cast<std::size_t>(L.n_sessions));
  for (int j = 0; j < L.n_sessions; ++j) {
    const auto& rows = L.session_rows[j];
    SessionBlock b;
    if (rows.empty()) {
      blocks_.push_back(std::move(b));
      continue;
    }
    b.obs_offset = L.obs_slot_of_row[rows.front()];
    for (int r : rows) {
      bool has_state = false;
      for (SpMatRow::InnerIterator it(A_, r); it; ++it) {
        const int slot = static_cast<int>(it.col());
        if (slot < nE) {
          b.effects.push_back(perm_[slot] - L.n_obs);
        } else if (slot == L.obs_slot_of(r) && it.value() == 1.0) {
          has_state = true;
        } else {
          throw std::invalid_argument("design row " + std::to_string(r) + " must load only its own O-U state, with weight 1");
        }
      }
      if (!has_state) throw std::invalid_argument("design row " + std::to_string(r) + " does not load its O-U state");
    }
    std::sort(b.effects.begin(), b.effects.end());
    b.effects.erase(std::unique(b.effects.begin(), b.effects.end()), b.effects.end());
    const int n = static_cast<int>(rows.size());
    const int c = static_cast<int>(b.effects.size());
    b.A = Eigen::MatrixXd::Zero(n, c);
    b.y.resize(n);
    for (int k = 0; k < n; ++k) {
      const int r = rows[k];
      b.y[k] = y_[r];
      for (SpMatRow::InnerIterator it(A_, r); it; ++it) {
        const int slot = static_cast<int>(it.col());
        if (slot >= nE) continue;
        const int e = perm_[slot] - L.n_obs;
        const int a = static_cast<int>(std::lower_bound(b.effects.begin(), b.effects.end(), e) - b.effects.begin());
        b.A(k, a) = it.value();
      }
    }
    blocks_.push_back(std::move(b));
  }
}

namespace {

// Cholesky factor of a tridiagonal matrix T = Q + shift I: diagonal d and
// sub-diagonal s (s[k] couples k and k-1).
struct TriChol {
  std::vector<double> d;
  std::vector<double> s;
};

TriChol tri_chol(const OuTridiagonal& q, double shift) {
  const std::size_t n = q.diag.size();
  TriChol c;
  c.d.resize(n);
  c.s.assign(n, 0.0);
  c.d[0] = std::sqrt(q.diag[0] + shift);
  for (std::size_t k = 1; k < n; ++k) {
    c.s[k] = q.sub[k - 1] / c.d[k - 1];
    c.d[k] = std::sqrt(q.diag[k] + shift - c.s[k] * c.s[k]);
  }
  return c;
}

template <class M>
void tri_forward(const TriChol& c, M& X) {
  X.row(0) /= c.d[0];
  for (Eigen::Index k = 1; k < X.rows(); ++k) X.row(k) = (X.row(k) - c.s[k] * X.row(k - 1)) / c.d[k];
}

template <class M>
void tri_backward(const TriChol& c, M& X) {
  const Eigen::Index n = X.rows();
  X.row(n - 1) /= c.d[n - 1];
  for (Eigen::Index k = n - 2; k >= 0; --k) X.row(k) = (X.row(k) - c.s[k + 1] * X.row(k + 1)) / c.d[k];
}

template <class M>
M tri_multiply(const OuTridiagonal& q, const M& X) {
  const Eigen::Index n = X.rows();
  M Y(X.rows(), X.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    Y.row(k) = q.diag[k] * X.row(k);
    if (k > 0) Y.row(k) += q.sub[k - 1] * X.row(k - 1);
    if (k + 1 < n) Y.row(k) += q.sub[k] * X.row(k + 1);
  }
  return Y;
}

}  // namespace

ConditionalGaussian GaussianLatentModel::conditional(const HyperParams& theta, bool with_factor) const {
  theta.validate();
  const auto& L = layout_;
  const int nE = L.n_effects();
  const int nO = L.n_obs;
  const double tau = priors_.obs_precision();

  // Eliminating the O-U states leaves the effect precision
  //   S = Q_e + tau A_e^T (Q_ou + tau I)^{-1} Q_ou A_e,
  // formed directly so no O(tau) terms cancel.
  std::vector<Eigen::Triplet<double>> st;
  Eigen::VectorXd be = Eigen::VectorXd::Zero(nE);
  std::vector<OuTridiagonal> qs(blocks_.size());
  std::vector<TriChol> chols(blocks_.size());
  double ld_states = 0.0;
  for (std::size_t j = 0; j < blocks_.size(); ++j) {
    const auto& b = blocks_[j];
    if (b.y.size() == 0) continue;
    qs[j] = ou_tridiagonal(L.session_times[j], theta.ou());
    chols[j] = tri_chol(qs[j], tau);
    for (double d : chols[j].d) {
      if (!(d > 0.0) || !std::isfinite(d)) throw FactorizationError("O-U block is not positive definite");
      ld_states += 2.0 * std::log(d);
    }
    const int c = static_cast<int>(b.effects.size());
    Eigen::MatrixXd W(b.A.rows(), c + 1);
    W.leftCols(c) = b.A;
    W.col(c) = b.y;
    W = tri_multiply(qs[j], W);
    tri_forward(chols[j], W);
    tri_backward(chols[j], W);
    const Eigen::MatrixXd G = tau * (b.A.transpose() * W);
    for (int a = 0; a < c; ++a) {
      be[b.effects[a]] += G(a, c);
      for (int e = 0; e <= a; ++e)
        st.emplace_back(b.effects[a], b.effects[e], 0.5 * (G(a, e) + G(e, a)));
    }
  }
  for (int j = 0; j < L.n_sessions; ++j) st.emplace_back(j, j, theta.tau_alpha);
  for (int i = 0; i < L.n_patients; ++i) st.emplace_back(L.n_sessions + i, L.n_sessions + i, theta.tau_beta1);
  for (int k = 0; k < L.n_fixed; ++k)
    st.emplace_back(L.n_sessions + L.n_patients + k, L.n_sessions + L.n_patients + k, priors_.fixed_precision);
  SpMat S(nE, nE);
  S.setFromTriplets(st.begin(), st.end());
  std::vector<int> identity(static_cast<std::size_t>(nE));
  for (int e = 0; e < nE; ++e) identity[e] = e;
  auto eff = std::make_shared<SparseFactor>(S, identity);
  const Eigen::VectorXd me = eff->solve(be);

  ConditionalGaussian cg;
  cg.theta = theta;
  cg.mean.resize(L.dimension());
  for (int e = 0; e < nE; ++e) cg.mean[effect_slot(L, e)] = me[e];
  for (std::size_t j = 0; j < blocks_.size(); ++j) {
    const auto& b = blocks_[j];
    if (b.y.size() == 0) continue;
    Eigen::VectorXd r = b.y;
    for (std::size_t a = 0; a < b.effects.size(); ++a) r -= b.A.col(static_cast<Eigen::Index>(a)) * me[b.effects[a]];
    // m_o = tau (Q_ou + tau I)^{-1} r = r - (Q_ou + tau I)^{-1} Q_ou r
    Eigen::VectorXd u = tri_multiply(qs[j], r);
    tri_forward(chols[j], u);
    tri_backward(chols[j], u);
    cg.mean.segment(nE + b.obs_offset, r.size()) = r - u;
  }
  cg.log_det_posterior = ld_states + eff->log_det();
  cg.log_det_prior = prior_log_det(layout_, theta, priors_);

  if (with_factor) {
    std::vector<Eigen::Triplet<double>> lt;
    lt.reserve(static_cast<std::size_t>(nO) * 20 + static_cast<std::size_t>(eff->L().nonZeros()));
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      const auto& b = blocks_[j];
      const Eigen::Index n = b.y.size();
      if (n == 0) continue;
      Eigen::MatrixXd Leo = tau * b.A;  // becomes L_oo^{-1} tau A_e = L_eo^T
      tri_forward(chols[j], Leo);
      for (Eigen::Index k = 0; k < n; ++k) {
        const int o = b.obs_offset + static_cast<int>(k);
        lt.emplace_back(o, o, chols[j].d[k]);
        if (k + 1 < n) lt.emplace_back(o + 1, o, chols[j].s[k + 1]);
        for (std::size_t a = 0; a < b.effects.size(); ++a)
          lt.emplace_back(nO + b.effects[a], o, Leo(k, static_cast<Eigen::Index>(a)));
      }
    }
    const SpMat& Lee = eff->L();
    for (int c = 0; c < Lee.outerSize(); ++c)
      for (SpMat::InnerIterator it(Lee, c); it; ++it) lt.emplace_back(nO + it.row(), nO + c, it.value());
    SpMat Lfull(L.dimension(), L.dimension());
    Lfull.setFromTriplets(lt.begin(), lt.end());
    cg.factor = std::make_shared<SparseFactor>(SparseFactor::from_lower_factor(std::move(Lfull), perm_));
  }
  cg.effect_factor = std::move(eff);
  return cg;
}

double GaussianLatentModel::prior_quadratic(const Eigen::VectorXd& x, const HyperParams& theta) const {
  const auto& L = layout_;
  double q = priors_.fixed_precision * x.head(L.n_fixed).squaredNorm() +
             theta.tau_alpha * x.segment(L.n_fixed, L.n_sessions).squaredNorm() +
             theta.tau_beta1 * x.segment(L.n_fixed + L.n_sessions, L.n_patients).squaredNorm();
  int offset = L.n_effects();
  for (const auto& times : L.session_times) {
    if (times.empty()) continue;
    const auto tri = ou_tridiagonal(times, theta.ou());
    for (std::size_t t = 0; t < times.size(); ++t) {
      const double xt = x[offset + static_cast<int>(t)];
      q += tri.diag[t] * xt * xt;
      if (t > 0) q += 2.0 * tri.sub[t - 1] * xt * x[offset + static_cast<int>(t) - 1];
    }
    offset += static_cast<int>(times.size());
  }
  return q;
}

double GaussianLatentModel::log_marginal(const ConditionalGaussian& cg) const {
  const double tau = priors_.obs_precision();
  const double n = static_cast<double>(y_.size());
  const Eigen::VectorXd r = y_ - A_ * cg.mean;
  const double quad = tau * r.squaredNorm() + prior_quadratic(cg.mean, cg.theta);
  return log_hyperprior(cg.theta, priors_) + 0.5 * (cg.log_det_prior - cg.log_det_posterior) -
         0.5 * quad + 0.5 * n * (priors_.log_obs_precision - std::log(2.0 * std::numbers::pi));
}

double GaussianLatentModel::log_marginal(const HyperParams& theta) const {
  return log_marginal(conditional(theta, false));
}

SpMat GaussianLatentModel::posterior_precision(const HyperParams& theta) const {
  SpMat Acol = A_;
  SpMat AtA = SpMat(Acol.transpose()) * Acol;
  SpMat Q = prior_precision(layout_, theta, priors_);
  SpMat out = Q + priors_.obs_precision() * AtA;
  out.makeCompressed();
  return out;
}

Eigen::VectorXd GaussianLatentModel::linear_predictor_variance(const SelectedInverse& sigma) const {
  Eigen::VectorXd out(A_.rows());
  std::vector<std::pair<int, double>> row;
  for (int r = 0; r < A_.outerSize(); ++r) {
    row.clear();
    for (SpMatRow::InnerIterator it(A_, r); it; ++it) row.emplace_back(static_cast<int>(it.col()), it.value());
    double s = 0.0;
    for (std::size_t a = 0; a < row.size(); ++a) {
      s += row[a].second * row[a].second * sigma(row[a].first, row[a].first);
      for (std::size_t b = 0; b < a; ++b)
        s += 2.0 * row[a].second * row[b].second * sigma(row[a].first, row[b].first);
    }
    out[r] = s;
  }
  return out;
}

ConditionalGaussian conditional(const HyperParams& theta, const ModelFrame& frame, const PriorSpec& priors) {
  return GaussianLatentModel(frame, priors).conditional(theta);
}

double log_marginal(const HyperParams& theta, const ModelFrame& frame, const PriorSpec& priors) {
  return GaussianLatentModel(frame, priors).log_marginal(theta);
}

// ---------------------------------------------------------------------------
// Mode search

namespace {

Eigen::VectorXd fd_gradient(const LogDensity& f, const Eigen::VectorXd& x, double fx, double h,
                            int threads) {
  const int d = static_cast<int>(x.size());
  std::vector<double> fp(d), fm(d);
  parallel_for(static_cast<std::size_t>(2 * d), threads, [&](std::size_t t) {
    const int i = static_cast<int>(t / 2);
    Eigen::VectorXd y = x;
    if (t % 2 == 0) {
      y[i] += h;
      fp[i] = f(y);
    } else {
      y[i] -= h;
      fm[i] = f(y);
    }
  });
  Eigen::VectorXd g(d);
  for (int i = 0; i < d; ++i) {
    const bool p = std::isfinite(fp[i]);
    const bool m = std::isfinite(fm[i]);
    if (p && m)
      g[i] = (fp[i] - fm[i]) / (2.0 * h);
    else if (p)
      g[i] = (fp[i] - fx) / h;
    else if (m)
      g[i] = (fx - fm[i]) / h;
    else
      g[i] = 0.0;
  }
  return g;
}

Eigen::MatrixXd fd_hessian(const LogDensity& f, const Eigen::VectorXd& x, double fx, double h,
                           int threads) {
  const int d = static_cast<int>(x.size());
  struct Probe {
    int i, j, si, sj;
  };
  std::vector<Probe> probes;
  for (int i = 0; i < d; ++i) {
    probes.push_back({i, i, 1, 0});
    probes.push_back({i, i, -1, 0});
    for (int j = 0; j < i; ++j)
      for (int si : {1, -1})
        for (int sj : {1, -1}) probes.push_back({i, j, si, sj});
  }
  std::vector<double> val(probes.size());
  parallel_for(probes.size(), threads, [&](std::size_t t) {
    const auto& p = probes[t];
    Eigen::VectorXd y = x;
    y[p.i] += p.si * h;
    if (p.i != p.j) y[p.j] += p.sj * h;
    val[t] = f(y);
  });
  Eigen::MatrixXd H(d, d);
  std::size_t t = 0;
  for (int i = 0; i < d; ++i) {
    H(i, i) = (val[t] - 2.0 * fx + val[t + 1]) / (h * h);
    t += 2;
    for (int j = 0; j < i; ++j) {
      const double pp = val[t], pm = val[t + 1], mp = val[t + 2], mm = val[t + 3];
      t += 4;
      H(i, j) = H(j, i) = (pp - pm - mp + mm) / (4.0 * h * h);
    }
  }
  return H;
}

bool negative_definite(const Eigen::MatrixXd& H) {
  if (!H.allFinite()) return false;
  Eigen::LLT<Eigen::MatrixXd> llt(-H);
  return llt.info() == Eigen::Success;
}

}  // namespace

ModeResult find_mode(const LogDensity& f, const Eigen::VectorXd& init, const ModeSearchConfig& cfg) {
  const int d = static_cast<int>(init.size());
  ModeResult res;
  Eigen::VectorXd x = init;
  double fx = f(x);
  if (!std::isfinite(fx)) throw std::invalid_argument("log density is not finite at the initial point");
  Eigen::VectorXd g = fd_gradient(f, x, fx, cfg.fd_step, cfg.threads);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(d, d);
  bool fresh = true;
  res.trace.push_back(fx);

  int iter = 0;
  for (; iter < cfg.max_iter; ++iter) {
    if (g.norm() < cfg.grad_tol) break;
    Eigen::VectorXd dir = B * g;
    if (g.dot(dir) <= 0.0) {
      B.setIdentity();
      fresh = true;
      dir = g;
    }
    if (dir.norm() > cfg.max_step) dir *= cfg.max_step / dir.norm();
    const double slope = g.dot(dir);
    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd xn;
    double fn = kNegInf;
    for (int ls = 0; ls < 50; ++ls, t *= 0.5) {
      xn = x + t * dir;
      fn = f(xn);
      if (std::isfinite(fn) && fn >= fx + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (fresh) break;
      B.setIdentity();
      fresh = true;
      continue;
    }
    const Eigen::VectorXd gn = fd_gradient(f, xn, fn, cfg.fd_step, cfg.threads);
    const Eigen::VectorXd s = xn - x;
    const Eigen::VectorXd yv = g - gn;
    const double sy = s.dot(yv);
    if (sy > 1e-12) {
      if (fresh) B *= sy / yv.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
      B = (I - rho * s * yv.transpose()) * B * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
      fresh = false;
    }
    x = xn;
    fx = fn;
    g = gn;
    res.trace.push_back(fx);
    if (s.norm() < 1e-12) break;
  }

  // Newton polish on the finite-difference Hessian.
  Eigen::MatrixXd H = fd_hessian(f, x, fx, cfg.hessian_step, cfg.threads);
  for (int k = 0; k < 8 && g.norm() >= cfg.grad_tol && negative_definite(H); ++k) {
    Eigen::VectorXd step = H.ldlt().solve(-g);
    if (step.norm() > cfg.max_step) step *= cfg.max_step / step.norm();
    bool moved = false;
    // Near the mode f changes by less than its rounding noise, so a step is
    // judged by the gradient as long as f does not drop beyond that noise.
    const double f_noise = 1e-10 * (1.0 + std::abs(fx));
    for (double t = 1.0; t > 1e-6; t *= 0.5) {
      const Eigen::VectorXd xn = x + t * step;
      const double fn = f(xn);
      if (!std::isfinite(fn) || fn < fx - f_noise) continue;
      const Eigen::VectorXd gn = fd_gradient(f, xn, fn, cfg.fd_step, cfg.threads);
      if (fn > fx + f_noise || gn.norm() < g.norm()) {
        x = xn;
        fx = fn;
        g = gn;
        res.trace.push_back(fx);
        moved = true;
        break;
      }
    }
    ++iter;
    if (!moved) break;
    H = fd_hessian(f, x, fx, cfg.hessian_step, cfg.threads);
  }

  res.psi = x;
  res.log_post = fx;
  res.gradient = g;
  res.hessian = H;
  res.iterations = iter;
  res.converged = g.norm() < cfg.grad_tol;
  res.hessian_negative_definite = negative_definite(H);
  return res;
}

namespace {

LogDensity model_density(const GaussianLatentModel& model) {
  return [&model](const Eigen::VectorXd& psi) {
    if (!psi.allFinite() || psi.cwiseAbs().maxCoeff() > 25.0) return kNegInf;
    try {
      const double v = model.log_marginal(HyperParams::from_log(psi));
      return std::isfinite(v) ? v : kNegInf;
    } catch (const FactorizationError&) {
      return kNegInf;
    } catch (const std::invalid_argument&) {
      return kNegInf;
    }
  };
}

}  // namespace

ModeResult find_mode(const GaussianLatentModel& model, const HyperParams& init, const ModeSearchConfig& cfg) {
  return find_mode(model_density(model), init.to_log(), cfg);
}

// ---------------------------------------------------------------------------
// Grid

HyperGrid explore_grid(const LogDensity& f, const ModeResult& mode, const GridConfig& cfg) {
  if (!(cfg.step > 0.0) || !(cfg.threshold > 0.0)) throw std::invalid_argument("grid step and threshold must be positive");
  const int d = static_cast<int>(mode.psi.size());
  HyperGrid grid;
  grid.mode = mode.psi;
  grid.curvature = mode.hessian;

  bool standardized = false;
  if (mode.hessian.rows() == d && mode.hessian.allFinite()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-mode.hessian);
    if (es.info() == Eigen::Success && es.eigenvalues().minCoeff() > 0.0) {
      grid.z_to_psi = es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal();
      standardized = true;
    }
  }
  if (!standardized) {
    grid.axis_fallback = true;
    grid.warnings.push_back("curvature at the mode is not negative definite; using axis-aligned grid steps");
    grid.z_to_psi = Eigen::MatrixXd::Identity(d, d);
    for (int i = 0; i < d; ++i) {
      const double h = mode.hessian.rows() == d ? mode.hessian(i, i) : 0.0;
      grid.z_to_psi(i, i) = (std::isfinite(h) && h < 0.0) ? 1.0 / std::sqrt(-h) : 1.0;
    }
  }

  const double lp0 = mode.log_post;
  auto make_point = [&](const Eigen::VectorXd& z) {
    GridPoint p;
    p.z = z;
    p.psi = grid.mode + grid.z_to_psi * z;
    return p;
  };

  grid.points.push_back(make_point(Eigen::VectorXd::Zero(d)));
  grid.points.back().log_post = lp0;

  // Axis walks; each of the 2d directions is independent.
  struct Walk {
    std::vector<GridPoint> kept;
    std::vector<double> drops;  // drop at k = 1, 2, ... while within threshold
  };
  std::vector<Walk> walks(static_cast<std::size_t>(2 * d));
  parallel_for(walks.size(), cfg.threads, [&](std::size_t w) {
    const int axis = static_cast<int>(w / 2);
    const double sign = (w % 2 == 0) ? -1.0 : 1.0;
    for (int k = 1; k <= cfg.max_axis_steps; ++k) {
      Eigen::VectorXd z = Eigen::VectorXd::Zero(d);
      z[axis] = sign * k * cfg.step;
      GridPoint p = make_point(z);
      p.log_post = f(p.psi);
      if (!std::isfinite(p.log_post)) break;
      const double drop = lp0 - p.log_post;
      if (k == 1 || drop <= cfg.threshold) walks[w].kept.push_back(p);
      if (drop > cfg.threshold) break;
      walks[w].drops.push_back(drop);
    }
  });
  for (const auto& w : walks)
    for (const auto& p : w.kept) grid.points.push_back(p);

  // Off-axis lattice fill.
  std::vector<int> lo(d), hi(d);
  for (int i = 0; i < d; ++i) {
    lo[i] = -static_cast<int>(walks[2 * i].drops.size());
    hi[i] = static_cast<int>(walks[2 * i + 1].drops.size());
  }
  auto axis_drop = [&](int i, int k) {
    if (k == 0) return 0.0;
    const auto& drops = walks[2 * i + (k > 0 ? 1 : 0)].drops;
    return std::max(0.0, drops[static_cast<std::size_t>(std::abs(k) - 1)]);
  };
  std::vector<Eigen::VectorXd> candidates;
  std::vector<int> k(lo);
  while (true) {
    int nonzero = 0;
    double predicted = 0.0;
    for (int i = 0; i < d; ++i) {
      if (k[i] != 0) ++nonzero;
      predicted += axis_drop(i, k[i]);
    }
    if (nonzero >= 2 && predicted <= cfg.threshold) {
      Eigen::VectorXd z(d);
      for (int i = 0; i < d; ++i) z[i] = k[i] * cfg.step;
      candidates.push_back(z);
    }
    int i = d - 1;
    while (i >= 0 && k[i] == hi[i]) {
      k[i] = lo[i];
      --i;
    }
    if (i < 0) break;
    ++k[i];
  }
  std::vector<GridPoint> filled(candidates.size());
  parallel_for(candidates.size(), cfg.threads, [&](std::size_t c) {
    filled[c] = make_point(candidates[c]);
    filled[c].log_post = f(filled[c].psi);
  });
  for (auto& p : filled)
    if (std::isfinite(p.log_post) && lp0 - p.log_post <= cfg.threshold) grid.points.push_back(std::move(p));

  double best = kNegInf;
  for (std::size_t i = 0; i < grid.points.size(); ++i)
    if (grid.points[i].log_post > best) {
      best = grid.points[i].log_post;
      grid.mode_index = static_cast<int>(i);
    }
  double total = 0.0;
  for (auto& p : grid.points) total += (p.weight = std::exp(p.log_post - best));
  for (auto& p : grid.points) p.weight /= total;
  if (grid.points.size() == 1) grid.warnings.push_back("hyperparameter grid degenerated to a single point");
  return grid;
}

// ---------------------------------------------------------------------------
// Mixtures

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

void check_mixture(std::span<const double> w, std::span<const double> m, std::span<const double> s) {
  if (w.empty() || w.size() != m.size() || w.size() != s.size())
    throw std::invalid_argument("mixture components must be nonempty and of equal length");
}

}  // namespace

double mixture_cdf(std::span<const double> w, std::span<const double> m, std::span<const double> s, double x) {
  check_mixture(w, m, s);
  double c = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i)
    c += w[i] * (s[i] > 0.0 ? normal_cdf((x - m[i]) / s[i]) : (x >= m[i] ? 1.0 : 0.0));
  return c;
}

double mixture_quantile(std::span<const double> w, std::span<const double> m, std::span<const double> s,
                        double p) {
  check_mixture(w, m, s);
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  double total = 0.0;
  for (double v : w) total += v;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < w.size(); ++i) {
    lo = std::min(lo, m[i] - 12.0 * s[i]);
    hi = std::max(hi, m[i] + 12.0 * s[i]);
  }
  const double target = p * total;
  for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mixture_cdf(w, m, s, mid) < target)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

MarginalSummary mixture_summary(std::span<const double> w, std::span<const double> m,
                                std::span<const double> var, std::string name) {
  check_mixture(w, m, var);
  double total = 0.0, mean = 0.0, second = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    total += w[i];
    mean += w[i] * m[i];
    second += w[i] * (var[i] + m[i] * m[i]);
  }
  mean /= total;
  second /= total;
  std::vector<double> sd(var.size());
  for (std::size_t i = 0; i < var.size(); ++i) sd[i] = std::sqrt(std::max(0.0, var[i]));
  MarginalSummary out;
  out.name = std::move(name);
  out.mean = mean;
  out.sd = std::sqrt(std::max(0.0, second - mean * mean));
  if (w.size() == 1 || out.sd == 0.0) {
    out.q025 = mean - 1.959963984540054 * out.sd;
    out.q975 = mean + 1.959963984540054 * out.sd;
  } else {
    out.q025 = mixture_quantile(w, m, sd, 0.025);
    out.q975 = mixture_quantile(w, m, sd, 0.975);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fit

PointPosterior evaluate_point(const GaussianLatentModel& model, const HyperParams& theta, bool keep_full_field) {
  const auto cg = model.conditional(theta, keep_full_field);
  const auto& L = model.layout();
  const int nE = L.n_effects();
  PointPosterior p;
  p.theta = theta;
  p.log_post = model.log_marginal(cg);
  p.effect_mean = cg.mean.head(nE);
  p.effect_factor = cg.effect_factor->L();

  // The effect block of the inverse depends only on the effect factor.
  const Eigen::VectorXd eff_var = SelectedInverse(*cg.effect_factor).diagonal();
  p.effect_var.resize(nE);
  for (int e = 0; e < nE; ++e) p.effect_var[effect_slot(L, e)] = eff_var[e];

  if (keep_full_field) {
    SelectedInverse sigma(*cg.factor);
    p.mean = cg.mean;
    p.var = sigma.diagonal();
    p.eta_var = model.linear_predictor_variance(sigma);
  }
  return p;
}

std::vector<MarginalSummary> hyper_summaries(const ModeResult& mode, const HyperGrid& grid) {
  const int d = static_cast<int>(mode.psi.size());
  Eigen::MatrixXd cov;
  if (negative_definite(mode.hessian)) {
    cov = (-mode.hessian).inverse();
  } else {
    // Use the grid spread along each axis.
    cov = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& p : grid.points) mean += p.weight * p.psi;
    for (const auto& p : grid.points) cov += p.weight * (p.psi - mean) * (p.psi - mean).transpose();
  }
  std::vector<MarginalSummary> out;
  const auto& names = HyperParams::names();
  for (int i = 0; i < d; ++i) {
    const double mu = mode.psi[i];
    const double s2 = std::max(0.0, cov(i, i));
    const double s = std::sqrt(s2);
    MarginalSummary m;
    m.name = names[static_cast<std::size_t>(i)];
    m.mean = std::exp(mu + 0.5 * s2);
    m.sd = m.mean * std::sqrt(std::expm1(s2));
    m.q025 = std::exp(mu - 1.959963984540054 * s);
    m.q975 = std::exp(mu + 1.959963984540054 * s);
    out.push_back(m);
  }
  return out;
}

namespace {

void summarize(FitResult& fr) {
  const auto& L = fr.layout;
  std::vector<double> w, m, v;
  for (const auto& p : fr.points) w.push_back(p.weight);
  fr.fixed_summary.clear();
  for (int k = 0; k < L.n_fixed; ++k) {
    m.clear();
    v.clear();
    for (const auto& p : fr.points) {
      m.push_back(p.effect_mean[L.fixed_slot(k)]);
      v.push_back(p.effect_var[L.fixed_slot(k)]);
    }
    fr.fixed_summary.push_back(mixture_summary(w, m, v, L.fixed_names[static_cast<std::size_t>(k)]));
  }
  fr.hyper_summary = hyper_summaries(fr.mode, fr.grid);
  fr.hyper_log_mean = Eigen::VectorXd::Zero(HyperParams::kDim);
  for (const auto& p : fr.grid.points) fr.hyper_log_mean += p.weight * p.psi;
}

std::vector<PointPosterior> evaluate_grid(const GaussianLatentModel& model, const HyperGrid& grid,
                                          bool keep_full, int threads) {
  std::vector<PointPosterior> points(grid.points.size());
  parallel_for(points.size(), threads, [&](std::size_t i) {
    points[i] = evaluate_point(model, HyperParams::from_log(grid.points[i].psi), keep_full);
    points[i].weight = grid.points[i].weight;
  });
  return points;
}

}  // namespace

FitResult fit(const ModelFrame& frame, const PriorSpec& priors, const InferenceConfig& cfg) {
  GaussianLatentModel model(frame, priors);
  FitResult fr;
  fr.layout = model.layout();
  fr.centering = frame.centering;
  fr.options = frame.options;
  fr.priors = priors;

  ModeSearchConfig mc = cfg.mode;
  mc.threads = std::max(mc.threads, cfg.threads);
  GridConfig gc = cfg.grid;
  gc.threads = std::max(gc.threads, cfg.threads);

  const auto f = model_density(model);
  fr.mode = find_mode(f, cfg.init.to_log(), mc);
  if (!fr.mode.converged)
    fr.warnings.push_back("hyperparameter mode search did not reach the gradient tolerance (|g| = " +
                          std::to_string(fr.mode.gradient.norm()) + ")");
  fr.grid = explore_grid(f, fr.mode, gc);
  for (const auto& w : fr.grid.warnings) fr.warnings.push_back(w);
  fr.points = evaluate_grid(model, fr.grid, cfg.keep_full_field, gc.threads);
  summarize(fr);
  return fr;
}

FitResult rehydrate(const FitResult& fit, const ModelFrame& frame, int threads) {
  GaussianLatentModel model(frame, fit.priors);
  const auto& a = model.layout();
  const auto& b = fit.layout;
  if (a.n_fixed != b.n_fixed || a.n_sessions != b.n_sessions || a.n_patients != b.n_patients || a.n_obs != b.n_obs ||
      a.fixed_names != b.fixed_names || a.session_ids != b.session_ids || a.patient_ids != b.patient_ids ||
      a.session_patient != b.session_patient)
    throw std::invalid_argument("training data does not match the fitted layout");
  if (!(frame.centering == fit.centering)) throw std::invalid_argument("training frame centering does not match the fit");
  FitResult out = fit;
  out.layout = a;
  out.points = evaluate_grid(model, fit.grid, true, threads);
  return out;
}

std::vector<MarginalSummary> marginals(const FitResult& fr, std::span<const int> slots) {
  if (fr.points.empty()) throw std::invalid_argument("fit has an empty grid");
  const auto& L = fr.layout;
  const int nE = L.n_effects();
  std::vector<double> w, m, v;
  for (const auto& p : fr.points) w.push_back(p.weight);
  std::vector<MarginalSummary> out;
  for (int slot : slots) {
    if (slot < 0 || slot >= L.dimension()) throw std::out_of_range("latent slot out of range");
    if (slot >= nE && !fr.has_full_field())
      throw std::invalid_argument("O-U marginals need the full latent field; rehydrate the fit first");
    m.clear();
    v.clear();
    for (const auto& p : fr.points) {
      m.push_back(slot < nE ? p.effect_mean[slot] : p.mean[slot]);
      v.push_back(slot < nE ? p.effect_var[slot] : p.var[slot]);
    }
    std::string name;
    if (slot < L.n_fixed)
      name = L.fixed_names[static_cast<std::size_t>(slot)];
    else if (slot < L.n_fixed + L.n_sessions)
      name = "session:" + L.session_ids[static_cast<std::size_t>(slot - L.n_fixed)];
    else if (slot < nE)
      name = "patient:" + L.patient_ids[static_cast<std::size_t>(slot - L.n_fixed - L.n_sessions)];
    else
      name = "ou:" + std::to_string(slot - nE);
    out.push_back(mixture_summary(w, m, v, std::move(name)));
  }
  return out;
}

std::vector<int> draw_grid_indices(const FitResult& fr, int n, std::uint64_t seed) {
  if (fr.points.empty()) throw std::invalid_argument("fit has an empty grid");
  if (n < 0) throw std::invalid_argument("number of draws must be non-negative");
  std::vector<double> w;
  for (const auto& p : fr.points) w.push_back(p.weight);
  std::mt19937_64 rng(mix_seed(seed, 0));
  std::discrete_distribution<int> pick(w.begin(), w.end());
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

std::vector<JointDraw> sample_joint(const FitResult& fr, int n, std::uint64_t seed) {
  const auto idx = draw_grid_indices(fr, n, seed);
  const auto& L = fr.layout;
  const int nE = L.n_effects();
  std::vector<JointDraw> out(static_cast<std::size_t>(n));
  for (int d = 0; d < n; ++d) {
    const auto& p = fr.points[static_cast<std::size_t>(idx[d])];
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(d) + 1));
    std::normal_distribution<double> normal;
    Eigen::VectorXd z(nE);
    for (int e = 0; e < nE; ++e) z[e] = normal(rng);
    p.effect_factor.transpose().triangularView<Eigen::Upper>().solveInPlace(z);
    JointDraw jd;
    jd.point = idx[d];
    jd.theta = p.theta;
    jd.x = p.effect_mean;
    for (int e = 0; e < nE; ++e) jd.x[effect_slot(L, e)] += z[e];
    out[static_cast<std::size_t>(d)] = std::move(jd);
  }
  return out;
}

std::vector<JointDraw> sample_joint_full(const FitResult& fr, const GaussianLatentModel& model, int n,
                                         std::uint64_t seed, int threads) {
  if (!(model.layout() == fr.layout)) throw std::invalid_argument("model does not match the fitted layout");
  const auto idx = draw_grid_indices(fr, n, seed);
  std::map<int, std::vector<int>> by_point;
  for (int d = 0; d < n; ++d) by_point[idx[d]].push_back(d);
  std::vector<std::pair<int, std::vector<int>>> groups(by_point.begin(), by_point.end());
  std::vector<JointDraw> out(static_cast<std::size_t>(n));
  const int dim = fr.layout.dimension();
  parallel_for(groups.size(), threads, [&](std::size_t g) {
    const auto& [point, draws] = groups[g];
    const auto cg = model.conditional(fr.points[static_cast<std::size_t>(point)].theta);
    for (int d : draws) {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(d) + 1));
      std::normal_distribution<double> normal;
      Eigen::VectorXd z(dim);
      for (int i = 0; i < dim; ++i) z[i] = normal(rng);
      JointDraw jd;
      jd.point = point;
      jd.theta = cg.theta;
      jd.x = cg.mean + cg.factor->sample_offset(z);
      out[static_cast<std::size_t>(d)] = std::move(jd);
    }
  });
  return out;
}

}  // namespace vo2lgm
