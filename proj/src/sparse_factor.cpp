#include "vo2lgm/sparse_factor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/SparseCholesky>

namespace vo2lgm {

Eigen::SparseMatrix<double> permute_lower(const Eigen::SparseMatrix<double>& A,
                                          const std::vector<int>& perm) {
  const int n = static_cast<int>(A.rows());
  if (A.cols() != n || static_cast<int>(perm.size()) != n)
    throw std::invalid_argument("permute_lower: size mismatch");
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(A.nonZeros()));
  for (int c = 0; c < A.outerSize(); ++c)
    for (Eigen::SparseMatrix<double>::InnerIterator it(A, c); it; ++it) {
      if (it.row() < c) continue;
      const int pi = perm[it.row()];
      const int pj = perm[c];
      trips.emplace_back(std::max(pi, pj), std::min(pi, pj), it.value());
    }
  Eigen::SparseMatrix<double> B(n, n);
  B.setFromTriplets(trips.begin(), trips.end());
  return B;
}

SparseFactor::SparseFactor(const Eigen::SparseMatrix<double>& permuted_lower, std::vector<int> perm)
    : perm_(std::move(perm)) {
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::NaturalOrdering<int>> llt;
  llt.analyzePattern(permuted_lower);
  llt.factorize(permuted_lower);
  if (llt.info() != Eigen::Success)
    throw FactorizationError("Cholesky factorization failed: matrix is not positive definite");
  L_ = llt.matrixL();
  L_.makeCompressed();
  check_pivots();
}

void SparseFactor::check_pivots() const {
  if (L_.rows() != size() || L_.cols() != size()) throw std::invalid_argument("factor size does not match ordering");
  for (int j = 0; j < L_.outerSize(); ++j) {
    const auto b = L_.outerIndexPtr()[j];
    if (b >= L_.outerIndexPtr()[j + 1] || L_.innerIndexPtr()[b] != j || !(L_.valuePtr()[b] > 0.0) ||
        !std::isfinite(L_.valuePtr()[b]))
      throw FactorizationError("Cholesky factorization produced an invalid pivot at column " +
                               std::to_string(j));
  }
}

SparseFactor SparseFactor::from_lower_factor(Eigen::SparseMatrix<double> L, std::vector<int> perm) {
  SparseFactor f;
  f.L_ = std::move(L);
  f.L_.makeCompressed();
  f.perm_ = std::move(perm);
  f.check_pivots();
  return f;
}

SparseFactor SparseFactor::from_matrix(const Eigen::SparseMatrix<double>& A, std::vector<int> perm) {
  auto B = permute_lower(A, perm);
  return SparseFactor(B, std::move(perm));
}

double SparseFactor::log_det() const {
  double s = 0.0;
  for (int j = 0; j < L_.outerSize(); ++j) s += std::log(L_.valuePtr()[L_.outerIndexPtr()[j]]);
  return 2.0 * s;
}

Eigen::VectorXd SparseFactor::solve(const Eigen::VectorXd& b) const {
  const int n = size();
  Eigen::VectorXd pb(n);
  for (int i = 0; i < n; ++i) pb[perm_[i]] = b[i];
  L_.triangularView<Eigen::Lower>().solveInPlace(pb);
  L_.transpose().triangularView<Eigen::Upper>().solveInPlace(pb);
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x[i] = pb[perm_[i]];
  return x;
}

Eigen::VectorXd SparseFactor::sample_offset(const Eigen::VectorXd& z) const {
  const int n = size();
  Eigen::VectorXd w = z;
  L_.transpose().triangularView<Eigen::Upper>().solveInPlace(w);
  Eigen::VectorXd x(n);
  for (int i = 0; i < n; ++i) x[i] = w[perm_[i]];
  return x;
}

// ---------------------------------------------------------------------------

SelectedInverse::SelectedInverse(const SparseFactor& factor) : factor_(&factor) {
  const auto& L = factor.L();
  const int n = static_cast<int>(L.cols());
  const auto* outer = L.outerIndexPtr();
  const auto* inner = L.innerIndexPtr();
  const double* lx = L.valuePtr();
  values_.assign(static_cast<std::size_t>(L.nonZeros()), 0.0);

  std::vector<double> acc;
  for (int j = n - 1; j >= 0; --j) {
    const int b = outer[j];
    const int e = outer[j + 1];
    const double ljj = lx[b];
    const int m = e - b - 1;
    acc.assign(static_cast<std::size_t>(m), 0.0);
    // Sigma(i, j) = -(1/L_jj) sum_k L(k, j) Sigma(i, k) over off-diagonal k in column j.
    for (int a = 0; a < m; ++a) {
      const int i = inner[b + 1 + a];
      double s = 0.0;
      for (int c = 0; c < m; ++c) {
        const int k = inner[b + 1 + c];
        s += lx[b + 1 + c] * (i >= k ? at_position(i, k) : at_position(k, i));
      }
      acc[a] = -s / ljj;
    }
    double diag = 1.0 / (ljj * ljj);
    for (int a = 0; a < m; ++a) {
      values_[b + 1 + a] = acc[a];
      diag -= lx[b + 1 + a] * acc[a] / ljj;
    }
    values_[b] = diag;
  }
}

double SelectedInverse::at_position(int row, int col) const {
  const auto& L = factor_->L();
  const auto* outer = L.outerIndexPtr();
  const auto* inner = L.innerIndexPtr();
  const int* first = inner + outer[col];
  const int* last = inner + outer[col + 1];
  const int* it = std::lower_bound(first, last, row);
  if (it == last || *it != row)
    throw std::out_of_range("selected inverse entry (" + std::to_string(row) + ", " +
                            std::to_string(col) + ") outside the factor pattern");
  return values_[static_cast<std::size_t>(it - inner)];
}

double SelectedInverse::operator()(int i, int j) const {
  const auto& perm = factor_->perm();
  const int pi = perm[i];
  const int pj = perm[j];
  return pi >= pj ? at_position(pi, pj) : at_position(pj, pi);
}

Eigen::VectorXd SelectedInverse::diagonal() const {
  const auto& perm = factor_->perm();
  const auto* outer = factor_->L().outerIndexPtr();
  Eigen::VectorXd d(static_cast<Eigen::Index>(perm.size()));
  for (std::size_t i = 0; i < perm.size(); ++i) d[static_cast<Eigen::Index>(i)] = values_[outer[perm[i]]];
  return d;
}

}  // namespace vo2lgm
