#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace vo2lgm {

class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cholesky factor L L^T = P A P^T of a sparse symmetric positive definite
/// matrix under a caller-supplied ordering. `perm[i]` is the position of
/// original index i. Vectors passed in or out are in the original order.
class SparseFactor {
 public:
  SparseFactor() = default;

  /// `permuted_lower` holds the lower triangle of P A P^T.
  SparseFactor(const Eigen::SparseMatrix<double>& permuted_lower, std::vector<int> perm);

  /// Factorizes A after applying `perm`. Only the lower triangle of A is read.
  static SparseFactor from_matrix(const Eigen::SparseMatrix<double>& A, std::vector<int> perm);
  /// Wraps an existing lower Cholesky factor of P A P^T. Its pattern must be
  /// closed under elimination (as produced by a symbolic factorization).
  static SparseFactor from_lower_factor(Eigen::SparseMatrix<double> L, std::vector<int> perm);

  int size() const { return static_cast<int>(perm_.size()); }
  double log_det() const;
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  /// Returns L^{-T} z mapped back to the original order; a draw from
  /// N(0, A^{-1}) when z is standard normal (z indexed by position).
  Eigen::VectorXd sample_offset(const Eigen::VectorXd& z) const;

  const Eigen::SparseMatrix<double>& L() const { return L_; }
  const std::vector<int>& perm() const { return perm_; }

 private:
  void check_pivots() const;

  Eigen::SparseMatrix<double> L_;
  std::vector<int> perm_;
};

/// Entries of A^{-1} on the sparsity pattern of the Cholesky factor, by the
/// Takahashi recursion. Every (i, j) pair that is structurally nonzero in A
/// is available. The factor must outlive this object.
class SelectedInverse {
 public:
  explicit SelectedInverse(const SparseFactor& factor);

  /// Entry (i, j) in original indexing; throws std::out_of_range when the
  /// pair lies outside the factor pattern.
  double operator()(int i, int j) const;
  Eigen::VectorXd diagonal() const;

 private:
  double at_position(int row, int col) const;  // requires row >= col

  const SparseFactor* factor_;
  std::vector<double> values_;  // aligned with factor_->L().valuePtr()
};

/// P A P^T as a lower-triangular matrix, built from the lower triangle of A.
Eigen::SparseMatrix<double> permute_lower(const Eigen::SparseMatrix<double>& A,
                                          const std::vector<int>& perm);

}  // namespace vo2lgm
