#pragma once
// Multi-output ridge regression with a shared penalty, closed-form and
// cross-validated over a log-spaced grid.

#include "resdis/common.hpp"

#include <cmath>
#include <limits>
#include <utility>

namespace resdis {

/// Log-spaced, strictly increasing positive penalties.
struct AlphaGrid {
  std::vector<double> values;
  std::size_t selection = 0;

  static AlphaGrid log_spaced(double lo, double hi, std::size_t count) {
    if (!(lo > 0) || !(hi > lo) || count < 2)
      throw ValidationError("alpha grid needs 0 < lo < hi and at least 2 points");
    AlphaGrid g;
    const double a = std::log10(lo), b = std::log10(hi);
    for (std::size_t i = 0; i < count; ++i)
      g.values.push_back(std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1)));
    return g;
  }

  void validate() const {
    if (values.size() < 2) throw ValidationError("alpha grid needs at least 2 points");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!(values[i] > 0) || !std::isfinite(values[i])) throw ValidationError("alpha grid values must be positive");
      if (i > 0 && !(values[i] > values[i - 1])) throw ValidationError("alpha grid must be strictly increasing");
    }
  }

  double selected() const { return values.at(selection); }
};

/// Contiguous [begin, end) blocks; sizes differ by at most one, larger first.
inline std::vector<std::pair<Index, Index>> fold_bounds(Index n, Index folds) {
  if (folds < 2) throw ValidationError("need at least 2 folds");
  if (n < folds) throw ValidationError("fewer rows (" + std::to_string(n) + ") than folds (" + std::to_string(folds) + ")");
  std::vector<std::pair<Index, Index>> out;
  Index base = n / folds, extra = n % folds, start = 0;
  for (Index f = 0; f < folds; ++f) {
    Index len = base + (f < extra ? 1 : 0);
    out.emplace_back(start, start + len);
    start += len;
  }
  return out;
}

/// Rows of m outside [begin, end).
inline Matrix rows_excluding(const Eigen::Ref<const Matrix>& m, Index begin, Index end) {
  Matrix out(m.rows() - (end - begin), m.cols());
  out.topRows(begin) = m.topRows(begin);
  out.bottomRows(m.rows() - end) = m.bottomRows(m.rows() - end);
  return out;
}

/// Linear map W (d_in x d_out) with optional centering means. predict(X) is
/// (X - x_mean) W + y_mean; an uncentered map has zero means.
struct RidgeMap {
  Matrix W;
  double alpha = 0;
  Index cv_folds = 0;
  double train_score = std::numeric_limits<double>::quiet_NaN();
  RowVector x_mean;
  RowVector y_mean;

  Index d_in() const { return W.rows(); }
  Index d_out() const { return W.cols(); }

  Matrix predict(const Eigen::Ref<const Matrix>& X) const {
    if (X.cols() != W.rows()) throw ValidationError("predictor width does not match map");
    Matrix out = X * W;
    if (x_mean.size() == W.rows()) out.rowwise() -= x_mean * W;
    if (y_mean.size() == W.cols()) out.rowwise() += y_mean;
    return out;
  }
};

namespace detail {

/// Solves (X'X + alpha I) W = X'Y. Cholesky for alpha > 0, SVD when the
/// factorization fails or alpha == 0 (where rank deficiency is an error).
inline Matrix solve_ridge(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y, double alpha) {
  const Index p = X.cols();
  if (alpha > 0) {
    Matrix A = Matrix::Zero(p, p);
    A.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    A.diagonal().array() += alpha;
    Eigen::LLT<Matrix> llt(A.selfadjointView<Eigen::Lower>());
    if (llt.info() == Eigen::Success) return llt.solve(X.transpose() * Y);
  }
  Eigen::BDCSVD<Matrix> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  if (alpha == 0) {
    const double tol = std::max(X.rows(), X.cols()) * std::numeric_limits<double>::epsilon() *
                       (s.size() > 0 ? s(0) : 0.0);
    Index rank = 0;
    for (Index i = 0; i < s.size(); ++i) rank += s(i) > tol ? 1 : 0;
    if (rank < p) throw SingularError("alpha = 0 with rank-deficient predictors (rank " +
                                      std::to_string(rank) + " < " + std::to_string(p) + ")");
  }
  Vector shrink = s.array() / (s.array().square() + alpha);
  return svd.matrixV() * shrink.asDiagonal() * (svd.matrixU().transpose() * Y);
}

/// Eigen-decomposed Gram for evaluating many penalties on one training split.
class RidgePath {
 public:
  RidgePath(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y) {
    Matrix G = Matrix::Zero(X.cols(), X.cols());
    G.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(G.selfadjointView<Eigen::Lower>());
    evals_ = eig.eigenvalues().cwiseMax(0.0);
    V_ = eig.eigenvectors();
    Z_ = V_.transpose() * (X.transpose() * Y);
  }

  Matrix weights(double alpha) const {
    Vector inv = (evals_.array() + alpha).inverse();
    return V_ * (inv.asDiagonal() * Z_);
  }

  /// Predictions for rows projected into the eigenbasis (Xv = X_val V).
  Matrix predict_projected(const Eigen::Ref<const Matrix>& Xv, double alpha) const {
    Vector inv = (evals_.array() + alpha).inverse();
    return Xv * (inv.asDiagonal() * Z_);
  }

  const Matrix& basis() const noexcept { return V_; }

 private:
  Vector evals_;
  Matrix V_;
  Matrix Z_;
};

}  // namespace detail

/// Closed-form ridge without centering: W solves (X'X + alpha I) W = X'Y.
inline RidgeMap ridge_fit(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y, double alpha) {
  if (X.rows() < 1) throw ValidationError("ridge_fit needs at least one row");
  if (X.rows() != Y.rows()) throw ValidationError("X and Y row counts differ");
  if (!(alpha >= 0) || !std::isfinite(alpha)) throw ValidationError("alpha must be finite and >= 0");
  if (!X.allFinite() || !Y.allFinite()) throw ValidationError("non-finite ridge inputs");
  RidgeMap m;
  m.W = detail::solve_ridge(X, Y, alpha);
  m.alpha = alpha;
  return m;
}

/// Ridge with column centering: means come from X and Y and are stored in the map.
inline RidgeMap ridge_fit_centered(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y, double alpha) {
  RowVector mx = col_means(X), my = col_means(Y);
  Matrix Xc = X.rowwise() - mx;
  Matrix Yc = Y.rowwise() - my;
  RidgeMap m = ridge_fit(Xc, Yc, alpha);
  m.x_mean = std::move(mx);
  m.y_mean = std::move(my);
  return m;
}

/// Picks the grid penalty minimising mean held-out MSE over contiguous folds,
/// then refits on all rows. train_score is the column-averaged held-out R^2 at
/// the chosen penalty. Centering statistics are recomputed inside each fold.
inline RidgeMap ridge_fit_cv(const Eigen::Ref<const Matrix>& X, const Eigen::Ref<const Matrix>& Y,
                             AlphaGrid& grid, Index folds, bool center = true) {
  grid.validate();
  if (X.rows() != Y.rows()) throw ValidationError("X and Y row counts differ");
  if (!X.allFinite() || !Y.allFinite()) throw ValidationError("non-finite ridge inputs");
  const auto bounds = fold_bounds(X.rows(), folds);
  const std::size_t na = grid.values.size();
  std::vector<double> sse(na, 0.0);
  std::vector<Matrix> held(na, Matrix(X.rows(), Y.cols()));

  for (const auto& [b, e] : bounds) {
    Matrix Xtr = rows_excluding(X, b, e), Ytr = rows_excluding(Y, b, e);
    Matrix Xte = X.middleRows(b, e - b), Yte = Y.middleRows(b, e - b);
    RowVector mx = RowVector::Zero(X.cols()), my = RowVector::Zero(Y.cols());
    if (center) {
      mx = col_means(Xtr);
      my = col_means(Ytr);
      Xtr.rowwise() -= mx;
      Ytr.rowwise() -= my;
      Xte.rowwise() -= mx;
    }
    detail::RidgePath path(Xtr, Ytr);
    Matrix Xv = Xte * path.basis();
    for (std::size_t a = 0; a < na; ++a) {
      Matrix pred = path.predict_projected(Xv, grid.values[a]);
      pred.rowwise() += my;
      sse[a] += (pred - Yte).squaredNorm();
      held[a].middleRows(b, e - b) = pred;
    }
  }
  std::size_t best = 0;
  for (std::size_t a = 1; a < na; ++a)
    if (sse[a] < sse[best]) best = a;
  grid.selection = best;

  RidgeMap m = center ? ridge_fit_centered(X, Y, grid.values[best]) : ridge_fit(X, Y, grid.values[best]);
  m.cv_folds = folds;
  // Column-averaged R^2 of the concatenated held-out predictions.
  RowVector ymean = col_means(Y);
  double r2 = 0;
  Index counted = 0;
  for (Index j = 0; j < Y.cols(); ++j) {
    double sst = (Y.col(j).array() - ymean(j)).square().sum();
    if (sst <= 0) continue;
    r2 += 1.0 - (held[best].col(j) - Y.col(j)).squaredNorm() / sst;
    ++counted;
  }
  m.train_score = counted > 0 ? r2 / static_cast<double>(counted) : 0.0;
  return m;
}

}  // namespace resdis
