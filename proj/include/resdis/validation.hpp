#pragma once
// Disentanglement diagnostics: token-level cosine similarity, sample-axis
// column correlations and cross-probing of residual embeddings.

#include "resdis/probing.hpp"
#include "resdis/residualizer.hpp"

#include <random>

namespace resdis {

struct SimilarityReport {
  Matrix mean_abs_cos;  ///< k x k, symmetric, unit diagonal
  Index n_tokens = 0;   ///< tokens averaged
  Index excluded_zero_norm = 0;
  std::string variant;  ///< "hidden_states" or "residuals"
  std::vector<std::string> labels;

  double max_off_diagonal() const {
    double m = 0;
    for (Index i = 0; i < mean_abs_cos.rows(); ++i)
      for (Index j = 0; j < mean_abs_cos.cols(); ++j)
        if (i != j) m = std::max(m, mean_abs_cos(i, j));
    return m;
  }
  double mean_off_diagonal() const {
    const Index k = mean_abs_cos.rows();
    if (k < 2) return 0;
    return (mean_abs_cos.sum() - mean_abs_cos.trace()) / static_cast<double>(k * (k - 1));
  }
};

/// Per-token |cosine| between every pair of feature vectors, averaged over
/// tokens. A token with any zero-norm vector is excluded and counted.
inline SimilarityReport token_cosine_report(const std::vector<const Matrix*>& sets, std::string variant = "residuals",
                                            std::vector<std::string> labels = {"lexicon", "syntax", "meaning", "reasoning"}) {
  if (sets.empty()) throw ValidationError("no matrices to compare");
  const Index n = sets[0]->rows(), d = sets[0]->cols();
  for (const Matrix* m : sets)
    if (m->rows() != n || m->cols() != d) throw ValidationError("cosine inputs differ in shape");
  const Index k = static_cast<Index>(sets.size());
  SimilarityReport rep;
  rep.variant = std::move(variant);
  rep.labels = std::move(labels);
  rep.labels.resize(static_cast<std::size_t>(k));
  rep.mean_abs_cos = Matrix::Zero(k, k);
  std::vector<Vector> norms;
  for (const Matrix* m : sets) norms.push_back(m->rowwise().norm());
  for (Index i = 0; i < n; ++i) {
    bool zero = false;
    for (Index a = 0; a < k; ++a) zero = zero || !(norms[static_cast<std::size_t>(a)](i) > 0);
    if (zero) {
      ++rep.excluded_zero_norm;
      continue;
    }
    for (Index a = 0; a < k; ++a)
      for (Index b = a + 1; b < k; ++b) {
        double c = sets[static_cast<std::size_t>(a)]->row(i).dot(sets[static_cast<std::size_t>(b)]->row(i)) /
                   (norms[static_cast<std::size_t>(a)](i) * norms[static_cast<std::size_t>(b)](i));
        rep.mean_abs_cos(a, b) += std::min(1.0, std::abs(c));
      }
    ++rep.n_tokens;
  }
  if (rep.n_tokens > 0) rep.mean_abs_cos /= static_cast<double>(rep.n_tokens);
  for (Index a = 0; a < k; ++a) {
    rep.mean_abs_cos(a, a) = 1.0;
    for (Index b = 0; b < a; ++b) rep.mean_abs_cos(a, b) = rep.mean_abs_cos(b, a);
  }
  return rep;
}

inline SimilarityReport token_cosine_report(const ResidualSet& rs) {
  return token_cosine_report({&rs.lexicon, &rs.syntax, &rs.meaning, &rs.reasoning}, "residuals");
}

// ---------------------------------------------------------------------------
// Sample-axis audit
// ---------------------------------------------------------------------------

struct AuditEntry {
  std::string a;
  std::string b;
  double max_abs_corr = 0;
};

struct AuditReport {
  double max_vs_predictors = 0;  ///< residual vs the layer it was regressed on
  double max_vs_residuals = 0;   ///< residual vs other residuals
  Index skipped_constant = 0;
  Index columns_used = 0;
  std::vector<AuditEntry> entries;
};

struct AuditOptions {
  Index max_columns = 512;
  std::uint64_t seed = 0;
};

namespace detail {

/// Column-standardized copy of the chosen columns; constant columns dropped.
inline Matrix standardized_columns(const Eigen::Ref<const Matrix>& m, const std::vector<Index>& cols, Index& skipped) {
  std::vector<Vector> keep;
  for (Index c : cols) {
    Vector v = m.col(c).array() - m.col(c).mean();
    double sd = v.norm();
    if (!(sd > 1e-12 * std::max(1.0, m.col(c).cwiseAbs().maxCoeff()))) {
      ++skipped;
      continue;
    }
    keep.push_back(v / sd);
  }
  Matrix out(m.rows(), static_cast<Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) out.col(static_cast<Index>(i)) = keep[i];
  return out;
}

inline std::vector<Index> column_sample(Index cols, Index max_cols, std::mt19937_64& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(cols));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (cols > max_cols) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_cols));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

inline double max_abs_cross_corr(const Matrix& za, const Matrix& zb) {
  if (za.cols() == 0 || zb.cols() == 0) return 0;
  return (za.transpose() * zb).cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Maximum absolute Pearson correlation between residual columns and (a) the
/// predictor layer each residual was regressed on, (b) the other residuals.
/// `predictors` holds H_0, H_{L_s}, H_{L_m} on the same tokens as `rs`.
inline AuditReport sample_axis_audit(const ResidualSet& rs, const std::array<const Matrix*, 3>& predictors,
                                     const AuditOptions& opt = {}) {
  if (opt.max_columns < 1) throw ValidationError("audit needs max_columns >= 1");
  for (const Matrix* p : predictors)
    if (p->rows() != rs.n_tokens()) throw ValidationError("predictor rows do not match residual tokens");
  std::mt19937_64 rng(opt.seed);
  AuditReport rep;
  const Index d = rs.lexicon.cols();
  const auto cols = detail::column_sample(d, opt.max_columns, rng);
  rep.columns_used = static_cast<Index>(cols.size());
  std::array<Matrix, 4> z;
  for (std::size_t i = 0; i < 4; ++i) z[i] = detail::standardized_columns(rs.get(kFeatureOrder[i]), cols, rep.skipped_constant);
  const std::array<const char*, 3> pred_name = {"H_lexicon", "H_syntax", "H_meaning"};
  for (std::size_t i = 0; i < 3; ++i) {
    Matrix zp = detail::standardized_columns(*predictors[i], detail::column_sample(predictors[i]->cols(), opt.max_columns, rng),
                                             rep.skipped_constant);
    double m = detail::max_abs_cross_corr(z[i + 1], zp);
    rep.entries.push_back({to_string(kFeatureOrder[i + 1]), pred_name[i], m});
    rep.max_vs_predictors = std::max(rep.max_vs_predictors, m);
  }
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      double m = detail::max_abs_cross_corr(z[a], z[b]);
      rep.entries.push_back({to_string(kFeatureOrder[a]), to_string(kFeatureOrder[b]), m});
      rep.max_vs_residuals = std::max(rep.max_vs_residuals, m);
    }
  return rep;
}

/// Monte Carlo reference: expected max |r| between ca and cb independent
/// Gaussian columns of length n.
inline double null_max_correlation(Index n, Index ca, Index cb, int reps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N;
  double total = 0;
  for (int r = 0; r < reps; ++r) {
    Matrix a = Matrix::NullaryExpr(n, ca, [&] { return N(rng); });
    Matrix b = Matrix::NullaryExpr(n, cb, [&] { return N(rng); });
    Index skipped = 0;
    std::vector<Index> ia(static_cast<std::size_t>(ca)), ib(static_cast<std::size_t>(cb));
    std::iota(ia.begin(), ia.end(), Index{0});
    std::iota(ib.begin(), ib.end(), Index{0});
    total += detail::max_abs_cross_corr(detail::standardized_columns(a, ia, skipped),
                                        detail::standardized_columns(b, ib, skipped));
  }
  return total / reps;
}

// ---------------------------------------------------------------------------
// Cross-probing
// ---------------------------------------------------------------------------

/// rows: embedding source (lexicon, syntax, meaning, reasoning);
/// cols: probing task family (syntax, meaning, reasoning).
struct CrossProbeMatrix {
  Matrix accuracy = Matrix::Zero(4, 3);
  std::array<FeatureKind, 3> tasks = {FeatureKind::syntax, FeatureKind::meaning, FeatureKind::reasoning};

  double at(FeatureKind source, FeatureKind task) const {
    Index r = static_cast<Index>(source);
    Index c = static_cast<Index>(task) - 1;
    return accuracy(r, c);
  }

  /// min over task columns of (own-source accuracy - best other source).
  double diagonal_margin() const {
    double margin = std::numeric_limits<double>::infinity();
    for (Index c = 0; c < 3; ++c) {
      const Index own = c + 1;
      double best_other = -1;
      for (Index r = 0; r < 4; ++r)
        if (r != own) best_other = std::max(best_other, accuracy(r, c));
      margin = std::min(margin, accuracy(own, c) - best_other);
    }
    return margin;
  }
};

/// Probes each residual on each task family. `rs` rows are the probe store's
/// tokens, addressed by the items' token_index; several tasks of one family
/// (BLiMP paradigms) are averaged.
inline CrossProbeMatrix cross_probe(const ResidualSet& rs, const std::vector<MinimalPairSet>& tasks,
                                    const ProbeOptions& opt) {
  CrossProbeMatrix out;
  std::array<std::vector<const MinimalPairSet*>, 3> by_family;
  for (const auto& t : tasks) {
    if (t.feature_kind == FeatureKind::lexicon) continue;
    by_family[static_cast<std::size_t>(t.feature_kind) - 1].push_back(&t);
  }
  for (std::size_t c = 0; c < 3; ++c)
    if (by_family[c].empty())
      throw EmptyDatasetError(std::string("no ") + to_string(out.tasks[c]) + " task for cross-probing");

  struct Cell {
    std::size_t source, family;
  };
  std::vector<Cell> cells;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) cells.push_back({r, c});
  ProbeOptions inner = opt;
  inner.threads = 1;
  std::vector<double> acc(cells.size(), 0.0);
  parallel_for(cells.size(), opt.threads, [&](std::size_t i) {
    const Matrix& src = rs.get(kFeatureOrder[cells[i].source]);
    double sum = 0;
    for (const MinimalPairSet* t : by_family[cells[i].family]) {
      t->validate();
      Matrix X(static_cast<Index>(t->items.size()), src.cols());
      for (std::size_t k = 0; k < t->items.size(); ++k) {
        Index row = t->items[k].token_index;
        if (row < 0 || row >= src.rows()) throw ValidationError("probe item maps outside residual rows");
        X.row(static_cast<Index>(k)) = src.row(row);
      }
      const auto groups = t->groups();
      sum += cross_validate_probe(X, t->labels(), inner, &groups).accuracy;
    }
    acc[i] = sum / static_cast<double>(by_family[cells[i].family].size());
  });
  for (std::size_t i = 0; i < cells.size(); ++i)
    out.accuracy(static_cast<Index>(cells[i].source), static_cast<Index>(cells[i].family)) = acc[i];
  return out;
}

}  // namespace resdis
