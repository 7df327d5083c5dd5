#pragma once
// Shuffle nulls, Fisher-z scoring and the tests used by the reports.

#include "resdis/neural.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace resdis {

inline constexpr double kFisherClamp = 1e-7;
inline constexpr double kResponsiveZ = 3.95;

inline double fisher_z(double r) {
  if (!(std::abs(r) <= 1.0)) throw ValidationError("fisher_z: |r| > 1 (" + fmt_num(r) + ")");
  return std::atanh(std::clamp(r, -1.0 + kFisherClamp, 1.0 - kFisherClamp));
}

/// One-tailed Bonferroni threshold Phi^-1(1 - alpha / n).
inline double bonferroni_z(double alpha, double n) {
  if (!(alpha > 0 && alpha < 1) || !(n >= 1)) throw ValidationError("bonferroni_z needs 0 < alpha < 1 and n >= 1");
  return boost::math::quantile(boost::math::complement(boost::math::normal(), alpha / n));
}

struct NullDistribution {
  Index n_shuffles = 0;
  Matrix peak_r;  ///< shuffles x electrodes
  Vector z_mean;
  Vector z_sd;
  std::vector<bool> degenerate;  ///< z_sd == 0
  bool low_confidence = false;   ///< fewer than 30 shuffles
  bool alpha_frozen = true;
};

struct NullOptions {
  Index n_shuffles = 500;
  std::uint64_t seed = 0;
  bool freeze_alpha = true;
  unsigned threads = 1;
};

inline void summarize_null(NullDistribution& nd) {
  const Index S = nd.peak_r.rows(), E = nd.peak_r.cols();
  nd.n_shuffles = S;
  nd.z_mean.resize(E);
  nd.z_sd.resize(E);
  nd.degenerate.assign(static_cast<std::size_t>(E), false);
  for (Index e = 0; e < E; ++e) {
    Vector z(S);
    for (Index s = 0; s < S; ++s) z(s) = fisher_z(nd.peak_r(s, e));
    nd.z_mean(e) = z.mean();
    nd.z_sd(e) = S > 1 ? std::sqrt((z.array() - nd.z_mean(e)).square().sum() / static_cast<double>(S - 1)) : 0.0;
    if (!(nd.z_sd(e) > 0)) nd.degenerate[static_cast<std::size_t>(e)] = true;
  }
  nd.low_confidence = S < 30;
}

/// Permutes the feature rows per shuffle (covariates stay aligned), reruns the
/// cross-validated fit and records each electrode's peak r over lags.
inline NullDistribution build_null(const DesignMatrix& design, const EpochedNeural& Y, const EncodeOptions& enc,
                                   const NullOptions& opt, const CorrelationResult* true_fit = nullptr) {
  design.validate();
  if (opt.n_shuffles < 2) throw ValidationError("null needs at least 2 shuffles");
  if (design.X.rows() != Y.n_events()) throw ValidationError("design rows do not match epochs");
  std::vector<double> frozen;
  if (opt.freeze_alpha) {
    if (true_fit != nullptr) {
      frozen = true_fit->fold_alphas;
    } else {
      std::vector<double> tmp;
      cv_ridge_predict(design.full(), Y.Y, enc, tmp);
      frozen = tmp;
    }
  }
  const Index n = design.X.rows();
  NullDistribution nd;
  nd.alpha_frozen = opt.freeze_alpha;
  nd.peak_r.resize(opt.n_shuffles, Y.n_electrodes);
  parallel_for(static_cast<std::size_t>(opt.n_shuffles), opt.threads, [&](std::size_t s) {
    std::mt19937_64 rng(derive_seed(opt.seed, s));
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix F(n, design.X.cols() + design.covariates.cols());
    for (Index i = 0; i < n; ++i) F.row(i).head(design.X.cols()) = design.X.row(perm[static_cast<std::size_t>(i)]);
    F.rightCols(design.covariates.cols()) = design.covariates;
    EncodeOptions e = enc;
    e.seed = derive_seed(opt.seed ^ 0x5eedULL, s);
    std::vector<double> alphas;
    Matrix held = cv_ridge_predict(F, Y.Y, e, alphas, opt.freeze_alpha ? &frozen : nullptr);
    RowVector r = column_pearson(held, Y.Y);
    for (Index el = 0; el < Y.n_electrodes; ++el)
      nd.peak_r(static_cast<Index>(s), el) = r.segment(el * Y.n_lags, Y.n_lags).maxCoeff();
  });
  summarize_null(nd);
  return nd;
}

struct ZScoreResult {
  Vector z;
  std::vector<bool> responsive;
  double threshold = kResponsiveZ;

  Index count() const { return static_cast<Index>(std::count(responsive.begin(), responsive.end(), true)); }
};

inline std::vector<bool> responsiveness(const Eigen::Ref<const Vector>& z, double threshold = kResponsiveZ) {
  if (!z.allFinite()) throw ValidationError("non-finite z-scores");
  std::vector<bool> mask(static_cast<std::size_t>(z.size()));
  for (Index i = 0; i < z.size(); ++i) mask[static_cast<std::size_t>(i)] = z(i) > threshold;
  return mask;
}

/// (fisher_z(true peak) - null mean) / null sd. Degenerate electrodes get z = 0.
inline ZScoreResult score_against_null(const Eigen::Ref<const Vector>& true_peak, const NullDistribution& nd,
                                       double threshold = kResponsiveZ) {
  if (true_peak.size() != nd.z_mean.size()) throw ValidationError("null and true fit differ in electrode count");
  ZScoreResult out;
  out.threshold = threshold;
  out.z.resize(true_peak.size());
  for (Index e = 0; e < true_peak.size(); ++e)
    out.z(e) = nd.degenerate[static_cast<std::size_t>(e)] ? 0.0 : (fisher_z(true_peak(e)) - nd.z_mean(e)) / nd.z_sd(e);
  out.responsive = responsiveness(out.z, threshold);
  return out;
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

enum class Tail { two_sided, greater, less };

struct TTest {
  double t = 0;
  double df = 0;
  double p = 1;
};

namespace detail {

inline double t_pvalue(double t, double df, Tail tail) {
  if (std::isinf(t)) {
    if (tail == Tail::two_sided) return 0.0;
    return (tail == Tail::greater) == (t > 0) ? 0.0 : 1.0;
  }
  boost::math::students_t dist(df);
  switch (tail) {
    case Tail::greater: return boost::math::cdf(boost::math::complement(dist, t));
    case Tail::less: return boost::math::cdf(dist, t);
    case Tail::two_sided: break;
  }
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

inline std::pair<double, double> mean_var(const std::vector<double>& x) {
  double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, ss / static_cast<double>(x.size() - 1)};
}

}  // namespace detail

/// Unequal-variance t with Welch-Satterthwaite degrees of freedom; `greater`
/// tests mean(a) > mean(b).
inline TTest welch_t(const std::vector<double>& a, const std::vector<double>& b, Tail tail = Tail::two_sided) {
  if (a.size() < 2 || b.size() < 2) throw InsufficientDataError("welch_t needs at least 2 samples per group");
  auto [ma, va] = detail::mean_var(a);
  auto [mb, vb] = detail::mean_var(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  TTest out;
  if (sa + sb == 0) {
    out.df = na + nb - 2;
    if (ma == mb) return out;
    out.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    out.p = detail::t_pvalue(out.t, out.df, tail);
    return out;
  }
  out.t = (ma - mb) / std::sqrt(sa + sb);
  out.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
  out.p = detail::t_pvalue(out.t, out.df, tail);
  return out;
}

inline TTest one_sample_t(const std::vector<double>& x, double mu = 0.0, Tail tail = Tail::greater) {
  if (x.size() < 2) throw InsufficientDataError("one_sample_t needs at least 2 samples");
  auto [m, v] = detail::mean_var(x);
  TTest out;
  out.df = static_cast<double>(x.size()) - 1;
  if (v == 0) {
    if (m == mu) return out;
    out.t = m > mu ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  } else {
    out.t = (m - mu) / std::sqrt(v / static_cast<double>(x.size()));
  }
  out.p = detail::t_pvalue(out.t, out.df, tail);
  return out;
}

/// Benjamini-Hochberg step-up: reject the k smallest p where k is the largest
/// rank with p_(k) <= k q / m.
inline std::vector<bool> fdr_bh(const std::vector<double>& p, double q = 0.05) {
  for (double v : p)
    if (!(v >= 0 && v <= 1)) throw ValidationError("p-values must lie in [0, 1]");
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::size_t k = 0;
  for (std::size_t i = 0; i < m; ++i)
    if (p[order[i]] <= static_cast<double>(i + 1) * q / static_cast<double>(m)) k = i + 1;
  std::vector<bool> mask(m, false);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = true;
  return mask;
}

}  // namespace resdis
