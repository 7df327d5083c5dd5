#include "resdis/stats.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace resdis;
using resdis::testing::gaussian;

namespace {

EpochedNeural epochs_of(const Matrix& Y, Index electrodes, Index lags) {
  EpochedNeural ep;
  ep.Y = Y;
  ep.n_electrodes = electrodes;
  ep.n_lags = lags;
  for (Index k = 0; k < lags; ++k) ep.lag_times_s.push_back(static_cast<double>(k));
  return ep;
}

EncodeOptions quick_encode() {
  EncodeOptions o;
  o.grid = AlphaGrid::log_spaced(1e-1, 1e4, 6);
  o.ci_resamples = 0;
  return o;
}

// Adjusted-p formulation of Benjamini-Hochberg, independent of the step-up
// loop: p_adj(i) = min over ranks j >= rank(i) of m p_(j) / j.
std::vector<bool> bh_by_adjusted_p(const std::vector<double>& p, double q) {
  const std::size_t m = p.size();
  std::vector<bool> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double adj = 1.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (p[j] < p[i]) continue;
      std::size_t rank = 0;
      for (std::size_t k = 0; k < m; ++k) rank += (p[k] <= p[j]) ? 1 : 0;
      adj = std::min(adj, static_cast<double>(m) * p[j] / static_cast<double>(rank));
    }
    out[i] = adj <= q;
  }
  return out;
}

}  // namespace

TEST(FisherZ, KnownValues) {
  EXPECT_EQ(fisher_z(0.0), 0.0);
  EXPECT_NEAR(fisher_z(std::tanh(1.0)), 1.0, 1e-6);
  EXPECT_TRUE(std::isfinite(fisher_z(1.0)));
  EXPECT_TRUE(std::isfinite(fisher_z(-1.0)));
  EXPECT_GT(fisher_z(1.0), 8.0);
  EXPECT_THROW(fisher_z(1.0001), ValidationError);
  EXPECT_THROW(fisher_z(std::nan("")), ValidationError);
  for (double r : {0.1, 0.37, 0.9}) EXPECT_DOUBLE_EQ(fisher_z(-r), -fisher_z(r));
}

TEST(Bonferroni, MatchesNormalQuantiles) {
  EXPECT_NEAR(bonferroni_z(0.05, 1268), 3.95, 0.005);
  EXPECT_NEAR(bonferroni_z(0.05, 1268), 3.9478251945074723, 1e-9);
  EXPECT_NEAR(bonferroni_z(0.05, 1), 1.6448536269514729, 1e-12);
  EXPECT_THROW(bonferroni_z(0.0, 10), ValidationError);
  EXPECT_THROW(bonferroni_z(0.05, 0), ValidationError);
}

TEST(Responsiveness, StrictThreshold) {
  Vector z(3);
  z << 3.94, 3.95, 3.96;
  auto m = responsiveness(z);
  EXPECT_EQ(m, (std::vector<bool>{false, false, true}));
  Vector bad(1);
  bad << std::nan("");
  EXPECT_THROW(responsiveness(bad), ValidationError);
}

TEST(Responsiveness, CountFallsAsThresholdRises) {
  std::mt19937_64 rng(1);
  Vector z = gaussian(500, 1, rng, 3.0);
  Index prev = 501;
  for (double thr = -5; thr <= 10; thr += 0.25) {
    auto m = responsiveness(z, thr);
    Index c = static_cast<Index>(std::count(m.begin(), m.end(), true));
    EXPECT_LE(c, prev);
    prev = c;
  }
}

TEST(Null, FewShufflesAreFlagged) {
  std::mt19937_64 rng(2);
  Matrix X = gaussian(60, 3, rng), Y = gaussian(60, 4, rng);
  DesignMatrix d{X, Matrix::Zero(60, 2), "x"};
  NullOptions opt;
  opt.n_shuffles = 2;
  auto nd = build_null(d, epochs_of(Y, 2, 2), quick_encode(), opt);
  EXPECT_TRUE(nd.low_confidence);
  EXPECT_TRUE(nd.alpha_frozen);
  EXPECT_EQ(nd.peak_r.rows(), 2);
  opt.n_shuffles = 1;
  EXPECT_THROW(build_null(d, epochs_of(Y, 2, 2), quick_encode(), opt), ValidationError);
}

TEST(Null, SeedDeterminesTheShuffles) {
  std::mt19937_64 rng(3);
  Matrix X = gaussian(80, 3, rng), Y = gaussian(80, 6, rng);
  DesignMatrix d{X, gaussian(80, 2, rng), "x"};
  NullOptions opt;
  opt.n_shuffles = 5;
  opt.seed = 11;
  auto a = build_null(d, epochs_of(Y, 3, 2), quick_encode(), opt);
  auto b = build_null(d, epochs_of(Y, 3, 2), quick_encode(), opt);
  EXPECT_EQ(a.peak_r, b.peak_r);
  opt.seed = 12;
  auto c = build_null(d, epochs_of(Y, 3, 2), quick_encode(), opt);
  EXPECT_NE(a.peak_r, c.peak_r);
  opt.threads = 2;
  opt.seed = 11;
  EXPECT_EQ(build_null(d, epochs_of(Y, 3, 2), quick_encode(), opt).peak_r, a.peak_r);
}

TEST(Null, DegenerateElectrodesScoreZero) {
  NullDistribution nd;
  nd.peak_r = Matrix::Constant(4, 2, 0.1);
  nd.peak_r(0, 1) = 0.2;
  summarize_null(nd);
  EXPECT_TRUE(nd.degenerate[0]);
  EXPECT_FALSE(nd.degenerate[1]);
  Vector peak(2);
  peak << 0.9, 0.9;
  auto z = score_against_null(peak, nd);
  EXPECT_EQ(z.z(0), 0.0);
  EXPECT_GT(z.z(1), 0.0);
  EXPECT_THROW(score_against_null(Vector::Zero(3), nd), ValidationError);
}

TEST(Null, PlantedAndIndependentElectrodes) {
  std::mt19937_64 rng(4);
  const Index n = 400, electrodes = 40, lags = 3;
  Matrix X = gaussian(n, 4, rng);
  Matrix Y = gaussian(n, electrodes * lags, rng);
  // Electrode 0 is driven by the features at every lag.
  Y.leftCols(lags) += X * gaussian(4, lags, rng);
  DesignMatrix d{X, gaussian(n, 2, rng), "x"};
  auto ep = epochs_of(Y, electrodes, lags);
  auto fit = encode_cv(d, ep, quick_encode());
  NullOptions opt;
  opt.n_shuffles = 40;
  auto nd = build_null(d, ep, quick_encode(), opt, &fit);
  EXPECT_FALSE(nd.low_confidence);
  auto z = score_against_null(fit.r_peak, nd);
  EXPECT_GT(z.z(0), 10.0);
  EXPECT_TRUE(z.responsive[0]);
  Index quiet = 0;
  for (Index e = 1; e < electrodes; ++e) quiet += std::abs(z.z(e)) < 3.95 ? 1 : 0;
  EXPECT_GE(static_cast<double>(quiet) / (electrodes - 1), 0.94);
}

TEST(WelchT, MatchesReferenceValues) {
  auto two = welch_t({1, 2, 3, 4}, {2, 4, 6, 8});
  EXPECT_NEAR(two.t, -1.7320508075688774, 1e-12);
  EXPECT_NEAR(two.df, 4.411764705882353, 1e-12);
  EXPECT_NEAR(two.p, 0.15158050484530383, 1e-10);
  auto less = welch_t({1, 2, 3, 4}, {2, 4, 6, 8}, Tail::less);
  EXPECT_NEAR(less.p, 0.07579025242265192, 1e-10);
  auto greater = welch_t({1, 2, 3, 4}, {2, 4, 6, 8}, Tail::greater);
  EXPECT_NEAR(greater.p, 1.0 - 0.07579025242265192, 1e-10);
}

TEST(WelchT, IdenticalSamplesAreNotDifferent) {
  auto r = welch_t({0.5, 0.5, 0.5}, {0.5, 0.5});
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
  auto same = welch_t({1, 2, 3}, {1, 2, 3});
  EXPECT_EQ(same.t, 0.0);
  EXPECT_NEAR(same.p, 1.0, 1e-12);
}

TEST(WelchT, SeparatedGaussiansAreDetected) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> a(1.0, 0.1), b(0.0, 0.1);
  std::vector<double> xa, xb;
  for (int i = 0; i < 30; ++i) {
    xa.push_back(a(rng));
    xb.push_back(b(rng));
  }
  EXPECT_LT(welch_t(xa, xb).p, 1e-6);
  EXPECT_LT(welch_t(xa, xb, Tail::greater).p, 1e-6);
  EXPECT_THROW(welch_t({1.0}, xb), InsufficientDataError);
}

TEST(OneSampleT, MatchesReferenceValues) {
  auto r = one_sample_t({0.1, 0.3, 0.2, 0.5, 0.4});
  EXPECT_NEAR(r.t, 4.242640687119285, 1e-12);
  EXPECT_NEAR(r.p, 0.0066177997818413475, 1e-10);
  EXPECT_DOUBLE_EQ(r.df, 4.0);
  auto constant = one_sample_t({0.5, 0.5, 0.5});
  EXPECT_TRUE(std::isinf(constant.t));
  EXPECT_EQ(constant.p, 0.0);
  EXPECT_THROW(one_sample_t({0.2}), InsufficientDataError);
}

TEST(FdrBh, Extremes) {
  EXPECT_EQ(fdr_bh({0, 0, 0}), (std::vector<bool>{true, true, true}));
  EXPECT_EQ(fdr_bh({1, 1, 1}), (std::vector<bool>{false, false, false}));
  EXPECT_TRUE(fdr_bh({}).empty());
  EXPECT_THROW(fdr_bh({0.5, 1.5}), ValidationError);
}

TEST(FdrBh, AgreesWithAdjustedPValues) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> U(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(10);
    for (auto& v : p) v = U(rng) * (trial % 2 ? 0.1 : 1.0);
    EXPECT_EQ(fdr_bh(p, 0.05), bh_by_adjusted_p(p, 0.05)) << "trial " << trial;
  }
  // Rank 2 misses its own cutoff but rank 3 passes, so both are kept.
  EXPECT_EQ(fdr_bh({0.01, 0.04, 0.045}, 0.05), (std::vector<bool>{true, true, true}));
}
