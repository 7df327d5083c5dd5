#include "resdis/synth.hpp"
#include "resdis/validation.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace resdis;
using resdis::testing::gaussian;

namespace {

PlantedSpec small_spec(std::uint64_t seed) {
  PlantedSpec spec;
  spec.n_layers = 8;
  spec.dim = 32;
  spec.injection = {0, 2, 4, 6};
  spec.seed = seed;
  return spec;
}

ResidualSet residuals_of(const SynthStore& st, const PlantedSpec& spec, const ResidualOptions& opt = {}) {
  return build_residuals(st.store, st.store, SaturationLayers{spec.injection[0], spec.injection[1], spec.injection[2],
                                                              spec.injection[3]},
                         opt);
}

}  // namespace

TEST(TokenCosine, IdenticalCopiesGiveAllOnes) {
  std::mt19937_64 rng(1);
  Matrix H = gaussian(50, 6, rng);
  auto rep = token_cosine_report({&H, &H, &H, &H});
  EXPECT_LT((rep.mean_abs_cos - Matrix::Ones(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(rep.n_tokens, 50);
}

TEST(TokenCosine, OrthogonalRowSpacesGiveZero) {
  std::mt19937_64 rng(2);
  std::array<Matrix, 4> m;
  for (Index f = 0; f < 4; ++f) {
    m[static_cast<std::size_t>(f)] = Matrix::Zero(40, 12);
    m[static_cast<std::size_t>(f)].middleCols(3 * f, 3) = gaussian(40, 3, rng);
  }
  auto rep = token_cosine_report({&m[0], &m[1], &m[2], &m[3]});
  EXPECT_LE(rep.max_off_diagonal(), 1e-6);
  EXPECT_EQ(rep.mean_abs_cos.diagonal(), Vector::Ones(4));
}

TEST(TokenCosine, InvariantToPerTokenRescaling) {
  std::mt19937_64 rng(3);
  Matrix a = gaussian(30, 5, rng), b = gaussian(30, 5, rng);
  Matrix a2 = a, b2 = b;
  std::uniform_real_distribution<double> U(0.1, 10.0);
  for (Index t = 0; t < 30; ++t) {
    a2.row(t) *= U(rng);
    b2.row(t) *= -U(rng);
  }
  auto r1 = token_cosine_report({&a, &b}, "x", {"a", "b"});
  auto r2 = token_cosine_report({&a2, &b2}, "x", {"a", "b"});
  EXPECT_NEAR(r1.mean_abs_cos(0, 1), r2.mean_abs_cos(0, 1), 1e-12);
}

TEST(TokenCosine, SwappingSlotsPermutesTheMatrix) {
  std::mt19937_64 rng(4);
  std::array<Matrix, 4> m;
  for (auto& x : m) x = gaussian(25, 4, rng);
  m[2] += m[1];
  auto r = token_cosine_report({&m[0], &m[1], &m[2], &m[3]});
  auto s = token_cosine_report({&m[0], &m[2], &m[1], &m[3]});
  EXPECT_LT((r.mean_abs_cos - r.mean_abs_cos.transpose()).norm(), 1e-15);
  EXPECT_DOUBLE_EQ(r.mean_abs_cos(0, 1), s.mean_abs_cos(0, 2));
  EXPECT_DOUBLE_EQ(r.mean_abs_cos(1, 3), s.mean_abs_cos(2, 3));
  EXPECT_DOUBLE_EQ(r.mean_abs_cos(1, 2), s.mean_abs_cos(1, 2));
}

TEST(TokenCosine, ZeroNormTokensAreExcludedAndCounted) {
  std::mt19937_64 rng(5);
  Matrix a = gaussian(10, 3, rng), b = gaussian(10, 3, rng);
  b.row(4).setZero();
  b.row(7).setZero();
  auto rep = token_cosine_report({&a, &b}, "x", {"a", "b"});
  EXPECT_EQ(rep.excluded_zero_norm, 2);
  EXPECT_EQ(rep.n_tokens, 8);
  EXPECT_TRUE(std::isfinite(rep.mean_abs_cos(0, 1)));
}

TEST(TokenCosine, ShapeMismatchRaises) {
  Matrix a = Matrix::Ones(3, 2), b = Matrix::Ones(3, 3);
  EXPECT_THROW(token_cosine_report({&a, &b}), ValidationError);
  EXPECT_THROW(token_cosine_report(std::vector<const Matrix*>{}), ValidationError);
}

TEST(SampleAxisAudit, TinyPenaltyIsOrthogonalToPredictors) {
  auto spec = small_spec(6);
  spec.n_tokens = 1500;
  auto st = generate_store(spec);
  ResidualOptions opt;
  opt.grid = AlphaGrid::log_spaced(1e-10, 1e-9, 2);
  auto rs = residuals_of(st, spec, opt);
  Matrix h0 = st.store.slice_layer(0).to_matrix(), hs = st.store.slice_layer(2).to_matrix(),
         hm = st.store.slice_layer(4).to_matrix();
  auto rep = sample_axis_audit(rs, {&h0, &hs, &hm});
  EXPECT_LE(rep.max_vs_predictors, 1e-6);
  EXPECT_EQ(rep.columns_used, 32);
  EXPECT_EQ(rep.entries.size(), 3u + 6u);
}

TEST(SampleAxisAudit, CvPenaltyKeepsCorrelationsSmall) {
  auto spec = small_spec(7);
  spec.n_tokens = 10000;
  auto st = generate_store(spec);
  auto rs = residuals_of(st, spec);
  Matrix h0 = st.store.slice_layer(0).to_matrix(), hs = st.store.slice_layer(2).to_matrix(),
         hm = st.store.slice_layer(4).to_matrix();
  auto rep = sample_axis_audit(rs, {&h0, &hs, &hm});
  EXPECT_LE(rep.max_vs_predictors, 0.05);
  EXPECT_LE(rep.max_vs_residuals, 0.05);
  // Same order of magnitude as independent Gaussian columns.
  const double ref = null_max_correlation(10000, 32, 32, 3, 1);
  EXPECT_LE(rep.max_vs_residuals, 2.0 * ref);
}

TEST(SampleAxisAudit, ConstantColumnsAreSkipped) {
  std::mt19937_64 rng(8);
  ResidualSet rs;
  rs.lexicon = gaussian(40, 4, rng);
  rs.syntax = gaussian(40, 4, rng);
  rs.meaning = gaussian(40, 4, rng);
  rs.reasoning = Matrix::Constant(40, 4, 2.0);
  Matrix p = gaussian(40, 4, rng);
  auto rep = sample_axis_audit(rs, {&p, &p, &p});
  EXPECT_EQ(rep.skipped_constant, 4);
  EXPECT_THROW(sample_axis_audit(rs, {&p, &p, &p}, AuditOptions{0, 0}), ValidationError);
  Matrix short_p = gaussian(10, 4, rng);
  EXPECT_THROW(sample_axis_audit(rs, {&short_p, &p, &p}), ValidationError);
}

TEST(SampleAxisAudit, ColumnSubsampleIsSeeded) {
  std::mt19937_64 rng(9);
  ResidualSet rs;
  rs.lexicon = gaussian(60, 20, rng);
  rs.syntax = gaussian(60, 20, rng);
  rs.meaning = gaussian(60, 20, rng);
  rs.reasoning = gaussian(60, 20, rng);
  Matrix p = gaussian(60, 20, rng);
  auto a = sample_axis_audit(rs, {&p, &p, &p}, AuditOptions{5, 3});
  auto b = sample_axis_audit(rs, {&p, &p, &p}, AuditOptions{5, 3});
  EXPECT_EQ(a.columns_used, 5);
  EXPECT_EQ(a.max_vs_residuals, b.max_vs_residuals);
}

TEST(NullMaxCorrelation, ShrinksWithLength) {
  const double short_r = null_max_correlation(100, 8, 8, 20, 1);
  const double long_r = null_max_correlation(10000, 8, 8, 20, 1);
  EXPECT_GT(short_r, long_r * 5);
  // Bonferroni-style envelope for 64 pairs: sqrt(2 ln 128 / n).
  EXPECT_LT(long_r, std::sqrt(2 * std::log(128.0) / 10000) * 1.2);
  EXPECT_GT(long_r, 0.01);
}

class CrossProbeTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    // At dim 32 with the default 0.005 noise, the slight ridge shrinkage
    // leaves enough upstream signal in later residuals for a probe to find.
    spec_ = new PlantedSpec(small_spec(10));
    spec_->n_tokens = 3000;
    spec_->noise = 0.05;
    auto s = make_structure(*spec_);
    auto train = generate_store(*spec_, s, spec_->n_tokens, 0);
    data_ = new SynthProbeData(generate_probe_sets(
        *spec_, s,
        {{"syn", FeatureKind::syntax, 120}, {"sem", FeatureKind::meaning, 120}, {"rea", FeatureKind::reasoning, 120}}, 0));
    auto maps = fit_residual_maps(train.store, SaturationLayers{0, 2, 4, 6}, ResidualOptions{});
    rs_ = new ResidualSet(apply_residual_maps(maps, data_->store));
  }
  static void TearDownTestSuite() {
    delete spec_;
    delete data_;
    delete rs_;
  }
  static PlantedSpec* spec_;
  static SynthProbeData* data_;
  static ResidualSet* rs_;
};

PlantedSpec* CrossProbeTest::spec_ = nullptr;
SynthProbeData* CrossProbeTest::data_ = nullptr;
ResidualSet* CrossProbeTest::rs_ = nullptr;

TEST_F(CrossProbeTest, PlantedResidualsAreNearDiagonal) {
  auto m = cross_probe(*rs_, data_->tasks, ProbeOptions{});
  for (auto task : {FeatureKind::syntax, FeatureKind::meaning, FeatureKind::reasoning}) {
    EXPECT_GE(m.at(task, task), 0.9) << to_string(task);
    for (auto src : kFeatureOrder)
      if (src != task) EXPECT_LE(m.at(src, task), 0.7) << to_string(src) << " on " << to_string(task);
  }
  EXPECT_GE(m.diagonal_margin(), 0.3);
}

TEST_F(CrossProbeTest, SwappingResidualsSwapsRows) {
  ResidualSet swapped = *rs_;
  std::swap(swapped.meaning, swapped.reasoning);
  auto a = cross_probe(*rs_, data_->tasks, ProbeOptions{});
  auto b = cross_probe(swapped, data_->tasks, ProbeOptions{});
  EXPECT_EQ(a.accuracy.row(0), b.accuracy.row(0));
  EXPECT_EQ(a.accuracy.row(1), b.accuracy.row(1));
  EXPECT_EQ(a.accuracy.row(2), b.accuracy.row(3));
  EXPECT_EQ(a.accuracy.row(3), b.accuracy.row(2));
}

TEST_F(CrossProbeTest, MissingFamilyRaises) {
  std::vector<MinimalPairSet> only_syntax = {data_->tasks[0]};
  EXPECT_THROW(cross_probe(*rs_, only_syntax, ProbeOptions{}), EmptyDatasetError);
}
