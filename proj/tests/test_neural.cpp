#include "resdis/neural.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace resdis;
using resdis::testing::gaussian;
using resdis::testing::TempDir;

namespace {

NeuralRecording flat_recording(Index electrodes, double fs, double seconds, float value) {
  NeuralRecording rec;
  rec.fs = fs;
  rec.signal = MatrixF::Constant(electrodes, static_cast<Index>(std::llround(fs * seconds)), value);
  for (Index e = 0; e < electrodes; ++e) rec.electrodes.push_back({"S01", "E" + std::to_string(e), 0, 0, 0, "other", "L"});
  return rec;
}

EpochedNeural as_epochs(const Matrix& Y, Index electrodes, Index lags) {
  EpochedNeural ep;
  ep.Y = Y;
  ep.n_electrodes = electrodes;
  ep.n_lags = lags;
  for (Index k = 0; k < lags; ++k) ep.lag_times_s.push_back(static_cast<double>(k) / 32.0);
  return ep;
}

EncodeOptions quick_encode() {
  EncodeOptions o;
  o.grid = AlphaGrid::log_spaced(1e-2, 1e4, 7);
  o.ci_resamples = 0;
  return o;
}

}  // namespace

TEST(Epoch, ConstantSignalStaysConstant) {
  auto rec = flat_recording(3, 128, 20, 2.5f);
  auto ep = epoch(rec, {3.0, 7.5, 12.25});
  EXPECT_EQ(ep.n_lags, 128);
  EXPECT_EQ(ep.Y.rows(), 3);
  EXPECT_EQ(ep.Y.cols(), 3 * 128);
  EXPECT_LT((ep.Y.array() - 2.5).abs().maxCoeff(), 1e-5);
  EXPECT_DOUBLE_EQ(ep.lag_times_s.front(), -2.0);
  EXPECT_DOUBLE_EQ(ep.lag_times_s[64], 0.0);
}

TEST(Epoch, ImpulseLandsInTheZeroLagBin) {
  auto rec = flat_recording(1, 512, 10, 0.0f);
  const double onset = 5.0;
  rec.signal(0, static_cast<Index>(onset * 512)) = 1.0f;
  auto ep = epoch(rec, {onset});
  Index k;
  ep.Y.row(0).cwiseAbs().maxCoeff(&k);
  EXPECT_EQ(k, 64);
  // Neighbouring bins sit on zeros of the 16 Hz sinc.
  EXPECT_LT(std::abs(ep.Y(0, 63)), 1e-9);
  EXPECT_LT(std::abs(ep.Y(0, 65)), 1e-9);
}

TEST(Epoch, EventsNearTheEdgesAreDropped) {
  auto rec = flat_recording(2, 128, 10, 1.0f);
  auto ep = epoch(rec, {1.0, 4.0, 9.0});
  EXPECT_EQ(ep.dropped, 2);
  ASSERT_EQ(ep.kept.size(), 1u);
  EXPECT_EQ(ep.kept[0], 1u);
  auto one = epoch(rec, {5.0, 9.0});
  EXPECT_EQ(one.dropped, 1);
}

TEST(Epoch, RejectsLowRatesAndUnsortedOnsets) {
  auto slow = flat_recording(1, 60, 10, 0.0f);
  EXPECT_THROW(epoch(slow, {5.0}), ResamplingError);
  auto rec = flat_recording(1, 128, 10, 0.0f);
  EXPECT_THROW(epoch(rec, {5.0, 4.0}), ValidationError);
  rec.electrodes.clear();
  EXPECT_THROW(epoch(rec, {5.0}), ValidationError);
}

TEST(NeuralIo, SignalRoundTripIsBitExact) {
  TempDir dir;
  std::mt19937_64 rng(1);
  NeuralRecording rec;
  rec.fs = 512;
  rec.signal = gaussian(3, 700, rng).cast<float>();
  write_neural_signal(rec, dir / "s.hgnr");
  EXPECT_EQ(std::filesystem::file_size(dir / "s.hgnr"), 64u + 3u * 700u * 4u);
  NeuralRecording back;
  read_neural_signal(back, dir / "s.hgnr");
  EXPECT_EQ(back.fs, 512);
  ASSERT_EQ(back.signal.rows(), 3);
  EXPECT_EQ(std::memcmp(back.signal.data(), rec.signal.data(), 3 * 700 * sizeof(float)), 0);
}

TEST(NeuralIo, CorruptSignalFilesAreRejected) {
  TempDir dir;
  NeuralRecording rec;
  rec.fs = 128;
  rec.signal = MatrixF::Ones(2, 50);
  write_neural_signal(rec, dir / "s.hgnr");
  NeuralRecording back;
  std::filesystem::resize_file(dir / "s.hgnr", std::filesystem::file_size(dir / "s.hgnr") - 4);
  EXPECT_THROW(read_neural_signal(back, dir / "s.hgnr"), CorruptError);
  write_neural_signal(rec, dir / "s.hgnr");
  std::ofstream(dir / "s.hgnr", std::ios::app | std::ios::binary).put('x');
  EXPECT_THROW(read_neural_signal(back, dir / "s.hgnr"), CorruptError);
  std::ofstream(dir / "bad.hgnr", std::ios::binary) << std::string(100, 'q');
  EXPECT_THROW(read_neural_signal(back, dir / "bad.hgnr"), FormatError);
  EXPECT_THROW(read_neural_signal(back, dir / "missing.hgnr"), IoError);
}

TEST(NeuralIo, ElectrodeTableRoundTrip) {
  TempDir dir;
  std::vector<ElectrodeMeta> meta = {{"S01", "G1", -41.5, 12, 3.25, "STG", "L"}, {"S01", "G2", 40, -8, 0, "IFG", "R"}};
  write_electrodes(meta, dir / "e.tsv");
  auto back = read_electrodes(dir / "e.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "G1");
  EXPECT_DOUBLE_EQ(back[0].x_mm, -41.5);
  EXPECT_EQ(back[1].region, "IFG");
  EXPECT_EQ(back[1].hemisphere, "R");
  std::ofstream(dir / "bad.tsv") << "subject\telectrode\tx_mm\ty_mm\tz_mm\tregion\themisphere\nS01\tG1\t0\t0\t0\tSTG\tX\n";
  EXPECT_THROW(read_electrodes(dir / "bad.tsv"), ValidationError);
  std::ofstream(dir / "short.tsv") << "subject\telectrode\tx_mm\ty_mm\tz_mm\tregion\themisphere\nS01\tG1\t0\n";
  EXPECT_THROW(read_electrodes(dir / "short.tsv"), FormatError);
}

TEST(NeuralIo, RecordingNeedsMatchingMetadata) {
  TempDir dir;
  NeuralRecording rec;
  rec.fs = 128;
  rec.signal = MatrixF::Zero(3, 10);
  write_neural_signal(rec, dir / "s.hgnr");
  write_electrodes({{"S01", "G1", 0, 0, 0, "STG", "L"}}, dir / "e.tsv");
  EXPECT_THROW(read_recording(dir / "s.hgnr", dir / "e.tsv"), ValidationError);
}

TEST(NeuralIo, WordsRoundTrip) {
  TempDir dir;
  std::vector<WordEvent> words = {{0, 0.5, "hello", 2}, {1, 0.9, "world", 1}};
  write_words(words, dir / "w.tsv");
  auto back = read_words(dir / "w.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].text, "world");
  EXPECT_DOUBLE_EQ(back[0].onset_s, 0.5);
  EXPECT_EQ(back[0].syllables, 2);
  std::ofstream(dir / "bad.tsv") << "word_index\tonset_s\tword\tsyllables\nx\t0\ta\t1\n";
  EXPECT_THROW(read_words(dir / "bad.tsv"), FormatError);
}

TEST(WordRate, SyllableEstimates) {
  EXPECT_EQ(count_syllables("cat"), 1);
  EXPECT_EQ(count_syllables("water"), 2);
  EXPECT_EQ(count_syllables("make"), 1);
  EXPECT_EQ(count_syllables("table"), 2);
  EXPECT_EQ(count_syllables("Banana,"), 3);
  EXPECT_EQ(count_syllables("hmm"), 1);
  EXPECT_EQ(count_syllables("..."), 0);
}

TEST(WordRate, CountsWithinTheWindow) {
  std::vector<WordEvent> words;
  for (int i = 0; i < 10; ++i) words.push_back({i, 0.25 * i, "ba", 1});
  auto C = word_rate_covariates(words, 1.0);
  // Interior events see the four onsets in [t - 0.5, t + 0.5).
  EXPECT_DOUBLE_EQ(C(5, 0), 4.0);
  EXPECT_DOUBLE_EQ(C(5, 1), 4.0);
  EXPECT_DOUBLE_EQ(C(0, 0), 2.0);
  words[5].syllables = -1;
  words[5].text = "banana";
  EXPECT_DOUBLE_EQ(word_rate_covariates(words, 1.0)(5, 1), 6.0);
}

TEST(Encode, PlantedLinearResponseIsRecovered) {
  std::mt19937_64 rng(2);
  const Index n = 2000;
  Matrix X = gaussian(n, 10, rng), B = gaussian(10, 32, rng);
  Matrix Y = X * B + gaussian(n, 32, rng, 0.5);
  DesignMatrix d{X, gaussian(n, 2, rng), "planted"};
  auto res = encode_cv(d, as_epochs(Y, 4, 8), quick_encode());
  EXPECT_EQ(res.n_electrodes(), 4);
  EXPECT_EQ(res.n_lags(), 8);
  EXPECT_GE(res.r.mean(), 0.9);
  EXPECT_EQ(res.fold_alphas.size(), 5u);

  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  DesignMatrix shuffled{detail::select_rows(X, perm), d.covariates, "shuffled"};
  auto null = encode_cv(shuffled, as_epochs(Y, 4, 8), quick_encode());
  EXPECT_LT(std::abs(null.r.mean()), 0.05);
}

TEST(Encode, HeldOutFoldsDoNotLeak) {
  // Enough random columns to memorise the targets if held-out rows leaked.
  std::mt19937_64 rng(3);
  Matrix X = gaussian(200, 150, rng), Y = gaussian(200, 6, rng);
  auto opt = quick_encode();
  opt.grid = AlphaGrid::log_spaced(1e-4, 1e-2, 3);
  DesignMatrix d{X, Matrix::Zero(200, 2), "canary"};
  auto res = encode_cv(d, as_epochs(Y, 2, 3), opt);
  EXPECT_LT(std::abs(res.r.mean()), 0.1);
}

TEST(Encode, AffineFeatureChangesDoNotMatter) {
  std::mt19937_64 rng(4);
  const Index n = 300;
  Matrix X = gaussian(n, 5, rng);
  Matrix Y = X * gaussian(5, 6, rng) + gaussian(n, 6, rng);
  Matrix cov = gaussian(n, 2, rng);
  Matrix X2 = X;
  for (Index j = 0; j < 5; ++j) X2.col(j) = X2.col(j).array() * (j + 2.0) + 10.0 * j;
  auto a = encode_cv({X, cov, "a"}, as_epochs(Y, 2, 3), quick_encode());
  auto b = encode_cv({X2, cov, "b"}, as_epochs(Y, 2, 3), quick_encode());
  EXPECT_LT((a.r - b.r).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(a.fold_alphas, b.fold_alphas);
}

TEST(Encode, CovariateOnlyEqualsWordRateBaseline) {
  std::mt19937_64 rng(5);
  Matrix cov = gaussian(120, 2, rng), Y = cov * gaussian(2, 4, rng) + gaussian(120, 4, rng);
  auto base = encode_wordrate(cov, as_epochs(Y, 2, 2), quick_encode());
  auto same = encode_cv({Matrix(120, 0), cov, "empty"}, as_epochs(Y, 2, 2), quick_encode());
  EXPECT_EQ(base.r, same.r);
}

TEST(Encode, OrthogonalBlocksAddInSquaredCorrelation) {
  std::mt19937_64 rng(15);
  const Index n = 2000;
  Matrix X = gaussian(n, 6, rng), C = gaussian(n, 2, rng);
  Matrix Xc = X.rowwise() - col_means(X);
  C.rowwise() -= col_means(C);
  C -= Xc * (Xc.transpose() * Xc).ldlt().solve(Xc.transpose() * C);
  Matrix Y = X * gaussian(6, 8, rng, 0.3) + C * gaussian(2, 8, rng, 0.3) + gaussian(n, 8, rng);
  auto ep = as_epochs(Y, 2, 4);
  auto full = encode_cv({X, C, "full"}, ep, quick_encode());
  auto embed = encode_cv({X, Matrix(n, 0), "embed"}, ep, quick_encode());
  auto wr = encode_wordrate(C, ep, quick_encode());
  const Matrix gap = embed.r.array().square() + wr.r.array().square() - full.r.array().square();
  EXPECT_LE(gap.cwiseAbs().mean(), 1e-2);
}

TEST(Encode, SmallestLegalFoldCount) {
  std::mt19937_64 rng(6);
  Matrix X = gaussian(5, 2, rng), Y = gaussian(5, 2, rng);
  auto opt = quick_encode();
  auto res = encode_cv({X, Matrix::Zero(5, 2), "tiny"}, as_epochs(Y, 1, 2), opt);
  EXPECT_TRUE(res.r.allFinite());
  opt.folds = 6;
  EXPECT_THROW(encode_cv({X, Matrix::Zero(5, 2), "tiny"}, as_epochs(Y, 1, 2), opt), ValidationError);
  opt.folds = 1;
  EXPECT_THROW(encode_cv({X, Matrix::Zero(5, 2), "tiny"}, as_epochs(Y, 1, 2), opt), ValidationError);
}

TEST(Encode, ConfidenceBandBracketsTheEstimate) {
  std::mt19937_64 rng(7);
  Matrix X = gaussian(400, 4, rng);
  Matrix Y = X * gaussian(4, 4, rng) + gaussian(400, 4, rng, 2.0);
  auto opt = quick_encode();
  opt.ci_resamples = 40;
  auto res = encode_cv({X, Matrix::Zero(400, 2), "ci"}, as_epochs(Y, 2, 2), opt);
  ASSERT_EQ(res.r_ci_low.rows(), 2);
  EXPECT_TRUE((res.r_ci_low.array() <= res.r.array() + 0.05).all());
  EXPECT_TRUE((res.r_ci_high.array() >= res.r.array() - 0.05).all());
}

TEST(Encode, MismatchedRowsRaise) {
  Matrix X = Matrix::Ones(10, 2), Y = Matrix::Ones(9, 2);
  EXPECT_THROW(encode_cv({X, Matrix::Zero(10, 2), "x"}, as_epochs(Y, 1, 2), quick_encode()), ValidationError);
}

TEST(WordRateRegression, TrivialCases) {
  EXPECT_DOUBLE_EQ(regress_out_wordrate(0.5, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(regress_out_wordrate(0.3, 0.4), 0.0);
  EXPECT_NEAR(regress_out_wordrate(-0.5, 0.3), -0.4, 1e-15);
  EXPECT_DOUBLE_EQ(regress_out_wordrate(0.0, 0.2), 0.0);
  EXPECT_THROW(regress_out_wordrate(1.2, 0.0), ValidationError);
  EXPECT_THROW(regress_out_wordrate(0.2, std::nan("")), ValidationError);
  Matrix a(1, 2), b(1, 2);
  a << 0.5, -0.5;
  b << 0.0, 0.3;
  Matrix out = regress_out_wordrate(a, b);
  EXPECT_NEAR(out(0, 1), -0.4, 1e-15);
  EXPECT_THROW(regress_out_wordrate(a, Matrix::Zero(2, 2)), ValidationError);
}

TEST(TemporalProfile, SingleElectrodeIsItsOwnCurve) {
  Matrix r(3, 4);
  r << 0.1, 0.4, 0.2, 0.0, 9, 9, 9, 9, 0.3, 0.1, 0.0, 0.2;
  auto tp = temporal_profile(r, {true, false, false}, {-0.1, 0.0, 0.1, 0.2});
  EXPECT_EQ(tp.mean_r, (std::vector<double>{0.1, 0.4, 0.2, 0.0}));
  EXPECT_EQ(tp.peak_lag, 1);
  EXPECT_DOUBLE_EQ(tp.peak_lag_s, 0.0);
}

TEST(TemporalProfile, OppositeCurvesCancel) {
  Matrix r(2, 3);
  r << 0.2, -0.1, 0.5, -0.2, 0.1, -0.5;
  auto tp = temporal_profile(r, {true, true}, {});
  for (double v : tp.mean_r) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(TemporalProfile, EmptyOrWrongMaskRaises) {
  Matrix r = Matrix::Zero(2, 3);
  EXPECT_THROW(temporal_profile(r, {false, false}, {}), EmptySelectionError);
  EXPECT_THROW(temporal_profile(r, {true}, {}), ValidationError);
}

TEST(ColumnPearson, ConstantColumnsGiveZeroAndAreCounted) {
  Matrix a(4, 2), b(4, 2);
  a << 1, 2, 2, 2, 3, 2, 4, 2;
  b << 2, 1, 4, 3, 6, 2, 8, 5;
  Index constant = 0;
  RowVector r = column_pearson(a, b, &constant);
  EXPECT_NEAR(r(0), 1.0, 1e-15);
  EXPECT_EQ(r(1), 0.0);
  EXPECT_EQ(constant, 1);
}
