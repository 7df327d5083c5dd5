#pragma once
// Word-aligned epoching of multi-electrode recordings and cross-validated
// ridge encoding models scored by held-out Pearson correlation.
//
// Neural binary (`.hgnr`) layout, little-endian:
//
//   offset  size  field
//   0       6     magic "HGNR1\0"
//   6       2     u16 version (1)
//   8       4     u32 electrode count
//   12      4     u32 dtype code (1 = float32)
//   16      8     u64 samples per electrode
//   24      8     f64 sampling rate (Hz)
//   32      32    reserved, zero
//   64      ...   electrode-major float32 samples
//
// Electrode metadata is a TSV with header
// `subject	electrode	x_mm	y_mm	z_mm	region	hemisphere`; word events are a
// TSV with header `word_index	onset_s	word	syllables` (syllables -1 = unknown).

#include "resdis/activation_store.hpp"
#include "resdis/probing.hpp"
#include "resdis/ridge.hpp"

#include <numbers>
#include <random>

namespace resdis {

inline constexpr std::array<char, 6> kNeuralMagic = {'H', 'G', 'N', 'R', '1', '\0'};

struct ElectrodeMeta {
  std::string subject;
  std::string name;
  double x_mm = 0, y_mm = 0, z_mm = 0;
  std::string region;
  std::string hemisphere;  ///< "L" or "R"
};

struct NeuralRecording {
  MatrixF signal;  ///< electrodes x samples
  double fs = 0;
  std::vector<ElectrodeMeta> electrodes;

  Index n_electrodes() const { return signal.rows(); }
  Index n_samples() const { return signal.cols(); }
  double duration_s() const { return static_cast<double>(n_samples()) / fs; }

  void validate() const {
    if (!(fs > 0) || !std::isfinite(fs)) throw ValidationError("sampling rate must be positive");
    if (static_cast<Index>(electrodes.size()) != n_electrodes())
      throw ValidationError("electrode metadata rows (" + std::to_string(electrodes.size()) +
                            ") do not match signal rows (" + std::to_string(n_electrodes()) + ")");
    if (!signal.allFinite()) throw ValidationError("non-finite neural signal");
  }
};

inline void write_neural_signal(const NeuralRecording& rec, const std::filesystem::path& path) {
  if (!rec.signal.allFinite()) throw ValidationError("non-finite neural signal");
  std::array<unsigned char, 64> hdr{};
  std::memcpy(hdr.data(), kNeuralMagic.data(), kNeuralMagic.size());
  auto put = [&](std::size_t off, auto v) { std::memcpy(hdr.data() + off, &v, sizeof v); };
  put(6, std::uint16_t{1});
  put(8, static_cast<std::uint32_t>(rec.n_electrodes()));
  put(12, kDtypeFloat32);
  put(16, static_cast<std::uint64_t>(rec.n_samples()));
  put(24, rec.fs);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(hdr.data()), 64);
  out.write(reinterpret_cast<const char*>(rec.signal.data()),
            static_cast<std::streamsize>(rec.signal.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + path.string());
}

inline void read_neural_signal(NeuralRecording& rec, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<unsigned char, 64> hdr{};
  in.read(reinterpret_cast<char*>(hdr.data()), 64);
  if (in.gcount() != 64 || std::memcmp(hdr.data(), kNeuralMagic.data(), kNeuralMagic.size()) != 0)
    throw FormatError(path.string() + ": bad magic: not a neural signal file");
  auto get = [&](std::size_t off, auto v) {
    std::memcpy(&v, hdr.data() + off, sizeof v);
    return v;
  };
  if (get(6, std::uint16_t{}) != 1) throw FormatError(path.string() + ": unsupported version");
  auto ne = get(8, std::uint32_t{});
  if (get(12, std::uint32_t{}) != kDtypeFloat32) throw FormatError(path.string() + ": dtype is not float32");
  auto ns = get(16, std::uint64_t{});
  rec.fs = get(24, double{});
  rec.signal.resize(ne, static_cast<Index>(ns));
  in.read(reinterpret_cast<char*>(rec.signal.data()), static_cast<std::streamsize>(rec.signal.size() * sizeof(float)));
  if (static_cast<std::uint64_t>(in.gcount()) != rec.signal.size() * sizeof(float))
    throw CorruptError(path.string() + ": truncated signal");
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptError(path.string() + ": trailing bytes");
}

inline void write_electrodes(const std::vector<ElectrodeMeta>& meta, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subject\telectrode\tx_mm\ty_mm\tz_mm\tregion\themisphere\n";
  for (const auto& m : meta)
    out << m.subject << '\t' << m.name << '\t' << fmt_num(m.x_mm) << '\t' << fmt_num(m.y_mm) << '\t'
        << fmt_num(m.z_mm) << '\t' << m.region << '\t' << m.hemisphere << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    auto tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cols;
}

}  // namespace detail

inline std::vector<ElectrodeMeta> read_electrodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("subject\t", 0) != 0) throw FormatError(path.string() + ": missing header");
  std::vector<ElectrodeMeta> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto c = detail::split_tabs(line);
    if (c.size() != 7) throw FormatError(path.string() + ": expected 7 columns");
    ElectrodeMeta m;
    m.subject = c[0];
    m.name = c[1];
    try {
      m.x_mm = std::stod(c[2]);
      m.y_mm = std::stod(c[3]);
      m.z_mm = std::stod(c[4]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad coordinate for " + c[1]);
    }
    m.region = c[5];
    m.hemisphere = c[6];
    if (m.hemisphere != "L" && m.hemisphere != "R")
      throw ValidationError("electrode " + m.name + " has hemisphere '" + m.hemisphere + "'");
    out.push_back(std::move(m));
  }
  return out;
}

inline NeuralRecording read_recording(const std::filesystem::path& signal_path, const std::filesystem::path& meta_path) {
  NeuralRecording rec;
  read_neural_signal(rec, signal_path);
  rec.electrodes = read_electrodes(meta_path);
  rec.validate();
  return rec;
}

// ---------------------------------------------------------------------------
// Word events and word-rate covariates
// ---------------------------------------------------------------------------

struct WordEvent {
  std::int64_t word_index = 0;
  double onset_s = 0;
  std::string text;
  int syllables = -1;
};

inline void write_words(const std::vector<WordEvent>& words, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "word_index\tonset_s\tword\tsyllables\n";
  for (const auto& w : words)
    out << w.word_index << '\t' << fmt_num(w.onset_s) << '\t' << w.text << '\t' << w.syllables << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<WordEvent> read_words(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("word_index\t", 0) != 0) throw FormatError(path.string() + ": missing header");
  std::vector<WordEvent> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto c = detail::split_tabs(line);
    if (c.size() != 4) throw FormatError(path.string() + ": expected 4 columns");
    try {
      out.push_back({std::stoll(c[0]), std::stod(c[1]), c[2], std::stoi(c[3])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed word row");
    }
  }
  return out;
}

/// Vowel-group syllable estimate: runs of a/e/i/o/u/y, minus a silent final
/// 'e' (not "-le"), at least one for any word containing a letter.
inline int count_syllables(std::string_view word) {
  std::string w;
  for (char ch : word)
    if (std::isalpha(static_cast<unsigned char>(ch))) w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  if (w.empty()) return 0;
  auto vowel = [](char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u' || c == 'y'; };
  int groups = 0;
  bool prev = false;
  for (char c : w) {
    bool v = vowel(c);
    if (v && !prev) ++groups;
    prev = v;
  }
  if (w.size() > 2 && w.back() == 'e' && !vowel(w[w.size() - 2]) && !(w[w.size() - 2] == 'l') && groups > 1) --groups;
  return std::max(groups, 1);
}

/// Per event: [words per second, syllables per second] within a window
/// centred on the onset.
inline Matrix word_rate_covariates(const std::vector<WordEvent>& words, double window_s = 1.0) {
  const Index n = static_cast<Index>(words.size());
  Matrix C(n, 2);
  std::vector<int> syl;
  for (const auto& w : words) syl.push_back(w.syllables >= 0 ? w.syllables : count_syllables(w.text));
  std::size_t lo = 0, hi = 0;
  int syl_sum = 0;
  for (Index i = 0; i < n; ++i) {
    const double t = words[static_cast<std::size_t>(i)].onset_s;
    while (hi < words.size() && words[hi].onset_s < t + window_s / 2) syl_sum += syl[hi++];
    while (lo < hi && words[lo].onset_s < t - window_s / 2) syl_sum -= syl[lo++];
    C(i, 0) = static_cast<double>(hi - lo) / window_s;
    C(i, 1) = static_cast<double>(syl_sum) / window_s;
  }
  return C;
}

// ---------------------------------------------------------------------------
// Epoching
// ---------------------------------------------------------------------------

struct EpochOptions {
  double window_s = 2.0;        ///< events span [onset - window, onset + window)
  double rate_hz = 32.0;        ///< output bin rate
  double kernel_halfwidth_s = 0.125;
};

struct EpochedNeural {
  Matrix Y;  ///< events x (electrodes * lags), column e * n_lags + k
  Index n_electrodes = 0;
  Index n_lags = 0;
  std::vector<double> lag_times_s;
  std::vector<std::size_t> kept;  ///< indices of the kept onsets
  Index dropped = 0;

  Index n_events() const { return Y.rows(); }
};

/// Windowed-sinc resampling of each event window to rate_hz. The kernel is a
/// Blackman-windowed sinc with cutoff rate_hz / 2, evaluated at the exact lag
/// times and normalised to unit gain, so a constant signal maps to itself.
inline EpochedNeural epoch(const NeuralRecording& rec, const std::vector<double>& onsets, const EpochOptions& opt = {}) {
  rec.validate();
  if (rec.fs < 2.0 * opt.rate_hz)
    throw ResamplingError("sampling rate " + fmt_num(rec.fs) + " Hz is below twice the " + fmt_num(opt.rate_hz) +
                          " Hz output rate");
  for (std::size_t i = 1; i < onsets.size(); ++i)
    if (onsets[i] < onsets[i - 1]) throw ValidationError("onsets must be non-decreasing");
  const Index n_lags = static_cast<Index>(std::llround(2.0 * opt.window_s * opt.rate_hz));
  EpochedNeural ep;
  ep.n_electrodes = rec.n_electrodes();
  ep.n_lags = n_lags;
  for (Index k = 0; k < n_lags; ++k) ep.lag_times_s.push_back(-opt.window_s + static_cast<double>(k) / opt.rate_hz);
  const double dur = rec.duration_s();
  for (std::size_t i = 0; i < onsets.size(); ++i) {
    if (onsets[i] - opt.window_s < 0 || onsets[i] + opt.window_s > dur) {
      ++ep.dropped;
      continue;
    }
    ep.kept.push_back(i);
  }
  ep.Y.resize(static_cast<Index>(ep.kept.size()), ep.n_electrodes * n_lags);

  const double fc = opt.rate_hz / 2.0;
  const double T = opt.kernel_halfwidth_s;
  const Index N = rec.n_samples();
  Vector w;
  for (std::size_t ev = 0; ev < ep.kept.size(); ++ev) {
    const double onset = onsets[ep.kept[ev]];
    for (Index k = 0; k < n_lags; ++k) {
      const double t = onset + ep.lag_times_s[static_cast<std::size_t>(k)];
      Index first = std::max<Index>(0, static_cast<Index>(std::ceil((t - T) * rec.fs)));
      Index last = std::min<Index>(N - 1, static_cast<Index>(std::floor((t + T) * rec.fs)));
      const Index len = last - first + 1;
      w.resize(std::max<Index>(len, 0));
      double wsum = 0;
      for (Index j = 0; j < len; ++j) {
        const double tau = static_cast<double>(first + j) / rec.fs - t;
        const double x = 2.0 * fc * tau;
        const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        const double u = tau / T;  // [-1, 1]
        const double win = std::abs(u) >= 1.0
                               ? 0.0
                               : 0.42 + 0.5 * std::cos(std::numbers::pi * u) + 0.08 * std::cos(2.0 * std::numbers::pi * u);
        w(j) = sinc * win;
        wsum += w(j);
      }
      if (len <= 0 || !(std::abs(wsum) > 0)) throw ResamplingError("empty resampling kernel");
      w /= wsum;
      for (Index e = 0; e < ep.n_electrodes; ++e)
        ep.Y(static_cast<Index>(ev), e * n_lags + k) =
            rec.signal.row(e).segment(first, len).cast<double>().dot(w);
    }
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct DesignMatrix {
  Matrix X;           ///< events x d feature block
  Matrix covariates;  ///< events x 2 word-rate columns
  std::string feature_tag;

  void validate() const {
    if (X.rows() != covariates.rows()) throw ValidationError("features and covariates differ in rows");
    if (!X.allFinite() || !covariates.allFinite()) throw ValidationError("non-finite design matrix");
  }

  /// [X, covariates]
  Matrix full() const {
    Matrix out(X.rows(), X.cols() + covariates.cols());
    out << X, covariates;
    return out;
  }
};

struct EncodeOptions {
  AlphaGrid grid = AlphaGrid::log_spaced(1e-2, 1e6, 10);
  Index folds = 5;
  Index boot_b = 5;    ///< alpha-selection resamples per outer fold
  Index chunk_l = 32;  ///< contiguous chunk length, in events
  double val_fraction = 0.2;
  Index ci_resamples = 50;  ///< block bootstrap of the held-out r; 0 disables
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct CorrelationResult {
  std::string feature_tag;
  Matrix r;         ///< electrodes x lags
  Matrix r_ci_low;  ///< 2.5% block-bootstrap percentile (empty when disabled)
  Matrix r_ci_high;
  Matrix r_sd;
  Vector r_peak;
  Vector peak_lag_s;
  std::vector<Index> peak_lag;
  std::vector<double> fold_alphas;
  Index constant_cells = 0;  ///< cells with constant target or prediction, r := 0
  std::vector<double> lag_times_s;

  Index n_electrodes() const { return r.rows(); }
  Index n_lags() const { return r.cols(); }

  void compute_peaks() {
    r_peak.resize(r.rows());
    peak_lag_s.resize(r.rows());
    peak_lag.assign(static_cast<std::size_t>(r.rows()), 0);
    for (Index e = 0; e < r.rows(); ++e) {
      Index k;
      r_peak(e) = r.row(e).maxCoeff(&k);
      peak_lag[static_cast<std::size_t>(e)] = k;
      peak_lag_s(e) = lag_times_s.empty() ? static_cast<double>(k) : lag_times_s[static_cast<std::size_t>(k)];
    }
  }
};

/// Pearson r per column; columns where either side is constant give 0.
inline RowVector column_pearson(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b,
                                Index* constant = nullptr) {
  const Index q = a.cols();
  RowVector r(q);
  RowVector ma = col_means(a), mb = col_means(b);
  for (Index j = 0; j < q; ++j) {
    const auto ca = a.col(j).array() - ma(j);
    const auto cb = b.col(j).array() - mb(j);
    const double saa = ca.square().sum(), sbb = cb.square().sum();
    const double scale = std::max(1.0, static_cast<double>(a.rows()));
    if (!(saa > 1e-24 * scale) || !(sbb > 1e-24 * scale)) {
      r(j) = 0;
      if (constant != nullptr) ++*constant;
      continue;
    }
    r(j) = std::clamp((ca * cb).sum() / std::sqrt(saa * sbb), -1.0, 1.0);
  }
  return r;
}

namespace detail {

struct Standardizer {
  RowVector mean, scale;

  static Standardizer fit(const Eigen::Ref<const Matrix>& X) {
    Standardizer s;
    s.mean = col_means(X);
    s.scale = ((X.rowwise() - s.mean).colwise().squaredNorm() / std::max<double>(1.0, static_cast<double>(X.rows())))
                  .cwiseSqrt();
    for (Index j = 0; j < s.scale.size(); ++j)
      if (!(s.scale(j) > 1e-12)) s.scale(j) = 1.0;
    return s;
  }
  Matrix apply(const Eigen::Ref<const Matrix>& X) const {
    return ((X.rowwise() - mean).array().rowwise() / scale.array()).matrix();
  }
};

/// Picks the grid alpha with the best mean validation r across all columns,
/// averaged over `boot_b` resamples that hold out random contiguous chunks.
inline std::size_t select_alpha(const Matrix& Xtr, const Matrix& Ytr, const EncodeOptions& opt, std::mt19937_64& rng) {
  const Index n = Xtr.rows();
  const std::size_t na = opt.grid.values.size();
  if (n < 4 || Xtr.cols() == 0) return 0;
  const Index chunk = std::max<Index>(1, std::min<Index>(opt.chunk_l, n / 4));
  const Index n_blocks = (n + chunk - 1) / chunk;
  const Index n_val_blocks =
      std::clamp<Index>(static_cast<Index>(std::llround(opt.val_fraction * static_cast<double>(n_blocks))), 1, n_blocks - 1);
  std::vector<double> score(na, 0.0);
  for (Index b = 0; b < opt.boot_b; ++b) {
    std::vector<Index> blocks(static_cast<std::size_t>(n_blocks));
    std::iota(blocks.begin(), blocks.end(), Index{0});
    std::shuffle(blocks.begin(), blocks.end(), rng);
    std::vector<char> is_val(static_cast<std::size_t>(n), 0);
    for (Index k = 0; k < n_val_blocks; ++k)
      for (Index i = blocks[static_cast<std::size_t>(k)] * chunk; i < std::min(n, (blocks[static_cast<std::size_t>(k)] + 1) * chunk); ++i)
        is_val[static_cast<std::size_t>(i)] = 1;
    std::vector<Index> tr, va;
    for (Index i = 0; i < n; ++i) (is_val[static_cast<std::size_t>(i)] ? va : tr).push_back(i);
    Matrix Xa = select_rows(Xtr, tr), Ya = select_rows(Ytr, tr);
    Matrix Xv = select_rows(Xtr, va), Yv = select_rows(Ytr, va);
    Standardizer st = Standardizer::fit(Xa);
    Matrix Xa_s = st.apply(Xa);
    RowVector ya = col_means(Ya);
    Ya.rowwise() -= ya;
    RidgePath path(Xa_s, Ya);
    Matrix Xv_p = st.apply(Xv) * path.basis();
    // Held-out R^2 rather than r: r is blind to the prediction scale, so it
    // cannot tell grid points apart on low-rank designs, while the outer
    // folds are concatenated before correlating.
    Yv.rowwise() -= ya;
    const RowVector sst = (Yv.rowwise() - col_means(Yv)).colwise().squaredNorm();
    for (std::size_t a = 0; a < na; ++a) {
      Matrix pred = path.predict_projected(Xv_p, opt.grid.values[a]);
      const RowVector sse = (Yv - pred).colwise().squaredNorm();
      double r2 = 0;
      Index used = 0;
      for (Index j = 0; j < Yv.cols(); ++j)
        if (sst(j) > 0) {
          r2 += 1.0 - sse(j) / sst(j);
          ++used;
        }
      score[a] += used > 0 ? r2 / static_cast<double>(used) : 0.0;
    }
  }
  std::size_t best = 0;
  for (std::size_t a = 1; a < na; ++a)
    if (score[a] > score[best]) best = a;
  return best;
}

}  // namespace detail

/// Held-out predictions from contiguous outer folds. Alpha per fold is chosen
/// by chunked resampling inside the training rows unless `frozen_alphas` is
/// given. Forms the single code path for every encoding fit.
inline Matrix cv_ridge_predict(const Eigen::Ref<const Matrix>& features, const Eigen::Ref<const Matrix>& Y,
                               const EncodeOptions& opt, std::vector<double>& fold_alphas,
                               const std::vector<double>* frozen_alphas = nullptr) {
  const Index n = features.rows();
  if (Y.rows() != n) throw ValidationError("design rows (" + std::to_string(n) + ") differ from neural events (" +
                                           std::to_string(Y.rows()) + ")");
  opt.grid.validate();
  const auto bounds = fold_bounds(n, opt.folds);
  if (frozen_alphas != nullptr && frozen_alphas->size() != bounds.size())
    throw ValidationError("frozen alphas do not match the fold count");
  Matrix held(n, Y.cols());
  fold_alphas.assign(bounds.size(), 0.0);
  for (std::size_t f = 0; f < bounds.size(); ++f) {
    const auto [b, e] = bounds[f];
    Matrix Xtr = rows_excluding(features, b, e);
    Matrix Ytr = rows_excluding(Y, b, e);
    double alpha;
    if (frozen_alphas != nullptr) {
      alpha = (*frozen_alphas)[f];
    } else {
      std::mt19937_64 rng(derive_seed(opt.seed, f));
      alpha = opt.grid.values[detail::select_alpha(Xtr, Ytr, opt, rng)];
    }
    fold_alphas[f] = alpha;
    RowVector ymean = col_means(Ytr);
    if (Xtr.cols() == 0) {
      held.middleRows(b, e - b).rowwise() = ymean;
      continue;
    }
    detail::Standardizer st = detail::Standardizer::fit(Xtr);
    Ytr.rowwise() -= ymean;
    Matrix W = detail::solve_ridge(st.apply(Xtr), Ytr, alpha);
    Matrix pred = st.apply(features.middleRows(b, e - b)) * W;
    pred.rowwise() += ymean;
    held.middleRows(b, e - b) = pred;
  }
  return held;
}

/// Encoding fit with word-rate covariates appended to the feature block.
inline CorrelationResult encode_cv(const DesignMatrix& design, const EpochedNeural& Y, const EncodeOptions& opt,
                                   const std::vector<double>* frozen_alphas = nullptr) {
  design.validate();
  if (design.X.rows() != Y.n_events()) throw ValidationError("design rows do not match epochs");
  if (opt.folds < 2) throw ValidationError("encoding needs at least 2 folds");
  CorrelationResult res;
  res.feature_tag = design.feature_tag;
  res.lag_times_s = Y.lag_times_s;
  Matrix held = cv_ridge_predict(design.full(), Y.Y, opt, res.fold_alphas, frozen_alphas);
  RowVector r = column_pearson(held, Y.Y, &res.constant_cells);
  res.r = Eigen::Map<const Matrix>(r.data(), Y.n_lags, Y.n_electrodes).transpose();
  res.compute_peaks();

  if (opt.ci_resamples > 0 && Y.n_events() >= 2) {
    // Block bootstrap over contiguous event chunks of the held-out predictions.
    const Index n = Y.n_events();
    const Index chunk = std::max<Index>(1, std::min(opt.chunk_l, n));
    const Index n_chunks = (n + chunk - 1) / chunk;
    const Index B = opt.ci_resamples;
    const Index q = Y.Y.cols();
    Matrix draws(B, q);
    std::mt19937_64 rng(derive_seed(opt.seed, 0xC1));
    std::uniform_int_distribution<Index> pick(0, n_chunks - 1);
    for (Index bi = 0; bi < B; ++bi) {
      std::vector<Index> rows;
      while (static_cast<Index>(rows.size()) < n) {
        Index c = pick(rng);
        for (Index i = c * chunk; i < std::min(n, (c + 1) * chunk) && static_cast<Index>(rows.size()) < n; ++i)
          rows.push_back(i);
      }
      draws.row(bi) = column_pearson(detail::select_rows(held, rows), detail::select_rows(Y.Y, rows));
    }
    RowVector lo(q), hi(q), sd(q);
    std::vector<double> col(static_cast<std::size_t>(B));
    for (Index j = 0; j < q; ++j) {
      for (Index bi = 0; bi < B; ++bi) col[static_cast<std::size_t>(bi)] = draws(bi, j);
      std::sort(col.begin(), col.end());
      auto quant = [&](double p) {
        double pos = p * static_cast<double>(B - 1);
        auto i0 = static_cast<std::size_t>(std::floor(pos));
        auto i1 = std::min(i0 + 1, col.size() - 1);
        return col[i0] + (pos - static_cast<double>(i0)) * (col[i1] - col[i0]);
      };
      lo(j) = quant(0.025);
      hi(j) = quant(0.975);
      double m = draws.col(j).mean();
      sd(j) = B > 1 ? std::sqrt((draws.col(j).array() - m).square().sum() / static_cast<double>(B - 1)) : 0.0;
    }
    res.r_ci_low = Eigen::Map<const Matrix>(lo.data(), Y.n_lags, Y.n_electrodes).transpose();
    res.r_ci_high = Eigen::Map<const Matrix>(hi.data(), Y.n_lags, Y.n_electrodes).transpose();
    res.r_sd = Eigen::Map<const Matrix>(sd.data(), Y.n_lags, Y.n_electrodes).transpose();
  }
  return res;
}

/// Baseline with the word-rate covariates alone (same code path, empty block).
inline CorrelationResult encode_wordrate(const Matrix& covariates, const EpochedNeural& Y, const EncodeOptions& opt) {
  DesignMatrix d{Matrix(covariates.rows(), 0), covariates, "wordrate"};
  return encode_cv(d, Y, opt);
}

/// sign(r_full) * sqrt(max(0, r_full^2 - r_wr^2)), elementwise.
inline double regress_out_wordrate(double r_full, double r_wr) {
  if (!(std::abs(r_full) <= 1.0) || !(std::abs(r_wr) <= 1.0))
    throw ValidationError("correlations must lie in [-1, 1]");
  const double sign = r_full > 0 ? 1.0 : (r_full < 0 ? -1.0 : 0.0);
  return sign * std::sqrt(std::max(0.0, r_full * r_full - r_wr * r_wr));
}

inline Matrix regress_out_wordrate(const Eigen::Ref<const Matrix>& r_full, const Eigen::Ref<const Matrix>& r_wr) {
  if (r_full.rows() != r_wr.rows() || r_full.cols() != r_wr.cols())
    throw ValidationError("correlation arrays differ in shape");
  Matrix out(r_full.rows(), r_full.cols());
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j) out(i, j) = regress_out_wordrate(r_full(i, j), r_wr(i, j));
  return out;
}

struct TemporalProfile {
  std::vector<double> mean_r;
  Index peak_lag = 0;
  double peak_lag_s = 0;
};

/// Mean r across the selected electrodes at each lag.
inline TemporalProfile temporal_profile(const Eigen::Ref<const Matrix>& r, const std::vector<bool>& mask,
                                        const std::vector<double>& lag_times_s) {
  if (static_cast<Index>(mask.size()) != r.rows()) throw ValidationError("mask length does not match electrodes");
  Vector sum = Vector::Zero(r.cols());
  Index count = 0;
  for (Index e = 0; e < r.rows(); ++e)
    if (mask[static_cast<std::size_t>(e)]) {
      sum += r.row(e).transpose();
      ++count;
    }
  if (count == 0) throw EmptySelectionError("no electrodes selected");
  sum /= static_cast<double>(count);
  TemporalProfile tp;
  tp.mean_r.assign(sum.data(), sum.data() + sum.size());
  sum.maxCoeff(&tp.peak_lag);
  tp.peak_lag_s = lag_times_s.empty() ? static_cast<double>(tp.peak_lag) : lag_times_s[static_cast<std::size_t>(tp.peak_lag)];
  return tp;
}

inline TemporalProfile temporal_profile(const CorrelationResult& res, const std::vector<bool>& mask) {
  return temporal_profile(res.r, mask, res.lag_times_s);
}

}  // namespace resdis
