#pragma once
// Minimal-pair probing: per-layer logistic probes, saturation-layer detection
// and the bag-of-words task filter.

#include "resdis/activation_store.hpp"

#include <cctype>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

namespace resdis {

enum class FeatureKind { lexicon, syntax, meaning, reasoning };

inline const char* to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::lexicon: return "lexicon";
    case FeatureKind::syntax: return "syntax";
    case FeatureKind::meaning: return "meaning";
    case FeatureKind::reasoning: return "reasoning";
  }
  return "?";
}

inline FeatureKind parse_feature_kind(std::string_view s) {
  if (s == "lexicon") return FeatureKind::lexicon;
  if (s == "syntax") return FeatureKind::syntax;
  if (s == "meaning") return FeatureKind::meaning;
  if (s == "reasoning") return FeatureKind::reasoning;
  throw ValidationError("unknown feature kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Logistic probe
// ---------------------------------------------------------------------------

/// sigma(w . standardize(x) + b). Standardization statistics come from the
/// training rows.
struct ProbeClassifier {
  Vector weights;
  double bias = 0;
  double reg = 1.0;
  RowVector mean;
  RowVector scale;

  Vector decision(const Eigen::Ref<const Matrix>& X) const {
    Matrix Xs = (X.rowwise() - mean).array().rowwise() / scale.array();
    return (Xs * weights).array() + bias;
  }

  Vector probability(const Eigen::Ref<const Matrix>& X) const {
    return decision(X).unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  }
};

struct ProbeOptions {
  Index folds = 5;
  double reg = 1.0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

namespace detail {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double logistic_loss(const Matrix& X, const Vector& y, const Vector& w, double b, double reg) {
  Vector z = (X * w).array() + b;
  double f = 0;
  for (Index i = 0; i < z.size(); ++i) f += softplus(z(i)) - y(i) * z(i);
  return f + 0.5 * reg * w.squaredNorm();
}

}  // namespace detail

/// L2-penalised logistic regression (bias unpenalised) by truncated Newton
/// with conjugate-gradient inner solves and Armijo backtracking.
inline ProbeClassifier fit_logistic(const Eigen::Ref<const Matrix>& X, const std::vector<int>& labels, double reg) {
  const Index n = X.rows(), d = X.cols();
  if (static_cast<Index>(labels.size()) != n) throw ValidationError("label count does not match rows");
  if (!X.allFinite()) throw ValidationError("non-finite probe embeddings");
  ProbeClassifier clf;
  clf.reg = reg;
  clf.mean = col_means(X);
  Matrix Xs = X.rowwise() - clf.mean;
  clf.scale = (Xs.colwise().squaredNorm() / std::max<double>(1.0, static_cast<double>(n))).cwiseSqrt();
  for (Index j = 0; j < d; ++j)
    if (!(clf.scale(j) > 1e-12)) clf.scale(j) = 1.0;
  Xs.array().rowwise() /= clf.scale.array();

  Vector y(n);
  for (Index i = 0; i < n; ++i) y(i) = labels[static_cast<std::size_t>(i)] != 0 ? 1.0 : 0.0;
  Vector w = Vector::Zero(d);
  double b = 0;
  double g0 = -1;
  for (int it = 0; it < 100; ++it) {
    Vector z = (Xs * w).array() + b;
    Vector p = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    Vector r = p - y;
    Vector gw = Xs.transpose() * r + reg * w;
    double gb = r.sum();
    double gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
    if (g0 < 0) g0 = gnorm;
    if (gnorm <= 1e-8 * std::max(1.0, g0)) break;
    Vector s = (p.array() * (1.0 - p.array())).matrix();

    // CG on H [dw; db] = -[gw; gb].
    Vector dw = Vector::Zero(d);
    double db = 0;
    Vector resw = -gw;
    double resb = -gb;
    Vector pw = resw;
    double pb = resb;
    double rs = resw.squaredNorm() + resb * resb;
    const double cg_tol = std::min(0.5, std::sqrt(gnorm)) * gnorm;
    for (Index k = 0; k < std::min<Index>(d + 1, 250); ++k) {
      Vector u = (Xs * pw).array() + pb;
      Vector su = s.cwiseProduct(u);
      Vector hw = Xs.transpose() * su + reg * pw;
      double hb = su.sum() + 1e-12 * pb;
      double curv = pw.dot(hw) + pb * hb;
      if (!(curv > 0)) break;
      double step = rs / curv;
      dw += step * pw;
      db += step * pb;
      resw -= step * hw;
      resb -= step * hb;
      double rs_new = resw.squaredNorm() + resb * resb;
      if (std::sqrt(rs_new) <= cg_tol) {
        rs = rs_new;
        break;
      }
      pw = resw + (rs_new / rs) * pw;
      pb = resb + (rs_new / rs) * pb;
      rs = rs_new;
    }
    if (dw.squaredNorm() + db * db == 0) {
      dw = -gw;
      db = -gb;
    }
    const double f0 = detail::logistic_loss(Xs, y, w, b, reg);
    const double slope = gw.dot(dw) + gb * db;
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      if (detail::logistic_loss(Xs, y, w + t * dw, b + t * db, reg) <= f0 + 1e-4 * t * slope) {
        moved = true;
        break;
      }
    }
    if (!moved) break;
    w += t * dw;
    b += t * db;
  }
  clf.weights = std::move(w);
  clf.bias = b;
  return clf;
}

// ---------------------------------------------------------------------------
// Cross-validated probe scores
// ---------------------------------------------------------------------------

struct ProbeScore {
  double accuracy = 0;       ///< mean held-out sentence accuracy over folds
  double pair_accuracy = std::numeric_limits<double>::quiet_NaN();  ///< good member scored higher
  double macro_f1 = 0;       ///< pooled held-out predictions, mean F1 of both classes
  Index n = 0;
};

/// Deterministic fold ids. With groups, whole groups (minimal pairs) share a
/// fold; otherwise each class is shuffled and dealt round-robin.
inline std::vector<int> stratified_folds(const std::vector<int>& labels, const std::vector<std::int64_t>* groups,
                                         Index folds, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> fold(labels.size(), 0);
  if (groups != nullptr) {
    std::vector<std::int64_t> uniq(groups->begin(), groups->end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::shuffle(uniq.begin(), uniq.end(), rng);
    std::map<std::int64_t, int> assign;
    for (std::size_t i = 0; i < uniq.size(); ++i) assign[uniq[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    for (std::size_t i = 0; i < labels.size(); ++i) fold[i] = assign[(*groups)[i]];
    return fold;
  }
  std::size_t dealt = 0;
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if ((labels[i] != 0 ? 1 : 0) == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) fold[i] = static_cast<int>(dealt++ % static_cast<std::size_t>(folds));
  }
  return fold;
}

namespace detail {

inline void check_labels(const std::vector<int>& labels) {
  std::size_t pos = 0;
  for (int l : labels) pos += l != 0 ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DegenerateLabelError("probe labels contain a single class");
  if (pos < 2 || neg < 2) throw DegenerateLabelError("probe needs at least 2 examples per class");
}

inline Matrix select_rows(const Eigen::Ref<const Matrix>& X, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = X.row(rows[i]);
  return out;
}

}  // namespace detail

/// Held-out accuracy of the logistic probe. `groups` (pair ids) keep both
/// members of a pair in one fold and enable pair accuracy.
inline ProbeScore cross_validate_probe(const Eigen::Ref<const Matrix>& X, const std::vector<int>& labels,
                                       const ProbeOptions& opt, const std::vector<std::int64_t>* groups = nullptr) {
  if (X.rows() == 0) throw EmptyDatasetError("no probing items");
  if (static_cast<Index>(labels.size()) != X.rows()) throw ValidationError("label count does not match rows");
  if (opt.folds < 2) throw ValidationError("probe needs at least 2 folds");
  if (!X.allFinite()) throw ValidationError("non-finite probe embeddings");
  detail::check_labels(labels);
  const auto fold = stratified_folds(labels, groups, opt.folds, opt.seed);

  ProbeScore score;
  score.n = X.rows();
  std::vector<double> prob(labels.size(), 0.0);
  double acc_sum = 0;
  int used = 0;
  std::array<Index, 4> confusion{};  // tp, fp, fn, tn
  for (int f = 0; f < opt.folds; ++f) {
    std::vector<Index> tr, te;
    for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? te : tr).push_back(static_cast<Index>(i));
    if (te.empty()) continue;
    std::vector<int> ytr;
    for (Index i : tr) ytr.push_back(labels[static_cast<std::size_t>(i)]);
    if (std::count(ytr.begin(), ytr.end(), 0) == 0 || std::count(ytr.begin(), ytr.end(), 0) == static_cast<long>(ytr.size()))
      throw DegenerateLabelError("a training fold contains a single class");
    ProbeClassifier clf = fit_logistic(detail::select_rows(X, tr), ytr, opt.reg);
    Vector z = clf.decision(detail::select_rows(X, te));
    Index correct = 0;
    for (std::size_t k = 0; k < te.size(); ++k) {
      const std::size_t i = static_cast<std::size_t>(te[k]);
      prob[i] = z(static_cast<Index>(k));
      const bool pred = z(static_cast<Index>(k)) > 0, truth = labels[i] != 0;
      correct += pred == truth ? 1 : 0;
      ++confusion[pred ? (truth ? 0 : 1) : (truth ? 2 : 3)];
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(te.size());
    ++used;
  }
  score.accuracy = acc_sum / used;
  auto f1 = [](Index tp, Index fp, Index fn) {
    return tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  };
  score.macro_f1 = 0.5 * (f1(confusion[0], confusion[1], confusion[2]) + f1(confusion[3], confusion[2], confusion[1]));

  if (groups != nullptr) {
    // Pair accuracy: the acceptable member has the larger held-out logit.
    std::map<std::int64_t, std::pair<double, double>> pairs;  // (good logit, bad logit)
    std::map<std::int64_t, int> seen;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& pr = pairs[(*groups)[i]];
      (labels[i] != 0 ? pr.first : pr.second) = prob[i];
      seen[(*groups)[i]] |= labels[i] != 0 ? 1 : 2;
    }
    Index total = 0, wins = 0;
    for (const auto& [g, pr] : pairs) {
      if (seen[g] != 3) continue;
      ++total;
      wins += pr.first > pr.second ? 1 : 0;
    }
    if (total > 0) score.pair_accuracy = static_cast<double>(wins) / static_cast<double>(total);
  }
  return score;
}

struct TrainedProbe {
  ProbeClassifier classifier;  ///< refit on every row
  ProbeScore score;
};

inline TrainedProbe train_probe(const Eigen::Ref<const Matrix>& X, const std::vector<int>& labels,
                                const ProbeOptions& opt, const std::vector<std::int64_t>* groups = nullptr) {
  TrainedProbe out;
  out.score = cross_validate_probe(X, labels, opt, groups);
  out.classifier = fit_logistic(X, labels, opt.reg);
  return out;
}

// ---------------------------------------------------------------------------
// Minimal-pair sets
// ---------------------------------------------------------------------------

struct PairItem {
  std::int64_t pair_id = 0;
  int label = 0;  ///< 1 = acceptable member
  Index token_index = 0;
  std::string sentence;
};

struct MinimalPairSet {
  std::string task_name;
  FeatureKind feature_kind = FeatureKind::syntax;
  std::vector<PairItem> items;

  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& it : items) out.push_back(it.label);
    return out;
  }
  std::vector<std::int64_t> groups() const {
    std::vector<std::int64_t> out;
    for (const auto& it : items) out.push_back(it.pair_id);
    return out;
  }
  std::vector<Index> token_rows() const {
    std::vector<Index> out;
    for (const auto& it : items) out.push_back(it.token_index);
    return out;
  }

  void validate() const {
    if (items.empty()) throw EmptyDatasetError("task '" + task_name + "' has no items");
    std::size_t pos = 0;
    for (const auto& it : items) pos += it.label != 0 ? 1 : 0;
    if (2 * pos != items.size())
      throw ValidationError("task '" + task_name + "' is unbalanced (" + std::to_string(pos) + " of " +
                            std::to_string(items.size()) + " positive)");
  }
};

/// Line-delimited records: `task	feature	pair_id	label	token_index	sentence`,
/// one header line. Returns one set per task, in first-seen order.
inline std::vector<MinimalPairSet> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("task\t", 0) != 0) throw FormatError(path.string() + ": missing pairs header");
  std::vector<MinimalPairSet> sets;
  std::map<std::string, std::size_t> where;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (int c = 0; c < 5; ++c) {
      auto tab = line.find('\t', start);
      if (tab == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": too few columns");
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    cols.push_back(line.substr(start));
    auto [it, fresh] = where.emplace(cols[0], sets.size());
    if (fresh) {
      sets.push_back({});
      sets.back().task_name = cols[0];
      sets.back().feature_kind = parse_feature_kind(cols[1]);
    }
    PairItem item;
    try {
      item.pair_id = std::stoll(cols[2]);
      item.label = std::stoi(cols[3]);
      item.token_index = static_cast<Index>(std::stoll(cols[4]));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
    item.sentence = cols[5];
    sets[it->second].items.push_back(std::move(item));
  }
  return sets;
}

inline void write_pairs(const std::vector<MinimalPairSet>& sets, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "task\tfeature\tpair_id\tlabel\ttoken_index\tsentence\n";
  for (const auto& s : sets)
    for (const auto& it : s.items)
      out << s.task_name << '\t' << to_string(s.feature_kind) << '\t' << it.pair_id << '\t' << it.label << '\t'
          << it.token_index << '\t' << it.sentence << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Layer curves and saturation
// ---------------------------------------------------------------------------

struct ProbeCurve {
  std::string task_name;
  std::vector<double> per_layer_score;       ///< sentence accuracy, layers 0..L
  std::vector<double> per_layer_pair_score;  ///< pair accuracy, layers 0..L
  std::vector<double> per_layer_f1;          ///< macro F1, layers 0..L
  Index n_items = 0;
};

/// One cross-validated probe per layer on the items' token rows.
/// `expected_layers` (when nonzero) must equal the store's layer count.
inline ProbeCurve probe_all_layers(const ActivationStore& store, const MinimalPairSet& pairs, const ProbeOptions& opt,
                                   std::uint32_t expected_layers = 0) {
  if (pairs.items.empty()) throw EmptyDatasetError("task '" + pairs.task_name + "' has no items");
  pairs.validate();
  if (expected_layers != 0 && expected_layers != store.num_layers())
    throw ValidationError("probe store has " + std::to_string(store.num_layers()) + " layers, expected " +
                          std::to_string(expected_layers));
  const auto rows = pairs.token_rows();
  for (Index r : rows)
    if (r < 0 || static_cast<std::uint64_t>(r) >= store.n_tokens())
      throw ValidationError("task '" + pairs.task_name + "' references token " + std::to_string(r) + " outside store");
  const auto labels = pairs.labels();
  const auto groups = pairs.groups();

  ProbeCurve curve;
  curve.task_name = pairs.task_name;
  curve.n_items = static_cast<Index>(pairs.items.size());
  curve.per_layer_score.assign(store.num_layers(), 0.0);
  curve.per_layer_pair_score.assign(store.num_layers(), 0.0);
  curve.per_layer_f1.assign(store.num_layers(), 0.0);
  ProbeOptions inner = opt;
  inner.threads = 1;
  parallel_for(store.num_layers(), opt.threads, [&](std::size_t l) {
    Matrix X = store.slice_layer(static_cast<std::uint32_t>(l)).gather(rows);
    ProbeScore s = cross_validate_probe(X, labels, inner, &groups);
    curve.per_layer_score[l] = s.accuracy;
    curve.per_layer_pair_score[l] = s.pair_accuracy;
    curve.per_layer_f1[l] = s.macro_f1;
  });
  return curve;
}

/// Earliest layer l with score(l') - score(l) < epsilon for every l' > l.
inline std::uint32_t find_saturation_layer(const std::vector<double>& scores, double epsilon) {
  if (scores.empty()) throw ValidationError("empty probe curve");
  if (!(epsilon > 0)) throw ValidationError("epsilon must be positive");
  const std::size_t n = scores.size();
  // suffix_max[l] = max score over layers > l
  std::vector<double> suffix_max(n, -std::numeric_limits<double>::infinity());
  for (std::size_t l = n - 1; l-- > 0;) suffix_max[l] = std::max(suffix_max[l + 1], scores[l + 1]);
  for (std::size_t l = 0; l < n; ++l)
    if (suffix_max[l] - scores[l] < epsilon) return static_cast<std::uint32_t>(l);
  return static_cast<std::uint32_t>(n - 1);
}

struct SaturationLayers {
  std::uint32_t lexicon = 0;
  std::uint32_t syntax = 0;
  std::uint32_t meaning = 0;
  std::uint32_t reasoning = 0;
  double epsilon = 0.01;
  std::vector<std::string> warnings;

  /// Ties are allowed and recorded; inversions are recorded, never reordered.
  void check_hierarchy() {
    auto note = [&](const char* lo, std::uint32_t a, const char* hi, std::uint32_t b) {
      if (a == b)
        warnings.push_back(std::string(lo) + " and " + hi + " saturate at the same layer " + std::to_string(a));
      else if (a > b)
        warnings.push_back(std::string("hierarchy violated: ") + lo + " layer " + std::to_string(a) + " > " + hi +
                           " layer " + std::to_string(b));
    };
    note("syntax", syntax, "meaning", meaning);
    note("meaning", meaning, "reasoning", reasoning);
  }

  bool ordered() const { return syntax <= meaning && meaning <= reasoning; }

  void validate_for(std::uint32_t num_layers) const {
    for (auto l : {syntax, meaning, reasoning})
      if (l >= num_layers) throw ValidationError("saturation layer " + std::to_string(l) + " outside store");
  }
};

/// Layer-wise mean of several curves (BLiMP paradigms are averaged).
inline std::vector<double> average_curves(const std::vector<ProbeCurve>& curves) {
  if (curves.empty()) throw EmptyDatasetError("no curves to average");
  std::vector<double> out(curves[0].per_layer_score.size(), 0.0);
  for (const auto& c : curves) {
    if (c.per_layer_score.size() != out.size()) throw ValidationError("curves differ in layer count");
    for (std::size_t l = 0; l < out.size(); ++l) out[l] += c.per_layer_score[l];
  }
  for (double& v : out) v /= static_cast<double>(curves.size());
  return out;
}

// ---------------------------------------------------------------------------
// Bag-of-words task filter
// ---------------------------------------------------------------------------

/// Lower-cased alphanumeric word tokens.
inline std::vector<std::string> bow_tokens(std::string_view sentence) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : sentence) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Count-vector design over the task's vocabulary (sorted word order).
inline Matrix bow_features(const MinimalPairSet& task) {
  std::map<std::string, Index> vocab;
  std::vector<std::vector<std::string>> toks;
  for (const auto& it : task.items) {
    toks.push_back(bow_tokens(it.sentence));
    for (const auto& w : toks.back()) vocab.emplace(w, 0);
  }
  if (vocab.empty()) throw ValidationError("task '" + task.task_name + "' has an empty vocabulary");
  Index next = 0;
  for (auto& [w, id] : vocab) id = next++;
  Matrix X = Matrix::Zero(static_cast<Index>(task.items.size()), next);
  for (std::size_t i = 0; i < toks.size(); ++i)
    for (const auto& w : toks[i]) X(static_cast<Index>(i), vocab[w]) += 1.0;
  return X;
}

struct BowResult {
  std::string task_name;
  double accuracy = 0;
  bool retained = false;
};

/// Keeps tasks whose bag-of-words probe accuracy is at most `threshold`.
inline std::vector<BowResult> bow_filter(const std::vector<MinimalPairSet>& tasks, double threshold,
                                         const ProbeOptions& opt) {
  std::vector<BowResult> out;
  for (const auto& t : tasks) {
    t.validate();
    Matrix X = bow_features(t);
    const auto groups = t.groups();
    ProbeScore s = cross_validate_probe(X, t.labels(), opt, &groups);
    out.push_back({t.task_name, s.accuracy, s.accuracy <= threshold});
  }
  return out;
}

}  // namespace resdis
