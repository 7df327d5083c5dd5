#pragma once
// Figure- and table-backing datasets: per-electrode panels, dominant feature,
// overlap counts, lateralization, region comparisons and temporal curves.

#include "resdis/residualizer.hpp"
#include "resdis/stats.hpp"

#include <map>
#include <optional>

namespace resdis {

inline const std::array<std::string, 5> kPanelFeatures = {"lexicon", "syntax", "meaning", "reasoning", "full"};

struct PanelRow {
  std::string subject;
  std::string electrode;
  std::string feature;
  double r_peak = 0;
  double peak_lag_s = 0;
  double z = 0;
  bool responsive = false;
  std::string region;
  std::string hemisphere;
  double x_mm = 0, y_mm = 0, z_mm = 0;
};

struct FeaturePanel {
  std::vector<PanelRow> rows;

  /// Adds one row per electrode for a scored feature fit.
  void add(const std::string& feature, const CorrelationResult& fit, const ZScoreResult& z,
           const std::vector<ElectrodeMeta>& meta) {
    if (fit.n_electrodes() != static_cast<Index>(meta.size()) || z.z.size() != fit.n_electrodes())
      throw ValidationError("panel inputs differ in electrode count");
    for (Index e = 0; e < fit.n_electrodes(); ++e) {
      const auto& m = meta[static_cast<std::size_t>(e)];
      rows.push_back({m.subject, m.name, feature, fit.r_peak(e), fit.peak_lag_s(e), z.z(e),
                      z.responsive[static_cast<std::size_t>(e)], m.region, m.hemisphere, m.x_mm, m.y_mm, m.z_mm});
    }
  }

  /// Electrode keys (subject/electrode) in first-appearance order.
  std::vector<std::string> electrodes() const {
    std::vector<std::string> out;
    std::map<std::string, bool> seen;
    for (const auto& r : rows) {
      auto key = r.subject + "/" + r.electrode;
      if (!seen[key]) {
        seen[key] = true;
        out.push_back(key);
      }
    }
    return out;
  }

  std::vector<const PanelRow*> feature_rows(const std::string& feature) const {
    std::vector<const PanelRow*> out;
    for (const auto& r : rows)
      if (r.feature == feature) out.push_back(&r);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Dominant feature
// ---------------------------------------------------------------------------

/// Argmax of the four peak z-scores; ties go to the shallower feature.
inline FeatureKind dominant_of(const std::array<double, 4>& z) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < 4; ++i)
    if (z[i] > z[best]) best = i;
  return static_cast<FeatureKind>(best);
}

struct DominantAssignment {
  std::vector<std::string> electrodes;
  std::vector<FeatureKind> feature;

  std::array<Index, 4> counts(const std::vector<bool>* only = nullptr) const {
    std::array<Index, 4> c{};
    for (std::size_t i = 0; i < feature.size(); ++i)
      if (only == nullptr || (*only)[i]) ++c[static_cast<std::size_t>(feature[i])];
    return c;
  }
};

inline DominantAssignment dominant_feature(const FeaturePanel& panel) {
  DominantAssignment out;
  out.electrodes = panel.electrodes();
  std::map<std::string, std::array<std::optional<double>, 4>> z;
  for (const auto& r : panel.rows) {
    if (r.feature == "full") continue;
    z[r.subject + "/" + r.electrode][static_cast<std::size_t>(parse_feature_kind(r.feature))] = r.z;
  }
  for (const auto& key : out.electrodes) {
    std::array<double, 4> v{};
    const auto& zs = z[key];
    for (std::size_t i = 0; i < 4; ++i) {
      if (!zs[i]) throw IncompleteError("electrode " + key + " has no " + to_string(kFeatureOrder[i]) + " score");
      v[i] = *zs[i];
    }
    out.feature.push_back(dominant_of(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlap, lateralization
// ---------------------------------------------------------------------------

using CountMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic>;

inline CountMatrix overlap_matrix(const std::vector<std::vector<bool>>& masks) {
  const std::size_t k = masks.size();
  for (const auto& m : masks)
    if (m.size() != masks.front().size()) throw ValidationError("overlap masks differ in length");
  CountMatrix out = CountMatrix::Zero(static_cast<Index>(k), static_cast<Index>(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      Index c = 0;
      for (std::size_t e = 0; e < masks[i].size(); ++e) c += (masks[i][e] && masks[j][e]) ? 1 : 0;
      out(static_cast<Index>(i), static_cast<Index>(j)) = out(static_cast<Index>(j), static_cast<Index>(i)) = c;
    }
  return out;
}

/// Responsive masks in `features` order over the panel's electrode list.
inline std::vector<std::vector<bool>> responsive_masks(const FeaturePanel& panel,
                                                       const std::vector<std::string>& features) {
  const auto keys = panel.electrodes();
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < keys.size(); ++i) index[keys[i]] = i;
  std::vector<std::vector<bool>> out(features.size(), std::vector<bool>(keys.size(), false));
  for (std::size_t f = 0; f < features.size(); ++f)
    for (const auto* r : panel.feature_rows(features[f])) out[f][index[r->subject + "/" + r->electrode]] = r->responsive;
  return out;
}

struct LateralizationRow {
  std::string feature;
  Index n_left = 0, n_right = 0;
  Index total_left = 0, total_right = 0;
  double prop_left = 0, prop_right = 0;
  double ratio = std::numeric_limits<double>::quiet_NaN();
  bool ratio_defined = false;
};

/// Active electrodes as a fraction of each hemisphere's total. Totals default
/// to the panel's electrode counts per hemisphere.
inline std::vector<LateralizationRow> lateralization(const FeaturePanel& panel,
                                                     std::optional<std::pair<Index, Index>> totals = std::nullopt) {
  Index tl = 0, tr = 0;
  if (totals) {
    std::tie(tl, tr) = *totals;
  } else {
    std::map<std::string, std::string> hemi;
    for (const auto& r : panel.rows) hemi[r.subject + "/" + r.electrode] = r.hemisphere;
    for (const auto& [k, h] : hemi) (h == "L" ? tl : tr) += 1;
  }
  std::vector<LateralizationRow> out;
  for (const auto& f : kPanelFeatures) {
    auto rows = panel.feature_rows(f);
    if (rows.empty()) continue;
    LateralizationRow lr;
    lr.feature = f;
    lr.total_left = tl;
    lr.total_right = tr;
    for (const auto* r : rows) {
      if (r->hemisphere != "L" && r->hemisphere != "R")
        throw ValidationError("electrode " + r->electrode + " lacks a hemisphere label");
      if (r->responsive) (r->hemisphere == "L" ? lr.n_left : lr.n_right) += 1;
    }
    lr.prop_left = tl > 0 ? static_cast<double>(lr.n_left) / static_cast<double>(tl) : 0.0;
    lr.prop_right = tr > 0 ? static_cast<double>(lr.n_right) / static_cast<double>(tr) : 0.0;
    lr.ratio_defined = tr > 0 && lr.prop_right > 0;
    if (lr.ratio_defined) lr.ratio = lr.prop_left / lr.prop_right;
    out.push_back(lr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Regions
// ---------------------------------------------------------------------------

struct RegionGroup {
  std::string name;
  std::vector<std::string> labels;
};

inline const std::vector<std::string>& visual_cortex_labels() {
  static const std::vector<std::string> v = {
      "superior occipital sulcus", "transverse occipital sulcus", "calcarine sulcus", "occipital pole",
      "superior occipital gyrus",  "middle occipital gyrus",      "inferior occipital gyrus"};
  return v;
}

/// Default taxonomy; labels are matched case-insensitively and also accept the
/// Destrieux atlas spellings used by the public dataset.
inline std::vector<RegionGroup> default_region_groups() {
  std::vector<std::string> visual = visual_cortex_labels();
  for (const char* d : {"S_oc_sup_and_transversal", "S_calcarine", "Pole_occipital", "G_occipital_sup",
                        "G_occipital_middle", "G_and_S_occipital_inf"})
    visual.emplace_back(d);
  return {
      {"IFG",
       {"inferior frontal gyrus", "pars opercularis", "pars triangularis", "pars orbitalis", "G_front_inf-Opercular",
        "G_front_inf-Triangul", "G_front_inf-Orbital", "IFG"}},
      {"STG+HG",
       {"superior temporal gyrus", "heschl's gyrus", "transverse temporal gyrus", "G_temp_sup-Lateral",
        "G_temp_sup-G_T_transv", "G_temp_sup-Plan_tempo", "S_temporal_transverse", "STG", "HG"}},
      {"SFG", {"superior frontal gyrus", "G_front_sup", "SFG"}},
      {"visual-cortex", visual},
  };
}

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

inline std::string region_of(const std::string& label, const std::vector<RegionGroup>& groups) {
  const auto l = detail::lower(label);
  for (const auto& g : groups)
    for (const auto& m : g.labels)
      if (detail::lower(m) == l) return g.name;
  return "other";
}

/// Label -> group TSV (`label	group`), replacing the default taxonomy.
inline std::vector<RegionGroup> read_region_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, RegionGroup> by_name;
  std::vector<std::string> order;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto c = detail::split_tabs(line);
    if (c.size() != 2) throw FormatError(path.string() + ": expected `label<TAB>group`");
    if (c[0] == "label" && c[1] == "group") continue;
    if (!by_name.count(c[1])) {
      order.push_back(c[1]);
      by_name[c[1]].name = c[1];
    }
    by_name[c[1]].labels.push_back(c[0]);
  }
  std::vector<RegionGroup> out;
  for (const auto& n : order) out.push_back(by_name[n]);
  return out;
}

struct RegionComparison {
  std::string region;
  std::string feature_a;
  std::string feature_b;
  TTest test;
};

struct RegionReport {
  /// region -> feature -> r_peak samples
  std::map<std::string, std::map<std::string, std::vector<double>>> samples;
  std::vector<RegionComparison> tests;
  std::vector<std::string> notes;
  Index unknown_labels = 0;
};

/// Groups peak r by region and feature, then runs one-tailed Welch tests of
/// `focus` against every other feature inside each of `test_regions`.
inline RegionReport region_report(const FeaturePanel& panel, const std::vector<RegionGroup>& groups,
                                  const std::vector<std::string>& test_regions = {"visual-cortex"},
                                  const std::string& focus = "reasoning", bool responsive_only = false) {
  RegionReport rep;
  std::map<std::string, bool> counted;
  for (const auto& r : panel.rows) {
    if (r.feature == "full") continue;
    if (responsive_only && !r.responsive) continue;
    auto g = region_of(r.region, groups);
    auto key = r.subject + "/" + r.electrode;
    if (g == "other" && !counted[key]) {
      counted[key] = true;
      ++rep.unknown_labels;
    }
    rep.samples[g][r.feature].push_back(r.r_peak);
  }
  for (const auto& g : groups)
    if (!rep.samples.count(g.name)) rep.notes.push_back("region " + g.name + " has no electrodes; skipped");
  if (rep.samples.size() < 2) rep.notes.push_back("single region present; tests skipped");
  for (const auto& region : test_regions) {
    auto it = rep.samples.find(region);
    if (it == rep.samples.end()) continue;
    const auto& by_feat = it->second;
    auto a = by_feat.find(focus);
    if (a == by_feat.end()) continue;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string other = to_string(kFeatureOrder[i]);
      if (other == focus) continue;
      auto b = by_feat.find(other);
      if (b == by_feat.end() || a->second.size() < 2 || b->second.size() < 2) {
        rep.notes.push_back("region " + region + ": too few samples for " + focus + " vs " + other);
        continue;
      }
      rep.tests.push_back({region, focus, other, welch_t(a->second, b->second, Tail::greater)});
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Temporal curves
// ---------------------------------------------------------------------------

struct TemporalCurve {
  std::string feature;
  std::vector<double> mean_r;
  std::vector<double> t;
  std::vector<double> p;
  std::vector<bool> significant;
  Index peak_lag = 0;
  double peak_lag_s = 0;
  Index n_selected = 0;
  bool tests_skipped = false;
};

/// Electrodes whose z ranks in the top `fraction` (at least one).
inline std::vector<bool> top_fraction_mask(const Eigen::Ref<const Vector>& z, double fraction) {
  if (!(fraction > 0 && fraction <= 1)) throw ValidationError("top fraction must be in (0, 1]");
  const Index n = z.size();
  const Index k = std::max<Index>(1, static_cast<Index>(std::llround(fraction * static_cast<double>(n))));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return z(a) > z(b); });
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < std::min(k, n); ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return mask;
}

/// Mean curve over `mask`, per-lag one-sample one-tailed t against 0 and a
/// BH mask at `q`.
inline TemporalCurve temporal_curve(const std::string& feature, const CorrelationResult& fit,
                                    const std::vector<bool>& mask, double q = 0.05) {
  TemporalCurve c;
  c.feature = feature;
  TemporalProfile tp = temporal_profile(fit, mask);
  c.mean_r = tp.mean_r;
  c.peak_lag = tp.peak_lag;
  c.peak_lag_s = tp.peak_lag_s;
  c.n_selected = static_cast<Index>(std::count(mask.begin(), mask.end(), true));
  const Index L = fit.n_lags();
  c.t.assign(static_cast<std::size_t>(L), 0.0);
  c.p.assign(static_cast<std::size_t>(L), 1.0);
  c.significant.assign(static_cast<std::size_t>(L), false);
  if (c.n_selected < 2) {
    c.tests_skipped = true;
    return c;
  }
  for (Index k = 0; k < L; ++k) {
    std::vector<double> x;
    for (Index e = 0; e < fit.n_electrodes(); ++e)
      if (mask[static_cast<std::size_t>(e)]) x.push_back(fit.r(e, k));
    TTest t = one_sample_t(x, 0.0, Tail::greater);
    c.t[static_cast<std::size_t>(k)] = t.t;
    c.p[static_cast<std::size_t>(k)] = t.p;
  }
  c.significant = fdr_bh(c.p, q);
  return c;
}

inline TemporalCurve temporal_report(const std::string& feature, const CorrelationResult& fit, const ZScoreResult& z,
                                     double top_fraction = 0.10, double q = 0.05) {
  return temporal_curve(feature, fit, top_fraction_mask(z.z, top_fraction), q);
}

/// Per-lag curves of the electrodes each feature dominates, responsive only.
inline std::vector<TemporalCurve> trf_by_dominant(const std::array<const CorrelationResult*, 4>& fits,
                                                  const DominantAssignment& dom, const std::vector<bool>& responsive,
                                                  double q = 0.05) {
  std::vector<TemporalCurve> out;
  for (std::size_t f = 0; f < 4; ++f) {
    std::vector<bool> mask(dom.feature.size(), false);
    for (std::size_t e = 0; e < dom.feature.size(); ++e)
      mask[e] = responsive[e] && static_cast<std::size_t>(dom.feature[e]) == f;
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) continue;
    out.push_back(temporal_curve(to_string(kFeatureOrder[f]), *fits[f], mask, q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

struct PlotRow {
  std::string entity;
  std::string feature;
  double value = 0;
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
};

/// Display clipping for exported z values; statistics never see it.
inline double clip_plot_z(double z) { return std::clamp(z, 3.0, 6.0); }

inline void write_plot_csv(const std::vector<PlotRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "entity,feature,value,ci_low,ci_high\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : fmt_num(v); };
  for (const auto& r : rows)
    out << r.entity << ',' << r.feature << ',' << num(r.value) << ',' << num(r.ci_low) << ',' << num(r.ci_high) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_panel_tsv(const FeaturePanel& panel, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subject\telectrode\tfeature\tr_peak\tpeak_lag_s\tz\tresponsive\tregion\themisphere\tx_mm\ty_mm\tz_mm\n";
  for (const auto& r : panel.rows)
    out << r.subject << '\t' << r.electrode << '\t' << r.feature << '\t' << fmt_num(r.r_peak) << '\t'
        << fmt_num(r.peak_lag_s) << '\t' << fmt_num(r.z) << '\t' << (r.responsive ? 1 : 0) << '\t' << r.region << '\t'
        << r.hemisphere << '\t' << fmt_num(r.x_mm) << '\t' << fmt_num(r.y_mm) << '\t' << fmt_num(r.z_mm) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace resdis
