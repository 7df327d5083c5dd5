#pragma once
// Feature-specific residual embeddings. Each higher saturation layer is
// regressed on its predecessor and replaced by what the ridge map cannot
// predict:
//
//   E_l = H_0
//   E_s = H_{L_s} - g_s(H_0)
//   E_m = H_{L_m} - g_m(H_{L_s})
//   E_r = H_{L_r} - g_r(H_{L_m})
//
// Maps are fit on a training corpus and applied unchanged to target tokens.

#include "resdis/activation_store.hpp"
#include "resdis/probing.hpp"
#include "resdis/ridge.hpp"

#include <array>

namespace resdis {

inline constexpr std::array<FeatureKind, 4> kFeatureOrder = {FeatureKind::lexicon, FeatureKind::syntax,
                                                             FeatureKind::meaning, FeatureKind::reasoning};

struct ResidualMaps {
  RidgeMap syntax;     ///< g_s: H_0 -> H_{L_s}
  RidgeMap meaning;    ///< g_m: H_{L_s} -> H_{L_m}
  RidgeMap reasoning;  ///< g_r: H_{L_m} -> H_{L_r}
  SaturationLayers layers;
  std::array<std::size_t, 3> grid_selection{};

  const RidgeMap& map(FeatureKind k) const {
    switch (k) {
      case FeatureKind::syntax: return syntax;
      case FeatureKind::meaning: return meaning;
      case FeatureKind::reasoning: return reasoning;
      default: throw ValidationError("the lexical embedding has no ridge map");
    }
  }
};

struct ResidualSet {
  Matrix lexicon;
  Matrix syntax;
  Matrix meaning;
  Matrix reasoning;
  SaturationLayers layers;

  const Matrix& get(FeatureKind k) const {
    switch (k) {
      case FeatureKind::lexicon: return lexicon;
      case FeatureKind::syntax: return syntax;
      case FeatureKind::meaning: return meaning;
      case FeatureKind::reasoning: return reasoning;
    }
    return lexicon;
  }
  Matrix& get(FeatureKind k) { return const_cast<Matrix&>(std::as_const(*this).get(k)); }

  Index n_tokens() const { return lexicon.rows(); }
};

/// H_high - g(H_low).
inline Matrix apply_residual(const RidgeMap& map, const Eigen::Ref<const Matrix>& low,
                             const Eigen::Ref<const Matrix>& high) {
  if (low.rows() != high.rows()) throw ValidationError("residual inputs differ in token count");
  if (low.cols() != map.d_in() || high.cols() != map.d_out())
    throw ValidationError("residual inputs do not conform to the ridge map");
  return high - map.predict(low);
}

struct ResidualOptions {
  AlphaGrid grid = AlphaGrid::log_spaced(1e-2, 1e6, 10);
  Index folds = 4;
  unsigned threads = 1;
};

namespace detail {

inline std::array<std::pair<std::uint32_t, std::uint32_t>, 3> residual_stages(const SaturationLayers& L) {
  return {{{L.lexicon, L.syntax}, {L.syntax, L.meaning}, {L.meaning, L.reasoning}}};
}

}  // namespace detail

/// Fits g_s, g_m, g_r on the training corpus (centered, CV-selected alpha).
inline ResidualMaps fit_residual_maps(const ActivationStore& train, const SaturationLayers& layers,
                                      const ResidualOptions& opt) {
  layers.validate_for(train.num_layers());
  if (train.n_tokens() < static_cast<std::uint64_t>(opt.folds))
    throw ValidationError("residual training corpus has fewer tokens than folds");
  ResidualMaps maps;
  maps.layers = layers;
  std::array<RidgeMap*, 3> out = {&maps.syntax, &maps.meaning, &maps.reasoning};
  const auto stages = detail::residual_stages(layers);
  parallel_for(3, opt.threads, [&](std::size_t i) {
    Matrix low = train.slice_layer(stages[i].first).to_matrix();
    Matrix high = train.slice_layer(stages[i].second).to_matrix();
    AlphaGrid grid = opt.grid;
    *out[i] = ridge_fit_cv(low, high, grid, opt.folds, true);
    maps.grid_selection[i] = grid.selection;
  });
  return maps;
}

/// Applies fitted maps to the target store's tokens.
inline ResidualSet apply_residual_maps(const ResidualMaps& maps, const ActivationStore& target) {
  if (target.dim() != static_cast<std::uint32_t>(maps.syntax.d_in()))
    throw ValidationError("target dim " + std::to_string(target.dim()) + " does not match maps trained at dim " +
                          std::to_string(maps.syntax.d_in()));
  maps.layers.validate_for(target.num_layers());
  const auto stages = detail::residual_stages(maps.layers);
  ResidualSet rs;
  rs.layers = maps.layers;
  rs.lexicon = target.slice_layer(maps.layers.lexicon).to_matrix();
  std::array<Matrix*, 3> out = {&rs.syntax, &rs.meaning, &rs.reasoning};
  std::array<const RidgeMap*, 3> g = {&maps.syntax, &maps.meaning, &maps.reasoning};
  for (std::size_t i = 0; i < 3; ++i) {
    Matrix low = target.slice_layer(stages[i].first).to_matrix();
    Matrix high = target.slice_layer(stages[i].second).to_matrix();
    *out[i] = apply_residual(*g[i], low, high);
  }
  return rs;
}

inline ResidualSet build_residuals(const ActivationStore& train, const ActivationStore& target,
                                   const SaturationLayers& layers, const ResidualOptions& opt,
                                   ResidualMaps* maps_out = nullptr) {
  if (train.dim() != target.dim()) throw ValidationError("training and target stores differ in dim");
  ResidualMaps maps = fit_residual_maps(train, layers, opt);
  ResidualSet rs = apply_residual_maps(maps, target);
  if (maps_out != nullptr) *maps_out = std::move(maps);
  return rs;
}

/// Residual set as a four-layer store (lexicon, syntax, meaning, reasoning).
inline ActivationStore residuals_to_store(const ResidualSet& rs, std::string corpus_tag) {
  return ActivationStore::from_layers({rs.lexicon, rs.syntax, rs.meaning, rs.reasoning}, std::move(corpus_tag));
}

inline ResidualSet residuals_from_store(const ActivationStore& store) {
  if (store.num_layers() != 4) throw FormatError("residual store must hold exactly 4 pseudo-layers");
  ResidualSet rs;
  for (std::uint32_t i = 0; i < 4; ++i) rs.get(kFeatureOrder[i]) = store.slice_layer(i).to_matrix();
  return rs;
}

}  // namespace resdis
