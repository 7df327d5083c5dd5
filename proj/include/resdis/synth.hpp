#pragma once
// Synthetic hierarchical activations, probing sets and neural recordings with
// planted ground truth.
//
// Structure: an orthonormal basis of R^dim is split into four k-column blocks
// Q_l, Q_s, Q_m, Q_r. Token components are C_f = scale * Z_f Q_f' / sqrt(k).
// Layers follow
//
//   H_0 = [C_f injected at 0] + noise
//   H_L = H_{L-1} A_L + sum of C_f injected at L + noise
//
// with A_L orthogonal (Cayley transform of a scaled skew-symmetric matrix).

#include "resdis/activation_store.hpp"
#include "resdis/neural.hpp"
#include "resdis/probing.hpp"

#include <random>

namespace resdis {

struct PlantedSpec {
  std::uint32_t n_layers = 33;
  Index n_tokens = 5000;
  Index dim = 256;
  Index subspace = 0;  ///< columns per feature; 0 means dim / 8
  std::array<std::uint32_t, 4> injection = {0, 6, 20, 30};
  double mixing = 0.05;  ///< skew generator scale; 0 gives identity maps
  double noise = 0.005;  ///< isotropic per-layer noise sd
  double component_scale = 1.0;
  double probe_shift = 3.0;  ///< label offset along the task direction, in component sd
  std::uint64_t seed = 0;

  Index k() const { return subspace > 0 ? subspace : dim / 8; }

  void validate() const {
    if (dim < 4 || k() < 1 || 4 * k() > dim)
      throw SpecError("dim " + std::to_string(dim) + " cannot hold four subspaces of size " + std::to_string(k()));
    if (n_layers < 1) throw SpecError("need at least one layer");
    if (n_tokens < 1) throw SpecError("need at least one token");
    for (auto l : injection)
      if (l >= n_layers) throw SpecError("injection layer " + std::to_string(l) + " outside " + std::to_string(n_layers));
    if (!(component_scale > 0) || !(noise >= 0) || !(mixing >= 0) || !(probe_shift > 0))
      throw SpecError("scales must be positive (noise and mixing non-negative)");
  }
};

struct PlantedStructure {
  std::array<Matrix, 4> basis;  ///< dim x k, mutually orthogonal column spaces
  std::vector<Matrix> mixing;   ///< A_L for L = 1..n_layers-1 (index L-1)
};

inline PlantedStructure make_structure(const PlantedSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, 0x51));
  std::normal_distribution<double> N;
  const Index d = spec.dim, k = spec.k();
  Matrix G = Matrix::NullaryExpr(d, d, [&] { return N(rng); });
  Eigen::HouseholderQR<Matrix> qr(G);
  Matrix Q = qr.householderQ() * Matrix::Identity(d, d);
  PlantedStructure s;
  for (Index f = 0; f < 4; ++f) s.basis[static_cast<std::size_t>(f)] = Q.middleCols(f * k, k);
  const Matrix I = Matrix::Identity(d, d);
  for (std::uint32_t L = 1; L < spec.n_layers; ++L) {
    if (spec.mixing == 0) {
      s.mixing.push_back(I);
      continue;
    }
    Matrix M = Matrix::NullaryExpr(d, d, [&] { return N(rng); });
    Matrix K = (M - M.transpose()) * (spec.mixing / std::sqrt(2.0 * static_cast<double>(d)));
    s.mixing.push_back((I + K).partialPivLu().solve(I - K));
  }
  return s;
}

struct SynthStore {
  ActivationStore store;
  std::array<Matrix, 4> components;  ///< tokens x dim planted C_f
};

namespace detail {

inline std::array<Matrix, 4> draw_components(const PlantedSpec& spec, const PlantedStructure& s, Index n,
                                             std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  const double c = spec.component_scale / std::sqrt(static_cast<double>(spec.k()));
  std::array<Matrix, 4> out;
  for (std::size_t f = 0; f < 4; ++f) {
    Matrix Z = Matrix::NullaryExpr(n, spec.k(), [&] { return N(rng); });
    out[f] = c * Z * s.basis[f].transpose();
  }
  return out;
}

inline ActivationStore build_layers(const PlantedSpec& spec, const PlantedStructure& s,
                                    const std::array<Matrix, 4>& comp, std::mt19937_64& rng, const std::string& tag) {
  const Index n = comp[0].rows(), d = spec.dim;
  std::normal_distribution<double> N;
  ActivationStore store(spec.n_layers, static_cast<std::uint64_t>(n), static_cast<std::uint32_t>(d), tag);
  Matrix H = Matrix::Zero(n, d);
  for (std::uint32_t L = 0; L < spec.n_layers; ++L) {
    if (L > 0) H = H * s.mixing[L - 1];
    for (std::size_t f = 0; f < 4; ++f)
      if (spec.injection[f] == L) H += comp[f];
    if (spec.noise > 0) H += Matrix::NullaryExpr(n, d, [&] { return spec.noise * N(rng); });
    store.set_layer(L, H);
  }
  return store;
}

}  // namespace detail

/// Store of `n_tokens` fresh tokens. Distinct streams share the structure but
/// draw independent tokens.
inline SynthStore generate_store(const PlantedSpec& spec, const PlantedStructure& s, Index n_tokens,
                                 std::uint64_t stream) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, 0x1000 + stream));
  SynthStore out;
  out.components = detail::draw_components(spec, s, n_tokens, rng);
  out.store = detail::build_layers(spec, s, out.components, rng, "synth:" + std::to_string(spec.seed) + ":" +
                                                                     std::to_string(stream));
  return out;
}

inline SynthStore generate_store(const PlantedSpec& spec) {
  return generate_store(spec, make_structure(spec), spec.n_tokens, 0);
}

// ---------------------------------------------------------------------------
// Probing sets
// ---------------------------------------------------------------------------

struct ProbeTaskSpec {
  std::string name;
  FeatureKind feature = FeatureKind::syntax;
  Index n_pairs = 200;
};

struct SynthProbeData {
  ActivationStore store;
  std::vector<MinimalPairSet> tasks;
};

namespace detail {

inline std::string synth_word(std::mt19937_64& rng) {
  static const std::array<const char*, 12> syl = {"ba", "to", "ki", "me", "lu", "so", "ra", "ne", "di", "po", "fa", "gu"};
  std::uniform_int_distribution<int> count(1, 3), pick(0, static_cast<int>(syl.size()) - 1);
  std::string w;
  for (int i = count(rng); i > 0; --i) w += syl[static_cast<std::size_t>(pick(rng))];
  return w;
}

}  // namespace detail

/// Pairs share every planted component except a +/- shift along one direction
/// inside the task feature's subspace. Both sentences of a pair use the same
/// words in a different order.
inline SynthProbeData generate_probe_sets(const PlantedSpec& spec, const PlantedStructure& s,
                                          const std::vector<ProbeTaskSpec>& tasks, std::uint64_t stream) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, 0x2000 + stream));
  std::normal_distribution<double> N;
  Index n = 0;
  for (const auto& t : tasks) {
    if (t.n_pairs < 2) throw SpecError("task " + t.name + " needs at least 2 pairs");
    n += 2 * t.n_pairs;
  }
  std::array<Matrix, 4> comp = detail::draw_components(spec, s, n, rng);
  SynthProbeData out;
  const double shift = spec.probe_shift * spec.component_scale / std::sqrt(static_cast<double>(spec.k()));
  Index row = 0;
  for (const auto& t : tasks) {
    const auto f = static_cast<std::size_t>(t.feature);
    std::mt19937_64 dir_rng(derive_seed(spec.seed, fnv1a(t.name)));
    Vector g = Vector::NullaryExpr(spec.k(), [&] { return N(dir_rng); });
    RowVector u = (s.basis[f] * g.normalized()).transpose();
    MinimalPairSet set;
    set.task_name = t.name;
    set.feature_kind = t.feature;
    for (Index p = 0; p < t.n_pairs; ++p) {
      const Index good = row, bad = row + 1;
      for (std::size_t c = 0; c < 4; ++c) comp[c].row(bad) = comp[c].row(good);
      comp[f].row(good) += shift * u;
      comp[f].row(bad) -= shift * u;
      std::vector<std::string> words;
      for (int w = 0; w < 5; ++w) words.push_back(detail::synth_word(rng));
      std::string a, b;
      std::vector<std::string> swapped = words;
      std::swap(swapped[1], swapped[3]);
      for (std::size_t w = 0; w < words.size(); ++w) {
        a += (w ? " " : "") + words[w];
        b += (w ? " " : "") + swapped[w];
      }
      set.items.push_back({p, 1, good, a});
      set.items.push_back({p, 0, bad, b});
      row += 2;
    }
    out.tasks.push_back(std::move(set));
  }
  out.store = detail::build_layers(spec, s, comp, rng, "synth-probe:" + std::to_string(spec.seed));
  return out;
}

inline SynthProbeData generate_probe_set(const PlantedSpec& spec, FeatureKind feature, Index n_pairs = 200) {
  return generate_probe_sets(spec, make_structure(spec), {{std::string("synth_") + to_string(feature), feature, n_pairs}},
                             0);
}

// ---------------------------------------------------------------------------
// Neural recordings
// ---------------------------------------------------------------------------

struct ElectrodePlan {
  std::string name;
  int feature = -1;  ///< FeatureKind index, or -1 for noise only
  double gain = 0;
  double latency_s = 0;
  std::string region = "other";
  std::string hemisphere = "L";
};

struct NeuralSynthOptions {
  double fs = 128.0;
  double spacing_s = 0.4;
  double lead_s = 2.5;
  double kernel_sd_s = 0.05;
  double noise_sd = 1.0;
  std::string subject = "S01";
  std::uint64_t seed = 0;
};

struct SynthNeural {
  NeuralRecording recording;
  std::vector<WordEvent> words;
  std::vector<double> onsets() const {
    std::vector<double> o;
    for (const auto& w : words) o.push_back(w.onset_s);
    return o;
  }
};

/// Default plan: features cycle l, s, m, r, none; latencies -100, 0, 200 and
/// 362 ms; reasoning electrodes sit in visual cortex; about 80% left hemisphere.
inline std::vector<ElectrodePlan> default_electrode_plan(Index n_electrodes, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x3000));
  std::uniform_real_distribution<double> gain(0.4, 1.0), unit(0.0, 1.0);
  static const std::array<double, 4> latency = {-0.1, 0.0, 0.2, 0.362};
  static const std::array<const char*, 4> region = {"superior temporal gyrus", "inferior frontal gyrus",
                                                    "superior frontal gyrus", "calcarine sulcus"};
  static const std::array<const char*, 3> spare = {"middle temporal gyrus", "precentral gyrus", "superior occipital sulcus"};
  std::vector<ElectrodePlan> plan;
  for (Index e = 0; e < n_electrodes; ++e) {
    ElectrodePlan p;
    p.name = "E" + std::to_string(e);
    const int role = static_cast<int>(e % 5);
    if (role < 4) {
      p.feature = role;
      p.gain = gain(rng);
      p.latency_s = latency[static_cast<std::size_t>(role)];
      p.region = region[static_cast<std::size_t>(role)];
    } else {
      p.region = spare[static_cast<std::size_t>((e / 5) % 3)];
    }
    p.hemisphere = unit(rng) < 0.8 ? "L" : "R";
    plan.push_back(p);
  }
  return plan;
}

/// Each electrode carries gain * (standardized projection of its feature's
/// per-event vector) convolved with a Gaussian bump at its latency, plus
/// white noise. `drivers[f]` is events x dim.
inline SynthNeural generate_neural(const std::array<const Matrix*, 4>& drivers, const std::vector<ElectrodePlan>& plan,
                                   const NeuralSynthOptions& opt) {
  const Index n_events = drivers[0]->rows();
  for (const Matrix* m : drivers)
    if (m->rows() != n_events) throw SpecError("driver matrices differ in event count");
  for (const auto& p : plan) {
    if (std::abs(p.latency_s) > 2.0) throw SpecError("electrode " + p.name + " latency outside +/-2 s");
    if (p.feature >= 4) throw SpecError("electrode " + p.name + " has an unknown feature");
  }
  if (!(opt.fs > 0) || !(opt.spacing_s > 0)) throw SpecError("fs and spacing must be positive");
  std::mt19937_64 rng(derive_seed(opt.seed, 0x4000));
  std::normal_distribution<double> N;

  SynthNeural out;
  for (Index i = 0; i < n_events; ++i) {
    WordEvent w;
    w.word_index = i;
    w.onset_s = opt.lead_s + static_cast<double>(i) * opt.spacing_s;
    w.text = detail::synth_word(rng);
    w.syllables = count_syllables(w.text);
    out.words.push_back(std::move(w));
  }
  const double dur = 2.0 * opt.lead_s + static_cast<double>(n_events > 0 ? n_events - 1 : 0) * opt.spacing_s;
  const Index n_samples = static_cast<Index>(std::ceil(dur * opt.fs));
  auto& rec = out.recording;
  rec.fs = opt.fs;
  rec.signal.resize(static_cast<Index>(plan.size()), n_samples);
  const double reach = 5.0 * opt.kernel_sd_s;
  for (std::size_t e = 0; e < plan.size(); ++e) {
    const auto& p = plan[e];
    std::vector<double> sig(static_cast<std::size_t>(n_samples));
    for (auto& v : sig) v = opt.noise_sd * N(rng);
    if (p.feature >= 0 && p.gain != 0) {
      const Matrix& D = *drivers[static_cast<std::size_t>(p.feature)];
      Vector v = Vector::NullaryExpr(D.cols(), [&] { return N(rng); }).normalized();
      Vector proj = D * v;
      proj.array() -= proj.mean();
      const double sd = std::sqrt(proj.squaredNorm() / std::max<double>(1.0, static_cast<double>(n_events)));
      if (sd > 0) proj /= sd;
      for (Index i = 0; i < n_events; ++i) {
        const double c = out.words[static_cast<std::size_t>(i)].onset_s + p.latency_s;
        const Index lo = std::max<Index>(0, static_cast<Index>(std::ceil((c - reach) * opt.fs)));
        const Index hi = std::min<Index>(n_samples - 1, static_cast<Index>(std::floor((c + reach) * opt.fs)));
        for (Index t = lo; t <= hi; ++t) {
          const double dt = static_cast<double>(t) / opt.fs - c;
          sig[static_cast<std::size_t>(t)] +=
              p.gain * proj(i) * std::exp(-0.5 * dt * dt / (opt.kernel_sd_s * opt.kernel_sd_s));
        }
      }
    }
    for (Index t = 0; t < n_samples; ++t) rec.signal(static_cast<Index>(e), t) = static_cast<float>(sig[static_cast<std::size_t>(t)]);
    ElectrodeMeta m;
    m.subject = opt.subject;
    m.name = p.name;
    m.region = p.region;
    m.hemisphere = p.hemisphere;
    m.x_mm = (p.hemisphere == "L" ? -1.0 : 1.0) * (30.0 + static_cast<double>(e % 7) * 5.0);
    m.y_mm = -60.0 + static_cast<double>(e % 11) * 10.0;
    m.z_mm = -10.0 + static_cast<double>(e % 5) * 8.0;
    rec.electrodes.push_back(std::move(m));
  }
  return out;
}

}  // namespace resdis
