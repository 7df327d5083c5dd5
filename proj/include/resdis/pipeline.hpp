#pragma once
// Pipeline commands. Each reads its inputs (explicit paths or the defaults
// under the output directory), writes artifacts into <output>/<command>/ and
// records a manifest with config, seed and content hashes.
//
//   synth        -> synth/{train,target,probe}.hdac, target.align.tsv, pairs.tsv,
//                   neural.hgnr, electrodes.tsv, words.tsv, truth.json
//   probe        -> probe/{curves.tsv,bow.tsv,saturation.json}
//   residualize  -> residualize/{residuals,probe_residuals,train_residuals,maps}.hdac, maps.json
//   validate     -> validate/{similarity.tsv,audit.tsv,cross_probe.tsv,validate.json}
//   encode       -> encode/{correlations.tsv,peak_ci.tsv,encode.json}
//   null         -> null/null_summary.tsv
//   report       -> report/{panel,dominant,overlap,lateralization,regions,region_tests,
//                   temporal,trf}.tsv, plot_*.csv, report.json

#include "resdis/config.hpp"
#include "resdis/reporting.hpp"
#include "resdis/residualizer.hpp"
#include "resdis/synth.hpp"
#include "resdis/validation.hpp"

#include <map>
#include <set>

namespace resdis {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

inline std::uint64_t hash_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::uint64_t h = kFnvOffset;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(buf.data(), static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

struct CommandContext {
  RunConfig cfg;
  fs::path out;
  std::string command;
  json inputs = json::object();
  json outputs = json::object();

  CommandContext(RunConfig c, std::string cmd) : cfg(std::move(c)), out(cfg.paths.output_dir), command(std::move(cmd)) {
    fs::create_directories(dir());
  }

  fs::path dir() const { return out / command; }
  unsigned threads() const { return resolve_threads(static_cast<unsigned>(cfg.threads)); }

  /// Path relative to the output dir when it lies inside, so manifests from
  /// two output dirs compare equal.
  std::string label(const fs::path& p) const {
    auto rel = fs::relative(p, out);
    auto s = rel.generic_string();
    return (!s.empty() && s.rfind("..", 0) != 0) ? s : p.generic_string();
  }

  /// Resolves an input: explicit config path or `fallback` under the output
  /// dir; missing files raise DependencyError naming the producer.
  fs::path input(const std::string& configured, const fs::path& fallback, const std::string& producer) {
    fs::path p = configured.empty() ? out / fallback : fs::path(configured);
    if (!fs::exists(p))
      throw DependencyError(producer, "missing " + p.string() + "; run `" + producer + "` first");
    inputs[label(p)] = hex64(hash_file(p));
    return p;
  }

  fs::path output(const std::string& name) { return dir() / name; }

  void record(const fs::path& p) { outputs[label(p)] = hex64(hash_file(p)); }

  void write_json(const fs::path& p, const json& j) {
    std::ofstream o(p, std::ios::trunc);
    if (!o) throw IoError("cannot write " + p.string());
    o << j.dump(2) << '\n';
    if (!o) throw IoError("short write to " + p.string());
    record(p);
  }

  void finish() {
    json m;
    m["command"] = command;
    m["version"] = kVersion;
    m["seed"] = cfg.seed;
    m["config_hash"] = hex64(fnv1a(to_json(cfg).dump()));
    m["overrides"] = config_overrides(cfg);
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    std::ofstream o(dir() / "manifest.json", std::ios::trunc);
    if (!o) throw IoError("cannot write manifest");
    o << m.dump(2) << '\n';
  }
};

inline AlphaGrid make_grid(const GridConfig& g) {
  return AlphaGrid::log_spaced(g.min, g.max, static_cast<std::size_t>(g.count));
}

inline EncodeOptions encode_options(const RunConfig& c) {
  EncodeOptions o;
  o.grid = make_grid(c.encoding.grid);
  o.folds = c.encoding.folds;
  o.boot_b = c.encoding.boot_b;
  o.chunk_l = c.encoding.chunk_l;
  o.val_fraction = c.encoding.val_fraction;
  o.ci_resamples = c.encoding.ci_resamples;
  o.seed = derive_seed(c.seed, 0xE0);
  o.threads = resolve_threads(static_cast<unsigned>(c.threads));
  return o;
}

inline ProbeOptions probe_options(const RunConfig& c) {
  ProbeOptions o;
  o.folds = c.probing.folds;
  o.reg = c.probing.reg;
  o.seed = derive_seed(c.seed, 0xB0);
  o.threads = resolve_threads(static_cast<unsigned>(c.threads));
  return o;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline PlantedSpec planted_spec(const RunConfig& c) {
  PlantedSpec s;
  s.n_layers = static_cast<std::uint32_t>(c.synth.n_layers);
  s.n_tokens = c.synth.n_tokens;
  s.dim = c.synth.dim;
  s.subspace = c.synth.subspace;
  for (std::size_t i = 0; i < 4; ++i) {
    if (c.synth.injection[i] < 0) throw ConfigError("synth.injection: layers must be >= 0");
    s.injection[i] = static_cast<std::uint32_t>(c.synth.injection[i]);
  }
  s.mixing = c.synth.mixing;
  s.noise = c.synth.noise;
  s.seed = c.seed;
  return s;
}

inline void cmd_synth(const RunConfig& cfg) {
  CommandContext ctx(cfg, "synth");
  const PlantedSpec spec = planted_spec(cfg);
  try {
    spec.validate();
  } catch (const SpecError& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  }
  const PlantedStructure st = make_structure(spec);

  SynthStore train = generate_store(spec, st, spec.n_tokens, 0);
  write_store(train.store, ctx.output("train.hdac"));
  ctx.record(ctx.output("train.hdac"));

  const Index n_events = cfg.synth.events;
  SynthStore target = generate_store(spec, st, n_events, 1);
  write_store(target.store, ctx.output("target.hdac"));
  ctx.record(ctx.output("target.hdac"));

  std::vector<ProbeTaskSpec> tasks;
  for (std::int64_t i = 0; i < cfg.synth.syntax_tasks; ++i)
    tasks.push_back({"synth_syntax_" + std::to_string(i), FeatureKind::syntax, cfg.synth.probe_pairs});
  tasks.push_back({"synth_meaning", FeatureKind::meaning, cfg.synth.probe_pairs});
  tasks.push_back({"synth_reasoning", FeatureKind::reasoning, cfg.synth.probe_pairs});
  SynthProbeData probe = generate_probe_sets(spec, st, tasks, 2);
  write_store(probe.store, ctx.output("probe.hdac"));
  write_pairs(probe.tasks, ctx.output("pairs.tsv"));
  ctx.record(ctx.output("probe.hdac"));
  ctx.record(ctx.output("pairs.tsv"));

  NeuralSynthOptions nopt;
  nopt.fs = cfg.synth.fs;
  nopt.noise_sd = cfg.synth.neural_noise;
  nopt.seed = derive_seed(cfg.seed, 0xA0);
  auto plan = default_electrode_plan(cfg.synth.electrodes, cfg.seed);
  SynthNeural neural = generate_neural(
      {&target.components[0], &target.components[1], &target.components[2], &target.components[3]}, plan, nopt);
  write_neural_signal(neural.recording, ctx.output("neural.hgnr"));
  write_electrodes(neural.recording.electrodes, ctx.output("electrodes.tsv"));
  write_words(neural.words, ctx.output("words.tsv"));
  TokenAlignment align;
  for (std::size_t i = 0; i < neural.words.size(); ++i) {
    align.word_index.push_back(static_cast<std::int64_t>(i));
    align.onset_s.push_back(neural.words[i].onset_s);
    align.is_final.push_back(true);
  }
  write_alignment(align, ctx.output("target.align.tsv"));
  for (const char* f : {"neural.hgnr", "electrodes.tsv", "words.tsv", "target.align.tsv"}) ctx.record(ctx.output(f));

  json truth;
  truth["injection"] = {{"lexicon", spec.injection[0]},
                        {"syntax", spec.injection[1]},
                        {"meaning", spec.injection[2]},
                        {"reasoning", spec.injection[3]}};
  truth["subspace"] = spec.k();
  json electrodes = json::array();
  for (const auto& p : plan)
    electrodes.push_back({{"name", p.name},
                          {"feature", p.feature >= 0 ? to_string(static_cast<FeatureKind>(p.feature)) : "none"},
                          {"gain", p.gain},
                          {"latency_s", p.latency_s}});
  truth["electrodes"] = electrodes;
  ctx.write_json(ctx.output("truth.json"), truth);
  ctx.finish();
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

inline SaturationLayers read_saturation(const fs::path& p, std::vector<std::string>* retained = nullptr) {
  std::ifstream in(p);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  SaturationLayers L;
  L.lexicon = j.at("lexicon").get<std::uint32_t>();
  L.syntax = j.at("syntax").get<std::uint32_t>();
  L.meaning = j.at("meaning").get<std::uint32_t>();
  L.reasoning = j.at("reasoning").get<std::uint32_t>();
  L.epsilon = j.at("epsilon").get<double>();
  for (const auto& w : j.at("warnings")) L.warnings.push_back(w.get<std::string>());
  if (retained != nullptr) *retained = j.at("retained_tasks").get<std::vector<std::string>>();
  return L;
}

inline void cmd_probe(const RunConfig& cfg) {
  CommandContext ctx(cfg, "probe");
  ActivationStore store = open_store(ctx.input(cfg.paths.probe_store, "synth/probe.hdac", "synth"));
  auto tasks = read_pairs(ctx.input(cfg.paths.pairs, "synth/pairs.tsv", "synth"));
  const ProbeOptions opt = probe_options(cfg);

  std::vector<MinimalPairSet> syntax;
  for (const auto& t : tasks)
    if (t.feature_kind == FeatureKind::syntax) syntax.push_back(t);
  std::vector<BowResult> bow = syntax.empty() ? std::vector<BowResult>{} : bow_filter(syntax, cfg.probing.bow_threshold, opt);
  std::set<std::string> dropped;
  for (const auto& b : bow)
    if (!b.retained) dropped.insert(b.task_name);

  std::array<std::vector<ProbeCurve>, 4> curves;
  std::vector<std::string> retained;
  std::ofstream cv(ctx.output("curves.tsv"));
  cv << "task\tfeature\tlayer\taccuracy\tpair_accuracy\tmacro_f1\n";
  for (const auto& t : tasks) {
    if (dropped.count(t.task_name)) continue;
    ProbeCurve c = probe_all_layers(store, t, opt);
    for (std::size_t l = 0; l < c.per_layer_score.size(); ++l)
      cv << t.task_name << '\t' << to_string(t.feature_kind) << '\t' << l << '\t' << fmt_num(c.per_layer_score[l])
         << '\t' << fmt_num(c.per_layer_pair_score[l]) << '\t' << fmt_num(c.per_layer_f1[l]) << '\n';
    curves[static_cast<std::size_t>(t.feature_kind)].push_back(std::move(c));
    retained.push_back(t.task_name);
  }
  cv.close();
  ctx.record(ctx.output("curves.tsv"));

  std::ofstream bo(ctx.output("bow.tsv"));
  bo << "task\taccuracy\tretained\n";
  for (const auto& b : bow) bo << b.task_name << '\t' << fmt_num(b.accuracy) << '\t' << (b.retained ? 1 : 0) << '\n';
  bo.close();
  ctx.record(ctx.output("bow.tsv"));

  SaturationLayers L;
  L.epsilon = cfg.probing.epsilon;
  std::array<std::uint32_t*, 3> slot = {&L.syntax, &L.meaning, &L.reasoning};
  json avg = json::object();
  for (std::size_t f = 1; f < 4; ++f) {
    if (curves[f].empty())
      throw EmptyDatasetError(std::string("no retained ") + to_string(static_cast<FeatureKind>(f)) + " probing task");
    auto mean = average_curves(curves[f]);
    *slot[f - 1] = find_saturation_layer(mean, L.epsilon);
    avg[to_string(static_cast<FeatureKind>(f))] = mean;
  }
  L.check_hierarchy();
  json j = {{"lexicon", L.lexicon},   {"syntax", L.syntax},     {"meaning", L.meaning},
            {"reasoning", L.reasoning}, {"epsilon", L.epsilon}, {"warnings", L.warnings},
            {"retained_tasks", retained}, {"mean_curves", avg},  {"num_layers", store.num_layers()}};
  ctx.write_json(ctx.output("saturation.json"), j);
  ctx.finish();
}

// ---------------------------------------------------------------------------
// residualize
// ---------------------------------------------------------------------------

inline void cmd_residualize(const RunConfig& cfg) {
  CommandContext ctx(cfg, "residualize");
  SaturationLayers L = read_saturation(ctx.input("", "probe/saturation.json", "probe"));
  ActivationStore train = open_store(ctx.input(cfg.paths.train_store, "synth/train.hdac", "synth"));
  ActivationStore target = open_store(ctx.input(cfg.paths.target_store, "synth/target.hdac", "synth"));
  ActivationStore probe = open_store(ctx.input(cfg.paths.probe_store, "synth/probe.hdac", "synth"));

  ResidualOptions opt;
  opt.grid = make_grid(cfg.residual.grid);
  opt.folds = cfg.residual.folds;
  opt.threads = ctx.threads();
  ResidualMaps maps = fit_residual_maps(train, L, opt);

  auto emit = [&](const ActivationStore& s, const char* name, const std::string& tag) {
    write_store(residuals_to_store(apply_residual_maps(maps, s), tag), ctx.output(name));
    ctx.record(ctx.output(name));
  };
  emit(target, "residuals.hdac", "residuals:target");
  emit(probe, "probe_residuals.hdac", "residuals:probe");
  emit(train, "train_residuals.hdac", "residuals:train");

  write_store(ActivationStore::from_layers({maps.syntax.W, maps.meaning.W, maps.reasoning.W}, "maps"),
              ctx.output("maps.hdac"));
  ctx.record(ctx.output("maps.hdac"));
  json mj = json::object();
  for (FeatureKind k : {FeatureKind::syntax, FeatureKind::meaning, FeatureKind::reasoning}) {
    const RidgeMap& m = maps.map(k);
    mj[to_string(k)] = {{"alpha", m.alpha},
                        {"cv_folds", m.cv_folds},
                        {"train_r2", m.train_score},
                        {"x_mean", std::vector<double>(m.x_mean.data(), m.x_mean.data() + m.x_mean.size())},
                        {"y_mean", std::vector<double>(m.y_mean.data(), m.y_mean.data() + m.y_mean.size())}};
  }
  mj["layers"] = {L.lexicon, L.syntax, L.meaning, L.reasoning};
  ctx.write_json(ctx.output("maps.json"), mj);
  ctx.finish();
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

inline void cmd_validate(const RunConfig& cfg) {
  CommandContext ctx(cfg, "validate");
  std::vector<std::string> retained;
  SaturationLayers L = read_saturation(ctx.input("", "probe/saturation.json", "probe"), &retained);
  ResidualSet rs = residuals_from_store(open_store(ctx.input("", "residualize/residuals.hdac", "residualize")));
  ResidualSet rtrain = residuals_from_store(open_store(ctx.input("", "residualize/train_residuals.hdac", "residualize")));
  ResidualSet rprobe = residuals_from_store(open_store(ctx.input("", "residualize/probe_residuals.hdac", "residualize")));
  ActivationStore target = open_store(ctx.input(cfg.paths.target_store, "synth/target.hdac", "synth"));
  ActivationStore train = open_store(ctx.input(cfg.paths.train_store, "synth/train.hdac", "synth"));
  auto tasks = read_pairs(ctx.input(cfg.paths.pairs, "synth/pairs.tsv", "synth"));

  Matrix h0 = target.slice_layer(L.lexicon).to_matrix(), hs = target.slice_layer(L.syntax).to_matrix();
  Matrix hm = target.slice_layer(L.meaning).to_matrix(), hr = target.slice_layer(L.reasoning).to_matrix();
  SimilarityReport raw = token_cosine_report({&h0, &hs, &hm, &hr}, "hidden_states");
  SimilarityReport res = token_cosine_report(rs);
  std::ofstream so(ctx.output("similarity.tsv"));
  so << "variant\ta\tb\tmean_abs_cos\n";
  for (const auto* r : {&raw, &res})
    for (Index a = 0; a < 4; ++a)
      for (Index b = 0; b < 4; ++b)
        so << r->variant << '\t' << r->labels[static_cast<std::size_t>(a)] << '\t'
           << r->labels[static_cast<std::size_t>(b)] << '\t' << fmt_num(r->mean_abs_cos(a, b)) << '\n';
  so.close();
  ctx.record(ctx.output("similarity.tsv"));

  Matrix t0 = train.slice_layer(L.lexicon).to_matrix(), ts = train.slice_layer(L.syntax).to_matrix();
  Matrix tm = train.slice_layer(L.meaning).to_matrix();
  AuditOptions aopt;
  aopt.max_columns = cfg.validation.audit_columns;
  aopt.seed = derive_seed(cfg.seed, 0xAD);
  AuditReport audit = sample_axis_audit(rtrain, {&t0, &ts, &tm}, aopt);
  const double null_ref =
      null_max_correlation(rtrain.n_tokens(), audit.columns_used, audit.columns_used, 3, derive_seed(cfg.seed, 0xAE));
  std::ofstream ao(ctx.output("audit.tsv"));
  ao << "a\tb\tmax_abs_corr\n";
  for (const auto& e : audit.entries) ao << e.a << '\t' << e.b << '\t' << fmt_num(e.max_abs_corr) << '\n';
  ao.close();
  ctx.record(ctx.output("audit.tsv"));

  std::vector<MinimalPairSet> kept;
  for (auto& t : tasks)
    if (std::find(retained.begin(), retained.end(), t.task_name) != retained.end()) kept.push_back(std::move(t));
  CrossProbeMatrix cp = cross_probe(rprobe, kept, probe_options(cfg));
  std::ofstream co(ctx.output("cross_probe.tsv"));
  co << "source\tsyntax\tmeaning\treasoning\n";
  for (Index r = 0; r < 4; ++r)
    co << to_string(kFeatureOrder[static_cast<std::size_t>(r)]) << '\t' << fmt_num(cp.accuracy(r, 0)) << '\t'
       << fmt_num(cp.accuracy(r, 1)) << '\t' << fmt_num(cp.accuracy(r, 2)) << '\n';
  co.close();
  ctx.record(ctx.output("cross_probe.tsv"));

  json j = {{"residual_mean_off_diagonal", res.mean_off_diagonal()},
            {"residual_max_off_diagonal", res.max_off_diagonal()},
            {"hidden_mean_off_diagonal", raw.mean_off_diagonal()},
            {"excluded_zero_norm", res.excluded_zero_norm},
            {"audit_max_vs_predictors", audit.max_vs_predictors},
            {"audit_max_vs_residuals", audit.max_vs_residuals},
            {"audit_null_reference", null_ref},
            {"audit_columns", audit.columns_used},
            {"cross_probe_margin", cp.diagonal_margin()}};
  ctx.write_json(ctx.output("validate.json"), j);
  ctx.finish();
}

// ---------------------------------------------------------------------------
// encode / null shared inputs
// ---------------------------------------------------------------------------

inline const std::array<std::string, 5>& encoded_features() { return kPanelFeatures; }

struct NeuralInputs {
  NeuralRecording recording;
  EpochedNeural epochs;
  std::vector<DesignMatrix> designs;  ///< in encoded_features() order
  Matrix covariates;
};

inline NeuralInputs load_neural_inputs(CommandContext& ctx) {
  const RunConfig& cfg = ctx.cfg;
  NeuralInputs ni;
  ResidualSet rs = residuals_from_store(open_store(ctx.input("", "residualize/residuals.hdac", "residualize")));
  SaturationLayers L = read_saturation(ctx.input("", "probe/saturation.json", "probe"));
  ActivationStore target = open_store(ctx.input(cfg.paths.target_store, "synth/target.hdac", "synth"));
  TokenAlignment align = read_alignment(ctx.input(cfg.paths.alignment, "synth/target.align.tsv", "synth"));
  ni.recording = read_recording(ctx.input(cfg.paths.neural, "synth/neural.hgnr", "synth"),
                                ctx.input(cfg.paths.electrodes, "synth/electrodes.tsv", "synth"));
  auto words = read_words(ctx.input(cfg.paths.words, "synth/words.tsv", "synth"));

  const auto finals = align.final_tokens();
  if (finals.size() != words.size())
    throw ValidationError("alignment has " + std::to_string(finals.size()) + " words, word table has " +
                          std::to_string(words.size()));
  if (static_cast<std::uint64_t>(rs.n_tokens()) != target.n_tokens())
    throw ValidationError("residuals and target store differ in token count");
  std::vector<double> onsets;
  for (const auto& w : words) onsets.push_back(w.onset_s);
  EpochOptions eo;
  eo.window_s = cfg.encoding.window_s;
  eo.rate_hz = cfg.encoding.rate_hz;
  ni.epochs = epoch(ni.recording, onsets, eo);
  if (ni.epochs.n_events() < cfg.encoding.folds)
    throw ValidationError("only " + std::to_string(ni.epochs.n_events()) + " events survive epoching");

  std::vector<Index> rows;
  std::vector<WordEvent> kept_words;
  for (std::size_t k : ni.epochs.kept) {
    rows.push_back(finals[k]);
    kept_words.push_back(words[k]);
  }
  // Word rate uses every word so that edge events still see their neighbours.
  Matrix all_cov = word_rate_covariates(words);
  ni.covariates.resize(static_cast<Index>(rows.size()), all_cov.cols());
  for (std::size_t i = 0; i < ni.epochs.kept.size(); ++i)
    ni.covariates.row(static_cast<Index>(i)) = all_cov.row(static_cast<Index>(ni.epochs.kept[i]));

  Matrix full = target.slice_layer(L.reasoning).gather(rows);
  for (std::size_t f = 0; f < 4; ++f)
    ni.designs.push_back({detail::select_rows(rs.get(kFeatureOrder[f]), rows), ni.covariates, encoded_features()[f]});
  ni.designs.push_back({full, ni.covariates, "full"});
  return ni;
}

struct CorrelationTable {
  std::vector<std::string> electrodes;            ///< subject/electrode
  std::map<std::string, Matrix> r, r_embed;       ///< feature -> electrodes x lags
  std::vector<double> lag_times_s;
};

inline void write_correlations(const fs::path& p, const std::vector<ElectrodeMeta>& meta,
                               const std::vector<std::pair<std::string, const CorrelationResult*>>& fits,
                               const std::vector<Matrix>& r_embed) {
  std::ofstream o(p, std::ios::trunc);
  if (!o) throw IoError("cannot write " + p.string());
  o << "subject\telectrode\tfeature\tlag_s\tr\tr_embed\n";
  for (std::size_t f = 0; f < fits.size(); ++f) {
    const auto& fit = *fits[f].second;
    for (Index e = 0; e < fit.n_electrodes(); ++e)
      for (Index k = 0; k < fit.n_lags(); ++k)
        o << meta[static_cast<std::size_t>(e)].subject << '\t' << meta[static_cast<std::size_t>(e)].name << '\t'
          << fits[f].first << '\t' << fmt_num(fit.lag_times_s[static_cast<std::size_t>(k)]) << '\t'
          << fmt_num(fit.r(e, k)) << '\t' << fmt_num(r_embed[f](e, k)) << '\n';
  }
  if (!o) throw IoError("short write to " + p.string());
}

inline CorrelationTable read_correlations(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("subject\t", 0) != 0) throw FormatError(p.string() + ": missing header");
  CorrelationTable t;
  std::map<std::string, std::vector<std::array<double, 2>>> vals;
  std::map<std::string, std::size_t> eidx;
  std::vector<double> lags;
  std::map<std::string, double> seen_lag;
  std::vector<std::string> feature_order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto c = detail::split_tabs(line);
    if (c.size() != 6) throw FormatError(p.string() + ": expected 6 columns");
    const std::string key = c[0] + "/" + c[1];
    if (!eidx.count(key)) {
      eidx[key] = t.electrodes.size();
      t.electrodes.push_back(key);
    }
    if (!vals.count(c[2])) feature_order.push_back(c[2]);
    if (!seen_lag.count(c[3])) {
      seen_lag[c[3]] = std::stod(c[3]);
      lags.push_back(seen_lag[c[3]]);
    }
    vals[c[2]].push_back({std::stod(c[4]), std::stod(c[5])});
  }
  const Index E = static_cast<Index>(t.electrodes.size()), K = static_cast<Index>(lags.size());
  for (const auto& f : feature_order) {
    const auto& v = vals[f];
    if (static_cast<Index>(v.size()) != E * K) throw CorruptError(p.string() + ": feature " + f + " is incomplete");
    Matrix r(E, K), re(E, K);
    for (Index i = 0; i < E * K; ++i) {
      r(i / K, i % K) = v[static_cast<std::size_t>(i)][0];
      re(i / K, i % K) = v[static_cast<std::size_t>(i)][1];
    }
    t.r[f] = r;
    t.r_embed[f] = re;
  }
  t.lag_times_s = lags;
  return t;
}

inline void cmd_encode(const RunConfig& cfg) {
  CommandContext ctx(cfg, "encode");
  NeuralInputs ni = load_neural_inputs(ctx);
  const EncodeOptions opt = encode_options(cfg);

  CorrelationResult wr = encode_wordrate(ni.covariates, ni.epochs, opt);
  std::vector<CorrelationResult> fits(ni.designs.size());
  parallel_for(ni.designs.size(), ctx.threads(), [&](std::size_t f) { fits[f] = encode_cv(ni.designs[f], ni.epochs, opt); });

  std::vector<std::pair<std::string, const CorrelationResult*>> rows;
  std::vector<Matrix> embed;
  json alphas = json::object();
  json constant = json::object();
  for (std::size_t f = 0; f < fits.size(); ++f) {
    rows.emplace_back(ni.designs[f].feature_tag, &fits[f]);
    embed.push_back(regress_out_wordrate(fits[f].r, wr.r));
    alphas[ni.designs[f].feature_tag] = fits[f].fold_alphas;
    constant[ni.designs[f].feature_tag] = fits[f].constant_cells;
  }
  rows.emplace_back("wordrate", &wr);
  embed.push_back(wr.r);
  alphas["wordrate"] = wr.fold_alphas;
  write_correlations(ctx.output("correlations.tsv"), ni.recording.electrodes, rows, embed);
  ctx.record(ctx.output("correlations.tsv"));

  std::ofstream ci(ctx.output("peak_ci.tsv"));
  ci << "subject\telectrode\tfeature\tr_peak\tpeak_lag_s\tci_low\tci_high\n";
  for (const auto& [tag, fit] : rows)
    for (Index e = 0; e < fit->n_electrodes(); ++e) {
      const Index k = fit->peak_lag[static_cast<std::size_t>(e)];
      const bool have = fit->r_ci_low.size() > 0;
      ci << ni.recording.electrodes[static_cast<std::size_t>(e)].subject << '\t'
         << ni.recording.electrodes[static_cast<std::size_t>(e)].name << '\t' << tag << '\t' << fmt_num(fit->r_peak(e))
         << '\t' << fmt_num(fit->peak_lag_s(e)) << '\t' << (have ? fmt_num(fit->r_ci_low(e, k)) : "") << '\t'
         << (have ? fmt_num(fit->r_ci_high(e, k)) : "") << '\n';
    }
  ci.close();
  ctx.record(ctx.output("peak_ci.tsv"));

  json j = {{"fold_alphas", alphas},
            {"constant_cells", constant},
            {"events", ni.epochs.n_events()},
            {"dropped_events", ni.epochs.dropped},
            {"electrodes", ni.epochs.n_electrodes},
            {"lags", ni.epochs.n_lags}};
  ctx.write_json(ctx.output("encode.json"), j);
  ctx.finish();
}

// ---------------------------------------------------------------------------
// null
// ---------------------------------------------------------------------------

struct NullRow {
  std::string subject, electrode, feature;
  Index shuffles = 0;
  double z_mean = 0, z_sd = 0, true_z = 0;
  bool responsive = false;
};

inline void cmd_null(const RunConfig& cfg) {
  CommandContext ctx(cfg, "null");
  const fs::path enc_json = ctx.input("", "encode/encode.json", "encode");
  CorrelationTable table = read_correlations(ctx.input("", "encode/correlations.tsv", "encode"));
  NeuralInputs ni = load_neural_inputs(ctx);
  json ej;
  std::ifstream(enc_json) >> ej;
  const EncodeOptions enc = encode_options(cfg);

  std::ofstream o(ctx.output("null_summary.tsv"));
  o << "subject\telectrode\tfeature\tshuffles\tz_mean\tz_sd\ttrue_z\tresponsive\n";
  for (std::size_t f = 0; f < ni.designs.size(); ++f) {
    const std::string& tag = ni.designs[f].feature_tag;
    if (!table.r.count(tag)) throw DependencyError("encode", "correlations.tsv lacks feature " + tag);
    CorrelationResult truth;
    truth.r = table.r[tag];
    truth.lag_times_s = table.lag_times_s;
    truth.fold_alphas = ej.at("fold_alphas").at(tag).get<std::vector<double>>();
    truth.compute_peaks();
    NullOptions nopt;
    nopt.n_shuffles = cfg.stats.shuffles;
    nopt.seed = derive_seed(cfg.seed, 0xF00 + f);
    nopt.freeze_alpha = cfg.stats.freeze_alpha;
    nopt.threads = ctx.threads();
    NullDistribution nd = build_null(ni.designs[f], ni.epochs, enc, nopt, &truth);
    ZScoreResult z = score_against_null(truth.r_peak, nd, cfg.stats.z_threshold);
    for (Index e = 0; e < truth.r.rows(); ++e) {
      const auto& m = ni.recording.electrodes[static_cast<std::size_t>(e)];
      o << m.subject << '\t' << m.name << '\t' << tag << '\t' << nd.n_shuffles << '\t' << fmt_num(nd.z_mean(e)) << '\t'
        << fmt_num(nd.z_sd(e)) << '\t' << fmt_num(z.z(e)) << '\t' << (z.responsive[static_cast<std::size_t>(e)] ? 1 : 0)
        << '\n';
    }
  }
  o.close();
  ctx.record(ctx.output("null_summary.tsv"));
  ctx.finish();
}

inline std::vector<NullRow> read_null_summary(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("subject\t", 0) != 0) throw FormatError(p.string() + ": missing header");
  std::vector<NullRow> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto c = detail::split_tabs(line);
    if (c.size() != 8) throw FormatError(p.string() + ": expected 8 columns");
    out.push_back({c[0], c[1], c[2], std::stoll(c[3]), std::stod(c[4]), std::stod(c[5]), std::stod(c[6]), c[7] == "1"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline void cmd_report(const RunConfig& cfg) {
  CommandContext ctx(cfg, "report");
  CorrelationTable table = read_correlations(ctx.input("", "encode/correlations.tsv", "encode"));
  auto nulls = read_null_summary(ctx.input("", "null/null_summary.tsv", "null"));
  auto meta = read_electrodes(ctx.input(cfg.paths.electrodes, "synth/electrodes.tsv", "synth"));
  const fs::path ci_path = ctx.input("", "encode/peak_ci.tsv", "encode");
  const auto groups = cfg.report.region_map.empty() ? default_region_groups() : read_region_map(cfg.report.region_map);
  if (!cfg.report.region_map.empty()) ctx.inputs[ctx.label(cfg.report.region_map)] = hex64(hash_file(cfg.report.region_map));
  if (table.electrodes.size() != meta.size()) throw ValidationError("electrode table and correlations disagree");

  std::map<std::string, std::size_t> eidx;
  for (std::size_t i = 0; i < meta.size(); ++i) eidx[meta[i].subject + "/" + meta[i].name] = i;
  const Index E = static_cast<Index>(meta.size());

  // Per-feature fits built from the embedding-only correlations.
  std::map<std::string, CorrelationResult> fits;
  std::map<std::string, ZScoreResult> zs;
  for (const auto& f : kPanelFeatures) {
    if (!table.r_embed.count(f)) throw DependencyError("encode", "correlations.tsv lacks feature " + f);
    CorrelationResult c;
    c.feature_tag = f;
    c.r = table.r_embed[f];
    c.lag_times_s = table.lag_times_s;
    c.compute_peaks();
    fits[f] = std::move(c);
    ZScoreResult z;
    z.threshold = cfg.stats.z_threshold;
    z.z = Vector::Zero(E);
    z.responsive.assign(static_cast<std::size_t>(E), false);
    std::vector<bool> have(static_cast<std::size_t>(E), false);
    for (const auto& n : nulls) {
      if (n.feature != f) continue;
      auto it = eidx.find(n.subject + "/" + n.electrode);
      if (it == eidx.end()) throw ValidationError("null summary names unknown electrode " + n.electrode);
      z.z(static_cast<Index>(it->second)) = n.true_z;
      z.responsive[it->second] = n.responsive;
      have[it->second] = true;
    }
    if (std::find(have.begin(), have.end(), false) != have.end())
      throw IncompleteError("null summary lacks electrodes for feature " + f);
    zs[f] = std::move(z);
  }

  FeaturePanel panel;
  for (const auto& f : kPanelFeatures) panel.add(f, fits[f], zs[f], meta);
  write_panel_tsv(panel, ctx.output("panel.tsv"));
  ctx.record(ctx.output("panel.tsv"));

  DominantAssignment dom = dominant_feature(panel);
  std::vector<bool> any_resp(static_cast<std::size_t>(E), false);
  for (std::size_t f = 0; f < 4; ++f)
    for (Index e = 0; e < E; ++e)
      any_resp[static_cast<std::size_t>(e)] =
          any_resp[static_cast<std::size_t>(e)] || zs[kPanelFeatures[f]].responsive[static_cast<std::size_t>(e)];
  {
    std::ofstream o(ctx.output("dominant.tsv"));
    o << "subject\telectrode\tdominant\tresponsive\n";
    for (Index e = 0; e < E; ++e)
      o << meta[static_cast<std::size_t>(e)].subject << '\t' << meta[static_cast<std::size_t>(e)].name << '\t'
        << to_string(dom.feature[static_cast<std::size_t>(e)]) << '\t' << (any_resp[static_cast<std::size_t>(e)] ? 1 : 0)
        << '\n';
  }
  ctx.record(ctx.output("dominant.tsv"));

  const std::vector<std::string> feats(kPanelFeatures.begin(), kPanelFeatures.end());
  CountMatrix ov = overlap_matrix(responsive_masks(panel, feats));
  {
    std::ofstream o(ctx.output("overlap.tsv"));
    o << "feature";
    for (const auto& f : feats) o << '\t' << f;
    o << '\n';
    for (Index i = 0; i < ov.rows(); ++i) {
      o << feats[static_cast<std::size_t>(i)];
      for (Index j = 0; j < ov.cols(); ++j) o << '\t' << ov(i, j);
      o << '\n';
    }
  }
  ctx.record(ctx.output("overlap.tsv"));

  auto lat = lateralization(panel);
  {
    std::ofstream o(ctx.output("lateralization.tsv"));
    o << "feature\tn_left\tn_right\ttotal_left\ttotal_right\tprop_left\tprop_right\tratio\n";
    for (const auto& l : lat)
      o << l.feature << '\t' << l.n_left << '\t' << l.n_right << '\t' << l.total_left << '\t' << l.total_right << '\t'
        << fmt_num(l.prop_left) << '\t' << fmt_num(l.prop_right) << '\t' << (l.ratio_defined ? fmt_num(l.ratio) : "NA")
        << '\n';
  }
  ctx.record(ctx.output("lateralization.tsv"));

  RegionReport reg = region_report(panel, groups, cfg.report.test_groups);
  {
    std::ofstream o(ctx.output("regions.tsv"));
    o << "region\tfeature\tn\tmean_r_peak\n";
    for (const auto& [g, by] : reg.samples)
      for (const auto& [f, v] : by)
        o << g << '\t' << f << '\t' << v.size() << '\t'
          << fmt_num(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size())) << '\n';
    std::ofstream t(ctx.output("region_tests.tsv"));
    t << "region\tfeature_a\tfeature_b\tt\tdf\tp_one_tailed\n";
    for (const auto& c : reg.tests)
      t << c.region << '\t' << c.feature_a << '\t' << c.feature_b << '\t' << fmt_num(c.test.t) << '\t'
        << fmt_num(c.test.df) << '\t' << fmt_num(c.test.p) << '\n';
  }
  ctx.record(ctx.output("regions.tsv"));
  ctx.record(ctx.output("region_tests.tsv"));

  std::vector<TemporalCurve> temporal;
  for (std::size_t f = 0; f < 4; ++f)
    temporal.push_back(temporal_report(kPanelFeatures[f], fits[kPanelFeatures[f]], zs[kPanelFeatures[f]],
                                       cfg.report.top_fraction, cfg.report.fdr_q));
  auto trf = trf_by_dominant({&fits["lexicon"], &fits["syntax"], &fits["meaning"], &fits["reasoning"]}, dom, any_resp,
                             cfg.report.fdr_q);
  auto write_curves = [&](const char* name, const std::vector<TemporalCurve>& cs) {
    std::ofstream o(ctx.output(name));
    o << "feature\tlag_s\tmean_r\tt\tp\tsignificant\tn_selected\n";
    for (const auto& c : cs)
      for (std::size_t k = 0; k < c.mean_r.size(); ++k)
        o << c.feature << '\t' << fmt_num(table.lag_times_s[k]) << '\t' << fmt_num(c.mean_r[k]) << '\t' << fmt_num(c.t[k])
          << '\t' << fmt_num(c.p[k]) << '\t' << (c.significant[k] ? 1 : 0) << '\t' << c.n_selected << '\n';
    o.close();
    ctx.record(ctx.output(name));
  };
  write_curves("temporal.tsv", temporal);
  write_curves("trf.tsv", trf);

  // Plot-ready exports.
  std::map<std::string, std::array<double, 2>> ci;
  {
    std::ifstream in(ci_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      auto c = detail::split_tabs(line);
      if (c.size() != 7) continue;
      auto num = [](const std::string& s) { return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s); };
      ci[c[0] + "/" + c[1] + "/" + c[2]] = {num(c[5]), num(c[6])};
    }
  }
  std::vector<PlotRow> peak_rows, z_rows, curve_rows;
  for (const auto& r : panel.rows) {
    const std::string key = r.subject + "/" + r.electrode;
    auto it = ci.find(key + "/" + r.feature);
    PlotRow pr{key, r.feature, r.r_peak};
    if (it != ci.end()) std::tie(pr.ci_low, pr.ci_high) = std::pair(it->second[0], it->second[1]);
    peak_rows.push_back(pr);
    z_rows.push_back({key, r.feature, clip_plot_z(r.z)});
  }
  for (const auto& c : temporal)
    for (std::size_t k = 0; k < c.mean_r.size(); ++k) curve_rows.push_back({fmt_num(table.lag_times_s[k]), c.feature, c.mean_r[k]});
  write_plot_csv(peak_rows, ctx.output("plot_peak_r.csv"));
  write_plot_csv(z_rows, ctx.output("plot_z.csv"));
  write_plot_csv(curve_rows, ctx.output("plot_temporal.csv"));
  for (const char* n : {"plot_peak_r.csv", "plot_z.csv", "plot_temporal.csv"}) ctx.record(ctx.output(n));

  const auto counts = dom.counts(&any_resp);
  json peaks = json::object();
  for (const auto& c : temporal) peaks[c.feature] = c.peak_lag_s;
  json resp = json::object();
  for (const auto& f : kPanelFeatures) resp[f] = zs[f].count();
  json j = {{"electrodes", E},
            {"z_threshold", cfg.stats.z_threshold},
            {"bonferroni_z_recomputed", bonferroni_z(0.05, static_cast<double>(E))},
            {"responsive", resp},
            {"dominant_counts",
             {{"lexicon", counts[0]}, {"syntax", counts[1]}, {"meaning", counts[2]}, {"reasoning", counts[3]}}},
            {"temporal_peak_lag_s", peaks},
            {"region_notes", reg.notes},
            {"unknown_region_labels", reg.unknown_labels}};
  ctx.write_json(ctx.output("report.json"), j);
  ctx.finish();
}

/// Runs one command by name; returns false for an unknown name.
inline bool run_command(const std::string& name, const RunConfig& cfg) {
  if (name == "synth") cmd_synth(cfg);
  else if (name == "probe") cmd_probe(cfg);
  else if (name == "residualize") cmd_residualize(cfg);
  else if (name == "validate") cmd_validate(cfg);
  else if (name == "encode") cmd_encode(cfg);
  else if (name == "null") cmd_null(cfg);
  else if (name == "report") cmd_report(cfg);
  else return false;
  return true;
}

/// Exit status for an exception escaping a command.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e)) return 3;
  if (dynamic_cast<const Error*>(&e)) return 4;
  return 1;
}

}  // namespace resdis
