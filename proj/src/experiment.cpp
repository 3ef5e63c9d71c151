#include "soundprobe/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <set>

#include <omp.h>

#include "soundprobe/error.hpp"
#include "soundprobe/random.hpp"

namespace soundprobe {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::linear: return "linear";
    case Variant::nonlinear: return "nonlinear";
    case Variant::procrustes: return "procrustes";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "linear") return Variant::linear;
  if (s == "nonlinear") return Variant::nonlinear;
  if (s == "procrustes") return Variant::procrustes;
  throw ArgumentError("unknown variant '" + std::string(s) + "' (expected linear, nonlinear or procrustes)");
}

std::string_view to_string(ProcrustesMetric m) { return m == ProcrustesMetric::cosine ? "cosine" : "euclidean"; }

ProcrustesMetric parse_procrustes_metric(std::string_view s) {
  if (s == "cosine") return ProcrustesMetric::cosine;
  if (s == "euclidean") return ProcrustesMetric::euclidean;
  throw ArgumentError("unknown Procrustes metric '" + std::string(s) + "' (expected cosine or euclidean)");
}

std::string_view to_string(MapKind m) { return m == MapKind::orthogonal ? "orthogonal" : "random_linear"; }

MapKind parse_map_kind(std::string_view s) {
  if (s == "orthogonal") return MapKind::orthogonal;
  if (s == "random_linear") return MapKind::random_linear;
  throw ArgumentError("unknown map kind '" + std::string(s) + "' (expected orthogonal or random_linear)");
}

std::vector<SplitSpec> make_splits(std::uint64_t seed, const ClassRegistry& retrieval_registry,
                                   std::vector<ClassId> probe_classes, int n_splits, double train_fraction) {
  if (n_splits < 1) throw ArgumentError("n_splits must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ArgumentError("train_fraction must be in (0, 1)");
  std::set<ClassId> seen;
  for (const ClassId c : probe_classes) {
    if (c >= retrieval_registry.size()) throw ArgumentError("probe class id " + std::to_string(c) + " not in registry");
    if (!seen.insert(c).second) throw ArgumentError("duplicate probe class id " + std::to_string(c));
  }
  const std::size_t n = probe_classes.size();
  // The epsilon keeps e.g. 0.7 * 100 from flooring to 69.
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 1e-9));
  if (n_train == 0 || n_train >= n) {
    throw ArgumentError("train_fraction " + std::to_string(train_fraction) + " of " + std::to_string(n) +
                        " classes leaves an empty train or test set");
  }
  std::vector<SplitSpec> splits;
  for (int i = 0; i < n_splits; ++i) {
    SplitSpec s;
    s.seed = derive_seed(seed, "split", static_cast<std::uint64_t>(i));
    s.index = i;
    s.probe_classes = probe_classes;
    s.retrieval_registry = retrieval_registry;
    std::vector<ClassId> order = probe_classes;
    Rng rng(s.seed);
    shuffle(order, rng);
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    splits.push_back(std::move(s));
  }
  return splits;
}

std::vector<TrainConfig> GridSpec::points(std::uint64_t seed) const {
  if (learning_rates.empty() || taus.empty() || num_negatives.empty()) throw ArgumentError("grid axes must be non-empty");
  std::vector<TrainConfig> out;
  for (const double lr : learning_rates)
    for (const double tau : taus)
      for (const int neg : num_negatives) {
        TrainConfig cfg = base;
        cfg.learning_rate = lr;
        cfg.tau = tau;
        cfg.num_negatives = neg;
        cfg.seed = seed;
        cfg.validate();
        out.push_back(cfg);
      }
  return out;
}

namespace {

// Text rows reordered to follow `registry`, joined by class name.
RetrievalSet ordered_retrieval(const EmbeddingSet& text, const ClassRegistry& registry) {
  std::vector<ClassId> all(registry.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<ClassId>(i);
  const auto ids = map_by_name(registry, text.registry(), all);
  RetrievalSet rows = restrict_rows(make_retrieval_set(text), ids);
  return {registry, std::move(rows.text)};
}

// Training classes only, re-indexed 0..m-1. Nothing else reaches train_probe.
struct TrainInputs {
  RetrievalSet text;
  EmbeddingSet audio;
  std::vector<ClassId> ids;
};

TrainInputs make_train_inputs(const RetrievalSet& retrieval, const EmbeddingSet& audio,
                              std::span<const ClassId> train) {
  RetrievalSet text = restrict_rows(retrieval, train);
  EmbeddingSet train_audio = subset(audio, map_by_name(retrieval.registry, audio.registry(), train));
  std::vector<ClassId> ids(train.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<ClassId>(i);
  return {std::move(text), std::move(train_audio), std::move(ids)};
}

struct ProbeRun {
  RunResult result;
  const EmbeddingSet* audio = nullptr;
  RetrievalSet retrieval;
  std::optional<RetrievalSet> control_retrieval;
  std::optional<TrainInputs> inputs;
  std::optional<TrainInputs> control_inputs;
  std::vector<TrainConfig> points;
  std::vector<TrainConfig> control_points;
  std::vector<TrainReport> reports;
  std::vector<TrainReport> control_reports;
};

struct TrainJob {
  const TrainInputs* inputs;
  const TrainConfig* cfg;
  TrainReport* out;
};

ProbeRun prepare_probe_run(const GridSpec& grid, Variant variant, const SplitSpec& split, const EmbeddingSet& text,
                           const EmbeddingSet& audio, const RunOptions& opts) {
  ProbeRun run;
  run.audio = &audio;
  run.result.variant = variant;
  run.result.split = split;
  run.result.train_seed = derive_seed(split.seed, "train");
  run.result.control_seed = derive_seed(split.seed, "control");
  GridSpec g = grid;
  g.base.nonlinear = variant == Variant::nonlinear;
  run.retrieval = ordered_retrieval(text, split.retrieval_registry);
  run.inputs = make_train_inputs(run.retrieval, audio, split.train);
  run.points = g.points(run.result.train_seed);
  run.reports.resize(run.points.size());
  if (opts.with_control) {
    run.control_retrieval = permuted_control(run.result.control_seed, run.retrieval);
    run.control_inputs = make_train_inputs(*run.control_retrieval, audio, split.train);
    run.control_points = g.points(derive_seed(split.seed, "control-train"));
    run.control_reports.resize(run.control_points.size());
  }
  return run;
}

void collect_jobs(ProbeRun& run, std::vector<TrainJob>& jobs) {
  for (std::size_t i = 0; i < run.points.size(); ++i) jobs.push_back({&*run.inputs, &run.points[i], &run.reports[i]});
  for (std::size_t i = 0; i < run.control_points.size(); ++i) {
    jobs.push_back({&*run.control_inputs, &run.control_points[i], &run.control_reports[i]});
  }
}

void execute(const std::vector<TrainJob>& jobs, int threads) {
  std::vector<std::exception_ptr> errors(jobs.size());
  const auto n = static_cast<long>(jobs.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(std::max(1, threads))
  for (long i = 0; i < n; ++i) {
    const TrainJob& job = jobs[static_cast<std::size_t>(i)];
    try {
      *job.out = train_probe(*job.cfg, job.inputs->text, job.inputs->audio, job.inputs->ids);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double selection_metric(const TrainReport& r) { return r.val_metric_by_epoch.at(static_cast<std::size_t>(r.best_epoch)); }

std::size_t select_point(const std::vector<TrainReport>& reports, std::vector<double>* metrics) {
  std::size_t best = 0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const double m = selection_metric(reports[i]);
    if (metrics) metrics->push_back(m);
    if (m > selection_metric(reports[best])) best = i;
  }
  return best;
}

void finish_probe_run(ProbeRun& run, const RunOptions& opts) {
  auto& res = run.result;
  const std::size_t best = select_point(run.reports, &res.grid_val_metrics);
  res.chosen_index = static_cast<int>(best);
  res.chosen_config = run.points[best];
  res.train_report = std::move(run.reports[best]);
  res.eval = evaluate(res.train_report->params, run.retrieval, *run.audio, res.split.test, opts.ks, opts.jobs);
  if (run.control_retrieval) {
    const std::size_t cbest = select_point(run.control_reports, nullptr);
    res.control_config = run.control_points[cbest];
    res.control_report = std::move(run.control_reports[cbest]);
    res.control_eval =
        evaluate(res.control_report->params, *run.control_retrieval, *run.audio, res.split.test, opts.ks, opts.jobs);
  }
  run.reports.clear();
  run.control_reports.clear();
  run.inputs.reset();
  run.control_inputs.reset();
}

ProcrustesInfo fit_procrustes(const RetrievalSet& retrieval, const EmbeddingSet& audio, std::span<const ClassId> train,
                              ProcrustesMetric metric) {
  const Eigen::MatrixXd lang = restrict_rows(retrieval, train).text;
  const Eigen::MatrixXd sound = class_means(subset(audio, map_by_name(retrieval.registry, audio.registry(), train))).means;
  ProcrustesInfo info;
  info.metric = metric;
  info.k_requested = static_cast<int>(std::min<Eigen::Index>({lang.rows() - 1, lang.cols(), sound.cols()}));
  info.k_used = std::min({info.k_requested, linalg::centered_rank(lang), linalg::centered_rank(sound)});
  if (info.k_used < 1) throw DataError("Procrustes probe: training data has no variance to align");
  info.model.pca_lang = linalg::pca_fit(lang, info.k_used);
  info.model.pca_sound = linalg::pca_fit(sound, info.k_used);
  const auto fit = linalg::procrustes_fit(linalg::pca_transform(info.model.pca_lang, lang),
                                          linalg::pca_transform(info.model.pca_sound, sound));
  info.model.rotation = fit.rotation;
  info.model.residual = fit.residual;
  info.residual = fit.residual;
  return info;
}

EvalReport evaluate_procrustes(const ProcrustesInfo& info, const RetrievalSet& retrieval, const EmbeddingSet& audio,
                               std::span<const ClassId> test, const RunOptions& opts) {
  const Eigen::MatrixXd cands =
      (linalg::pca_transform(info.model.pca_lang, retrieval.text) * info.model.rotation).transpose();
  const auto audio_ids = map_by_name(retrieval.registry, audio.registry(), test);
  std::vector<std::size_t> counts, labels;
  for (std::size_t i = 0; i < audio_ids.size(); ++i) {
    counts.push_back(audio.num_vectors(audio_ids[i]));
    labels.insert(labels.end(), counts.back(), i);
  }
  Eigen::MatrixXd clips(static_cast<Eigen::Index>(labels.size()), audio.dim());
  Eigen::Index row = 0;
  for (const ClassId a : audio_ids) {
    const auto rows = audio.class_rows(a);
    clips.middleRows(row, rows.rows()) = rows;
    row += rows.rows();
  }
  const Eigen::MatrixXd queries = linalg::pca_transform(info.model.pca_sound, clips).transpose();
  const auto scoring =
      info.metric == ProcrustesMetric::cosine ? kernels::Scoring::cosine : kernels::Scoring::neg_euclidean;
  return score_queries(cands, queries, labels, retrieval, test, counts, opts.ks, scoring, opts.jobs);
}

void check_registries(const std::vector<NamedSet>& texts, const std::vector<NamedSet>& audios,
                      const std::vector<SplitSpec>& splits) {
  const ClassRegistry& registry = splits.front().retrieval_registry;
  for (const auto& s : splits) {
    if (!(s.retrieval_registry == registry)) throw DataError("splits disagree on the retrieval registry");
  }
  const std::set<std::string> wanted(registry.names().begin(), registry.names().end());
  std::string problems;
  for (const auto& t : texts) {
    const std::set<std::string> have(t.set.registry().names().begin(), t.set.registry().names().end());
    for (const auto& name : wanted)
      if (!have.count(name)) problems += "\n  text '" + t.name + "' lacks class '" + name + "'";
    for (const auto& name : have)
      if (!wanted.count(name)) problems += "\n  text '" + t.name + "' has unknown class '" + name + "'";
  }
  std::set<std::string> probe_names;
  for (const auto& s : splits)
    for (const ClassId c : s.probe_classes) probe_names.insert(registry.name(c));
  for (const auto& a : audios) {
    for (const auto& name : probe_names)
      if (!a.set.registry().find(name)) problems += "\n  audio '" + a.name + "' lacks probe class '" + name + "'";
  }
  if (!problems.empty()) throw DataError("class registries do not match:" + problems);
}

}  // namespace

RunResult grid_search(const GridSpec& grid, const SplitSpec& split, const EmbeddingSet& text,
                      const EmbeddingSet& audio, const RunOptions& opts) {
  const Variant variant = grid.base.nonlinear ? Variant::nonlinear : Variant::linear;
  ProbeRun run = prepare_probe_run(grid, variant, split, text, audio, opts);
  std::vector<TrainJob> jobs;
  collect_jobs(run, jobs);
  execute(jobs, opts.jobs);
  finish_probe_run(run, opts);
  run.result.text_name = text.source();
  run.result.audio_name = audio.source();
  return std::move(run.result);
}

RunResult run_procrustes_probe(const SplitSpec& split, const EmbeddingSet& text, const EmbeddingSet& audio,
                               const RunOptions& opts) {
  RunResult res;
  res.variant = Variant::procrustes;
  res.split = split;
  res.text_name = text.source();
  res.audio_name = audio.source();
  res.control_seed = derive_seed(split.seed, "control");
  const RetrievalSet retrieval = ordered_retrieval(text, split.retrieval_registry);
  res.procrustes = fit_procrustes(retrieval, audio, split.train, opts.procrustes_metric);
  res.eval = evaluate_procrustes(*res.procrustes, retrieval, audio, split.test, opts);
  if (opts.with_control) {
    const RetrievalSet permuted = permuted_control(res.control_seed, retrieval);
    res.control_procrustes = fit_procrustes(permuted, audio, split.train, opts.procrustes_metric);
    res.control_eval = evaluate_procrustes(*res.control_procrustes, permuted, audio, split.test, opts);
  }
  return res;
}

SynthData synth_generate(std::uint64_t seed, int n_classes, int clips_per_class, int d1, int d2, double noise_sigma,
                         MapKind map_kind) {
  if (n_classes < 1 || clips_per_class < 1) throw ArgumentError("synthetic data needs >= 1 class and clip");
  if (d1 < 2 || d2 < 2) throw ArgumentError("synthetic dims must be >= 2");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("noise_sigma must be >= 0");

  Eigen::MatrixXd R(d2, d1);
  if (map_kind == MapKind::orthogonal) {
    if (d2 <= d1) R = linalg::random_orthogonal(derive_seed(seed, "synth-map"), d1).topRows(d2);
    else R = linalg::random_orthogonal(derive_seed(seed, "synth-map"), d2).leftCols(d1);
  } else {
    Rng rng = make_rng(seed, "synth-map");
    const double scale = 1.0 / std::sqrt(static_cast<double>(d1));
    for (int j = 0; j < d1; ++j)
      for (int i = 0; i < d2; ++i) R(i, j) = scale * standard_normal(rng);
  }

  const int width = static_cast<int>(std::to_string(n_classes - 1).size());
  std::vector<std::string> names;
  for (int c = 0; c < n_classes; ++c) {
    std::string id = std::to_string(c);
    names.push_back("class_" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(id.size()))), '0') + id);
  }
  Rng text_rng = make_rng(seed, "synth-text");
  Rng noise_rng = make_rng(seed, "synth-noise");
  RowMatrixF text(n_classes, d1);
  RowMatrixF audio(static_cast<Eigen::Index>(n_classes) * clips_per_class, d2);
  for (int c = 0; c < n_classes; ++c) {
    for (int k = 0; k < d1; ++k) text(c, k) = static_cast<float>(standard_normal(text_rng));
    const Eigen::VectorXd t = text.row(c).transpose().cast<double>();
    const Eigen::VectorXd signal = R * t;
    for (int j = 0; j < clips_per_class; ++j) {
      const Eigen::Index row = static_cast<Eigen::Index>(c) * clips_per_class + j;
      for (int k = 0; k < d2; ++k) audio(row, k) = static_cast<float>(signal(k) + noise_sigma * standard_normal(noise_rng));
    }
  }
  ClassRegistry registry(names);
  std::string source = "synth seed=" + std::to_string(seed) + " map=" + std::string(to_string(map_kind)) +
                       " noise=" + std::to_string(noise_sigma);
  return SynthData{
      EmbeddingSet(Modality::text, registry, std::vector<std::size_t>(static_cast<std::size_t>(n_classes), 1),
                   std::move(text), source),
      EmbeddingSet(Modality::audio, registry,
                   std::vector<std::size_t>(static_cast<std::size_t>(n_classes), static_cast<std::size_t>(clips_per_class)),
                   std::move(audio), source),
      std::move(R)};
}

ResultBundle run_matrix(const std::vector<NamedSet>& text_sets, const std::vector<NamedSet>& audio_sets,
                        const GridSpec& grid, const std::vector<SplitSpec>& splits,
                        const std::vector<Variant>& variants, const RunOptions& opts, std::uint64_t seed) {
  if (text_sets.empty() || audio_sets.empty()) throw ArgumentError("run_matrix needs text and audio sets");
  if (splits.empty()) throw ArgumentError("run_matrix needs at least one split");
  if (variants.empty()) throw ArgumentError("run_matrix needs at least one variant");
  check_registries(text_sets, audio_sets, splits);

  ResultBundle bundle;
  bundle.seed = seed;
  bundle.grid = grid;
  bundle.options = opts;
  bundle.splits = splits;

  // Contrastive runs are expanded into independent training jobs so that every
  // grid point of every run can be scheduled on its own thread.
  std::vector<ProbeRun> probe_runs;
  std::vector<std::size_t> slot_of_run;  // bundle.runs index -> probe_runs index (or npos)
  constexpr auto npos = static_cast<std::size_t>(-1);
  for (const auto& t : text_sets)
    for (const auto& a : audio_sets)
      for (const Variant v : variants) {
        PairSummary pair{t.name, a.name, v, {}, {}, {}};
        for (const auto& split : splits) {
          pair.runs.push_back(bundle.runs.size());
          if (v == Variant::procrustes) {
            RunResult res = run_procrustes_probe(split, t.set, a.set, opts);
            res.text_name = t.name;
            res.audio_name = a.name;
            bundle.runs.push_back(std::move(res));
            slot_of_run.push_back(npos);
          } else {
            probe_runs.push_back(prepare_probe_run(grid, v, split, t.set, a.set, opts));
            probe_runs.back().result.text_name = t.name;
            probe_runs.back().result.audio_name = a.name;
            bundle.runs.emplace_back();
            slot_of_run.push_back(probe_runs.size() - 1);
          }
        }
        bundle.pairs.push_back(std::move(pair));
      }

  std::vector<TrainJob> jobs;
  for (auto& run : probe_runs) collect_jobs(run, jobs);
  execute(jobs, opts.jobs);
  for (std::size_t i = 0; i < bundle.runs.size(); ++i) {
    if (slot_of_run[i] == npos) continue;
    ProbeRun& run = probe_runs[slot_of_run[i]];
    finish_probe_run(run, opts);
    bundle.runs[i] = std::move(run.result);
  }

  for (auto& pair : bundle.pairs) {
    if (pair.runs.size() < 2) continue;
    std::vector<EvalReport> evals, controls;
    for (const auto idx : pair.runs) {
      evals.push_back(bundle.runs[idx].eval);
      if (bundle.runs[idx].control_eval) controls.push_back(*bundle.runs[idx].control_eval);
    }
    pair.aggregate = aggregate_runs(evals);
    if (controls.size() == evals.size()) pair.control_aggregate = aggregate_runs(controls);
  }
  return bundle;
}

}  // namespace soundprobe
