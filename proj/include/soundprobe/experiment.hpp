#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "soundprobe/embedstore.hpp"
#include "soundprobe/eval.hpp"
#include "soundprobe/linalg.hpp"
#include "soundprobe/probe.hpp"

namespace soundprobe {

enum class Variant { linear, nonlinear, procrustes };
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

enum class ProcrustesMetric { cosine, euclidean };
std::string_view to_string(ProcrustesMetric m);
ProcrustesMetric parse_procrustes_metric(std::string_view s);

/// One seeded train/test partition of the probe classes. All ids refer to
/// retrieval_registry.
struct SplitSpec {
  std::uint64_t seed = 0;  // this split's own seed (derived from the experiment seed)
  int index = 0;
  std::vector<ClassId> probe_classes;
  std::vector<ClassId> train;
  std::vector<ClassId> test;
  ClassRegistry retrieval_registry;
};

/// n_splits independent partitions with floor(train_fraction * |probe|)
/// training classes each. Train and test lists are sorted by id.
std::vector<SplitSpec> make_splits(std::uint64_t seed, const ClassRegistry& retrieval_registry,
                                   std::vector<ClassId> probe_classes, int n_splits = 5, double train_fraction = 0.7);

/// Hyperparameter grid. Points are enumerated learning rate outermost, then
/// tau, then negatives; the first point wins ties.
struct GridSpec {
  std::vector<double> learning_rates{1e-3, 1e-4};
  std::vector<double> taus{0.07, 0.2};
  std::vector<int> num_negatives{64, 128};
  TrainConfig base;  // supplies every field the axes do not

  std::vector<TrainConfig> points(std::uint64_t seed) const;
  std::size_t size() const { return learning_rates.size() * taus.size() * num_negatives.size(); }
};

struct ProcrustesInfo {
  int k_requested = 0;
  int k_used = 0;  // lowered when either centred matrix has smaller rank
  double residual = 0.0;
  ProcrustesMetric metric = ProcrustesMetric::cosine;
  linalg::ProcrustesModel model;
};

struct RunResult {
  Variant variant = Variant::linear;
  SplitSpec split;
  std::string text_name;
  std::string audio_name;
  std::uint64_t train_seed = 0;
  std::uint64_t control_seed = 0;

  // Contrastive variants.
  std::optional<TrainConfig> chosen_config;
  int chosen_index = -1;
  std::vector<double> grid_val_metrics;  // best-epoch validation accuracy per grid point
  std::optional<TrainReport> train_report;
  std::optional<TrainConfig> control_config;
  std::optional<TrainReport> control_report;

  // Procrustes variant.
  std::optional<ProcrustesInfo> procrustes;
  std::optional<ProcrustesInfo> control_procrustes;

  EvalReport eval;
  std::optional<EvalReport> control_eval;
};

struct RunOptions {
  int jobs = 1;
  bool with_control = true;
  std::vector<int> ks{1, 3};
  ProcrustesMetric procrustes_metric = ProcrustesMetric::cosine;
};

/// Trains one probe per grid point on split.train, picks the best held-in
/// validation accuracy, and evaluates only that probe on split.test over the
/// full retrieval registry. With opts.with_control the whole procedure is
/// repeated on a permuted text assignment.
RunResult grid_search(const GridSpec& grid, const SplitSpec& split, const EmbeddingSet& text,
                      const EmbeddingSet& audio, const RunOptions& opts = {});

/// PCA both spaces (train classes only, class-mean audio), align with an
/// orthogonal map, and retrieve test clips in the aligned space.
RunResult run_procrustes_probe(const SplitSpec& split, const EmbeddingSet& text, const EmbeddingSet& audio,
                               const RunOptions& opts = {});

enum class MapKind { orthogonal, random_linear };
std::string_view to_string(MapKind m);
MapKind parse_map_kind(std::string_view s);

struct SynthData {
  EmbeddingSet text;
  EmbeddingSet audio;
  Eigen::MatrixXd hidden_map;  // d2 x d1
};

/// Text vectors i.i.d. N(0, I); each audio clip is R t_c + noise_sigma * eps.
/// An orthogonal R has orthonormal rows (d2 <= d1) or columns (d2 > d1).
SynthData synth_generate(std::uint64_t seed, int n_classes, int clips_per_class, int d1, int d2, double noise_sigma,
                         MapKind map_kind);

struct NamedSet {
  std::string name;
  EmbeddingSet set;
};

struct PairSummary {
  std::string text_name;
  std::string audio_name;
  Variant variant = Variant::linear;
  std::vector<std::size_t> runs;  // indices into ResultBundle::runs, split order
  std::map<int, RunAggregate> aggregate;
  std::map<int, RunAggregate> control_aggregate;
};

struct ResultBundle {
  std::uint64_t seed = 0;
  GridSpec grid;
  RunOptions options;
  std::vector<SplitSpec> splits;
  std::vector<RunResult> runs;  // (text, audio, variant, split) order
  std::vector<PairSummary> pairs;
};

/// Every (text, audio) pair x variant x split. Training jobs run on
/// opts.jobs threads; the bundle is identical for any thread count.
ResultBundle run_matrix(const std::vector<NamedSet>& text_sets, const std::vector<NamedSet>& audio_sets,
                        const GridSpec& grid, const std::vector<SplitSpec>& splits,
                        const std::vector<Variant>& variants, const RunOptions& opts = {},
                        std::uint64_t seed = 0);

}  // namespace soundprobe
