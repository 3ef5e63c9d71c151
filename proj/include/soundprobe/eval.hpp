#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "soundprobe/embedstore.hpp"
#include "soundprobe/kernels.hpp"
#include "soundprobe/probe.hpp"

namespace soundprobe {

/// Retrieval accuracy over a set of query classes.
///
/// acc_at[K] is total hits over total clips, i.e. the clip-weighted mean of
/// per_class_acc[K].
struct EvalReport {
  std::vector<int> ks;
  std::vector<ClassId> classes;  // ids in the retrieval registry
  std::vector<std::string> class_names;
  std::vector<std::size_t> n_clips;
  std::map<int, std::vector<std::size_t>> hits;
  std::map<int, std::vector<double>> per_class_acc;
  std::map<int, double> acc_at;
  std::size_t retrieval_size = 0;
  std::shared_ptr<const EvalReport> control;
};

/// The K classes with the largest sim(text(c'), u), descending; ties go to the
/// lower class id.
std::vector<ClassId> retrieve_topk(const ProbeParams& params, const RetrievalSet& retrieval, const Eigen::VectorXd& u,
                                   int k);

/// Core scorer shared by every probe variant. Candidate and query vectors are
/// already in the comparison space (columns). query_labels[q] is the index into
/// `classes` of query q's true class.
EvalReport score_queries(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries,
                         std::span<const std::size_t> query_labels, const RetrievalSet& retrieval,
                         std::span<const ClassId> classes, std::span<const std::size_t> clips_per_class,
                         std::vector<int> ks, kernels::Scoring scoring = kernels::Scoring::cosine, int threads = 0);

/// Retrieval of every clip of `test_classes` (ids in retrieval.registry; audio
/// matched by name) over the whole retrieval registry.
EvalReport evaluate(const ProbeParams& params, const RetrievalSet& retrieval, const EmbeddingSet& audio,
                    std::span<const ClassId> test_classes, std::vector<int> ks = {1, 3}, int threads = 0);

EvalReport accuracy_at_k(const ProbeParams& params, const RetrievalSet& retrieval, const EmbeddingSet& audio,
                         std::span<const ClassId> test_classes, int k);

/// Seeded uniform permutation of 0..n-1 used by permuted_control.
std::vector<ClassId> control_permutation(std::uint64_t seed, std::size_t n);

/// Row c of the result is row perm[c] of the input; the registry is unchanged.
RetrievalSet permuted_control(std::uint64_t seed, const RetrievalSet& retrieval);

/// Undoes a row permutation produced with `perm`.
RetrievalSet unpermute(const RetrievalSet& permuted, std::span<const ClassId> perm);

struct Neighbor {
  ClassId id = 0;
  std::string name;
  double similarity = 0.0;
};

struct NeighborRow {
  ClassId query = 0;
  std::string name;
  std::vector<Neighbor> language;
  std::vector<Neighbor> sound;
};

using NeighborTable = std::vector<NeighborRow>;

/// Top-k candidates by cosine for each query, separately in the raw text space
/// and the class-mean sound space. Ids are in text.registry(); sound means are
/// matched by name.
NeighborTable neighbor_table(const EmbeddingSet& text, const ClassMeanSet& sound_means,
                             std::span<const ClassId> query_classes, std::span<const ClassId> candidate_classes,
                             int k = 3);

/// Fractional ranks (1-based, ties share their average rank).
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman's rho: Pearson correlation of average ranks.
double spearman_rho(std::span<const double> a, std::span<const double> b);

using PerClassAccuracy = std::map<std::string, double>;       // class name -> accuracy
using RunAccuracies = std::map<std::string, PerClassAccuracy>;  // model -> per-class

struct CorrelationMatrix {
  std::vector<std::string> models;
  Eigen::MatrixXd rho;
};

/// Per run, pairwise Spearman rho between models on the run's class set; then
/// the mean over runs. Models are taken in sorted order.
CorrelationMatrix correlation_matrix(std::span<const RunAccuracies> runs);

struct RunAggregate {
  double mean = 0.0;
  double sem = 0.0;  // sample standard deviation / sqrt(n)
  std::size_t n = 0;
};

/// Mean and standard error of acc_at[K] across reports, for every K they share.
std::map<int, RunAggregate> aggregate_runs(std::span<const EvalReport> reports);

}  // namespace soundprobe
