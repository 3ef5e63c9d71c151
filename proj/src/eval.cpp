#include "soundprobe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "soundprobe/error.hpp"
#include "soundprobe/linalg.hpp"
#include "soundprobe/random.hpp"

namespace soundprobe {

namespace {

std::vector<int> normalize_ks(std::vector<int> ks, std::size_t n_candidates) {
  if (ks.empty()) throw ArgumentError("at least one K is required");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.front() < 1 || static_cast<std::size_t>(ks.back()) > n_candidates) {
    throw ArgumentError("K must lie in [1, " + std::to_string(n_candidates) + "]");
  }
  return ks;
}

Eigen::MatrixXd text_candidates(const ProbeParams& params, const RetrievalSet& retrieval) {
  if (retrieval.dim() != params.text_dim()) {
    throw ArgumentError("retrieval text dim " + std::to_string(retrieval.dim()) + " != probe text dim " +
                        std::to_string(params.text_dim()));
  }
  return kernels::project_columns(params.W1, retrieval.text.transpose(), params.nonlinear);
}

}  // namespace

std::vector<ClassId> retrieve_topk(const ProbeParams& params, const RetrievalSet& retrieval, const Eigen::VectorXd& u,
                                   int k) {
  const Eigen::MatrixXd cands = text_candidates(params, retrieval);
  const Eigen::MatrixXd query = project(params.W2, u, params.nonlinear);
  return kernels::topk_serial(cands, query, k);
}

EvalReport score_queries(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries,
                         std::span<const std::size_t> query_labels, const RetrievalSet& retrieval,
                         std::span<const ClassId> classes, std::span<const std::size_t> clips_per_class,
                         std::vector<int> ks, kernels::Scoring scoring, int threads) {
  if (static_cast<std::size_t>(queries.cols()) != query_labels.size()) {
    throw ArgumentError("one label per query is required");
  }
  if (classes.size() != clips_per_class.size()) throw ArgumentError("one clip count per class is required");
  EvalReport report;
  report.ks = normalize_ks(std::move(ks), static_cast<std::size_t>(candidates.cols()));
  report.retrieval_size = static_cast<std::size_t>(candidates.cols());
  report.classes.assign(classes.begin(), classes.end());
  report.n_clips.assign(clips_per_class.begin(), clips_per_class.end());
  for (const ClassId c : classes) report.class_names.push_back(retrieval.registry.name(c));

  const int kmax = report.ks.back();
  const auto top = kernels::topk_parallel(candidates, queries, kmax, scoring, threads);
  for (const int k : report.ks) report.hits[k].assign(classes.size(), 0);
  // Integer hit counts: the merge order cannot change the result.
  for (std::size_t q = 0; q < query_labels.size(); ++q) {
    const std::size_t label = query_labels[q];
    const ClassId truth = classes[label];
    const ClassId* ranked = &top[q * static_cast<std::size_t>(kmax)];
    const auto pos = static_cast<int>(std::find(ranked, ranked + kmax, truth) - ranked);
    for (const int k : report.ks) {
      if (pos < k) ++report.hits[k][label];
    }
  }
  const auto total = std::accumulate(report.n_clips.begin(), report.n_clips.end(), std::size_t{0});
  for (const int k : report.ks) {
    auto& per = report.per_class_acc[k];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      per.push_back(report.n_clips[i] ? static_cast<double>(report.hits[k][i]) / static_cast<double>(report.n_clips[i])
                                      : 0.0);
      hits += report.hits[k][i];
    }
    report.acc_at[k] = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  }
  return report;
}

EvalReport evaluate(const ProbeParams& params, const RetrievalSet& retrieval, const EmbeddingSet& audio,
                    std::span<const ClassId> test_classes, std::vector<int> ks, int threads) {
  if (test_classes.empty()) throw ArgumentError("no test classes to evaluate");
  if (audio.dim() != params.audio_dim()) {
    throw ArgumentError("audio dim " + std::to_string(audio.dim()) + " != probe audio dim " +
                        std::to_string(params.audio_dim()));
  }
  for (const ClassId c : test_classes) {
    if (c >= retrieval.size()) throw DataError("test class id " + std::to_string(c) + " is not in the registry");
  }
  const auto audio_ids = map_by_name(retrieval.registry, audio.registry(), test_classes);
  std::vector<std::size_t> counts, labels;
  for (std::size_t i = 0; i < audio_ids.size(); ++i) {
    counts.push_back(audio.num_vectors(audio_ids[i]));
    labels.insert(labels.end(), counts.back(), i);
  }
  Eigen::MatrixXd raw(audio.dim(), static_cast<Eigen::Index>(labels.size()));
  Eigen::Index col = 0;
  for (const ClassId a : audio_ids) {
    for (std::size_t j = 0; j < audio.num_vectors(a); ++j) raw.col(col++) = audio.vector(a, j);
  }
  const Eigen::MatrixXd queries = kernels::project_columns(params.W2, raw, params.nonlinear);
  return score_queries(text_candidates(params, retrieval), queries, labels, retrieval, test_classes, counts,
                       std::move(ks), kernels::Scoring::cosine, threads);
}

EvalReport accuracy_at_k(const ProbeParams& params, const RetrievalSet& retrieval, const EmbeddingSet& audio,
                         std::span<const ClassId> test_classes, int k) {
  return evaluate(params, retrieval, audio, test_classes, {k});
}

std::vector<ClassId> control_permutation(std::uint64_t seed, std::size_t n) {
  std::vector<ClassId> perm(n);
  std::iota(perm.begin(), perm.end(), ClassId{0});
  Rng rng = make_rng(seed, "control-permutation");
  shuffle(perm, rng);
  return perm;
}

RetrievalSet permuted_control(std::uint64_t seed, const RetrievalSet& retrieval) {
  const auto perm = control_permutation(seed, retrieval.size());
  RetrievalSet out{retrieval.registry, Eigen::MatrixXd(retrieval.text.rows(), retrieval.text.cols())};
  for (std::size_t c = 0; c < perm.size(); ++c) out.text.row(static_cast<Eigen::Index>(c)) = retrieval.text.row(perm[c]);
  return out;
}

RetrievalSet unpermute(const RetrievalSet& permuted, std::span<const ClassId> perm) {
  if (perm.size() != permuted.size()) throw ArgumentError("permutation length does not match the retrieval set");
  RetrievalSet out{permuted.registry, Eigen::MatrixXd(permuted.text.rows(), permuted.text.cols())};
  for (std::size_t c = 0; c < perm.size(); ++c) out.text.row(perm[c]) = permuted.text.row(static_cast<Eigen::Index>(c));
  return out;
}

NeighborTable neighbor_table(const EmbeddingSet& text, const ClassMeanSet& sound_means,
                             std::span<const ClassId> query_classes, std::span<const ClassId> candidate_classes,
                             int k) {
  if (k < 1 || static_cast<std::size_t>(k) > candidate_classes.size()) {
    throw ArgumentError("k=" + std::to_string(k) + " needs at least that many candidates (have " +
                        std::to_string(candidate_classes.size()) + ")");
  }
  const std::set<ClassId> cand_set(candidate_classes.begin(), candidate_classes.end());
  for (const ClassId q : query_classes) {
    if (cand_set.count(q)) {
      throw ArgumentError("query class '" + text.registry().name(q) + "' is also a candidate");
    }
  }
  const auto sound_q = map_by_name(text.registry(), sound_means.registry, query_classes);
  const auto sound_c = map_by_name(text.registry(), sound_means.registry, candidate_classes);

  auto top = [&](auto&& similarity) {
    std::vector<Neighbor> all;
    for (std::size_t i = 0; i < candidate_classes.size(); ++i) {
      const ClassId c = candidate_classes[i];
      all.push_back({c, text.registry().name(c), similarity(i)});
    }
    std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
    });
    all.resize(static_cast<std::size_t>(k));
    return all;
  };

  NeighborTable table;
  for (std::size_t qi = 0; qi < query_classes.size(); ++qi) {
    const ClassId q = query_classes[qi];
    NeighborRow row;
    row.query = q;
    row.name = text.registry().name(q);
    const Eigen::VectorXd tq = text.vector(q, 0);
    const Eigen::VectorXd sq = sound_means.means.row(sound_q[qi]).transpose();
    row.language = top([&](std::size_t i) { return linalg::cosine(tq, text.vector(candidate_classes[i], 0)); });
    row.sound = top([&](std::size_t i) {
      return linalg::cosine(sq, Eigen::VectorXd(sound_means.means.row(sound_c[i]).transpose()));
    });
    table.push_back(std::move(row));
  }
  return table;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ArgumentError("spearman_rho length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw ArgumentError("spearman_rho needs at least 2 observations");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;  // ranks always average to (n+1)/2
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean;
    const double db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw ArgumentError("spearman_rho is undefined for constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

CorrelationMatrix correlation_matrix(std::span<const RunAccuracies> runs) {
  if (runs.empty()) throw ArgumentError("correlation_matrix needs at least one run");
  std::set<std::string> model_set;
  for (const auto& run : runs)
    for (const auto& [model, acc] : run) model_set.insert(model);
  CorrelationMatrix out;
  out.models.assign(model_set.begin(), model_set.end());
  const auto m = static_cast<Eigen::Index>(out.models.size());
  out.rho = Eigen::MatrixXd::Zero(m, m);

  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& run = runs[r];
    std::vector<std::vector<double>> columns;
    const PerClassAccuracy* reference = nullptr;
    for (const auto& model : out.models) {
      auto it = run.find(model);
      if (it == run.end()) throw DataError("run " + std::to_string(r) + " has no accuracies for model '" + model + "'");
      const PerClassAccuracy& acc = it->second;
      if (!reference) reference = &acc;
      if (acc.size() != reference->size() ||
          !std::equal(acc.begin(), acc.end(), reference->begin(),
                      [](const auto& x, const auto& y) { return x.first == y.first; })) {
        throw DataError("run " + std::to_string(r) + ": model '" + model + "' was scored on a different class set");
      }
      std::vector<double> col;
      for (const auto& [name, value] : acc) col.push_back(value);
      columns.push_back(std::move(col));
    }
    for (Eigen::Index i = 0; i < m; ++i) {
      out.rho(i, i) += 1.0;
      for (Eigen::Index j = i + 1; j < m; ++j) {
        const double rho = spearman_rho(columns[static_cast<std::size_t>(i)], columns[static_cast<std::size_t>(j)]);
        out.rho(i, j) += rho;
        out.rho(j, i) += rho;
      }
    }
  }
  out.rho /= static_cast<double>(runs.size());
  return out;
}

std::map<int, RunAggregate> aggregate_runs(std::span<const EvalReport> reports) {
  if (reports.size() < 2) throw ArgumentError("standard error needs at least 2 runs");
  std::map<int, RunAggregate> out;
  for (const auto& [k, first] : reports.front().acc_at) {
    std::vector<double> values;
    for (const auto& report : reports) {
      auto it = report.acc_at.find(k);
      if (it == report.acc_at.end()) break;
      values.push_back(it->second);
    }
    if (values.size() != reports.size()) continue;
    // Welford: identical values give exactly that mean and zero spread.
    double mean = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double delta = values[i] - mean;
      mean += delta / static_cast<double>(i + 1);
      ss += delta * (values[i] - mean);
    }
    const double n = static_cast<double>(values.size());
    out[k] = {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n), values.size()};
  }
  return out;
}

}  // namespace soundprobe
