#include "soundprobe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <omp.h>

#include "soundprobe/error.hpp"
#include "soundprobe/linalg.hpp"

namespace soundprobe::kernels {

namespace {

void check_shapes(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries, int k) {
  if (candidates.rows() != queries.rows()) {
    throw ArgumentError("candidate dim " + std::to_string(candidates.rows()) + " != query dim " +
                        std::to_string(queries.rows()));
  }
  if (k < 1 || k > candidates.cols()) {
    throw ArgumentError("K=" + std::to_string(k) + " out of range [1, " + std::to_string(candidates.cols()) + "]");
  }
}

// Candidates are pre-normalized for cosine; the query is normalized here.
void rank_one(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries, Eigen::Index q, int k,
              Scoring scoring, std::vector<double>& scores, std::vector<double>& unit, std::vector<ClassId>& scratch,
              ClassId* out) {
  const auto dim = static_cast<std::size_t>(queries.rows());
  const double* query = queries.col(q).data();
  if (scoring == Scoring::cosine) {
    unit.assign(query, query + dim);
    const double norm = std::sqrt(linalg::dot(query, query, dim));
    if (norm > 0.0)
      for (double& x : unit) x /= norm;
    query = unit.data();
  }
  score_query(candidates, query, scoring, scores.data());
  topk_indices(scores.data(), scores.size(), k, scratch, out);
}

Eigen::MatrixXd prepared(const Eigen::MatrixXd& candidates, Scoring scoring) {
  return scoring == Scoring::cosine ? normalized_columns(candidates) : candidates;
}

}  // namespace

Eigen::MatrixXd project_columns(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X, bool nonlinear) {
  if (W.cols() != X.rows()) {
    throw ArgumentError("projection expects inputs of dim " + std::to_string(W.cols()) + ", got " +
                        std::to_string(X.rows()));
  }
  Eigen::MatrixXd Z = W * X;
  if (nonlinear) Z = Z.cwiseMax(0.0);
  return Z;
}

Eigen::VectorXd column_norms(const Eigen::MatrixXd& M) {
  Eigen::VectorXd norms(M.cols());
  const auto dim = static_cast<std::size_t>(M.rows());
  for (Eigen::Index c = 0; c < M.cols(); ++c) norms(c) = std::sqrt(linalg::dot(M.col(c).data(), M.col(c).data(), dim));
  return norms;
}

Eigen::MatrixXd normalized_columns(const Eigen::MatrixXd& M) {
  Eigen::MatrixXd out = M;
  const Eigen::VectorXd norms = column_norms(M);
  for (Eigen::Index c = 0; c < M.cols(); ++c)
    if (norms(c) > 0.0) out.col(c) /= norms(c);
  return out;
}

void score_query(const Eigen::MatrixXd& candidates, const double* query, Scoring scoring, double* out) {
  const auto dim = static_cast<std::size_t>(candidates.rows());
  for (Eigen::Index c = 0; c < candidates.cols(); ++c) {
    const double* cand = candidates.col(c).data();
    if (scoring == Scoring::cosine) {
      out[c] = std::clamp(linalg::dot(cand, query, dim), -1.0, 1.0);
    } else {
      double acc = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        const double diff = cand[i] - query[i];
        acc += diff * diff;
      }
      out[c] = -acc;
    }
  }
}

void topk_indices(const double* scores, std::size_t n, int k, std::vector<ClassId>& scratch, ClassId* out) {
  scratch.resize(n);
  std::iota(scratch.begin(), scratch.end(), ClassId{0});
  std::partial_sort(scratch.begin(), scratch.begin() + k, scratch.end(), [scores](ClassId a, ClassId b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  std::copy(scratch.begin(), scratch.begin() + k, out);
}

std::vector<ClassId> topk_serial(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries, int k,
                                 Scoring scoring) {
  check_shapes(candidates, queries, k);
  const Eigen::MatrixXd cands = prepared(candidates, scoring);
  std::vector<ClassId> out(static_cast<std::size_t>(queries.cols()) * static_cast<std::size_t>(k));
  std::vector<double> scores(static_cast<std::size_t>(candidates.cols())), unit;
  std::vector<ClassId> scratch;
  for (Eigen::Index q = 0; q < queries.cols(); ++q) {
    rank_one(cands, queries, q, k, scoring, scores, unit, scratch, &out[static_cast<std::size_t>(q * k)]);
  }
  return out;
}

std::vector<ClassId> topk_parallel(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries, int k,
                                   Scoring scoring, int threads) {
  check_shapes(candidates, queries, k);
  const Eigen::MatrixXd cands = prepared(candidates, scoring);
  std::vector<ClassId> out(static_cast<std::size_t>(queries.cols()) * static_cast<std::size_t>(k));
  const Eigen::Index n_queries = queries.cols();
  const int n_threads = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel num_threads(n_threads)
  {
    std::vector<double> scores(static_cast<std::size_t>(candidates.cols())), unit;
    std::vector<ClassId> scratch;
#pragma omp for schedule(static)
    for (Eigen::Index q = 0; q < n_queries; ++q) {
      rank_one(cands, queries, q, k, scoring, scores, unit, scratch, &out[static_cast<std::size_t>(q * k)]);
    }
  }
  return out;
}

}  // namespace soundprobe::kernels
