#pragma once

// Retrieval scoring kernels. Each kernel has a serial reference and an OpenMP
// version that parallelizes over queries; both produce identical output.

#include <vector>

#include <Eigen/Dense>

#include "soundprobe/embedstore.hpp"

namespace soundprobe::kernels {

enum class Scoring { cosine, neg_euclidean };

/// phi(W X) column by column, phi = max(0, .) when `nonlinear`.
Eigen::MatrixXd project_columns(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X, bool nonlinear);

/// Euclidean norm of each column, via linalg::dot.
Eigen::VectorXd column_norms(const Eigen::MatrixXd& M);

/// Each column divided by its norm; zero columns stay zero. Cosine scores are
/// dot products of normalized vectors, so vectors that differ only by a
/// positive scale with one nonzero coordinate score exactly alike.
Eigen::MatrixXd normalized_columns(const Eigen::MatrixXd& M);

/// Scores of one query against every candidate column. For cosine both sides
/// must already be normalized (see normalized_columns); a zero vector scores 0.
void score_query(const Eigen::MatrixXd& candidates, const double* query, Scoring scoring, double* out);

/// Indices of the k largest scores, descending, ties by ascending index.
void topk_indices(const double* scores, std::size_t n, int k, std::vector<ClassId>& scratch, ClassId* out);

/// For each query column, the k best candidate columns. Result is row-major
/// (queries x k). candidates: dim x C, queries: dim x Q.
std::vector<ClassId> topk_serial(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries, int k,
                                 Scoring scoring = Scoring::cosine);

/// Same as topk_serial with queries spread over OpenMP threads (0 = runtime
/// default).
std::vector<ClassId> topk_parallel(const Eigen::MatrixXd& candidates, const Eigen::MatrixXd& queries, int k,
                                   Scoring scoring = Scoring::cosine, int threads = 0);

}  // namespace soundprobe::kernels
