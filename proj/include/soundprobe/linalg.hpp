#pragma once

#include <cstddef>
#include <cstdint>

#include <Eigen/Dense>

namespace soundprobe::linalg {

/// Principal axes of a point cloud.
struct PcaModel {
  Eigen::VectorXd mean;                // d
  Eigen::MatrixXd components;          // k x d, orthonormal rows
  Eigen::VectorXd explained_variance;  // k, non-increasing

  int input_dim() const { return static_cast<int>(components.cols()); }
  int output_dim() const { return static_cast<int>(components.rows()); }
};

struct ProcrustesFit {
  Eigen::MatrixXd rotation;  // k x k orthogonal
  double residual = 0.0;     // ||A Q - B||_F^2
};

/// PCA bases of both spaces plus the orthogonal map between them.
struct ProcrustesModel {
  PcaModel pca_lang;
  PcaModel pca_sound;
  Eigen::MatrixXd rotation;
  double residual = 0.0;
};

/// Numerical rank of a matrix from its singular values.
int numerical_rank(const Eigen::VectorXd& singular_values, Eigen::Index rows, Eigen::Index cols);

/// Numerical rank of X after subtracting its column means.
int centered_rank(const Eigen::MatrixXd& X);

/// Top-k principal axes of the rows of X (n x d). Requires n >= 2 and
/// 1 <= k <= min(n-1, d). Each component is signed so that its largest-|entry|
/// coordinate (lowest index on ties) is non-negative. Throws ArgumentError when
/// k is out of range or exceeds the numerical rank of the centred data.
PcaModel pca_fit(const Eigen::MatrixXd& X, int k);

/// (X - mean) * components^T for the rows of X.
Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& X);

/// Solves min ||A Q - B||_F^2 over orthogonal Q: Q = U V^T for A^T B = U S V^T.
ProcrustesFit procrustes_fit(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

/// Sequential dot product. Every similarity in the library goes through this so
/// that equal inputs give bit-identical scores regardless of call site.
double dot(const double* a, const double* b, std::size_t n);

/// Cosine from precomputed pieces, clamped to [-1, 1].
inline double cosine_from_parts(double dot_uv, double norm_u, double norm_v) {
  const double c = dot_uv / (norm_u * norm_v);
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

/// Cosine similarity; throws ArgumentError on a length mismatch or a zero vector.
double cosine(const Eigen::Ref<const Eigen::VectorXd>& u, const Eigen::Ref<const Eigen::VectorXd>& v);

/// ||M^T M - I||_F.
double orthogonality_error(const Eigen::MatrixXd& M);

/// Random orthogonal n x n matrix (QR of a Gaussian matrix with the R diagonal
/// made positive), drawn from `seed`.
Eigen::MatrixXd random_orthogonal(std::uint64_t seed, int n);

}  // namespace soundprobe::linalg
