#include "soundprobe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "soundprobe/error.hpp"
#include "soundprobe/random.hpp"

namespace soundprobe::linalg {

int numerical_rank(const Eigen::VectorXd& singular_values, Eigen::Index rows, Eigen::Index cols) {
  if (singular_values.size() == 0) return 0;
  const double tol = static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() *
                     singular_values.maxCoeff();
  int rank = 0;
  for (Eigen::Index i = 0; i < singular_values.size(); ++i) {
    if (singular_values(i) > tol) ++rank;
  }
  return rank;
}

int centered_rank(const Eigen::MatrixXd& X) {
  if (X.rows() == 0 || X.cols() == 0) return 0;
  const Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  return numerical_rank(svd.singularValues(), X.rows(), X.cols());
}

PcaModel pca_fit(const Eigen::MatrixXd& X, int k) {
  const auto n = X.rows();
  const auto d = X.cols();
  if (n < 2) throw ArgumentError("PCA needs at least 2 rows, got " + std::to_string(n));
  const auto max_k = std::min<Eigen::Index>(n - 1, d);
  if (k < 1 || k > max_k) {
    throw ArgumentError("PCA dimension " + std::to_string(k) + " out of range [1, " + std::to_string(max_k) +
                        "] for a " + std::to_string(n) + "x" + std::to_string(d) + " matrix");
  }

  PcaModel model;
  model.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd centered = X.rowwise() - model.mean.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const int rank = numerical_rank(s, n, d);
  if (rank < k) {
    throw ArgumentError("PCA dimension " + std::to_string(k) + " exceeds the achievable rank " +
                        std::to_string(rank) + " of the centred data");
  }

  model.components = svd.matrixV().leftCols(k).transpose();
  for (int i = 0; i < k; ++i) {
    auto row = model.components.row(i);
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
      if (std::abs(row(j)) > std::abs(row(arg))) arg = j;
    }
    if (row(arg) < 0) row = -row;
  }
  model.explained_variance = s.head(k).array().square() / static_cast<double>(n - 1);
  return model;
}

Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& X) {
  if (X.cols() != model.components.cols()) {
    throw ArgumentError("PCA transform expects " + std::to_string(model.components.cols()) + " columns, got " +
                        std::to_string(X.cols()));
  }
  return (X.rowwise() - model.mean.transpose()) * model.components.transpose();
}

ProcrustesFit procrustes_fit(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw ArgumentError("Procrustes shape mismatch: " + std::to_string(A.rows()) + "x" + std::to_string(A.cols()) +
                        " vs " + std::to_string(B.rows()) + "x" + std::to_string(B.cols()));
  }
  if (A.rows() < 1 || A.cols() < 1) throw ArgumentError("Procrustes needs non-empty matrices");
  const Eigen::MatrixXd cross = A.transpose() * B;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ProcrustesFit fit;
  fit.rotation = svd.matrixU() * svd.matrixV().transpose();
  fit.residual = (A * fit.rotation - B).squaredNorm();
  return fit;
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double cosine(const Eigen::Ref<const Eigen::VectorXd>& u, const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (u.size() != v.size()) {
    throw ArgumentError("cosine length mismatch: " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  const auto n = static_cast<std::size_t>(u.size());
  Eigen::VectorXd uu = u;
  Eigen::VectorXd vv = v;
  const double nu = std::sqrt(dot(uu.data(), uu.data(), n));
  const double nv = std::sqrt(dot(vv.data(), vv.data(), n));
  if (nu == 0.0 || nv == 0.0) throw ArgumentError("cosine of a zero-norm vector is undefined");
  uu /= nu;
  vv /= nv;
  return std::clamp(dot(uu.data(), vv.data(), n), -1.0, 1.0);
}

double orthogonality_error(const Eigen::MatrixXd& M) {
  return (M.transpose() * M - Eigen::MatrixXd::Identity(M.cols(), M.cols())).norm();
}

Eigen::MatrixXd random_orthogonal(std::uint64_t seed, int n) {
  Rng rng(seed);
  Eigen::MatrixXd G(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) G(i, j) = standard_normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j) {
    if (R(j, j) < 0) Q.col(j) = -Q.col(j);
  }
  return Q;
}

}  // namespace soundprobe::linalg
