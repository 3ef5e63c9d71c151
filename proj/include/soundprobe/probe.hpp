#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "soundprobe/embedstore.hpp"
#include "soundprobe/random.hpp"

namespace soundprobe {

/// Learned projections into the shared space.
struct ProbeParams {
  Eigen::MatrixXd W1;  // d x d1, text projection
  Eigen::MatrixXd W2;  // d x d2, audio projection
  bool nonlinear = false;
  double tau = 0.07;

  int proj_dim() const { return static_cast<int>(W1.rows()); }
  int text_dim() const { return static_cast<int>(W1.cols()); }
  int audio_dim() const { return static_cast<int>(W2.cols()); }
  bool operator==(const ProbeParams& o) const {
    return nonlinear == o.nonlinear && tau == o.tau && W1.rows() == o.W1.rows() && W1.cols() == o.W1.cols() &&
           W2.rows() == o.W2.rows() && W2.cols() == o.W2.cols() && W1 == o.W1 && W2 == o.W2;
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double tau = 0.07;
  int num_negatives = 64;
  int batch_size = 32;
  int max_epochs = 20;
  int proj_dim = 128;
  bool nonlinear = false;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  int patience = 20;
  /// Adds the positive pair to the log-sum-exp (ablation; off by default).
  bool include_positive = false;

  /// Throws ArgumentError naming the first out-of-range field.
  void validate() const;
};

struct TrainReport {
  ProbeParams params;  // snapshot from best_epoch
  int best_epoch = 0;  // index into val_metric_by_epoch
  std::vector<double> val_metric_by_epoch;
  std::vector<double> train_loss_by_epoch;  // mean loss per training example
  double final_train_loss = 0.0;
  int effective_negatives = 0;  // min(num_negatives, |train| - 1)
  std::size_t zero_norm_events = 0;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) entries from cfg.seed.
ProbeParams init_params(const TrainConfig& cfg, int d1, int d2);

/// Counts similarity evaluations that hit a zero-norm projection.
struct SimStats {
  std::size_t zero_norm = 0;
};

/// phi(W x) with phi = ReLU when `nonlinear`, identity otherwise.
Eigen::VectorXd project(const Eigen::MatrixXd& W, const Eigen::VectorXd& x, bool nonlinear);

/// Cosine of the projected text and audio vectors. Defined as 0 (and counted
/// in `stats`) when either projection is the zero vector.
double sim(const ProbeParams& params, const Eigen::VectorXd& t, const Eigen::VectorXd& u, SimStats* stats = nullptr);

/// Column-stored contrastive batch. Example b uses text.col(b),
/// positives.col(b), and negatives columns [b*n, (b+1)*n).
struct ContrastiveBatch {
  Eigen::MatrixXd text;       // d1 x B
  Eigen::MatrixXd positives;  // d2 x B
  Eigen::MatrixXd negatives;  // d2 x (B * negatives_per_example)
  int negatives_per_example = 0;

  std::size_t size() const { return static_cast<std::size_t>(text.cols()); }
};

enum class LossKernel {
  automatic,            // gram for the linear probe, explicit otherwise
  explicit_projection,  // project every vector, then take cosines
  gram,                 // linear probe only: ||W2 u||^2 = u^T (W2^T W2) u
};

struct LossOptions {
  bool include_positive = false;
  LossKernel kernel = LossKernel::automatic;
};

struct LossGradients {
  Eigen::MatrixXd W1;
  Eigen::MatrixXd W2;
  double loss = 0.0;
  std::size_t zero_norm_events = 0;
};

/// Sum over examples of -sim(t, u+)/tau + logsumexp_j sim(t, u-_j)/tau.
double contrastive_loss(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts = {});

/// Loss and its exact gradients with respect to W1 and W2.
LossGradients loss_gradients(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts = {});

/// Adam with decay rates 0.9 / 0.999 and epsilon 1e-8.
class AdamOptimizer {
 public:
  AdamOptimizer(const ProbeParams& params, double learning_rate);
  void step(ProbeParams& params, const LossGradients& grads);
  long steps() const { return t_; }

 private:
  void update(Eigen::MatrixXd& w, const Eigen::MatrixXd& g, Eigen::MatrixXd& m, Eigen::MatrixXd& v) const;

  double lr_;
  long t_ = 0;
  double bias1_ = 1.0;
  double bias2_ = 1.0;
  Eigen::MatrixXd m1_, v1_, m2_, v2_;
};

struct ClipRef {
  ClassId cls = 0;
  std::size_t clip = 0;
  bool operator==(const ClipRef&) const = default;
};

/// n distinct classes drawn uniformly without replacement from
/// train_classes \ {c}, each with a clip index uniform on [0, clip_count(cls)).
template <class ClipCount>
std::vector<ClipRef> sample_negatives(Rng& rng, std::span<const ClassId> train_classes, ClassId c,
                                      ClipCount&& clip_count, int n);

std::vector<ClipRef> sample_negatives(Rng& rng, std::span<const ClassId> train_classes, ClassId c,
                                      const EmbeddingSet& audio, int n);

/// Trains the contrastive probe on `train_classes` (ids in text.registry;
/// audio is matched by class name). Only rows and clips of training classes
/// are read.
TrainReport train_probe(const TrainConfig& cfg, const RetrievalSet& text, const EmbeddingSet& audio,
                        std::span<const ClassId> train_classes);

TrainReport train_probe(const TrainConfig& cfg, const EmbeddingSet& text, const EmbeddingSet& audio,
                        std::span<const ClassId> train_classes);

// ---------------------------------------------------------------------------

namespace detail {
[[noreturn]] void throw_too_many_negatives(int n, std::size_t pool);
}

template <class ClipCount>
std::vector<ClipRef> sample_negatives(Rng& rng, std::span<const ClassId> train_classes, ClassId c,
                                      ClipCount&& clip_count, int n) {
  std::vector<ClassId> pool;
  pool.reserve(train_classes.size());
  for (const ClassId id : train_classes) {
    if (id != c) pool.push_back(id);
  }
  if (n < 1 || static_cast<std::size_t>(n) > pool.size()) detail::throw_too_many_negatives(n, pool.size());
  std::vector<ClipRef> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, pool.size() - i));
    std::swap(pool[i], pool[j]);
    const ClassId cls = pool[i];
    out.push_back({cls, static_cast<std::size_t>(uniform_index(rng, static_cast<std::uint64_t>(clip_count(cls))))});
  }
  return out;
}

}  // namespace soundprobe
