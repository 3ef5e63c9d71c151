#include "soundprobe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "soundprobe/error.hpp"
#include "soundprobe/kernels.hpp"
#include "soundprobe/linalg.hpp"

namespace soundprobe {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void check_batch(const ProbeParams& params, const ContrastiveBatch& batch) {
  const auto B = batch.text.cols();
  if (B == 0) throw ArgumentError("contrastive loss needs a non-empty batch");
  if (batch.negatives_per_example < 1) throw ArgumentError("every example needs at least one negative");
  if (batch.text.rows() != params.W1.cols()) {
    throw ArgumentError("text vectors have dim " + std::to_string(batch.text.rows()) + ", W1 expects " +
                        std::to_string(params.W1.cols()));
  }
  if (batch.positives.rows() != params.W2.cols() || batch.negatives.rows() != params.W2.cols()) {
    throw ArgumentError("audio vectors do not match W2 input dim " + std::to_string(params.W2.cols()));
  }
  if (batch.positives.cols() != B || batch.negatives.cols() != B * batch.negatives_per_example) {
    throw ArgumentError("batch columns disagree: " + std::to_string(B) + " texts, " +
                        std::to_string(batch.positives.cols()) + " positives, " +
                        std::to_string(batch.negatives.cols()) + " negatives at " +
                        std::to_string(batch.negatives_per_example) + " per example");
  }
  if (params.W1.rows() != params.W2.rows()) throw ArgumentError("W1 and W2 project to different dims");
  if (!(params.tau > 0.0)) throw ArgumentError("temperature must be positive");
}

// Log-sum-exp of logits with the max shift; fills `weights` with softmax.
double log_sum_exp(const std::vector<double>& logits, std::vector<double>& weights) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double z : logits) sum += std::exp(z - m);
  const double lse = m + std::log(sum);
  weights.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) weights[i] = std::exp(logits[i] - lse);
  return lse;
}

// Per-example pieces shared by both kernels: sims in, loss and dL/dsim out.
// Slot 0 is the positive, slots 1..n the negatives.
struct ExampleTerms {
  std::vector<double> sims;
  std::vector<bool> valid;
  std::vector<double> dsim;
  std::vector<double> logits;
  std::vector<double> weights;
};

double example_loss(ExampleTerms& ex, double tau, bool include_positive) {
  const std::size_t n = ex.sims.size() - 1;
  ex.logits.clear();
  if (include_positive) ex.logits.push_back(ex.sims[0] / tau);
  for (std::size_t j = 1; j <= n; ++j) ex.logits.push_back(ex.sims[j] / tau);
  const double lse = log_sum_exp(ex.logits, ex.weights);
  ex.dsim.assign(n + 1, 0.0);
  ex.dsim[0] = -1.0 / tau;
  const std::size_t shift = include_positive ? 0 : 1;
  if (include_positive) ex.dsim[0] += ex.weights[0] / tau;
  for (std::size_t j = 1; j <= n; ++j) ex.dsim[j] = ex.weights[j - shift] / tau;
  return -ex.sims[0] / tau + lse;
}

LossGradients run_explicit(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts,
                           bool want_grad) {
  const auto B = batch.text.cols();
  const int n = batch.negatives_per_example;
  const auto d = params.W1.rows();
  const std::size_t ud = static_cast<std::size_t>(d);

  const Eigen::MatrixXd pre_a = params.W1 * batch.text;
  const Eigen::MatrixXd pre_p = params.W2 * batch.positives;
  const Eigen::MatrixXd pre_n = params.W2 * batch.negatives;
  const Eigen::MatrixXd A = params.nonlinear ? Eigen::MatrixXd(pre_a.cwiseMax(0.0)) : pre_a;
  const Eigen::MatrixXd P = params.nonlinear ? Eigen::MatrixXd(pre_p.cwiseMax(0.0)) : pre_p;
  const Eigen::MatrixXd N = params.nonlinear ? Eigen::MatrixXd(pre_n.cwiseMax(0.0)) : pre_n;
  const Eigen::VectorXd na = kernels::column_norms(A);
  const Eigen::VectorXd np = kernels::column_norms(P);
  const Eigen::VectorXd nn = kernels::column_norms(N);

  LossGradients out;
  Eigen::MatrixXd GA, GP, GN;
  if (want_grad) {
    GA = Eigen::MatrixXd::Zero(d, B);
    GP = Eigen::MatrixXd::Zero(d, B);
    GN = Eigen::MatrixXd::Zero(d, B * n);
  }
  ExampleTerms ex;
  for (Eigen::Index b = 0; b < B; ++b) {
    ex.sims.assign(static_cast<std::size_t>(n) + 1, 0.0);
    ex.valid.assign(static_cast<std::size_t>(n) + 1, false);
    const double* a = A.col(b).data();
    auto pair_sim = [&](std::size_t slot, const double* q, double nq) {
      if (na(b) == 0.0 || nq == 0.0) {
        ++out.zero_norm_events;
        return;
      }
      ex.valid[slot] = true;
      ex.sims[slot] = linalg::cosine_from_parts(linalg::dot(a, q, ud), na(b), nq);
    };
    pair_sim(0, P.col(b).data(), np(b));
    for (int j = 0; j < n; ++j) {
      const auto col = b * n + j;
      pair_sim(static_cast<std::size_t>(j) + 1, N.col(col).data(), nn(col));
    }
    out.loss += example_loss(ex, params.tau, opts.include_positive);
    if (!want_grad) continue;

    // d cos(a, q) / da = q / (|a||q|) - s a / |a|^2, symmetric in q.
    auto accumulate = [&](std::size_t slot, const Eigen::MatrixXd& Q, const Eigen::VectorXd& nq, Eigen::Index col,
                          Eigen::MatrixXd& GQ) {
      if (!ex.valid[slot]) return;
      const double g = ex.dsim[slot];
      const double s = ex.sims[slot];
      GA.col(b) += g * (Q.col(col) / (na(b) * nq(col)) - s * A.col(b) / (na(b) * na(b)));
      GQ.col(col) += g * (A.col(b) / (na(b) * nq(col)) - s * Q.col(col) / (nq(col) * nq(col)));
    };
    accumulate(0, P, np, b, GP);
    for (int j = 0; j < n; ++j) accumulate(static_cast<std::size_t>(j) + 1, N, nn, b * n + j, GN);
  }
  if (!want_grad) return out;

  if (params.nonlinear) {
    GA = GA.cwiseProduct((pre_a.array() > 0.0).cast<double>().matrix());
    GP = GP.cwiseProduct((pre_p.array() > 0.0).cast<double>().matrix());
    GN = GN.cwiseProduct((pre_n.array() > 0.0).cast<double>().matrix());
  }
  out.W1.noalias() = GA * batch.text.transpose();
  out.W2.noalias() = GP * batch.positives.transpose();
  out.W2.noalias() += GN * batch.negatives.transpose();
  return out;
}

// Buffers for run_gram, reused across calls on the same thread so the hot
// loop does not hit the allocator for every batch.
struct GramWorkspace {
  Eigen::MatrixXd A, M, A2, MUp, MUn, H, S, scaled, GA;
  Eigen::VectorXd e_pos, e_neg, r;
};

// Linear probe only. With M = W2^T W2, <W1 t, W2 u> = (W2^T W1 t)^T u and
// ||W2 u||^2 = u^T M u, so audio vectors are never projected explicitly.
LossGradients run_gram(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts,
                       bool want_grad) {
  thread_local GramWorkspace ws;
  const auto B = batch.text.cols();
  const int n = batch.negatives_per_example;
  const auto d2 = params.W2.cols();
  const std::size_t ud2 = static_cast<std::size_t>(d2);

  ws.A.noalias() = params.W1 * batch.text;
  const Eigen::VectorXd na = kernels::column_norms(ws.A);
  ws.M.noalias() = params.W2.transpose() * params.W2;
  ws.A2.noalias() = params.W2.transpose() * ws.A;
  ws.MUp.noalias() = ws.M * batch.positives;
  ws.MUn.noalias() = ws.M * batch.negatives;

  LossGradients out;
  if (want_grad) {
    ws.H.setZero(d2, B);
    ws.e_pos.setZero(B);
    ws.e_neg.setZero(B * n);
    ws.r.setZero(B);
  }
  ExampleTerms ex;
  std::vector<double> nq(static_cast<std::size_t>(n) + 1);
  for (Eigen::Index b = 0; b < B; ++b) {
    ex.sims.assign(static_cast<std::size_t>(n) + 1, 0.0);
    ex.valid.assign(static_cast<std::size_t>(n) + 1, false);
    const double* a2 = ws.A2.col(b).data();
    auto pair_sim = [&](std::size_t slot, const double* u, const double* mu) {
      const double sq = linalg::dot(u, mu, ud2);
      nq[slot] = sq > 0.0 ? std::sqrt(sq) : 0.0;
      if (na(b) == 0.0 || nq[slot] == 0.0) {
        ++out.zero_norm_events;
        return;
      }
      ex.valid[slot] = true;
      ex.sims[slot] = linalg::cosine_from_parts(linalg::dot(a2, u, ud2), na(b), nq[slot]);
    };
    pair_sim(0, batch.positives.col(b).data(), ws.MUp.col(b).data());
    for (int j = 0; j < n; ++j) {
      const auto col = b * n + j;
      pair_sim(static_cast<std::size_t>(j) + 1, batch.negatives.col(col).data(), ws.MUn.col(col).data());
    }
    out.loss += example_loss(ex, params.tau, opts.include_positive);
    if (!want_grad) continue;

    auto accumulate = [&](std::size_t slot, const Eigen::MatrixXd& U, Eigen::Index col, Eigen::VectorXd& e) {
      if (!ex.valid[slot]) return;
      const double g = ex.dsim[slot];
      const double s = ex.sims[slot];
      ws.H.col(b) += (g / (na(b) * nq[slot])) * U.col(col);
      e(col) = g * s / (nq[slot] * nq[slot]);
      ws.r(b) += g * s / (na(b) * na(b));
    };
    accumulate(0, batch.positives, b, ws.e_pos);
    for (int j = 0; j < n; ++j) accumulate(static_cast<std::size_t>(j) + 1, batch.negatives, b * n + j, ws.e_neg);
  }
  if (!want_grad) return out;

  // S = sum over pairs of e * u u^T.
  ws.scaled.noalias() = batch.positives * ws.e_pos.asDiagonal();
  ws.S.noalias() = ws.scaled * batch.positives.transpose();
  ws.scaled.noalias() = batch.negatives * ws.e_neg.asDiagonal();
  ws.S.noalias() += ws.scaled * batch.negatives.transpose();
  out.W2.noalias() = ws.A * ws.H.transpose();
  out.W2.noalias() -= params.W2 * ws.S;
  ws.GA.noalias() = params.W2 * ws.H;
  ws.GA.noalias() -= ws.A * ws.r.asDiagonal();
  out.W1.noalias() = ws.GA * batch.text.transpose();
  return out;
}

LossGradients run_loss(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts,
                       bool want_grad) {
  check_batch(params, batch);
  LossKernel kernel = opts.kernel;
  if (kernel == LossKernel::automatic) kernel = params.nonlinear ? LossKernel::explicit_projection : LossKernel::gram;
  if (kernel == LossKernel::gram && params.nonlinear) {
    throw ArgumentError("the gram loss kernel only applies to the linear probe");
  }
  return kernel == LossKernel::gram ? run_gram(params, batch, opts, want_grad)
                                    : run_explicit(params, batch, opts, want_grad);
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ArgumentError("invalid training config: " + what); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (!(tau > 0.0)) fail("tau must be > 0");
  if (num_negatives < 1) fail("num_negatives must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (proj_dim < 1) fail("proj_dim must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction must be in (0, 1)");
  if (patience < 1) fail("patience must be >= 1");
}

ProbeParams init_params(const TrainConfig& cfg, int d1, int d2) {
  if (d1 < 1 || d2 < 1 || cfg.proj_dim < 1) throw ArgumentError("probe dimensions must be >= 1");
  Rng rng = make_rng(cfg.seed, "init");
  auto fill = [&rng](Eigen::MatrixXd& W, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index j = 0; j < W.cols(); ++j)
      for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = uniform_real(rng, -bound, bound);
  };
  ProbeParams p;
  p.W1.resize(cfg.proj_dim, d1);
  p.W2.resize(cfg.proj_dim, d2);
  fill(p.W1, d1);
  fill(p.W2, d2);
  p.nonlinear = cfg.nonlinear;
  p.tau = cfg.tau;
  return p;
}

Eigen::VectorXd project(const Eigen::MatrixXd& W, const Eigen::VectorXd& x, bool nonlinear) {
  if (W.cols() != x.size()) {
    throw ArgumentError("projection expects dim " + std::to_string(W.cols()) + ", got " + std::to_string(x.size()));
  }
  Eigen::VectorXd z = W * x;
  if (nonlinear) z = z.cwiseMax(0.0);
  return z;
}

double sim(const ProbeParams& params, const Eigen::VectorXd& t, const Eigen::VectorXd& u, SimStats* stats) {
  Eigen::VectorXd a = project(params.W1, t, params.nonlinear);
  Eigen::VectorXd q = project(params.W2, u, params.nonlinear);
  const auto n = static_cast<std::size_t>(a.size());
  const double na = std::sqrt(linalg::dot(a.data(), a.data(), n));
  const double nq = std::sqrt(linalg::dot(q.data(), q.data(), n));
  if (na == 0.0 || nq == 0.0) {
    if (stats) ++stats->zero_norm;
    return 0.0;
  }
  a /= na;
  q /= nq;
  return std::clamp(linalg::dot(a.data(), q.data(), n), -1.0, 1.0);
}

double contrastive_loss(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts) {
  return run_loss(params, batch, opts, false).loss;
}

LossGradients loss_gradients(const ProbeParams& params, const ContrastiveBatch& batch, const LossOptions& opts) {
  return run_loss(params, batch, opts, true);
}

AdamOptimizer::AdamOptimizer(const ProbeParams& params, double learning_rate)
    : lr_(learning_rate),
      m1_(Eigen::MatrixXd::Zero(params.W1.rows(), params.W1.cols())),
      v1_(Eigen::MatrixXd::Zero(params.W1.rows(), params.W1.cols())),
      m2_(Eigen::MatrixXd::Zero(params.W2.rows(), params.W2.cols())),
      v2_(Eigen::MatrixXd::Zero(params.W2.rows(), params.W2.cols())) {}

void AdamOptimizer::update(Eigen::MatrixXd& w, const Eigen::MatrixXd& g, Eigen::MatrixXd& m,
                           Eigen::MatrixXd& v) const {
  m = kBeta1 * m + (1.0 - kBeta1) * g;
  v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseAbs2();
  const double c1 = 1.0 - bias1_;
  const double c2 = 1.0 - bias2_;
  w.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + kAdamEps);
}

void AdamOptimizer::step(ProbeParams& params, const LossGradients& grads) {
  ++t_;
  bias1_ *= kBeta1;
  bias2_ *= kBeta2;
  update(params.W1, grads.W1, m1_, v1_);
  update(params.W2, grads.W2, m2_, v2_);
}

namespace detail {
void throw_too_many_negatives(int n, std::size_t pool) {
  throw ArgumentError("cannot draw " + std::to_string(n) + " distinct negative classes: at most " +
                      std::to_string(pool) + " (|train classes| - 1) are available");
}
}  // namespace detail

std::vector<ClipRef> sample_negatives(Rng& rng, std::span<const ClassId> train_classes, ClassId c,
                                      const EmbeddingSet& audio, int n) {
  return sample_negatives(rng, train_classes, c, [&audio](ClassId cls) { return audio.num_vectors(cls); }, n);
}

namespace {

// Training-class data gathered once per run: text columns, and the audio clips
// of each class split into a training pool and a validation pool.
struct TrainingData {
  Eigen::MatrixXd text;                              // d1 x m
  Eigen::MatrixXd train_audio;                       // d2 x N_train
  Eigen::MatrixXd val_audio;                         // d2 x N_val
  std::vector<std::vector<std::size_t>> train_pool;  // local class -> train_audio columns
  std::vector<ClassId> val_labels;                   // local class of each val column
};

TrainingData gather(const TrainConfig& cfg, const RetrievalSet& text, const EmbeddingSet& audio,
                    std::span<const ClassId> train_classes) {
  const auto audio_ids = map_by_name(text.registry, audio.registry(), train_classes);
  const std::size_t m = train_classes.size();
  Rng rng = make_rng(cfg.seed, "validation-split");

  std::vector<std::vector<std::size_t>> train_clips(m), val_clips(m);
  std::size_t n_train = 0, n_val = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t n = audio.num_vectors(audio_ids[i]);
    if (n < 2) {
      throw DataError("class '" + text.registry.name(train_classes[i]) + "' has " + std::to_string(n) +
                      " clip(s); at least 2 are needed to hold out validation clips");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    auto hold = static_cast<std::size_t>(std::ceil(cfg.val_fraction * static_cast<double>(n)));
    hold = std::clamp<std::size_t>(hold, 1, n - 1);
    val_clips[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(hold));
    train_clips[i].assign(order.begin() + static_cast<std::ptrdiff_t>(hold), order.end());
    std::sort(val_clips[i].begin(), val_clips[i].end());
    std::sort(train_clips[i].begin(), train_clips[i].end());
    n_train += train_clips[i].size();
    n_val += val_clips[i].size();
  }

  TrainingData data;
  data.text.resize(text.dim(), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) data.text.col(static_cast<Eigen::Index>(i)) = text.text.row(train_classes[i]).transpose();
  data.train_audio.resize(audio.dim(), static_cast<Eigen::Index>(n_train));
  data.val_audio.resize(audio.dim(), static_cast<Eigen::Index>(n_val));
  data.train_pool.resize(m);
  Eigen::Index tcol = 0, vcol = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (const auto j : train_clips[i]) {
      data.train_pool[i].push_back(static_cast<std::size_t>(tcol));
      data.train_audio.col(tcol++) = audio.vector(audio_ids[i], j);
    }
    for (const auto j : val_clips[i]) {
      data.val_labels.push_back(static_cast<ClassId>(i));
      data.val_audio.col(vcol++) = audio.vector(audio_ids[i], j);
    }
  }
  return data;
}

double validation_accuracy(const ProbeParams& params, const TrainingData& data) {
  const Eigen::MatrixXd cands = kernels::project_columns(params.W1, data.text, params.nonlinear);
  const Eigen::MatrixXd queries = kernels::project_columns(params.W2, data.val_audio, params.nonlinear);
  const auto top = kernels::topk_serial(cands, queries, 1);
  std::size_t hits = 0;
  for (std::size_t q = 0; q < top.size(); ++q) hits += top[q] == data.val_labels[q] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(top.size());
}

}  // namespace

TrainReport train_probe(const TrainConfig& cfg, const RetrievalSet& text, const EmbeddingSet& audio,
                        std::span<const ClassId> train_classes) {
  cfg.validate();
  if (train_classes.size() < 2) throw ArgumentError("training needs at least 2 classes");
  const TrainingData data = gather(cfg, text, audio, train_classes);
  const std::size_t m = train_classes.size();

  TrainReport report;
  report.effective_negatives = std::min<int>(cfg.num_negatives, static_cast<int>(m) - 1);
  const int n_neg = report.effective_negatives;

  std::vector<ClassId> local(m);
  std::iota(local.begin(), local.end(), ClassId{0});
  struct Example {
    ClassId cls;
    std::size_t column;
  };
  std::vector<Example> examples;
  for (std::size_t i = 0; i < m; ++i)
    for (const auto col : data.train_pool[i]) examples.push_back({static_cast<ClassId>(i), col});

  ProbeParams params = init_params(cfg, text.dim(), audio.dim());
  AdamOptimizer adam(params, cfg.learning_rate);
  Rng order_rng = make_rng(cfg.seed, "epoch-order");
  Rng neg_rng = make_rng(cfg.seed, "negatives");
  const LossOptions loss_opts{cfg.include_positive, LossKernel::automatic};
  auto pool_size = [&data](ClassId cls) { return data.train_pool[cls].size(); };

  const auto d1 = data.text.rows();
  const auto d2 = data.train_audio.rows();
  ContrastiveBatch batch;
  batch.negatives_per_example = n_neg;
  double best = -1.0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(examples, order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < examples.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(examples.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto B = static_cast<Eigen::Index>(stop - start);
      batch.text.resize(d1, B);
      batch.positives.resize(d2, B);
      batch.negatives.resize(d2, B * n_neg);
      for (Eigen::Index b = 0; b < B; ++b) {
        const Example& ex = examples[start + static_cast<std::size_t>(b)];
        batch.text.col(b) = data.text.col(ex.cls);
        batch.positives.col(b) = data.train_audio.col(static_cast<Eigen::Index>(ex.column));
        const auto negs = sample_negatives(neg_rng, local, ex.cls, pool_size, n_neg);
        for (int j = 0; j < n_neg; ++j) {
          const auto& ref = negs[static_cast<std::size_t>(j)];
          batch.negatives.col(b * n_neg + j) =
              data.train_audio.col(static_cast<Eigen::Index>(data.train_pool[ref.cls][ref.clip]));
        }
      }
      const LossGradients grads = loss_gradients(params, batch, loss_opts);
      report.zero_norm_events += grads.zero_norm_events;
      epoch_loss += grads.loss;
      adam.step(params, grads);
    }
    report.train_loss_by_epoch.push_back(epoch_loss / static_cast<double>(examples.size()));
    const double metric = validation_accuracy(params, data);
    report.val_metric_by_epoch.push_back(metric);
    if (metric > best) {
      best = metric;
      report.best_epoch = epoch;
      report.params = params;
    } else if (epoch - report.best_epoch >= cfg.patience) {
      break;
    }
  }
  report.final_train_loss = report.train_loss_by_epoch.back();
  return report;
}

TrainReport train_probe(const TrainConfig& cfg, const EmbeddingSet& text, const EmbeddingSet& audio,
                        std::span<const ClassId> train_classes) {
  return train_probe(cfg, make_retrieval_set(text), audio, train_classes);
}

}  // namespace soundprobe
