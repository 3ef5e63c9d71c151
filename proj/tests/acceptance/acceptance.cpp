// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <omp.h>

#include <json.hpp>

#include "../common/oracles.hpp"
#include "../unit/support.hpp"
#include "soundprobe/cli.hpp"
#include "soundprobe/eval.hpp"
#include "soundprobe/experiment.hpp"
#include "soundprobe/linalg.hpp"
#include "soundprobe/probe.hpp"
#include "soundprobe/report.hpp"

using namespace soundprobe;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<ClassId> first_ids(std::size_t n) {
  std::vector<ClassId> ids(n);
  std::iota(ids.begin(), ids.end(), ClassId{0});
  return ids;
}

Verdict gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const bool nonlinear : {false, true}) {
      const auto g = oracle::random_instance(seed, nonlinear, 4, 6, 5, 3, 2);
      const LossGradients grads = loss_gradients(g.params, g.batch);
      worst = std::max(worst, oracle::finite_difference_check(g.params, g.batch, grads.W1, grads.W2).max_rel_error);
    }
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && t < 1.0,
          "40 instances (20 linear, 20 relu), max rel error " + fmt("%.3g", worst) + " (<= 1e-4), " + fmt("%.3f", t) +
              " s (< 1 s)"};
}

// Orthonormal basis by modified Gram-Schmidt on Gaussian columns.
Eigen::MatrixXd gram_schmidt_orthogonal(Rng& rng, int n) {
  Eigen::MatrixXd Q = testing::gaussian(rng, n, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < j; ++i) Q.col(j) -= Q.col(i).dot(Q.col(j)) * Q.col(i);
    Q.col(j).normalize();
  }
  return Q;
}

Verdict procrustes_recovery() {
  const auto t0 = Clock::now();
  double worst_q = 0.0, worst_res = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Eigen::MatrixXd A = testing::gaussian(rng, 50, 8);
    const Eigen::MatrixXd Q0 = gram_schmidt_orthogonal(rng, 8);
    const linalg::ProcrustesFit fit = linalg::procrustes_fit(A, A * Q0);
    worst_q = std::max(worst_q, (fit.rotation - Q0).norm());
    worst_res = std::max(worst_res, fit.residual);
  }
  const double t = seconds_since(t0);
  return {worst_q <= 1e-6 && worst_res <= 1e-10 && t < 1.0,
          "20 seeds, max ||Q - Q0||_F " + fmt("%.3g", worst_q) + " (<= 1e-6), max residual " + fmt("%.3g", worst_res) +
              " (<= 1e-10), " + fmt("%.3f", t) + " s (< 1 s)"};
}

struct Protocol {
  SynthData data;
  std::vector<SplitSpec> splits;
  std::vector<RunResult> runs;
  double seconds = 0.0;
};

Protocol run_protocol() {
  Protocol p{synth_generate(7, 144, 30, 64, 48, 0.1, MapKind::orthogonal), {}, {}, 0.0};
  const auto t0 = Clock::now();
  p.splits = make_splits(42, p.data.text.registry(), first_ids(100), 5, 0.7);
  RunOptions opts;
  opts.jobs = omp_get_max_threads();
  for (const SplitSpec& s : p.splits) p.runs.push_back(grid_search(GridSpec{}, s, p.data.text, p.data.audio, opts));
  p.seconds = seconds_since(t0);
  return p;
}

Verdict generalization(const Protocol& p) {
  int good = 0;
  std::string accs;
  for (const RunResult& r : p.runs) {
    const double acc = r.eval.acc_at.at(3);
    good += acc >= 0.90 ? 1 : 0;
    accs += (accs.empty() ? "" : " ") + fmt("%.4f", acc);
  }
  return {good >= 4 && p.seconds < 300.0,
          "acc@3 per split [" + accs + "], " + std::to_string(good) + "/5 >= 0.90 (need 4), " +
              fmt("%.1f", p.seconds) + " s incl. controls (< 300 s)"};
}

// Permuting the text rows moves whole classes: every clip of a test class
// shares one wrong text vector, so hits come in per-class blocks and the
// independent trials are the 30 test classes, not the 900 clips.
Verdict control_at_chance(const Protocol& p) {
  const double chance = 3.0 / 144.0;
  bool pass = true;
  std::string lines;
  for (const RunResult& r : p.runs) {
    const EvalReport& c = *r.control_eval;
    const double acc = c.acc_at.at(3);
    const double n_classes = static_cast<double>(c.classes.size());
    const double n_clips = std::accumulate(c.n_clips.begin(), c.n_clips.end(), 0.0);
    const double band = 3.0 * std::sqrt(chance * (1.0 - chance) / n_classes);
    const double clip_band = 3.0 * std::sqrt(chance * (1.0 - chance) / n_clips);
    const bool ok = std::abs(acc - chance) <= band;
    pass = pass && ok;
    lines += "\n    split " + std::to_string(r.split.index) + ": control acc@3 " + fmt("%.4f", acc) + ", 3 sigma over " +
             fmt("%.0f", n_classes) + " classes [" + fmt("%.4f", std::max(0.0, chance - band)) + ", " +
             fmt("%.4f", chance + band) + "] " + (ok ? "inside" : "OUTSIDE") + "; clip-level band over " +
             fmt("%.0f", n_clips) + " clips [" + fmt("%.4f", chance - clip_band) + ", " + fmt("%.4f", chance + clip_band) +
             "] " + (std::abs(acc - chance) <= clip_band ? "inside" : "outside") + " (info)";
  }
  return {pass, "chance 3/144 = " + fmt("%.4f", chance) + lines};
}

RetrievalSet random_retrieval(Rng& rng, int n, int dim) {
  RetrievalSet r{ClassRegistry(testing::class_names(static_cast<std::size_t>(n))), testing::gaussian(rng, n, dim)};
  return r;
}

Verdict oracle_equivalence() {
  const auto t0 = Clock::now();
  int acc_bad = 0, rho_bad = 0, nb_bad = 0, agg_bad = 0;
  constexpr int kInstances = 50;

  for (int i = 0; i < kInstances; ++i) {
    Rng rng(1000 + static_cast<std::uint64_t>(i));
    const int n = 5 + static_cast<int>(uniform_index(rng, 10));
    ProbeParams params;
    params.W1 = testing::gaussian(rng, 4, 5);
    params.W2 = testing::gaussian(rng, 4, 3);
    params.nonlinear = i % 2 == 1;
    const RetrievalSet retrieval = random_retrieval(rng, n, 5);
    std::vector<std::size_t> counts;
    for (int c = 0; c < n; ++c) counts.push_back(1 + uniform_index(rng, 4));
    const EmbeddingSet audio = testing::random_set(2000 + static_cast<std::uint64_t>(i), Modality::audio, counts, 3);
    std::vector<ClassId> test;
    for (ClassId c = 0; c < static_cast<ClassId>(n); ++c)
      if (uniform01(rng) < 0.6) test.push_back(c);
    if (test.empty()) test.push_back(0);
    const EvalReport rep = evaluate(params, retrieval, audio, test, {1, 2, 3});
    for (const int k : {1, 2, 3}) {
      const auto brute = oracle::brute_force_accuracy(params, retrieval, audio, test, k);
      if (rep.hits.at(k) != brute.hits) ++acc_bad;
    }
  }

  for (int i = 0; i < kInstances; ++i) {
    Rng rng(3000 + static_cast<std::uint64_t>(i));
    const std::size_t n = 3 + uniform_index(rng, 30);
    std::vector<double> x(n), y(n);
    for (std::size_t j = 0; j < n; ++j) {
      x[j] = static_cast<double>(uniform_index(rng, 5)) / 4.0;
      y[j] = static_cast<double>(uniform_index(rng, 7)) / 6.0;
    }
    x[0] = 0.0, x[1] = 1.0;
    y[0] = 1.0, y[1] = 0.0;
    if (std::abs(spearman_rho(x, y) - oracle::spearman(x, y)) > 1e-12) ++rho_bad;
  }

  for (int i = 0; i < kInstances; ++i) {
    const std::uint64_t seed = 4000 + static_cast<std::uint64_t>(i);
    Rng rng(seed);
    const std::size_t n = 8 + uniform_index(rng, 8);
    std::vector<std::size_t> counts;
    for (std::size_t c = 0; c < n; ++c) counts.push_back(1 + uniform_index(rng, 4));
    const EmbeddingSet text = testing::random_set(seed, Modality::text, std::vector<std::size_t>(n, 1), 6);
    const EmbeddingSet audio = testing::random_set(seed + 1, Modality::audio, counts, 5);
    const ClassMeanSet means = class_means(audio);
    std::vector<ClassId> ids = first_ids(n);
    shuffle(ids, rng);
    const std::vector<ClassId> queries(ids.begin(), ids.begin() + 3);
    std::vector<ClassId> cands(ids.begin() + 3, ids.end());
    const int k = 1 + static_cast<int>(uniform_index(rng, 4));
    const NeighborTable table = neighbor_table(text, means, queries, cands, k);
    std::vector<Eigen::VectorXd> tv, sv;
    for (const ClassId c : cands) {
      tv.push_back(text.vector(c, 0));
      sv.push_back(means.means.row(c).transpose());
    }
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto lang = oracle::top_by_cosine(text.vector(queries[q], 0), tv, cands, k);
      const auto sound = oracle::top_by_cosine(means.means.row(queries[q]).transpose(), sv, cands, k);
      for (int j = 0; j < k; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        if (table[q].language[uj].id != lang[uj] || table[q].sound[uj].id != sound[uj]) ++nb_bad;
      }
    }
  }

  for (int i = 0; i < kInstances; ++i) {
    Rng rng(5000 + static_cast<std::uint64_t>(i));
    const std::size_t n = 2 + uniform_index(rng, 9);
    std::vector<EvalReport> reports(n);
    std::vector<double> xs;
    for (auto& r : reports) {
      r.ks = {3};
      r.acc_at[3] = uniform01(rng);
      xs.push_back(r.acc_at[3]);
    }
    const RunAggregate agg = aggregate_runs(reports).at(3);
    const auto [m, s] = oracle::mean_sem(xs);
    if (std::abs(agg.mean - m) > 1e-12 || std::abs(agg.sem - s) > 1e-12 || agg.n != n) ++agg_bad;
  }

  const double t = seconds_since(t0);
  const bool pass = acc_bad + rho_bad + nb_bad + agg_bad == 0 && t < 10.0;
  return {pass, std::to_string(kInstances) + " instances each; mismatches: accuracy " + std::to_string(acc_bad) +
                    ", spearman " + std::to_string(rho_bad) + ", neighbors " + std::to_string(nb_bad) +
                    ", aggregate " + std::to_string(agg_bad) + "; " + fmt("%.2f", t) + " s (< 10 s)"};
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "soundprobe");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
  return code;
}

Verdict determinism() {
  testing::TempDir tmp("acceptance-matrix");
  for (const auto& [name, seed] : std::vector<std::pair<std::string, int>>{{"s1", 1}, {"s2", 2}}) {
    if (cli({"synth", "--seed", std::to_string(seed), "--classes", "40", "--clips", "10", "--d1", "16", "--d2", "12",
             "--out", (tmp / name).string()}) != 0)
      return {false, "synth failed"};
  }
  const nlohmann::json config = {
      {"text", {{{"name", "t1"}, {"path", "s1/text"}}, {{"name", "t2"}, {"path", "s2/text"}}}},
      {"audio", {{{"name", "a1"}, {"path", "s1/audio"}}}},
      {"seed", 11},
      {"n_splits", 3},
      {"probe_classes", 30},
      {"grid", {{"learning_rates", {1e-2, 1e-3}}, {"taus", {0.07, 0.2}}, {"num_negatives", {8}}}},
      {"train", {{"max_epochs", 5}, {"proj_dim", 16}}},
      {"variants", {"linear", "nonlinear", "procrustes"}}};
  report::write_file(tmp / "config.json", config.dump(2));
  const std::string cfg = (tmp / "config.json").string();
  for (const auto& [dir, jobs] : std::vector<std::pair<std::string, std::string>>{{"j1", "1"}, {"j8", "8"}, {"again", "1"}})
    if (cli({"matrix", "--config", cfg, "--jobs", jobs, "--out", (tmp / dir).string()}) != 0)
      return {false, "matrix failed"};
  const std::string j1 = testing::slurp(tmp / "j1" / "results.json");
  const bool same_jobs = j1 == testing::slurp(tmp / "j8" / "results.json");
  const bool same_rerun = j1 == testing::slurp(tmp / "again" / "results.json");
  return {same_jobs && same_rerun && !j1.empty(),
          "results.json (" + std::to_string(j1.size()) + " bytes, 2 text x 1 audio x 3 variants x 3 splits): --jobs 1 vs " +
              "--jobs 8 " + (same_jobs ? "identical" : "DIFFERENT") + ", repeat run " +
              (same_rerun ? "identical" : "DIFFERENT")};
}

Verdict no_leakage(const Protocol& p) {
  const SplitSpec& split = p.splits.front();
  const RunResult& ref = p.runs.front();
  const std::size_t n = p.data.text.num_classes();
  const EmbeddingSet noise_t = testing::random_set(77, Modality::text, std::vector<std::size_t>(n, 1), p.data.text.dim());
  const EmbeddingSet noise_a = testing::random_set(78, Modality::audio, p.data.audio.counts(), p.data.audio.dim());
  RunOptions opts;
  opts.jobs = omp_get_max_threads();
  opts.with_control = false;
  const RunResult other = grid_search(GridSpec{}, split, testing::splice_classes(p.data.text, noise_t, split.train),
                                      testing::splice_classes(p.data.audio, noise_a, split.train), opts);
  const bool same_config = report::to_json(*other.chosen_config) == report::to_json(*ref.chosen_config) &&
                           other.chosen_index == ref.chosen_index;
  const bool same_params = other.train_report->params == ref.train_report->params;
  return {same_config && same_params,
          "split 0, " + std::to_string(n - split.train.size()) + " non-training classes replaced: chosen_config " +
              (same_config ? "identical" : "DIFFERENT") + ", params " + (same_params ? "bit-identical" : "DIFFERENT") +
              " (fingerprint " + report::params_fingerprint(other.train_report->params) + ")"};
}

}  // namespace

int main() {
  int failures = 0;
  auto report_line = [&](int id, const char* name, const Verdict& v) {
    std::printf("%s [%d] %s: %s\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
  };
  report_line(1, "gradient correctness", gradient_check());
  report_line(2, "procrustes recovery", procrustes_recovery());
  const Protocol protocol = run_protocol();
  report_line(3, "synthetic end-to-end generalization", generalization(protocol));
  report_line(4, "control at chance", control_at_chance(protocol));
  report_line(5, "oracle equivalence", oracle_equivalence());
  report_line(6, "determinism", determinism());
  report_line(7, "no test leakage", no_leakage(protocol));
  std::printf("%d of 7 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
