#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "../common/oracles.hpp"
#include "soundprobe/error.hpp"
#include "soundprobe/eval.hpp"
#include "support.hpp"

using namespace soundprobe;

namespace {

ProbeParams identity_probe(int d) {
  ProbeParams p;
  p.W1 = Eigen::MatrixXd::Identity(d, d);
  p.W2 = Eigen::MatrixXd::Identity(d, d);
  return p;
}

RetrievalSet rows_to_retrieval(const std::vector<Eigen::VectorXd>& rows, const std::string& prefix = "c") {
  RetrievalSet r{ClassRegistry(testing::class_names(rows.size(), prefix)),
                 Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), rows[0].size())};
  for (std::size_t i = 0; i < rows.size(); ++i) r.text.row(static_cast<Eigen::Index>(i)) = rows[i];
  return r;
}

EmbeddingSet audio_from(const std::vector<std::vector<Eigen::VectorXd>>& clips, const std::string& prefix = "c") {
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const auto& c : clips) counts.push_back(c.size()), total += c.size();
  RowMatrixF data(static_cast<Eigen::Index>(total), clips[0][0].size());
  std::size_t r = 0;
  for (const auto& c : clips)
    for (const auto& v : c) data.row(static_cast<Eigen::Index>(r++)) = v.transpose().cast<float>();
  return EmbeddingSet(Modality::audio, ClassRegistry(testing::class_names(clips.size(), prefix)), counts, data);
}

Eigen::VectorXd v2(double x, double y) { return Eigen::Vector2d(x, y); }

}  // namespace

TEST_CASE("retrieve_topk") {
  Rng rng(1);
  ProbeParams p;
  p.W1 = testing::gaussian(rng, 5, 6);
  p.W2 = testing::gaussian(rng, 5, 4);
  std::vector<Eigen::VectorXd> rows;
  for (int i = 0; i < 10; ++i) rows.push_back(testing::gaussian(rng, 6, 1));
  const RetrievalSet r = rows_to_retrieval(rows);
  const Eigen::VectorXd u = testing::gaussian(rng, 4, 1);

  SUBCASE("full K is a permutation matching a brute-force sort") {
    const auto all = retrieve_topk(p, r, u, 10);
    std::vector<ClassId> order(10);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> s(10);
    for (int i = 0; i < 10; ++i) s[static_cast<std::size_t>(i)] = oracle::naive_sim(p, rows[static_cast<std::size_t>(i)], u);
    std::stable_sort(order.begin(), order.end(), [&](ClassId a, ClassId b) { return s[a] > s[b]; });
    CHECK(all == order);
    CHECK(retrieve_topk(p, r, u, 3) == std::vector<ClassId>(order.begin(), order.begin() + 3));
  }
  SUBCASE("identical text vectors: lower id first") {
    std::vector<Eigen::VectorXd> dup = rows;
    dup[7] = dup[2];
    const auto all = retrieve_topk(p, rows_to_retrieval(dup), u, 10);
    const auto i2 = std::find(all.begin(), all.end(), 2u) - all.begin();
    const auto i7 = std::find(all.begin(), all.end(), 7u) - all.begin();
    CHECK(i7 == i2 + 1);
  }
  SUBCASE("positive rescaling of a text vector changes nothing") {
    std::vector<Eigen::VectorXd> scaled = rows;
    scaled[4] *= 13.0;
    CHECK(retrieve_topk(p, rows_to_retrieval(scaled), u, 10) == retrieve_topk(p, r, u, 10));
  }
  SUBCASE("K out of range") {
    CHECK_THROWS_AS(retrieve_topk(p, r, u, 0), ArgumentError);
    CHECK_THROWS_AS(retrieve_topk(p, r, u, 11), ArgumentError);
  }
}

TEST_CASE("hand-placed 6-class instance") {
  const RetrievalSet r = rows_to_retrieval({v2(1, 0), v2(1, 1), v2(0, 1), v2(-1, 0), v2(0, -1), v2(1, -1)});
  const EmbeddingSet audio = audio_from({{v2(1, 0), v2(0, 1)},  // ranks 1st; 3rd (tie 0 vs 3 -> 0)
                                         {v2(1, 0.1)},          // 2nd
                                         {v2(0, 1)},
                                         {v2(0, -1)},           // 4th (behind 4, 5, and 0 by tie)
                                         {v2(1, -3)},           // 1st
                                         {v2(1, -1)}});
  const std::vector<ClassId> test{0, 1, 3, 4};
  const EvalReport rep = evaluate(identity_probe(2), r, audio, test, {1, 3});
  CHECK(rep.hits.at(1) == std::vector<std::size_t>{1, 0, 0, 1});
  CHECK(rep.hits.at(3) == std::vector<std::size_t>{2, 1, 0, 1});
  CHECK(rep.acc_at.at(1) == doctest::Approx(0.4));
  CHECK(rep.acc_at.at(3) == doctest::Approx(0.8));
  CHECK(rep.per_class_acc.at(1)[0] == 0.5);
  CHECK(rep.n_clips == std::vector<std::size_t>{2, 1, 1, 1});
  CHECK(rep.retrieval_size == 6);
  CHECK(evaluate(identity_probe(2), r, audio, test, {6}).acc_at.at(6) == 1.0);
}

TEST_CASE("accuracy matches the brute-force oracle on random instances") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const int n = 5 + static_cast<int>(uniform_index(rng, 10));
    const bool nl = seed % 2 == 1;
    ProbeParams p;
    p.W1 = testing::gaussian(rng, 4, 5);
    p.W2 = testing::gaussian(rng, 4, 3);
    p.nonlinear = nl;
    std::vector<Eigen::VectorXd> rows;
    for (int i = 0; i < n; ++i) rows.push_back(testing::gaussian(rng, 5, 1));
    const RetrievalSet r = rows_to_retrieval(rows);
    std::vector<std::size_t> counts;
    for (int i = 0; i < n; ++i) counts.push_back(1 + uniform_index(rng, 4));
    const EmbeddingSet audio = testing::random_set(seed + 1000, Modality::audio, counts, 3);
    std::vector<ClassId> test;
    for (ClassId c = 0; c < static_cast<ClassId>(n); ++c)
      if (uniform01(rng) < 0.6) test.push_back(c);
    if (test.empty()) test.push_back(0);
    const EvalReport rep = evaluate(p, r, audio, test, {1, 2, 3});
    for (const int k : {1, 2, 3}) {
      const auto brute = oracle::brute_force_accuracy(p, r, audio, test, k);
      CHECK(rep.hits.at(k) == brute.hits);
      CHECK(rep.acc_at.at(k) == doctest::Approx(static_cast<double>(brute.total_hits) / brute.total_clips));
    }
    CHECK(rep.acc_at.at(1) <= rep.acc_at.at(3));
    // Weighted-mean invariant.
    double w = 0;
    for (std::size_t i = 0; i < test.size(); ++i) w += rep.per_class_acc.at(3)[i] * static_cast<double>(rep.n_clips[i]);
    CHECK(rep.acc_at.at(3) == doctest::Approx(w / std::accumulate(rep.n_clips.begin(), rep.n_clips.end(), 0.0)));
  }
}

TEST_CASE("accuracy is invariant to relabeling and thread count") {
  Rng rng(4);
  ProbeParams p;
  p.W1 = testing::gaussian(rng, 6, 5);
  p.W2 = testing::gaussian(rng, 6, 4);
  const int n = 12;
  std::vector<Eigen::VectorXd> rows;
  std::vector<std::vector<Eigen::VectorXd>> clips(n);
  for (int i = 0; i < n; ++i) {
    rows.push_back(testing::gaussian(rng, 5, 1));
    for (int j = 0; j < 3; ++j) clips[static_cast<std::size_t>(i)].push_back(testing::gaussian(rng, 4, 1));
  }
  const std::vector<ClassId> test{1, 4, 5, 9};
  const EvalReport a = evaluate(p, rows_to_retrieval(rows), audio_from(clips), test, {1, 3}, 1);
  const EvalReport a4 = evaluate(p, rows_to_retrieval(rows), audio_from(clips), test, {1, 3}, 4);
  CHECK(a.hits == a4.hits);

  // Reverse the class order everywhere; per-class outcomes follow their class.
  // Ties are absent with continuous data, so the tie rule cannot interfere.
  std::vector<Eigen::VectorXd> rrows(rows.rbegin(), rows.rend());
  std::vector<std::vector<Eigen::VectorXd>> rclips(clips.rbegin(), clips.rend());
  std::vector<std::string> names = testing::class_names(n);
  std::reverse(names.begin(), names.end());
  RetrievalSet rr{ClassRegistry(names), rows_to_retrieval(rrows).text};
  const EmbeddingSet raudio = audio_from(rclips);
  std::vector<std::size_t> counts(n, 3);
  RowMatrixF data = raudio.data();
  const EmbeddingSet named(Modality::audio, ClassRegistry(names), counts, data);
  std::vector<ClassId> rtest;
  for (const ClassId c : test) rtest.push_back(static_cast<ClassId>(n - 1) - c);
  const EvalReport b = evaluate(p, rr, named, rtest, {1, 3});
  CHECK(b.acc_at == a.acc_at);
  for (std::size_t i = 0; i < test.size(); ++i) CHECK(b.hits.at(3)[i] == a.hits.at(3)[i]);
}

TEST_CASE("random probe sits at 3/144 chance") {
  // 144 classes x 35 clips = 5040 independent clips.
  TrainConfig cfg;
  cfg.seed = 21;
  const ProbeParams p = init_params(cfg, 64, 48);
  const EmbeddingSet text = testing::random_set(1, Modality::text, std::vector<std::size_t>(144, 1), 64);
  const EmbeddingSet audio = testing::random_set(2, Modality::audio, std::vector<std::size_t>(144, 35), 48);
  std::vector<ClassId> all(144);
  std::iota(all.begin(), all.end(), 0);
  const EvalReport rep = accuracy_at_k(p, make_retrieval_set(text), audio, all, 3);
  const double chance = 3.0 / 144.0;
  const double sigma = std::sqrt(chance * (1 - chance) / 5040.0);
  CHECK(std::abs(rep.acc_at.at(3) - chance) <= 3 * sigma);
}

TEST_CASE("evaluate input checks") {
  const RetrievalSet r = rows_to_retrieval({v2(1, 0), v2(0, 1)});
  const EmbeddingSet audio = audio_from({{v2(1, 0)}}, "c");  // only c0 has audio
  const std::vector<ClassId> missing{1};
  CHECK_THROWS_AS(evaluate(identity_probe(2), r, audio, missing), DataError);
  const std::vector<ClassId> outside{5};
  CHECK_THROWS(evaluate(identity_probe(2), r, audio, outside));
}

TEST_CASE("permuted control") {
  Rng rng(8);
  std::vector<Eigen::VectorXd> rows;
  for (int i = 0; i < 20; ++i) rows.push_back(testing::gaussian(rng, 3, 1));
  const RetrievalSet r = rows_to_retrieval(rows);
  const RetrievalSet c = permuted_control(5, r);
  CHECK(c.registry == r.registry);
  CHECK(permuted_control(5, r) == c);
  CHECK(!(c == r));
  const auto perm = control_permutation(5, 20);
  for (int i = 0; i < 20; ++i) CHECK(c.text.row(i) == r.text.row(perm[static_cast<std::size_t>(i)]));
  auto sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  for (ClassId i = 0; i < 20; ++i) CHECK(sorted[i] == i);
  CHECK(unpermute(c, perm) == r);

  // Permutations are uniform: position of element 0 over many seeds.
  std::vector<int> where(5, 0);
  for (std::uint64_t s = 0; s < 20000; ++s) {
    const auto q = control_permutation(s, 5);
    ++where[static_cast<std::size_t>(std::find(q.begin(), q.end(), 0u) - q.begin())];
  }
  for (const int w : where) CHECK(std::abs(w - 4000) <= 3 * std::sqrt(20000 * 0.2 * 0.8));
}

TEST_CASE("neighbor tables") {
  Rng rng(9);
  const EmbeddingSet text = testing::random_set(3, Modality::text, std::vector<std::size_t>(8, 1), 5);
  const EmbeddingSet audio = testing::random_set(4, Modality::audio, {2, 3, 1, 4, 2, 2, 3, 1}, 4);
  const ClassMeanSet means = class_means(audio);
  const std::vector<ClassId> queries{0, 5};
  const std::vector<ClassId> cands{1, 2, 3, 4, 6, 7};
  const NeighborTable t = neighbor_table(text, means, queries, cands, 3);
  REQUIRE(t.size() == 2);
  std::vector<Eigen::VectorXd> tv, sv;
  for (const ClassId c : cands) {
    tv.push_back(text.vector(c, 0));
    sv.push_back(means.means.row(c).transpose());
  }
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto lang = oracle::top_by_cosine(text.vector(queries[q], 0), tv, cands, 3);
    const auto sound = oracle::top_by_cosine(means.means.row(queries[q]).transpose(), sv, cands, 3);
    CHECK(t[q].query == queries[q]);
    for (int i = 0; i < 3; ++i) {
      CHECK(t[q].language[static_cast<std::size_t>(i)].id == lang[static_cast<std::size_t>(i)]);
      CHECK(t[q].sound[static_cast<std::size_t>(i)].id == sound[static_cast<std::size_t>(i)]);
    }
    CHECK(t[q].language[0].similarity >= t[q].language[1].similarity);
    CHECK(t[q].language[0].name == text.registry().name(lang[0]));
  }

  // Exactly k candidates: all returned.
  const std::vector<ClassId> three{1, 2, 3};
  CHECK(neighbor_table(text, means, queries, three, 3)[0].language.size() == 3);
  // Query among its own candidates is rejected; k above the candidate count too.
  const std::vector<ClassId> overlap{0, 1, 2};
  CHECK_THROWS(neighbor_table(text, means, queries, overlap, 3));
  CHECK_THROWS(neighbor_table(text, means, queries, three, 4));
}

TEST_CASE("neighbor equal to the query ranks first with similarity 1") {
  RowMatrixF t(4, 3);
  t << 1, 2, 3, 1, 2, 3, 0, 1, 0, 3, -1, 0;
  const EmbeddingSet text(Modality::text, ClassRegistry({"q", "twin", "a", "b"}), {1, 1, 1, 1}, t);
  const EmbeddingSet audio(Modality::audio, ClassRegistry({"q", "twin", "a", "b"}), {1, 1, 1, 1}, t);
  const std::vector<ClassId> q{0}, c{2, 3, 1};
  const NeighborTable tab = neighbor_table(text, class_means(audio), q, c, 2);
  CHECK(tab[0].language[0].id == 1);
  CHECK(tab[0].language[0].similarity == doctest::Approx(1.0));
  CHECK(tab[0].sound[0].id == 1);
}

TEST_CASE("spearman") {
  const std::vector<double> a{0.3, 0.1, 0.9, 0.5};
  CHECK(spearman_rho(a, a) == doctest::Approx(1.0));
  std::vector<double> rev = a;
  std::sort(rev.begin(), rev.end(), std::greater<>());
  std::vector<double> inc = a;
  std::sort(inc.begin(), inc.end());
  CHECK(spearman_rho(inc, rev) == doctest::Approx(-1.0));

  CHECK(average_ranks(std::vector<double>{2, 1, 2, 3}) == std::vector<double>{2.5, 1, 2.5, 4});

  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + uniform_index(rng, 20);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(uniform_index(rng, 4)) / 4.0;  // heavy ties
      y[i] = static_cast<double>(uniform_index(rng, 5));
    }
    x[0] = 0.0, x[1] = 1.0;  // never constant
    y[0] = 0.0, y[1] = 9.0;
    CHECK(spearman_rho(x, y) == doctest::Approx(oracle::spearman(x, y)).epsilon(1e-12));
    CHECK(average_ranks(x) == oracle::ranks(x));
  }
  CHECK_THROWS(spearman_rho(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}));
  CHECK_THROWS(spearman_rho(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}));
}

TEST_CASE("correlation matrix") {
  Rng rng(6);
  auto random_acc = [&](int n) {
    PerClassAccuracy m;
    for (int i = 0; i < n; ++i) m["k" + std::to_string(i)] = static_cast<double>(uniform_index(rng, 6)) / 5.0;
    m["k0"] = 0.0;
    m["k1"] = 1.0;
    return m;
  };
  std::vector<RunAccuracies> runs(2);
  for (auto& run : runs) {
    run["gpt"] = random_acc(9);
    run["bert"] = random_acc(9);
    run["glove"] = random_acc(9);
  }
  const CorrelationMatrix cm = correlation_matrix(runs);
  REQUIRE(cm.models == std::vector<std::string>{"bert", "glove", "gpt"});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(cm.rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) == 1.0);
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) continue;
      double sum = 0;
      for (auto& run : runs) {
        std::vector<double> a, b;
        for (const auto& [k, v] : run[cm.models[i]]) a.push_back(v);
        for (const auto& [k, v] : run[cm.models[j]]) b.push_back(v);
        sum += oracle::spearman(a, b);
      }
      CHECK(cm.rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) == doctest::Approx(sum / 2).epsilon(1e-12));
    }
  }
  // Identical accuracies correlate perfectly.
  std::vector<RunAccuracies> same(1);
  same[0]["a"] = random_acc(6);
  same[0]["b"] = same[0]["a"];
  CHECK(correlation_matrix(same).rho(0, 1) == doctest::Approx(1.0));
  // Different class sets within a run are rejected.
  same[0]["b"].erase("k3");
  CHECK_THROWS_AS(correlation_matrix(same), DataError);
}

TEST_CASE("aggregate runs") {
  auto report = [](double acc) {
    EvalReport r;
    r.ks = {3};
    r.acc_at[3] = acc;
    return r;
  };
  std::vector<EvalReport> two{report(0.2), report(0.3)};
  const auto agg = aggregate_runs(two);
  CHECK(agg.at(3).mean == doctest::Approx(0.25));
  CHECK(agg.at(3).sem == doctest::Approx(0.05));
  CHECK(agg.at(3).n == 2);
  std::vector<EvalReport> same{report(0.4), report(0.4), report(0.4)};
  CHECK(aggregate_runs(same).at(3).sem == 0.0);
  std::vector<EvalReport> one{report(0.4)};
  CHECK_THROWS(aggregate_runs(one));

  Rng rng(7);
  std::vector<EvalReport> five;
  std::vector<double> xs;
  for (int i = 0; i < 5; ++i) {
    xs.push_back(uniform01(rng));
    five.push_back(report(xs.back()));
  }
  const auto [m, s] = oracle::mean_sem(xs);
  CHECK(aggregate_runs(five).at(3).mean == doctest::Approx(m).epsilon(1e-14));
  CHECK(aggregate_runs(five).at(3).sem == doctest::Approx(s).epsilon(1e-12));
}
