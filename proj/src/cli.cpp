#include "soundprobe/cli.hpp"

#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "soundprobe/embedstore.hpp"
#include "soundprobe/error.hpp"
#include "soundprobe/eval.hpp"
#include "soundprobe/experiment.hpp"
#include "soundprobe/linalg.hpp"
#include "soundprobe/report.hpp"

namespace soundprobe::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using report::ordered_json;

namespace {

constexpr const char* kFooter = R"(Output formats
  JSON is the canonical format; CSV files are conveniences.
  summary.csv    text,audio,split,variant,acc@1,acc@3,control_acc@3
  per_class.csv  text,audio,split,variant,class,n_clips,acc@K...,control_acc@K...
  compare CSV    audio,model_a,model_b,rho
  viz CSV        class,modality,x,y

Exit codes: 0 success, 1 validation or data failure, 2 usage error.)";

std::string fmt(const char* spec, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

EmbeddingSet load_expect(const fs::path& dir, Modality want) {
  EmbeddingSet set = load_set(dir);
  if (set.modality() != want) {
    throw DataError("'" + dir.string() + "' holds " + std::string(to_string(set.modality())) +
                    " embeddings, expected " + std::string(to_string(want)));
  }
  return set;
}

json parse_json_file(const fs::path& path) {
  const std::string text = report::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

SplitSpec load_split(const fs::path& file, int index) {
  const auto splits = report::splits_from_json(parse_json_file(file));
  for (const auto& s : splits) {
    if (s.index == index) return s;
  }
  throw ArgumentError("split file '" + file.string() + "' has no split with index " + std::to_string(index));
}

std::vector<ClassId> all_ids(std::size_t n) {
  std::vector<ClassId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<ClassId>(i);
  return ids;
}

// Text rows in the split registry's order.
RetrievalSet retrieval_for(const EmbeddingSet& text, const ClassRegistry& registry) {
  const auto ids = map_by_name(registry, text.registry(), all_ids(registry.size()));
  RetrievalSet rows = restrict_rows(make_retrieval_set(text), ids);
  return {registry, std::move(rows.text)};
}

void emit(const std::string& content, const std::string& out_path, std::ostream& out) {
  if (out_path.empty() || out_path == "-") out << content;
  else report::write_file(out_path, content);
}

// Flags shared by train / eval / grid / procrustes.
struct Inputs {
  std::string text, audio, split;
  int split_index = 0;
  std::string out;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--text", text, "Text EMBD directory")->required();
    cmd->add_option("--audio", audio, "Audio EMBD directory")->required();
    cmd->add_option("--split", split, "Split file written by `split`")->required();
    cmd->add_option("--split-index", split_index, "Which split in the file")->capture_default_str();
    cmd->add_option("--out", out, "Output file (stdout when omitted)");
  }
};

void add_train_flags(CLI::App* cmd, TrainConfig& cfg, std::string& variant) {
  cmd->add_option("--variant", variant, "linear | nonlinear")
      ->check(CLI::IsMember({"linear", "nonlinear"}))
      ->capture_default_str();
  cmd->add_option("--epochs", cfg.max_epochs, "Maximum epochs")->capture_default_str();
  cmd->add_option("--batch-size", cfg.batch_size, "Examples per minibatch")->capture_default_str();
  cmd->add_option("--proj-dim", cfg.proj_dim, "Shared space dimension")->capture_default_str();
  cmd->add_option("--val-fraction", cfg.val_fraction, "Held-out clip fraction per class")->capture_default_str();
  cmd->add_option("--patience", cfg.patience, "Early stopping patience (epochs)")->capture_default_str();
  cmd->add_flag("--include-positive", cfg.include_positive, "Add the positive pair to the log-sum-exp");
}

int cmd_validate(const std::string& dir, std::ostream& out, std::ostream& err) {
  const auto problems = validate_dir(dir);
  if (!problems.empty()) {
    for (const auto& p : problems) err << "error: " << p << '\n';
    err << "invalid: " << dir << " (" << problems.size() << " problem" << (problems.size() == 1 ? "" : "s") << ")\n";
    return failure;
  }
  const EmbeddingSet set = load_set(dir);
  out << "valid: " << dir << " (" << to_string(set.modality()) << ", dim " << set.dim() << ", " << set.num_classes()
      << " classes, " << set.total_vectors() << " vectors)\n";
  return ok;
}

struct SynthFlags {
  std::uint64_t seed = 0;
  int classes = 144, clips = 30, d1 = 64, d2 = 48;
  double noise = 0.1;
  std::string map = "orthogonal";
  std::string out;
};

int cmd_synth(const SynthFlags& f, std::ostream& out) {
  const SynthData data = synth_generate(f.seed, f.classes, f.clips, f.d1, f.d2, f.noise, parse_map_kind(f.map));
  const fs::path dir = f.out;
  save_set(data.text, dir / "text");
  save_set(data.audio, dir / "audio");
  ordered_json meta = {{"format", "soundprobe-synth"},
                       {"version", 1},
                       {"seed", f.seed},
                       {"classes", f.classes},
                       {"clips", f.clips},
                       {"d1", f.d1},
                       {"d2", f.d2},
                       {"noise", f.noise},
                       {"map", f.map},
                       {"hidden_map", ordered_json::array()}};
  for (Eigen::Index r = 0; r < data.hidden_map.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < data.hidden_map.cols(); ++c) row.push_back(data.hidden_map(r, c));
    meta["hidden_map"].push_back(std::move(row));
  }
  report::write_file(dir / "synth.json", report::dump(meta));
  out << "wrote " << (dir / "text").string() << ", " << (dir / "audio").string() << ", "
      << (dir / "synth.json").string() << '\n';
  return ok;
}

struct SplitFlags {
  std::string registry;
  std::uint64_t seed = 0;
  int n = 5;
  double train_frac = 0.7;
  int probe_classes = 100;
  std::string out;
};

int cmd_split(const SplitFlags& f, std::ostream& out) {
  if (f.n < 1) throw ArgumentError("--n must be >= 1");
  if (!(f.train_frac > 0.0 && f.train_frac < 1.0)) throw ArgumentError("--train-frac must be in (0, 1)");
  if (f.probe_classes < 2) throw ArgumentError("--probe-classes must be >= 2");
  const EmbeddingSet set = load_set(f.registry);
  const std::size_t n_probe = std::min<std::size_t>(static_cast<std::size_t>(f.probe_classes), set.num_classes());
  const auto splits = make_splits(f.seed, set.registry(), all_ids(n_probe), f.n, f.train_frac);
  emit(report::dump(report::splits_to_json(splits, f.seed, f.train_frac)), f.out, out);
  return ok;
}

struct TrainInputs {
  RetrievalSet text;
  EmbeddingSet audio;
  std::vector<ClassId> ids;
};

// Restricted to training classes, exactly as the grid search prepares them.
TrainInputs train_inputs(const RetrievalSet& retrieval, const EmbeddingSet& audio, std::span<const ClassId> train) {
  RetrievalSet text = restrict_rows(retrieval, train);
  EmbeddingSet sub = subset(audio, map_by_name(retrieval.registry, audio.registry(), train));
  return {std::move(text), std::move(sub), all_ids(train.size())};
}

int cmd_train(const Inputs& in, TrainConfig cfg, const std::string& variant, std::optional<std::uint64_t> seed,
              std::ostream& out) {
  cfg.nonlinear = variant == "nonlinear";
  cfg.validate();
  const SplitSpec split = load_split(in.split, in.split_index);
  cfg.seed = seed ? *seed : derive_seed(split.seed, "train");
  const EmbeddingSet text = load_expect(in.text, Modality::text);
  const EmbeddingSet audio = load_expect(in.audio, Modality::audio);
  const RetrievalSet retrieval = retrieval_for(text, split.retrieval_registry);
  const TrainInputs ti = train_inputs(retrieval, audio, split.train);
  const TrainReport rep = train_probe(cfg, ti.text, ti.audio, ti.ids);

  ordered_json j = {{"format", "soundprobe-probe"},
                    {"version", 1},
                    {"variant", variant},
                    {"split", split.index},
                    {"split_seed", split.seed},
                    {"config", report::to_json(cfg)},
                    {"train_report", report::to_json(rep)},
                    {"params", report::params_to_json(rep.params)}};
  emit(report::dump(j), in.out, out);
  return ok;
}

int cmd_eval(const Inputs& in, const std::string& params_file, std::vector<int> ks,
             std::optional<std::uint64_t> control_seed, int neighbors, int threads, std::ostream& out) {
  for (const int k : ks)
    if (k < 1) throw ArgumentError("--k values must be >= 1");
  if (neighbors < 0) throw ArgumentError("--neighbors must be >= 0");
  const json pj = parse_json_file(params_file);
  const ProbeParams params = report::params_from_json(pj.contains("params") ? pj["params"] : pj);
  const SplitSpec split = load_split(in.split, in.split_index);
  const EmbeddingSet text = load_expect(in.text, Modality::text);
  const EmbeddingSet audio = load_expect(in.audio, Modality::audio);
  if (params.text_dim() != text.dim() || params.audio_dim() != audio.dim())
    throw DataError("probe dimensions do not match the embedding sets");
  RetrievalSet retrieval = retrieval_for(text, split.retrieval_registry);
  if (control_seed) retrieval = permuted_control(*control_seed, retrieval);
  const EvalReport rep = evaluate(params, retrieval, audio, split.test, ks, threads);

  ordered_json j = {{"format", "soundprobe-eval"},
                    {"version", 1},
                    {"split", split.index},
                    {"split_seed", split.seed},
                    {"params_fingerprint", report::params_fingerprint(params)}};
  if (control_seed) j["control_seed"] = *control_seed;
  j["report"] = report::to_json(rep);
  if (neighbors > 0) {
    const auto q = map_by_name(split.retrieval_registry, text.registry(), split.test);
    const auto c = map_by_name(split.retrieval_registry, text.registry(), split.train);
    j["neighbors"] = report::to_json(neighbor_table(text, class_means(audio), q, c, neighbors));
  }
  emit(report::dump(j), in.out, out);
  return ok;
}

ordered_json run_json(const RunResult& r) {
  ordered_json j = report::to_json(r);
  if (r.train_report) j["params"] = report::params_to_json(r.train_report->params);
  if (r.control_report) j["control_params"] = report::params_to_json(r.control_report->params);
  return j;
}

int cmd_grid(const Inputs& in, GridSpec grid, const std::string& variant, const RunOptions& opts, std::ostream& out) {
  grid.base.nonlinear = variant == "nonlinear";
  for (const auto& p : grid.points(0)) p.validate();
  if (opts.jobs < 1) throw ArgumentError("--jobs must be >= 1");
  const SplitSpec split = load_split(in.split, in.split_index);
  const EmbeddingSet text = load_expect(in.text, Modality::text);
  const EmbeddingSet audio = load_expect(in.audio, Modality::audio);
  const RunResult r = grid_search(grid, split, text, audio, opts);
  emit(report::dump(run_json(r)), in.out, out);
  return ok;
}

int cmd_procrustes(const Inputs& in, const RunOptions& opts, std::ostream& out) {
  const SplitSpec split = load_split(in.split, in.split_index);
  const EmbeddingSet text = load_expect(in.text, Modality::text);
  const EmbeddingSet audio = load_expect(in.audio, Modality::audio);
  const RunResult r = run_procrustes_probe(split, text, audio, opts);
  emit(report::dump(report::to_json(r)), in.out, out);
  return ok;
}

int cmd_matrix(const std::string& config_path, int jobs, const std::string& out_dir, std::ostream& out) {
  if (jobs < 1) throw ArgumentError("--jobs must be >= 1");
  const fs::path cfg_path(config_path);
  json cj;
  try {
    cj = json::parse(report::read_file(cfg_path));
  } catch (const json::exception& e) {
    throw ArgumentError("config '" + config_path + "' is not valid JSON: " + e.what());
  }
  report::ExperimentConfig cfg = report::parse_config(cj, cfg_path.parent_path());
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  cfg.options.jobs = jobs;

  std::vector<NamedSet> texts, audios;
  for (const auto& t : cfg.text) texts.push_back({t.name, load_expect(t.path, Modality::text)});
  for (const auto& a : cfg.audio) audios.push_back({a.name, load_expect(a.path, Modality::audio)});

  const ClassRegistry& registry = texts.front().set.registry();
  std::vector<ClassId> probe;
  if (!cfg.probe_class_names.empty()) {
    for (const auto& name : cfg.probe_class_names) probe.push_back(registry.id_of(name));
  } else {
    const std::size_t n = cfg.n_probe_classes ? static_cast<std::size_t>(*cfg.n_probe_classes) : 100;
    probe = all_ids(std::min(n, registry.size()));
  }
  const auto splits = make_splits(cfg.seed, registry, probe, cfg.n_splits, cfg.train_fraction);
  const ResultBundle bundle = run_matrix(texts, audios, cfg.grid, splits, cfg.variants, cfg.options, cfg.seed);

  const fs::path dir = cfg.output_dir;
  report::write_file(dir / "results.json", report::dump(report::to_json(bundle)));
  report::write_file(dir / "summary.csv", report::summary_csv(bundle));
  report::write_file(dir / "per_class.csv", report::per_class_csv(bundle));
  report::write_file(dir / "splits.json", report::dump(report::splits_to_json(splits, cfg.seed, cfg.train_fraction)));
  out << "wrote " << bundle.runs.size() << " runs to " << dir.string() << '\n';
  return ok;
}

int cmd_compare(const std::vector<std::string>& files, int k, const std::string& variant_name,
                const std::string& out_path, std::ostream& out) {
  if (k < 1) throw ArgumentError("--k must be >= 1");
  const Variant variant = parse_variant(variant_name);
  std::vector<json> bundles;
  for (const auto& f : files) {
    json b = parse_json_file(f);
    if (!b.is_object() || b.value("format", "") != "soundprobe-results")
      throw DataError("'" + f + "' is not a results bundle");
    bundles.push_back(std::move(b));
  }
  for (std::size_t i = 1; i < bundles.size(); ++i) {
    if (bundles[i]["splits"] != bundles[0]["splits"])
      throw DataError("mismatched splits: '" + files[i] + "' and '" + files[0] + "'");
  }

  // A text model name present in more than one bundle gets a #<position> suffix.
  std::map<std::string, std::set<std::size_t>> owners;
  for (std::size_t b = 0; b < bundles.size(); ++b)
    for (const auto& run : bundles[b]["runs"]) owners[run["text"].get<std::string>()].insert(b);

  const std::string key = std::to_string(k);
  std::map<std::string, std::map<int, RunAccuracies>> by_audio;  // audio -> split -> model -> class -> acc
  for (std::size_t b = 0; b < bundles.size(); ++b) {
    for (const auto& run : bundles[b]["runs"]) {
      if (run["variant"].get<std::string>() != to_string(variant)) continue;
      const std::string text = run["text"].get<std::string>();
      const std::string label = owners[text].size() > 1 ? text + "#" + std::to_string(b + 1) : text;
      PerClassAccuracy acc;
      for (const auto& c : run["eval"]["classes"]) {
        if (!c["acc"].contains(key)) throw DataError("results have no accuracy at K=" + key);
        acc[c["name"].get<std::string>()] = c["acc"][key].get<double>();
      }
      by_audio[run["audio"].get<std::string>()][run["split"].get<int>()][label] = std::move(acc);
    }
  }
  if (by_audio.empty()) throw DataError("no " + variant_name + " runs in the given results");

  std::ostringstream csv;
  csv << "audio,model_a,model_b,rho\n";
  for (const auto& [audio, splits] : by_audio) {
    std::vector<RunAccuracies> runs;
    for (const auto& [index, models] : splits) runs.push_back(models);
    const CorrelationMatrix m = correlation_matrix(runs);
    for (std::size_t i = 0; i < m.models.size(); ++i)
      for (std::size_t j = 0; j < m.models.size(); ++j)
        csv << audio << ',' << m.models[i] << ',' << m.models[j] << ','
            << fmt("%.6f", m.rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << '\n';
  }
  emit(csv.str(), out_path, out);
  return ok;
}

int cmd_viz(const std::string& text_dir, const std::string& audio_dir, const std::string& out_csv,
            const std::string& meta_path) {
  const EmbeddingSet text = load_expect(text_dir, Modality::text);
  const EmbeddingSet audio = load_expect(audio_dir, Modality::audio);
  const ClassMeanSet means = class_means(audio);
  const std::size_t n = text.num_classes();
  if (n < 3) throw DataError("viz needs at least 3 classes");
  const auto ids = map_by_name(text.registry(), means.registry, all_ids(n));

  Eigen::MatrixXd T = make_retrieval_set(text).text;
  Eigen::MatrixXd S(static_cast<Eigen::Index>(n), means.means.cols());
  for (std::size_t i = 0; i < n; ++i) S.row(static_cast<Eigen::Index>(i)) = means.means.row(ids[i]);

  const int k_requested = std::min({static_cast<int>(n) - 1, text.dim(), audio.dim()});
  const int k = std::min({k_requested, linalg::centered_rank(T), linalg::centered_rank(S)});
  if (k < 2) throw DataError("class vectors span fewer than 2 dimensions");
  const linalg::PcaModel pl = linalg::pca_fit(T, k);
  const linalg::PcaModel ps = linalg::pca_fit(S, k);
  const Eigen::MatrixXd A = linalg::pca_transform(pl, T);
  const Eigen::MatrixXd B = linalg::pca_transform(ps, S);
  const linalg::ProcrustesFit fit = linalg::procrustes_fit(A, B);
  const Eigen::MatrixXd aligned = A * fit.rotation;

  Eigen::MatrixXd both(2 * A.rows(), k);
  both << aligned, B;
  const linalg::PcaModel p2 = linalg::pca_fit(both, 2);
  const Eigen::MatrixXd xy = linalg::pca_transform(p2, both);

  std::ostringstream csv;
  csv << "class,modality,x,y\n";
  for (Eigen::Index r = 0; r < xy.rows(); ++r) {
    const bool is_text = r < A.rows();
    const std::string& name = text.registry().name(static_cast<ClassId>(is_text ? r : r - A.rows()));
    const bool quote = name.find_first_of(",\"") != std::string::npos;
    std::string field = name;
    if (quote) {
      field = "\"";
      for (const char c : name) field += c == '"' ? std::string("\"\"") : std::string(1, c);
      field += '"';
    }
    csv << field << ',' << (is_text ? "text" : "audio") << ',' << fmt("%.10g", xy(r, 0)) << ','
        << fmt("%.10g", xy(r, 1)) << '\n';
  }
  if (!meta_path.empty()) {
    ordered_json meta = {{"format", "soundprobe-viz"},
                         {"version", 1},
                         {"classes", n},
                         {"k_requested", k_requested},
                         {"k_used", k},
                         {"procrustes_residual", fit.residual},
                         {"alignment", "text mapped onto audio"},
                         {"second_pca_fit_on", "union"},
                         {"explained_variance", std::vector<double>(p2.explained_variance.data(),
                                                                    p2.explained_variance.data() + 2)}};
    report::write_file(meta_path, report::dump(meta));
  }
  report::write_file(out_csv, csv.str());
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Probe text and audio embedding spaces for shared class structure."};
  app.name(args.empty() ? "soundprobe" : fs::path(args[0]).filename().string());
  app.footer(kFooter);
  app.require_subcommand(1);
  app.fallthrough(false);

  std::function<int()> action;

  // validate
  std::string validate_dir_arg;
  auto* validate = app.add_subcommand("validate", "Check an EMBD directory and report every violation");
  validate->add_option("dir", validate_dir_arg, "EMBD directory")->required();
  validate->callback([&] { action = [&] { return cmd_validate(validate_dir_arg, out, err); }; });

  // synth
  SynthFlags sf;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic text/audio pair with a hidden linear map");
  synth->add_option("--seed", sf.seed, "Random seed")->capture_default_str();
  synth->add_option("--classes", sf.classes, "Number of classes")->capture_default_str();
  synth->add_option("--clips", sf.clips, "Clips per class")->capture_default_str();
  synth->add_option("--d1", sf.d1, "Text dimension")->capture_default_str();
  synth->add_option("--d2", sf.d2, "Audio dimension")->capture_default_str();
  synth->add_option("--noise", sf.noise, "Noise standard deviation")->capture_default_str();
  synth->add_option("--map", sf.map, "orthogonal | random_linear")
      ->check(CLI::IsMember({"orthogonal", "random_linear"}))
      ->capture_default_str();
  synth->add_option("--out", sf.out, "Output directory (text/, audio/, synth.json)")->required();
  synth->callback([&] { action = [&] { return cmd_synth(sf, out); }; });

  // split
  SplitFlags spf;
  auto* split = app.add_subcommand("split", "Write seeded train/test splits of the probe classes");
  split->add_option("--registry", spf.registry, "EMBD directory whose class order is the retrieval registry")
      ->required();
  split->add_option("--seed", spf.seed, "Random seed")->capture_default_str();
  split->add_option("--n", spf.n, "Number of splits")->capture_default_str();
  split->add_option("--train-frac", spf.train_frac, "Fraction of probe classes used for training")
      ->capture_default_str();
  split->add_option("--probe-classes", spf.probe_classes, "First N registry classes (capped at registry size)")
      ->capture_default_str();
  split->add_option("--out", spf.out, "Output file (stdout when omitted)");
  split->callback([&] { action = [&] { return cmd_split(spf, out); }; });

  // train
  Inputs train_in;
  TrainConfig train_cfg;
  std::string train_variant = "linear";
  std::optional<std::uint64_t> train_seed;
  auto* train = app.add_subcommand("train", "Train one contrastive probe on a split's training classes");
  train_in.add_to(train);
  add_train_flags(train, train_cfg, train_variant);
  train->add_option("--lr", train_cfg.learning_rate, "Learning rate")->capture_default_str();
  train->add_option("--tau", train_cfg.tau, "Temperature")->capture_default_str();
  train->add_option("--negatives", train_cfg.num_negatives, "Negatives per example")->capture_default_str();
  train->add_option("--seed", train_seed, "Training seed (default: derived from the split seed)");
  train->callback([&] { action = [&] { return cmd_train(train_in, train_cfg, train_variant, train_seed, out); }; });

  // eval
  Inputs eval_in;
  std::string eval_params;
  std::vector<int> eval_ks{1, 3};
  std::optional<std::uint64_t> eval_control;
  int eval_neighbors = 0, eval_threads = 0;
  auto* eval = app.add_subcommand("eval", "Retrieval accuracy of a trained probe on a split's test classes");
  eval_in.add_to(eval);
  eval->add_option("--variant", train_variant, "Accepted for symmetry; the probe file fixes the variant")
      ->check(CLI::IsMember({"linear", "nonlinear"}));
  eval->add_option("--params", eval_params, "Probe file written by `train`")->required();
  eval->add_option("--k", eval_ks, "Comma-separated K values")->delimiter(',')->capture_default_str();
  eval->add_option("--control-seed", eval_control, "Evaluate against text rows permuted with this seed");
  eval->add_option("--neighbors", eval_neighbors, "Also emit the top-N training-class neighbours of each test class");
  eval->add_option("--threads", eval_threads, "Worker threads (0 = default)");
  eval->callback([&] {
    action = [&] { return cmd_eval(eval_in, eval_params, eval_ks, eval_control, eval_neighbors, eval_threads, out); };
  });

  // grid
  Inputs grid_in;
  GridSpec grid_spec;
  std::string grid_variant = "linear";
  RunOptions grid_opts;
  bool grid_no_control = false;
  auto* grid = app.add_subcommand("grid", "Grid search, selection on validation accuracy, test evaluation");
  grid_in.add_to(grid);
  add_train_flags(grid, grid_spec.base, grid_variant);
  grid->add_option("--lrs", grid_spec.learning_rates, "Learning rate axis")->delimiter(',')->capture_default_str();
  grid->add_option("--taus", grid_spec.taus, "Temperature axis")->delimiter(',')->capture_default_str();
  grid->add_option("--negatives", grid_spec.num_negatives, "Negatives axis")->delimiter(',')->capture_default_str();
  grid->add_option("--k", grid_opts.ks, "Comma-separated K values")->delimiter(',')->capture_default_str();
  grid->add_option("--jobs", grid_opts.jobs, "Parallel training jobs")->capture_default_str();
  grid->add_flag("--no-control", grid_no_control, "Skip the permuted-text control");
  grid->callback([&] {
    action = [&] {
      grid_opts.with_control = !grid_no_control;
      return cmd_grid(grid_in, grid_spec, grid_variant, grid_opts, out);
    };
  });

  // procrustes
  Inputs proc_in;
  RunOptions proc_opts;
  std::string proc_metric = "cosine";
  bool proc_no_control = false;
  auto* proc = app.add_subcommand("procrustes", "PCA plus orthogonal alignment probe on a split");
  proc_in.add_to(proc);
  proc->add_option("--metric", proc_metric, "cosine | euclidean")
      ->check(CLI::IsMember({"cosine", "euclidean"}))
      ->capture_default_str();
  proc->add_option("--k", proc_opts.ks, "Comma-separated K values")->delimiter(',')->capture_default_str();
  proc->add_flag("--no-control", proc_no_control, "Skip the permuted-text control");
  proc->callback([&] {
    action = [&] {
      proc_opts.with_control = !proc_no_control;
      proc_opts.procrustes_metric = parse_procrustes_metric(proc_metric);
      return cmd_procrustes(proc_in, proc_opts, out);
    };
  });

  // matrix
  std::string matrix_config, matrix_out;
  int matrix_jobs = 1;
  auto* matrix = app.add_subcommand("matrix", "Every text x audio pair, variant and split from a config file");
  matrix->add_option("--config", matrix_config, "Experiment configuration (JSON)")->required();
  matrix->add_option("--jobs", matrix_jobs, "Parallel training jobs; output does not depend on it")
      ->capture_default_str();
  matrix->add_option("--out", matrix_out, "Output directory (overrides the config)");
  matrix->callback([&] { action = [&] { return cmd_matrix(matrix_config, matrix_jobs, matrix_out, out); }; });

  // compare
  std::vector<std::string> compare_files;
  int compare_k = 3;
  std::string compare_variant = "linear", compare_out;
  auto* compare = app.add_subcommand("compare", "Mean Spearman correlation of per-class accuracy between text models");
  compare->add_option("results", compare_files, "results.json files")->required();
  compare->add_option("--k", compare_k, "Accuracy@K to correlate")->capture_default_str();
  compare->add_option("--variant", compare_variant, "linear | nonlinear | procrustes")
      ->check(CLI::IsMember({"linear", "nonlinear", "procrustes"}))
      ->capture_default_str();
  compare->add_option("--out", compare_out, "Output CSV (stdout when omitted)");
  compare->callback([&] {
    action = [&] { return cmd_compare(compare_files, compare_k, compare_variant, compare_out, out); };
  });

  // viz
  std::string viz_text, viz_audio, viz_out, viz_meta;
  auto* viz = app.add_subcommand("viz", "2-D coordinates of class means after Procrustes alignment");
  viz->add_option("--text", viz_text, "Text EMBD directory")->required();
  viz->add_option("--audio", viz_audio, "Audio EMBD directory")->required();
  viz->add_option("--out", viz_out, "Output CSV")->required();
  viz->add_option("--meta", viz_meta, "Optional JSON with alignment metadata");
  viz->callback([&] { action = [&] { return cmd_viz(viz_text, viz_audio, viz_out, viz_meta); }; });

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("soundprobe");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return ok;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return usage;
  }

  try {
    return action ? action() : usage;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << '\n';
    return usage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return failure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace soundprobe::cli
