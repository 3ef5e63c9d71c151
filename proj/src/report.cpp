#include "soundprobe/report.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "soundprobe/error.hpp"

namespace soundprobe::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

ordered_json matrix_rows(const Eigen::MatrixXd& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_rows(const json& j, const char* what) {
  if (!j.is_array()) throw DataError(std::string(what) + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw DataError(std::string(what) + ": ragged row " + std::to_string(r));
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

template <class T>
ordered_json int_map(const std::map<int, T>& m) {
  ordered_json out = ordered_json::object();
  for (const auto& [k, v] : m) out[std::to_string(k)] = v;
  return out;
}

ordered_json aggregate_json(const std::map<int, RunAggregate>& m) {
  ordered_json out = ordered_json::object();
  for (const auto& [k, a] : m) out[std::to_string(k)] = {{"mean", a.mean}, {"sem", a.sem}, {"n", a.n}};
  return out;
}

ordered_json names_of(const ClassRegistry& reg, const std::vector<ClassId>& ids) {
  ordered_json out = ordered_json::array();
  for (const ClassId id : ids) out.push_back(reg.name(id));
  return out;
}

ordered_json procrustes_json(const ProcrustesInfo& p) {
  return {{"k_requested", p.k_requested},
          {"k_used", p.k_used},
          {"residual", p.residual},
          {"metric", std::string(to_string(p.metric))}};
}

[[noreturn]] void bad_key(const std::string& where, const std::string& key) {
  throw ArgumentError(where + ": unknown key '" + key + "'");
}

template <class T>
T get_as(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ArgumentError(where + ": wrong type");
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::string params_fingerprint(const ProbeParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Eigen::MatrixXd* m : {&params.W1, &params.W2}) {
    const std::int64_t shape[2] = {m->rows(), m->cols()};
    h = fnv1a(h, shape, sizeof shape);
    h = fnv1a(h, m->data(), static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  const unsigned char flag = params.nonlinear ? 1 : 0;
  h = fnv1a(h, &flag, 1);
  h = fnv1a(h, &params.tau, sizeof params.tau);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ordered_json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"tau", c.tau},
          {"num_negatives", c.num_negatives}, {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},       {"proj_dim", c.proj_dim},
          {"nonlinear", c.nonlinear},         {"seed", c.seed},
          {"val_fraction", c.val_fraction},   {"patience", c.patience},
          {"include_positive", c.include_positive}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ArgumentError("train config: expected an object");
  for (const auto& [key, v] : j.items()) {
    const std::string where = "train config '" + key + "'";
    if (key == "learning_rate") c.learning_rate = get_as<double>(v, where);
    else if (key == "tau") c.tau = get_as<double>(v, where);
    else if (key == "num_negatives") c.num_negatives = get_as<int>(v, where);
    else if (key == "batch_size") c.batch_size = get_as<int>(v, where);
    else if (key == "max_epochs") c.max_epochs = get_as<int>(v, where);
    else if (key == "proj_dim") c.proj_dim = get_as<int>(v, where);
    else if (key == "nonlinear") c.nonlinear = get_as<bool>(v, where);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, where);
    else if (key == "val_fraction") c.val_fraction = get_as<double>(v, where);
    else if (key == "patience") c.patience = get_as<int>(v, where);
    else if (key == "include_positive") c.include_positive = get_as<bool>(v, where);
    else bad_key("train config", key);
  }
  return c;
}

ordered_json params_to_json(const ProbeParams& p) {
  return {{"nonlinear", p.nonlinear},
          {"tau", p.tau},
          {"proj_dim", p.proj_dim()},
          {"text_dim", p.text_dim()},
          {"audio_dim", p.audio_dim()},
          {"fingerprint", params_fingerprint(p)},
          {"W1", matrix_rows(p.W1)},
          {"W2", matrix_rows(p.W2)}};
}

ProbeParams params_from_json(const json& j) {
  ProbeParams p;
  try {
    p.nonlinear = j.at("nonlinear").get<bool>();
    p.tau = j.at("tau").get<double>();
    p.W1 = matrix_from_rows(j.at("W1"), "W1");
    p.W2 = matrix_from_rows(j.at("W2"), "W2");
  } catch (const json::exception& e) {
    throw DataError(std::string("probe parameters: ") + e.what());
  }
  if (p.W1.rows() != p.W2.rows()) throw DataError("probe parameters: W1 and W2 have different row counts");
  if (j.contains("fingerprint") && j["fingerprint"] != params_fingerprint(p))
    throw DataError("probe parameters: fingerprint does not match the stored matrices");
  return p;
}

ordered_json to_json(const TrainReport& r, bool include_params) {
  ordered_json j = {{"best_epoch", r.best_epoch},
                    {"val_metric_by_epoch", r.val_metric_by_epoch},
                    {"train_loss_by_epoch", r.train_loss_by_epoch},
                    {"final_train_loss", r.final_train_loss},
                    {"effective_negatives", r.effective_negatives},
                    {"zero_norm_events", r.zero_norm_events},
                    {"params_fingerprint", params_fingerprint(r.params)}};
  if (include_params) j["params"] = params_to_json(r.params);
  return j;
}

ordered_json to_json(const EvalReport& r) {
  ordered_json classes = ordered_json::array();
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    ordered_json hits = ordered_json::object(), acc = ordered_json::object();
    for (const int k : r.ks) {
      hits[std::to_string(k)] = r.hits.at(k)[i];
      acc[std::to_string(k)] = r.per_class_acc.at(k)[i];
    }
    classes.push_back({{"id", r.classes[i]},
                       {"name", r.class_names[i]},
                       {"n_clips", r.n_clips[i]},
                       {"hits", hits},
                       {"acc", acc}});
  }
  ordered_json j = {{"ks", r.ks},
                    {"retrieval_size", r.retrieval_size},
                    {"acc_at", int_map(r.acc_at)},
                    {"classes", classes}};
  if (r.control) j["control"] = to_json(*r.control);
  return j;
}

ordered_json to_json(const NeighborTable& t) {
  auto list = [](const std::vector<Neighbor>& ns) {
    ordered_json out = ordered_json::array();
    for (const auto& n : ns) out.push_back({{"id", n.id}, {"name", n.name}, {"similarity", n.similarity}});
    return out;
  };
  ordered_json out = ordered_json::array();
  for (const auto& row : t)
    out.push_back({{"id", row.query}, {"name", row.name}, {"language", list(row.language)}, {"sound", list(row.sound)}});
  return out;
}

ordered_json to_json(const RunResult& r) {
  ordered_json j = {{"text", r.text_name},
                    {"audio", r.audio_name},
                    {"variant", std::string(to_string(r.variant))},
                    {"split", r.split.index},
                    {"split_seed", r.split.seed},
                    {"train_seed", r.train_seed},
                    {"control_seed", r.control_seed}};
  if (r.chosen_config) {
    j["chosen_index"] = r.chosen_index;
    j["chosen_config"] = to_json(*r.chosen_config);
    j["grid_val_metrics"] = r.grid_val_metrics;
  }
  if (r.train_report) j["train_report"] = to_json(*r.train_report);
  if (r.control_config) j["control_config"] = to_json(*r.control_config);
  if (r.control_report) j["control_report"] = to_json(*r.control_report);
  if (r.procrustes) j["procrustes"] = procrustes_json(*r.procrustes);
  if (r.control_procrustes) j["control_procrustes"] = procrustes_json(*r.control_procrustes);
  j["eval"] = to_json(r.eval);
  if (r.control_eval) j["control_eval"] = to_json(*r.control_eval);
  return j;
}

ordered_json to_json(const ResultBundle& b) {
  ordered_json splits = ordered_json::array();
  for (const auto& s : b.splits) {
    const auto& reg = s.retrieval_registry;
    splits.push_back({{"index", s.index},
                      {"seed", s.seed},
                      {"train", names_of(reg, s.train)},
                      {"test", names_of(reg, s.test)}});
  }
  ordered_json grid = {{"learning_rates", b.grid.learning_rates},
                       {"taus", b.grid.taus},
                       {"num_negatives", b.grid.num_negatives},
                       {"base", to_json(b.grid.base)}};
  // jobs is deliberately absent: the bundle must not depend on it.
  ordered_json options = {{"with_control", b.options.with_control},
                          {"ks", b.options.ks},
                          {"procrustes_metric", std::string(to_string(b.options.procrustes_metric))}};
  ordered_json runs = ordered_json::array();
  for (const auto& r : b.runs) runs.push_back(to_json(r));
  ordered_json pairs = ordered_json::array();
  for (const auto& p : b.pairs) {
    ordered_json pj = {{"text", p.text_name},
                       {"audio", p.audio_name},
                       {"variant", std::string(to_string(p.variant))},
                       {"runs", p.runs},
                       {"aggregate", aggregate_json(p.aggregate)}};
    if (!p.control_aggregate.empty()) pj["control_aggregate"] = aggregate_json(p.control_aggregate);
    pairs.push_back(std::move(pj));
  }
  ordered_json j = {{"format", "soundprobe-results"}, {"version", 1}, {"seed", b.seed}};
  if (!b.splits.empty()) {
    j["retrieval_registry"] = b.splits.front().retrieval_registry.names();
    j["probe_classes"] = names_of(b.splits.front().retrieval_registry, b.splits.front().probe_classes);
  }
  j["grid"] = grid;
  j["options"] = options;
  j["splits"] = splits;
  j["runs"] = runs;
  j["pairs"] = pairs;
  return j;
}

ordered_json splits_to_json(const std::vector<SplitSpec>& splits, std::uint64_t seed, double train_fraction) {
  if (splits.empty()) throw ArgumentError("no splits to write");
  const ClassRegistry& reg = splits.front().retrieval_registry;
  ordered_json list = ordered_json::array();
  for (const auto& s : splits)
    list.push_back({{"index", s.index}, {"seed", s.seed}, {"train", names_of(reg, s.train)}, {"test", names_of(reg, s.test)}});
  return {{"format", "soundprobe-splits"},
          {"version", 1},
          {"seed", seed},
          {"train_fraction", train_fraction},
          {"retrieval_registry", reg.names()},
          {"probe_classes", names_of(reg, splits.front().probe_classes)},
          {"splits", list}};
}

std::vector<SplitSpec> splits_from_json(const json& j) {
  try {
    if (j.at("format") != "soundprobe-splits") throw DataError("not a splits file");
    const ClassRegistry reg(j.at("retrieval_registry").get<std::vector<std::string>>());
    auto ids = [&](const json& names) {
      std::vector<ClassId> out;
      for (const auto& n : names) out.push_back(reg.id_of(n.get<std::string>()));
      return out;
    };
    const std::vector<ClassId> probe = ids(j.at("probe_classes"));
    std::vector<SplitSpec> out;
    for (const auto& s : j.at("splits")) {
      SplitSpec spec;
      spec.index = s.at("index").get<int>();
      spec.seed = s.at("seed").get<std::uint64_t>();
      spec.probe_classes = probe;
      spec.train = ids(s.at("train"));
      spec.test = ids(s.at("test"));
      spec.retrieval_registry = reg;
      std::set<ClassId> seen;
      for (const ClassId c : spec.train) seen.insert(c);
      for (const ClassId c : spec.test) {
        if (seen.count(c)) throw DataError("splits file: class '" + reg.name(c) + "' is in both train and test");
      }
      out.push_back(std::move(spec));
    }
    return out;
  } catch (const json::exception& e) {
    throw DataError(std::string("splits file: ") + e.what());
  }
}

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ArgumentError("config: expected a JSON object");
  ExperimentConfig cfg;
  auto sets = [&](const json& v, const char* key) {
    if (!v.is_array() || v.empty()) throw ArgumentError(std::string("config '") + key + "': expected a non-empty array");
    std::vector<SetRef> out;
    std::set<std::string> names;
    for (const auto& e : v) {
      if (!e.is_object() || !e.contains("name") || !e.contains("path"))
        throw ArgumentError(std::string("config '") + key + "': entries need 'name' and 'path'");
      SetRef ref{get_as<std::string>(e["name"], key), fs::path(get_as<std::string>(e["path"], key))};
      if (ref.path.is_relative()) ref.path = base_dir / ref.path;
      if (!names.insert(ref.name).second)
        throw ArgumentError(std::string("config '") + key + "': duplicate name '" + ref.name + "'");
      out.push_back(std::move(ref));
    }
    return out;
  };
  bool have_text = false, have_audio = false;
  for (const auto& [key, v] : j.items()) {
    const std::string where = "config '" + key + "'";
    if (key == "text") cfg.text = sets(v, "text"), have_text = true;
    else if (key == "audio") cfg.audio = sets(v, "audio"), have_audio = true;
    else if (key == "seed") cfg.seed = get_as<std::uint64_t>(v, where);
    else if (key == "n_splits") cfg.n_splits = get_as<int>(v, where);
    else if (key == "train_fraction") cfg.train_fraction = get_as<double>(v, where);
    else if (key == "probe_classes") {
      if (v.is_number_integer()) cfg.n_probe_classes = v.get<int>();
      else cfg.probe_class_names = get_as<std::vector<std::string>>(v, where);
    } else if (key == "grid") {
      if (!v.is_object()) throw ArgumentError(where + ": expected an object");
      for (const auto& [gk, gv] : v.items()) {
        if (gk == "learning_rates") cfg.grid.learning_rates = get_as<std::vector<double>>(gv, where);
        else if (gk == "taus") cfg.grid.taus = get_as<std::vector<double>>(gv, where);
        else if (gk == "num_negatives") cfg.grid.num_negatives = get_as<std::vector<int>>(gv, where);
        else bad_key("config 'grid'", gk);
      }
    } else if (key == "train") cfg.grid.base = train_config_from_json(v, cfg.grid.base);
    else if (key == "variants") {
      cfg.variants.clear();
      for (const auto& s : get_as<std::vector<std::string>>(v, where)) cfg.variants.push_back(parse_variant(s));
    } else if (key == "ks") cfg.options.ks = get_as<std::vector<int>>(v, where);
    else if (key == "control") cfg.options.with_control = get_as<bool>(v, where);
    else if (key == "procrustes_metric") cfg.options.procrustes_metric = parse_procrustes_metric(get_as<std::string>(v, where));
    else if (key == "output_dir") {
      cfg.output_dir = get_as<std::string>(v, where);
      if (cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
    } else bad_key("config", key);
  }
  if (!have_text || !have_audio) throw ArgumentError("config: 'text' and 'audio' are required");
  if (cfg.n_splits < 1) throw ArgumentError("config 'n_splits' must be >= 1");
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) throw ArgumentError("config 'train_fraction' must be in (0, 1)");
  if (cfg.n_probe_classes && *cfg.n_probe_classes < 2) throw ArgumentError("config 'probe_classes' must be >= 2");
  if (cfg.variants.empty()) throw ArgumentError("config 'variants' is empty");
  if (cfg.options.ks.empty()) throw ArgumentError("config 'ks' is empty");
  for (const int k : cfg.options.ks)
    if (k < 1) throw ArgumentError("config 'ks' entries must be >= 1");
  if (cfg.grid.learning_rates.empty() || cfg.grid.taus.empty() || cfg.grid.num_negatives.empty())
    throw ArgumentError("config 'grid' axes must be non-empty");
  for (const auto& point : cfg.grid.points(0)) point.validate();
  return cfg;
}

std::string summary_csv(const ResultBundle& b) {
  std::ostringstream out;
  out << "text,audio,split,variant,acc@1,acc@3,control_acc@3\n";
  auto acc = [](const EvalReport& r, int k) {
    const auto it = r.acc_at.find(k);
    return it == r.acc_at.end() ? std::string() : fmt(it->second);
  };
  for (const auto& r : b.runs) {
    out << csv_field(r.text_name) << ',' << csv_field(r.audio_name) << ',' << r.split.index << ','
        << to_string(r.variant) << ',' << acc(r.eval, 1) << ',' << acc(r.eval, 3) << ','
        << (r.control_eval ? acc(*r.control_eval, 3) : std::string()) << '\n';
  }
  return out.str();
}

std::string per_class_csv(const ResultBundle& b) {
  std::ostringstream out;
  const std::vector<int>& ks = b.options.ks;
  out << "text,audio,split,variant,class,n_clips";
  for (const int k : ks) out << ",acc@" << k;
  for (const int k : ks) out << ",control_acc@" << k;
  out << '\n';
  for (const auto& r : b.runs) {
    for (std::size_t i = 0; i < r.eval.classes.size(); ++i) {
      out << csv_field(r.text_name) << ',' << csv_field(r.audio_name) << ',' << r.split.index << ','
          << to_string(r.variant) << ',' << csv_field(r.eval.class_names[i]) << ',' << r.eval.n_clips[i];
      for (const int k : ks) out << ',' << fmt(r.eval.per_class_acc.at(k)[i]);
      for (const int k : ks) out << ',' << (r.control_eval ? fmt(r.control_eval->per_class_acc.at(k)[i]) : std::string());
      out << '\n';
    }
  }
  return out.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw Error("write failed: '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string dump(const ordered_json& j) { return j.dump(2) + "\n"; }

}  // namespace soundprobe::report
