#pragma once

// JSON and CSV forms of splits, probe parameters, evaluation reports and
// result bundles, plus the experiment configuration file.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "soundprobe/eval.hpp"
#include "soundprobe/experiment.hpp"
#include "soundprobe/probe.hpp"

namespace soundprobe::report {

using ordered_json = nlohmann::ordered_json;

/// FNV-1a over the raw bytes of W1 and W2, as 16 hex digits.
std::string params_fingerprint(const ProbeParams& params);

ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
ordered_json to_json(const TrainReport& r, bool include_params = false);
ordered_json to_json(const EvalReport& r);
ordered_json to_json(const RunResult& r);
ordered_json to_json(const ResultBundle& b);
ordered_json to_json(const NeighborTable& t);
ordered_json params_to_json(const ProbeParams& p);
ProbeParams params_from_json(const nlohmann::json& j);

/// Splits file: registry and split membership by class name.
ordered_json splits_to_json(const std::vector<SplitSpec>& splits, std::uint64_t seed, double train_fraction);
std::vector<SplitSpec> splits_from_json(const nlohmann::json& j);

/// Experiment configuration (`matrix --config`).
struct SetRef {
  std::string name;
  std::filesystem::path path;
};

struct ExperimentConfig {
  std::vector<SetRef> text;
  std::vector<SetRef> audio;
  std::uint64_t seed = 0;
  int n_splits = 5;
  double train_fraction = 0.7;
  std::optional<int> n_probe_classes;       // first N registry classes
  std::vector<std::string> probe_class_names;  // or an explicit list
  GridSpec grid;
  std::vector<Variant> variants{Variant::linear};
  RunOptions options;
  std::filesystem::path output_dir = "results";
};

/// Parses and validates a configuration; relative paths resolve against
/// `base_dir`. Throws ArgumentError on unknown keys or bad values.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);

/// summary.csv: text,audio,split,variant,acc@1,acc@3,control_acc@3
std::string summary_csv(const ResultBundle& b);
/// per_class.csv: one row per class per run.
std::string per_class_csv(const ResultBundle& b);

/// Writes `content` byte-for-byte, creating parent directories.
void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);
/// dump(2) plus a trailing newline.
std::string dump(const ordered_json& j);

}  // namespace soundprobe::report
