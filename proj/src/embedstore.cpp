#include "soundprobe/embedstore.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "soundprobe/error.hpp"

namespace soundprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;
constexpr const char* kManifestName = "manifest.json";
constexpr std::size_t kMaxReportedEntries = 50;

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& line : lines) {
    if (!out.empty()) out += '\n';
    out += line;
  }
  return out;
}

float decode_f32le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void encode_f32le(float v, char* p) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  p[0] = static_cast<char>(bits & 0xFF);
  p[1] = static_cast<char>((bits >> 8) & 0xFF);
  p[2] = static_cast<char>((bits >> 16) & 0xFF);
  p[3] = static_cast<char>((bits >> 24) & 0xFF);
}

struct ManifestClass {
  std::string name;
  std::size_t n_vectors = 0;
};

struct ParsedDir {
  std::vector<std::string> problems;
  std::optional<EmbeddingSet> set;
};

// Reports vectors with non-finite entries, one line per offending vector.
void check_finite(const RowMatrixF& data, const std::vector<ManifestClass>& classes,
                  std::vector<std::string>& problems) {
  std::size_t row = 0;
  std::size_t reported = 0;
  std::size_t unreported = 0;
  for (const auto& cls : classes) {
    for (std::size_t j = 0; j < cls.n_vectors; ++j, ++row) {
      for (Eigen::Index k = 0; k < data.cols(); ++k) {
        const float v = data(static_cast<Eigen::Index>(row), k);
        if (std::isfinite(v)) continue;
        if (reported < kMaxReportedEntries) {
          std::ostringstream msg;
          msg << "class '" << cls.name << "' clip " << j << ": non-finite value " << v << " at coordinate "
              << k << " (byte offset " << 4 * (row * static_cast<std::size_t>(data.cols()) + k) << ")";
          problems.push_back(msg.str());
          ++reported;
        } else {
          ++unreported;
        }
        break;
      }
    }
  }
  if (unreported > 0) {
    problems.push_back("... and " + std::to_string(unreported) + " more vectors with non-finite values");
  }
}

ParsedDir parse_dir(const fs::path& dir) {
  ParsedDir out;
  auto& problems = out.problems;
  const fs::path manifest_path = dir / kManifestName;
  std::ifstream manifest_in(manifest_path);
  if (!manifest_in) {
    problems.push_back("missing manifest: " + manifest_path.string());
    return out;
  }
  json manifest;
  try {
    manifest = json::parse(manifest_in);
  } catch (const json::parse_error& e) {
    problems.push_back("corrupt manifest " + manifest_path.string() + ": " + e.what());
    return out;
  }
  if (!manifest.is_object()) {
    problems.push_back("corrupt manifest: top level is not an object");
    return out;
  }

  auto require = [&](const char* key, auto pred, const char* what) -> const json* {
    auto it = manifest.find(key);
    if (it == manifest.end()) {
      problems.push_back(std::string("manifest: missing field '") + key + "'");
      return nullptr;
    }
    if (!pred(*it)) {
      problems.push_back(std::string("manifest: field '") + key + "' must be " + what + ", got " + it->dump());
      return nullptr;
    }
    return &*it;
  };
  auto is_int = [](const json& j) { return j.is_number_integer(); };
  auto is_str = [](const json& j) { return j.is_string(); };

  if (const auto* v = require("format_version", is_int, "an integer"); v && v->get<long long>() != kFormatVersion) {
    problems.push_back("manifest: unsupported format_version " + v->dump() + " (expected 1)");
  }
  std::optional<Modality> modality;
  if (const auto* v = require("modality", is_str, "a string")) {
    const auto s = v->get<std::string>();
    if (s == "text") modality = Modality::text;
    else if (s == "audio") modality = Modality::audio;
    else problems.push_back("manifest: modality must be \"text\" or \"audio\", got \"" + s + "\"");
  }
  long long dim = 0;
  if (const auto* v = require("dim", is_int, "an integer")) {
    dim = v->get<long long>();
    if (dim <= 0) problems.push_back("manifest: dim must be positive, got " + std::to_string(dim));
  }
  if (const auto* v = require("dtype", is_str, "a string"); v && v->get<std::string>() != "f32le") {
    problems.push_back("manifest: unsupported dtype " + v->dump() + " (expected \"f32le\")");
  }
  std::string vector_file;
  if (const auto* v = require("vector_file", is_str, "a string")) vector_file = v->get<std::string>();
  std::string source;
  if (auto it = manifest.find("source"); it != manifest.end()) {
    if (it->is_string()) source = it->get<std::string>();
    else problems.push_back("manifest: field 'source' must be a string");
  }
  const auto* classes_json = require("classes", [](const json& j) { return j.is_array(); }, "an array");
  if (classes_json && classes_json->empty()) problems.push_back("manifest: class list is empty");
  if (!problems.empty()) return out;

  std::vector<ManifestClass> classes;
  std::unordered_set<std::string> seen;
  for (std::size_t pos = 0; pos < classes_json->size(); ++pos) {
    const json& entry = (*classes_json)[pos];
    const std::string where = "manifest: classes[" + std::to_string(pos) + "]";
    if (!entry.is_object()) {
      problems.push_back(where + " is not an object");
      continue;
    }
    ManifestClass cls;
    auto id = entry.find("id");
    if (id == entry.end() || !id->is_number_integer()) {
      problems.push_back(where + ": missing integer 'id'");
    } else if (id->get<long long>() != static_cast<long long>(pos)) {
      problems.push_back(where + ": id " + id->dump() + " does not equal its position " + std::to_string(pos));
    }
    auto name = entry.find("name");
    if (name == entry.end() || !name->is_string() || name->get<std::string>().empty()) {
      problems.push_back(where + ": missing or empty 'name'");
    } else {
      cls.name = name->get<std::string>();
      if (!seen.insert(cls.name).second) problems.push_back(where + ": duplicate class name '" + cls.name + "'");
    }
    auto n = entry.find("n_vectors");
    if (n == entry.end() || !n->is_number_integer() || n->get<long long>() < 1) {
      problems.push_back(where + " ('" + cls.name + "'): 'n_vectors' must be an integer >= 1");
    } else {
      cls.n_vectors = n->get<std::size_t>();
      if (modality == Modality::text && cls.n_vectors != 1) {
        problems.push_back(where + " ('" + cls.name + "'): text sets need exactly 1 vector per class, got " +
                           std::to_string(cls.n_vectors));
      }
    }
    classes.push_back(std::move(cls));
  }
  if (!problems.empty()) return out;

  const std::size_t total = std::accumulate(classes.begin(), classes.end(), std::size_t{0},
                                            [](std::size_t acc, const ManifestClass& c) { return acc + c.n_vectors; });
  const fs::path blob_path = dir / vector_file;
  std::error_code ec;
  const auto actual = fs::file_size(blob_path, ec);
  if (ec) {
    problems.push_back("missing vector file: " + blob_path.string());
    return out;
  }
  const std::size_t expected = 4 * static_cast<std::size_t>(dim) * total;
  if (actual != expected) {
    std::ostringstream msg;
    msg << "size mismatch in " << blob_path.string() << ": expected " << expected << " bytes (4 x dim " << dim
        << " x " << total << " vectors), found " << actual << " bytes";
    problems.push_back(msg.str());
    return out;
  }

  std::vector<unsigned char> bytes(expected);
  std::ifstream blob(blob_path, std::ios::binary);
  blob.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
  if (!blob) {
    problems.push_back("failed reading " + blob_path.string());
    return out;
  }
  RowMatrixF data(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(dim));
  float* dst = data.data();
  for (std::size_t i = 0; i < total * static_cast<std::size_t>(dim); ++i) dst[i] = decode_f32le(&bytes[4 * i]);
  check_finite(data, classes, problems);
  if (!problems.empty()) return out;

  std::vector<std::string> names;
  std::vector<std::size_t> counts;
  for (auto& c : classes) {
    names.push_back(std::move(c.name));
    counts.push_back(c.n_vectors);
  }
  out.set.emplace(*modality, ClassRegistry(std::move(names)), std::move(counts), std::move(data), std::move(source));
  return out;
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::text ? "text" : "audio"; }

Modality parse_modality(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "audio") return Modality::audio;
  throw ArgumentError("unknown modality '" + std::string(s) + "'");
}

ClassRegistry::ClassRegistry(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw DataError("class registry must be non-empty");
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw DataError("class " + std::to_string(i) + " has an empty name");
    if (!index_.emplace(names_[i], static_cast<ClassId>(i)).second) {
      throw DataError("duplicate class name '" + names_[i] + "'");
    }
  }
}

std::optional<ClassId> ClassRegistry::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ClassId ClassRegistry::id_of(std::string_view name) const {
  if (auto id = find(name)) return *id;
  throw DataError("unknown class '" + std::string(name) + "'");
}

EmbeddingSet::EmbeddingSet(Modality modality, ClassRegistry registry, std::vector<std::size_t> counts,
                           RowMatrixF data, std::string source)
    : modality_(modality), registry_(std::move(registry)), data_(std::move(data)), source_(std::move(source)) {
  if (registry_.empty()) throw DataError("embedding set needs at least one class");
  if (data_.cols() <= 0) throw DataError("embedding dimension must be positive");
  if (counts.size() != registry_.size()) {
    throw DataError("got " + std::to_string(counts.size()) + " class counts for " +
                    std::to_string(registry_.size()) + " classes");
  }
  offsets_.assign(1, 0);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] < 1) throw DataError("class '" + registry_.name(c) + "' has no vectors");
    if (modality_ == Modality::text && counts[c] != 1) {
      throw DataError("text class '" + registry_.name(c) + "' must have exactly 1 vector, has " +
                      std::to_string(counts[c]));
    }
    offsets_.push_back(offsets_.back() + counts[c]);
  }
  if (offsets_.back() != static_cast<std::size_t>(data_.rows())) {
    throw DataError("class counts sum to " + std::to_string(offsets_.back()) + " but data has " +
                    std::to_string(data_.rows()) + " rows");
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t j = 0; j < counts[c]; ++j) {
      if (!data_.row(static_cast<Eigen::Index>(offsets_[c] + j)).allFinite()) {
        throw DataError("class '" + registry_.name(c) + "' clip " + std::to_string(j) + " has non-finite entries");
      }
    }
  }
}

std::vector<std::size_t> EmbeddingSet::counts() const {
  std::vector<std::size_t> out(num_classes());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = num_vectors(static_cast<ClassId>(c));
  return out;
}

Eigen::VectorXd EmbeddingSet::vector(ClassId c, std::size_t j) const {
  if (j >= num_vectors(c)) throw ArgumentError("clip index out of range");
  return data_.row(static_cast<Eigen::Index>(offsets_[c] + j)).transpose().cast<double>();
}

Eigen::MatrixXd EmbeddingSet::class_rows(ClassId c) const {
  return data_.middleRows(static_cast<Eigen::Index>(offsets_.at(c)), static_cast<Eigen::Index>(num_vectors(c)))
      .cast<double>();
}

bool EmbeddingSet::operator==(const EmbeddingSet& other) const {
  if (modality_ != other.modality_ || !(registry_ == other.registry_) || offsets_ != other.offsets_ ||
      source_ != other.source_ || data_.rows() != other.data_.rows() || data_.cols() != other.data_.cols()) {
    return false;
  }
  // Bitwise comparison so that -0.0 and 0.0 are distinguished.
  for (Eigen::Index i = 0; i < data_.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(data_.data()[i]) != std::bit_cast<std::uint32_t>(other.data_.data()[i])) {
      return false;
    }
  }
  return true;
}

EmbeddingSet load_set(const fs::path& dir) {
  auto parsed = parse_dir(dir);
  if (!parsed.problems.empty()) {
    throw DataError("invalid EMBD directory " + dir.string() + ":\n" + join_lines(parsed.problems));
  }
  return std::move(*parsed.set);
}

std::vector<std::string> validate_dir(const fs::path& dir) {
  try {
    return parse_dir(dir).problems;
  } catch (const Error& e) {
    return {e.what()};
  }
}

void save_set(const EmbeddingSet& set, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());

  ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["modality"] = std::string(to_string(set.modality()));
  manifest["dim"] = set.dim();
  manifest["dtype"] = "f32le";
  manifest["vector_file"] = "data.bin";
  manifest["source"] = set.source();
  auto& classes = manifest["classes"] = ordered_json::array();
  for (std::size_t c = 0; c < set.num_classes(); ++c) {
    ordered_json entry;
    entry["id"] = c;
    entry["name"] = set.registry().name(static_cast<ClassId>(c));
    entry["n_vectors"] = set.num_vectors(static_cast<ClassId>(c));
    classes.push_back(std::move(entry));
  }

  {
    std::ofstream out(dir / kManifestName, std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw Error("cannot write " + (dir / kManifestName).string());
  }
  const auto n = static_cast<std::size_t>(set.data().size());
  std::vector<char> bytes(4 * n);
  for (std::size_t i = 0; i < n; ++i) encode_f32le(set.data().data()[i], &bytes[4 * i]);
  std::ofstream out(dir / "data.bin", std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + (dir / "data.bin").string());
}

ClassMeanSet class_means(const EmbeddingSet& audio) {
  if (audio.modality() != Modality::audio) throw ArgumentError("class_means needs an audio set");
  const auto n = static_cast<Eigen::Index>(audio.num_classes());
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(n, audio.dim());
  const auto& data = audio.data();
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto count = audio.num_vectors(static_cast<ClassId>(c));
    const auto first = static_cast<Eigen::Index>(audio.offset(static_cast<ClassId>(c)));
    for (Eigen::Index k = 0; k < data.cols(); ++k) {
      double sum = 0.0;
      for (std::size_t j = 0; j < count; ++j) sum += static_cast<double>(data(first + static_cast<Eigen::Index>(j), k));
      means(c, k) = sum / static_cast<double>(count);
    }
  }
  return {audio.registry(), std::move(means)};
}

EmbeddingSet subset(const EmbeddingSet& set, std::span<const ClassId> ids) {
  if (ids.empty()) throw ArgumentError("subset needs at least one class id");
  std::vector<std::string> names;
  std::vector<std::size_t> counts;
  std::size_t rows = 0;
  for (const ClassId id : ids) {
    if (id >= set.num_classes()) {
      throw ArgumentError("unknown class id " + std::to_string(id) + " (set has " +
                          std::to_string(set.num_classes()) + " classes)");
    }
    names.push_back(set.registry().name(id));
    counts.push_back(set.num_vectors(id));
    rows += counts.back();
  }
  RowMatrixF data(static_cast<Eigen::Index>(rows), set.dim());
  Eigen::Index row = 0;
  for (const ClassId id : ids) {
    const auto n = static_cast<Eigen::Index>(set.num_vectors(id));
    data.middleRows(row, n) = set.data().middleRows(static_cast<Eigen::Index>(set.offset(id)), n);
    row += n;
  }
  return EmbeddingSet(set.modality(), ClassRegistry(std::move(names)), std::move(counts), std::move(data),
                      set.source());
}

std::vector<ClassId> map_by_name(const ClassRegistry& from, const ClassRegistry& to, std::span<const ClassId> ids) {
  std::vector<ClassId> out;
  std::vector<std::string> missing;
  out.reserve(ids.size());
  for (const ClassId id : ids) {
    const auto& name = from.name(id);
    if (auto found = to.find(name)) out.push_back(*found);
    else missing.push_back(name);
  }
  if (!missing.empty()) {
    std::string msg = "classes missing by name:";
    for (const auto& m : missing) msg += " '" + m + "'";
    throw DataError(msg);
  }
  return out;
}

}  // namespace soundprobe

namespace soundprobe {

RetrievalSet make_retrieval_set(const EmbeddingSet& text) {
  if (text.modality() != Modality::text) throw ArgumentError("retrieval sets are built from text embeddings");
  return {text.registry(), text.data().cast<double>()};
}

RetrievalSet restrict_rows(const RetrievalSet& set, std::span<const ClassId> ids) {
  if (ids.empty()) throw ArgumentError("restrict_rows needs at least one class id");
  std::vector<std::string> names;
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(ids.size()), set.text.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= set.size()) throw ArgumentError("unknown class id " + std::to_string(ids[i]));
    names.push_back(set.registry.name(ids[i]));
    rows.row(static_cast<Eigen::Index>(i)) = set.text.row(ids[i]);
  }
  return {ClassRegistry(std::move(names)), std::move(rows)};
}

}  // namespace soundprobe
