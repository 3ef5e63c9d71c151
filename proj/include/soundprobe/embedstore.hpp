#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace soundprobe {

using ClassId = std::uint32_t;

enum class Modality { text, audio };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

/// Ordered class names; a class id is its position in the list.
class ClassRegistry {
 public:
  ClassRegistry() = default;
  /// Throws DataError on an empty list, empty names, or duplicate names.
  explicit ClassRegistry(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  bool empty() const { return names_.empty(); }
  const std::string& name(ClassId id) const { return names_.at(id); }
  const std::vector<std::string>& names() const { return names_; }
  std::optional<ClassId> find(std::string_view name) const;
  /// Like find() but throws DataError for unknown names.
  ClassId id_of(std::string_view name) const;

  bool operator==(const ClassRegistry& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ClassId> index_;
};

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Modality-tagged vectors grouped by class. Storage mirrors the on-disk blob:
/// one row per vector, classes contiguous in registry order. Immutable once
/// constructed; all arithmetic on it widens to double.
class EmbeddingSet {
 public:
  /// `counts[c]` rows of `data` belong to class c. Validates every invariant
  /// and throws DataError with class/clip context on violation.
  EmbeddingSet(Modality modality, ClassRegistry registry, std::vector<std::size_t> counts,
               RowMatrixF data, std::string source = {});

  Modality modality() const { return modality_; }
  int dim() const { return static_cast<int>(data_.cols()); }
  const ClassRegistry& registry() const { return registry_; }
  const std::string& source() const { return source_; }
  std::size_t num_classes() const { return registry_.size(); }
  std::size_t total_vectors() const { return static_cast<std::size_t>(data_.rows()); }

  std::size_t num_vectors(ClassId c) const { return offsets_.at(c + 1) - offsets_.at(c); }
  /// Row index in data() of the first vector of class c.
  std::size_t offset(ClassId c) const { return offsets_.at(c); }
  const RowMatrixF& data() const { return data_; }
  std::vector<std::size_t> counts() const;

  /// The j-th vector of class c, widened to double.
  Eigen::VectorXd vector(ClassId c, std::size_t j) const;
  /// All vectors of class c as rows, widened to double.
  Eigen::MatrixXd class_rows(ClassId c) const;

  bool operator==(const EmbeddingSet& other) const;

 private:
  Modality modality_;
  ClassRegistry registry_;
  std::vector<std::size_t> offsets_;
  RowMatrixF data_;
  std::string source_;
};

/// Exactly one double-precision vector per class.
struct ClassMeanSet {
  ClassRegistry registry;
  Eigen::MatrixXd means;  // one row per class
};

/// Reads an EMBD directory (manifest.json + f32le blob). Throws DataError
/// naming the first structural problem, or all content problems found.
EmbeddingSet load_set(const std::filesystem::path& dir);

/// Writes manifest.json and the blob into `dir` (created if missing). Output
/// bytes depend only on the set's contents.
void save_set(const EmbeddingSet& set, const std::filesystem::path& dir);

/// Every format and invariant violation found in an EMBD directory. Empty
/// means valid.
std::vector<std::string> validate_dir(const std::filesystem::path& dir);

/// Per-class arithmetic mean in 64-bit, summing clips in stored order.
ClassMeanSet class_means(const EmbeddingSet& audio);

/// Classes `ids` of `set`, re-indexed 0..k-1 in the given order.
EmbeddingSet subset(const EmbeddingSet& set, std::span<const ClassId> ids);

/// Ids in `to` of each class of `from` named in `ids`. Throws DataError listing
/// every name missing from `to`.
std::vector<ClassId> map_by_name(const ClassRegistry& from, const ClassRegistry& to,
                                 std::span<const ClassId> ids);

}  // namespace soundprobe

namespace soundprobe {

/// Candidate text vectors for retrieval: one row per class of `registry`.
/// Rows may be permuted (control task) or restricted to a class subset.
struct RetrievalSet {
  ClassRegistry registry;
  Eigen::MatrixXd text;  // num classes x d1

  int dim() const { return static_cast<int>(text.cols()); }
  std::size_t size() const { return registry.size(); }
  bool operator==(const RetrievalSet& other) const {
    return registry == other.registry && text.rows() == other.text.rows() && text.cols() == other.text.cols() &&
           text == other.text;
  }
};

/// Widens a text set to a RetrievalSet (one row per class).
RetrievalSet make_retrieval_set(const EmbeddingSet& text);

/// Rows `ids` of `set`, re-indexed 0..k-1.
RetrievalSet restrict_rows(const RetrievalSet& set, std::span<const ClassId> ids);

}  // namespace soundprobe
