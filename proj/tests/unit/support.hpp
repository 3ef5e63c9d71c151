#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "soundprobe/embedstore.hpp"
#include "soundprobe/random.hpp"

namespace testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("soundprobe-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Eigen::MatrixXd gaussian(soundprobe::Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = soundprobe::standard_normal(rng);
  return m;
}

inline std::vector<std::string> class_names(std::size_t n, const std::string& prefix = "c") {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

/// Random set with `counts[c]` Gaussian vectors for class c.
inline soundprobe::EmbeddingSet random_set(std::uint64_t seed, soundprobe::Modality modality,
                                           std::vector<std::size_t> counts, int dim,
                                           const std::string& prefix = "c") {
  soundprobe::Rng rng(seed);
  std::size_t total = 0;
  for (auto c : counts) total += c;
  soundprobe::RowMatrixF data(static_cast<Eigen::Index>(total), dim);
  for (Eigen::Index r = 0; r < data.rows(); ++r)
    for (Eigen::Index c = 0; c < dim; ++c) data(r, c) = static_cast<float>(soundprobe::standard_normal(rng));
  soundprobe::ClassRegistry registry(class_names(counts.size(), prefix));
  return soundprobe::EmbeddingSet(modality, std::move(registry), std::move(counts), std::move(data), "random");
}

/// `real` with every class outside `keep` taken from `fake` (same registry).
inline soundprobe::EmbeddingSet splice_classes(const soundprobe::EmbeddingSet& real, const soundprobe::EmbeddingSet& fake,
                                               const std::vector<soundprobe::ClassId>& keep) {
  using soundprobe::ClassId;
  std::vector<std::size_t> counts;
  std::vector<Eigen::VectorXf> rows;
  for (ClassId c = 0; c < static_cast<ClassId>(real.num_classes()); ++c) {
    const bool kept = std::find(keep.begin(), keep.end(), c) != keep.end();
    const soundprobe::EmbeddingSet& src = kept ? real : fake;
    counts.push_back(src.num_vectors(c));
    for (std::size_t j = 0; j < src.num_vectors(c); ++j)
      rows.push_back(src.data().row(static_cast<Eigen::Index>(src.offset(c) + j)).transpose());
  }
  soundprobe::RowMatrixF data(static_cast<Eigen::Index>(rows.size()), real.dim());
  for (std::size_t r = 0; r < rows.size(); ++r) data.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  return soundprobe::EmbeddingSet(real.modality(), real.registry(), std::move(counts), std::move(data), real.source());
}

}  // namespace testing
