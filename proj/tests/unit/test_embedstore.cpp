#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include <json.hpp>

#include "soundprobe/embedstore.hpp"
#include "soundprobe/error.hpp"
#include "support.hpp"

using namespace soundprobe;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Writes an EMBD directory by hand, independent of save_set.
void write_embd(const fs::path& dir, const std::string& modality, int dim,
                const std::vector<std::pair<std::string, int>>& classes, const std::vector<float>& values) {
  fs::create_directories(dir);
  nlohmann::json m = {{"format_version", 1}, {"modality", modality}, {"dim", dim},
                      {"dtype", "f32le"},    {"vector_file", "data.bin"}, {"source", "hand"}};
  m["classes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < classes.size(); ++i)
    m["classes"].push_back({{"id", i}, {"name", classes[i].first}, {"n_vectors", classes[i].second}});
  std::ofstream(dir / "manifest.json") << m.dump();
  std::string blob;
  for (const float v : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  std::ofstream(dir / "data.bin", std::ios::binary) << blob;
}

}  // namespace

TEST_CASE("minimal hand-written set loads bit-exactly") {
  TempDir tmp("embd");
  write_embd(tmp / "s", "text", 3, {{"car", 1}, {"harp", 1}}, {1.0f, -2.5f, 0.1f, 3.0f, 4.0f, 1e-30f});
  CHECK(fs::file_size(tmp / "s" / "data.bin") == 24);
  const EmbeddingSet s = load_set(tmp / "s");
  CHECK(s.modality() == Modality::text);
  CHECK(s.dim() == 3);
  CHECK(s.total_vectors() == 2);
  CHECK(s.registry().name(1) == "harp");
  CHECK(s.data()(0, 2) == 0.1f);
  CHECK(s.data()(1, 2) == 1e-30f);
  CHECK(validate_dir(tmp / "s").empty());
}

TEST_CASE("save then load round-trips and saves are byte-identical") {
  TempDir tmp("embd");
  const EmbeddingSet a = testing::random_set(11, Modality::audio, {3, 1, 7, 2}, 5);
  save_set(a, tmp / "a");
  const EmbeddingSet b = load_set(tmp / "a");
  CHECK(a == b);
  CHECK(std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.data().size()) == 0);
  save_set(b, tmp / "b");
  CHECK(testing::slurp(tmp / "a" / "data.bin") == testing::slurp(tmp / "b" / "data.bin"));
  CHECK(testing::slurp(tmp / "a" / "manifest.json") == testing::slurp(tmp / "b" / "manifest.json"));

  // Blob layout: row-major little-endian floats in class order.
  const std::string blob = testing::slurp(tmp / "a" / "data.bin");
  REQUIRE(blob.size() == 4 * 5 * 13);
  for (std::size_t i = 0; i < 13 * 5; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[4 * i + k])) << (8 * k);
    float v;
    std::memcpy(&v, &bits, 4);
    CHECK(v == a.data()(static_cast<Eigen::Index>(i / 5), static_cast<Eigen::Index>(i % 5)));
  }
}

TEST_CASE("manifest carries the documented fields") {
  TempDir tmp("embd");
  save_set(testing::random_set(2, Modality::text, {1, 1}, 4), tmp / "t");
  const auto m = nlohmann::json::parse(testing::slurp(tmp / "t" / "manifest.json"));
  CHECK(m["format_version"] == 1);
  CHECK(m["modality"] == "text");
  CHECK(m["dim"] == 4);
  CHECK(m["dtype"] == "f32le");
  CHECK(m["vector_file"] == "data.bin");
  CHECK(m["classes"][1]["id"] == 1);
  CHECK(m["classes"][1]["name"] == "c1");
  CHECK(m["classes"][1]["n_vectors"] == 1);
}

TEST_CASE("truncated blob reports expected and actual byte counts") {
  TempDir tmp("embd");
  write_embd(tmp / "s", "audio", 3, {{"a", 2}, {"b", 1}}, std::vector<float>(8, 1.0f));
  const auto problems = validate_dir(tmp / "s");
  REQUIRE(problems.size() == 1);
  CHECK(problems[0].find("expected 36 bytes") != std::string::npos);
  CHECK(problems[0].find("found 32 bytes") != std::string::npos);
  CHECK(problems[0].find("4 x dim 3 x 3 vectors") != std::string::npos);
  CHECK_THROWS_AS(load_set(tmp / "s"), DataError);
}

TEST_CASE("non-finite entries are reported with class and clip") {
  TempDir tmp("embd");
  std::vector<float> v(12, 0.5f);
  v[9] = std::numeric_limits<float>::quiet_NaN();  // row 4: class "b", clip 1, coordinate 1
  v[3] = std::numeric_limits<float>::infinity();    // class "a", clip 1, coordinate 0
  write_embd(tmp / "s", "audio", 2, {{"a", 3}, {"b", 3}}, v);
  const auto problems = validate_dir(tmp / "s");
  REQUIRE(problems.size() == 2);
  CHECK(problems[0].find("class 'a' clip 1") != std::string::npos);
  CHECK(problems[0].find("coordinate 1") != std::string::npos);
  CHECK(problems[1].find("class 'b' clip 1") != std::string::npos);
  CHECK(problems[1].find("byte offset 36") != std::string::npos);
  CHECK_THROWS_AS(load_set(tmp / "s"), DataError);
}

TEST_CASE("structural manifest errors") {
  TempDir tmp("embd");
  CHECK(validate_dir(tmp / "nothing").size() == 1);

  write_embd(tmp / "dup", "audio", 1, {{"a", 1}, {"a", 1}}, {1.0f, 2.0f});
  const auto dup = validate_dir(tmp / "dup");
  REQUIRE(!dup.empty());
  CHECK(dup[0].find("duplicate class name 'a'") != std::string::npos);

  write_embd(tmp / "text2", "text", 1, {{"a", 2}}, {1.0f, 2.0f});
  CHECK(!validate_dir(tmp / "text2").empty());

  fs::create_directories(tmp / "bad");
  std::ofstream(tmp / "bad" / "manifest.json") << "{ not json";
  const auto bad = validate_dir(tmp / "bad");
  REQUIRE(bad.size() == 1);
  CHECK(bad[0].find("corrupt manifest") != std::string::npos);
}

TEST_CASE("registry and set invariants") {
  CHECK_THROWS_AS(ClassRegistry(std::vector<std::string>{}), DataError);
  CHECK_THROWS_AS(ClassRegistry({"a", ""}), DataError);
  CHECK_THROWS_AS(ClassRegistry({"a", "a"}), DataError);
  const ClassRegistry r({"x", "y"});
  CHECK(r.id_of("y") == 1);
  CHECK(!r.find("z"));
  CHECK_THROWS_AS(r.id_of("z"), DataError);

  RowMatrixF two(2, 2);
  two << 1, 2, 3, 4;
  CHECK_THROWS_AS(EmbeddingSet(Modality::text, ClassRegistry({"a"}), {2}, two), DataError);
  CHECK_THROWS_AS(EmbeddingSet(Modality::audio, ClassRegistry({"a", "b"}), {2, 0}, two), DataError);
  two(1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(EmbeddingSet(Modality::audio, ClassRegistry({"a"}), {2}, two), DataError);
}

TEST_CASE("class means") {
  SUBCASE("two clips") {
    RowMatrixF d(2, 2);
    d << 1, 0, 3, 0;
    const auto m = class_means(EmbeddingSet(Modality::audio, ClassRegistry({"a"}), {2}, d));
    CHECK(m.means(0, 0) == 2.0);
    CHECK(m.means(0, 1) == 0.0);
  }
  SUBCASE("single clip is itself") {
    const EmbeddingSet s = testing::random_set(4, Modality::audio, {1, 1}, 3);
    const auto m = class_means(s);
    for (int k = 0; k < 3; ++k) CHECK(m.means(1, k) == static_cast<double>(s.data()(1, k)));
  }
  SUBCASE("brute-force oracle") {
    const EmbeddingSet s = testing::random_set(5, Modality::audio, {20, 20, 20, 20, 20}, 6);
    const auto m = class_means(s);
    CHECK(m.registry == s.registry());
    for (ClassId c = 0; c < 5; ++c) {
      for (int k = 0; k < 6; ++k) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 20; ++j) sum += static_cast<double>(s.data()(static_cast<Eigen::Index>(c * 20 + j), k));
        CHECK(m.means(c, k) == doctest::Approx(sum / 20.0).epsilon(1e-15));
      }
    }
  }
  SUBCASE("text sets are rejected") {
    CHECK_THROWS(class_means(testing::random_set(1, Modality::text, {1, 1}, 2)));
  }
}

TEST_CASE("subset") {
  const EmbeddingSet s = testing::random_set(6, Modality::audio, {2, 3, 1, 4, 2, 2, 5, 1, 3, 2}, 4);
  SUBCASE("identity") {
    std::vector<ClassId> all(10);
    for (ClassId i = 0; i < 10; ++i) all[i] = i;
    CHECK(subset(s, all) == s);
  }
  SUBCASE("empty is an error") { CHECK_THROWS(subset(s, std::vector<ClassId>{})); }
  SUBCASE("unknown id is an error") { CHECK_THROWS(subset(s, std::vector<ClassId>{10})); }
  SUBCASE("element-wise oracle") {
    const std::vector<ClassId> ids{7, 2, 9, 3};
    const EmbeddingSet sub = subset(s, ids);
    REQUIRE(sub.num_classes() == 4);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      CHECK(sub.registry().name(static_cast<ClassId>(i)) == s.registry().name(ids[i]));
      REQUIRE(sub.num_vectors(static_cast<ClassId>(i)) == s.num_vectors(ids[i]));
      for (std::size_t j = 0; j < s.num_vectors(ids[i]); ++j)
        CHECK(sub.vector(static_cast<ClassId>(i), j) == s.vector(ids[i], j));
    }
    // Nested selection equals the composed selection.
    const std::vector<ClassId> inner{3, 0};
    const std::vector<ClassId> composed{3, 7};
    CHECK(subset(sub, inner) == subset(s, composed));
  }
}

TEST_CASE("map_by_name lists every missing class") {
  const ClassRegistry from({"a", "b", "c", "d"});
  const ClassRegistry to({"d", "a"});
  const std::vector<ClassId> ok_ids{0, 3};
  CHECK(map_by_name(from, to, ok_ids) == std::vector<ClassId>{1, 0});
  const std::vector<ClassId> bad{0, 1, 2};
  try {
    map_by_name(from, to, bad);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("b") != std::string::npos);
    CHECK(msg.find("c") != std::string::npos);
  }
}

TEST_CASE("retrieval sets") {
  const EmbeddingSet t = testing::random_set(8, Modality::text, {1, 1, 1, 1}, 3);
  const RetrievalSet r = make_retrieval_set(t);
  CHECK(r.size() == 4);
  CHECK(r.text(2, 1) == static_cast<double>(t.data()(2, 1)));
  const std::vector<ClassId> ids{3, 1};
  const RetrievalSet sub = restrict_rows(r, ids);
  CHECK(sub.registry.names() == std::vector<std::string>{"c3", "c1"});
  CHECK(sub.text.row(0) == r.text.row(3));
  CHECK_THROWS(make_retrieval_set(testing::random_set(8, Modality::audio, {1, 2}, 3)));
}
