#include <doctest.h>

#include "lbi/common.hpp"

using namespace lbi;

TEST_SUITE_BEGIN("common");

TEST_CASE("mix_seed is deterministic and index-sensitive") {
  CHECK(mix_seed(42, 0) == mix_seed(42, 0));
  CHECK(mix_seed(42, 0) != mix_seed(42, 1));
  CHECK(mix_seed(42, 0) != mix_seed(43, 0));
}

TEST_CASE("crc32 matches the standard check value") {
  const char* s = "123456789";
  CHECK(crc32_bytes(s, 9) == 0xCBF43926u);
  CHECK(crc32_tag(s, 9) == "cbf43926");
}

TEST_CASE("fnv1a64 matches published basis and sample") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("json file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "lbi_common_test.json";
  json j{{"a", 1}, {"b", {1, 2, 3}}};
  write_json_file(path, j);
  CHECK(read_json_file(path) == j);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_json_file(path), ConfigError);
}

TEST_SUITE_END();
