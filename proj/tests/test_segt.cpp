#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "imloss/io_util.hpp"
#include "imloss/segt.hpp"

using namespace imloss;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("imloss_segt_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("header layout is one JSON line then the payload") {
  Tensor<float> t({2, 1}, Vector<float>::Constant(2, 1.0f));
  const std::string bytes = encode_segt(t);
  const auto nl = bytes.find('\n');
  REQUIRE(nl != std::string::npos);
  CHECK(bytes.substr(0, nl) == R"({"dtype":"f32","magic":"SEGT1","shape":[2,1]})");
  CHECK(bytes.size() == nl + 1 + 8);
  // 1.0f little-endian.
  CHECK(static_cast<unsigned char>(bytes[nl + 1]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[nl + 4]) == 0x3f);
}

TEST_CASE("bit-exact round trip for every dtype") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;

  Tensor<double> d({3, 4, 2});
  for (Index k = 0; k < d.size(); ++k) d.data()[k] = n(rng);
  d.data()[0] = -0.0;
  d.data()[1] = std::numeric_limits<double>::denorm_min();
  d.data()[2] = std::numeric_limits<double>::infinity();
  Tensor<float> f({5, 3});
  for (Index k = 0; k < f.size(); ++k) f.data()[k] = static_cast<float>(n(rng));
  Tensor<std::uint8_t> u({7});
  for (Index k = 0; k < u.size(); ++k) u.data()[k] = static_cast<std::uint8_t>(k * 37);

  for (const AnyTensor& t : {AnyTensor(d), AnyTensor(f), AnyTensor(u)}) {
    const std::string bytes = encode_segt(t);
    const AnyTensor back = decode_segt(bytes);
    CHECK(back.index() == t.index());
    CHECK(encode_segt(back) == bytes);
  }
  CHECK(std::signbit(std::get<Tensor<double>>(decode_segt(encode_segt(d))).data()[0]));
}

TEST_CASE("NaN payload survives bit-exactly") {
  Tensor<double> d({2});
  d.data()[0] = std::numeric_limits<double>::quiet_NaN();
  const std::string bytes = encode_segt(d);
  CHECK(encode_segt(decode_segt(bytes)) == bytes);
}

TEST_CASE("malformed files are rejected") {
  CHECK_THROWS_AS(decode_segt("no newline"), ValidationError);
  CHECK_THROWS_AS(decode_segt("not json\n"), ValidationError);
  CHECK_THROWS_AS(decode_segt(R"({"magic":"SEGT2","dtype":"f32","shape":[1]})" "\n\0\0\0\0"), ValidationError);
  CHECK_THROWS_AS(decode_segt(R"({"magic":"SEGT1","dtype":"i32","shape":[1]})" "\n\0\0\0\0"), ValidationError);
  CHECK_THROWS_AS(decode_segt(R"({"magic":"SEGT1","dtype":"f32","shape":[2]})" "\n\0\0\0\0"), ValidationError);
  CHECK_THROWS_AS(decode_segt(R"({"magic":"SEGT1","dtype":"f32","shape":[0]})" "\n"), ValidationError);
}

TEST_CASE("files round trip through disk and convert on read") {
  const auto dir = temp_dir("disk");
  Tensor<std::uint8_t> u({2, 2});
  u.data() << 0, 1, 2, 3;
  write_segt(dir / "u.segt", u);
  CHECK(std::get<Tensor<std::uint8_t>>(read_segt(dir / "u.segt")) == u);
  const auto as_double = read_segt_as<double>(dir / "u.segt");
  CHECK(as_double.data()[3] == 3.0);
  // No temp files left behind.
  int files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  CHECK(files == 1);
}

TEST_CASE("fnv1a is stable") {
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}
