#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <random>

#include "lexlm/gguf.hpp"
#include "lexlm/quant.hpp"
#include "oracles.hpp"

using namespace lexlm;
namespace fs = std::filesystem;

namespace {

gguf::Document sample_doc() {
  gguf::Document d;
  d.set("general.architecture", {std::string("gpt2")});
  d.set("u8", {std::uint8_t(7)});
  d.set("i16", {std::int16_t(-300)});
  d.set("f64", {2.5});
  d.set("flag", {true});
  gguf::Array arr{gguf::ValueType::String, {}};
  arr.items.push_back({std::string("a")});
  arr.items.push_back({std::string("bc")});
  d.set("names", {arr});
  d.tensors.push_back({"a.weight", oracle::random_tensor({3, 5}, 1)});
  d.tensors.push_back({"b.weight", quantize_q8_0(oracle::random_tensor({4, 64}, 2))});
  d.tensors.push_back({"c.bias", oracle::random_tensor({7}, 3)});
  return d;
}

// Offset just past the tensor name inside the directory.
std::size_t after_name(const std::vector<std::uint8_t>& buf, const std::string& name) {
  auto it = std::search(buf.begin(), buf.end(), name.begin(), name.end());
  REQUIRE(it != buf.end());
  return std::size_t(it - buf.begin()) + name.size();
}

template <class T>
void poke(std::vector<std::uint8_t>& buf, std::size_t at, T v) {
  std::memcpy(buf.data() + at, &v, sizeof v);
}

gguf::ErrorCode code_of(const std::vector<std::uint8_t>& buf) {
  try {
    gguf::parse(buf);
  } catch (const gguf::FormatError& e) {
    return e.code();
  }
  FAIL("parse unexpectedly succeeded");
  return gguf::ErrorCode::Io;
}

}  // namespace

TEST_CASE("roundtrip is bit-identical") {
  const auto doc = sample_doc();
  const auto bytes = gguf::serialize(doc);
  CHECK(bytes.size() == gguf::planned_size(doc));
  const auto back = gguf::parse(bytes);
  CHECK(back.metadata == doc.metadata);
  REQUIRE(back.tensors.size() == 3);
  CHECK(std::get<Tensor>(back.tensors[0].data) == std::get<Tensor>(doc.tensors[0].data));
  CHECK(std::get<QuantizedTensor>(back.tensors[1].data) == std::get<QuantizedTensor>(doc.tensors[1].data));
  CHECK(gguf::serialize(back) == bytes);
}

TEST_CASE("file roundtrip") {
  const fs::path p = fs::temp_directory_path() / "lexlm_test_roundtrip.gguf";
  const auto doc = sample_doc();
  gguf::write_file(doc, p);
  CHECK(fs::file_size(p) == gguf::planned_size(doc));
  CHECK(gguf::serialize(gguf::read_file(p)) == gguf::serialize(doc));
  fs::remove(p);
  CHECK_THROWS_AS(gguf::read_file(p), DataError);
}

TEST_CASE("empty document") {
  const auto bytes = gguf::serialize(gguf::Document{});
  CHECK(bytes.size() == 32);  // 24-byte header padded to the alignment
  const auto back = gguf::parse(bytes);
  CHECK(back.tensors.empty());
  CHECK(back.metadata.empty());
}

TEST_CASE("layout: header, reversed dims, alignment") {
  const auto doc = sample_doc();
  const auto bytes = gguf::serialize(doc);
  CHECK(std::memcmp(bytes.data(), "GGUF", 4) == 0);
  std::uint32_t ver;
  std::memcpy(&ver, bytes.data() + 4, 4);
  CHECK(ver == 3);
  std::size_t at = after_name(bytes, "a.weight");
  std::uint32_t nd;
  std::uint64_t d0, d1;
  std::memcpy(&nd, bytes.data() + at, 4);
  std::memcpy(&d0, bytes.data() + at + 4, 8);
  std::memcpy(&d1, bytes.data() + at + 12, 8);
  CHECK(nd == 2);
  CHECK(d0 == 5);  // contiguous axis first
  CHECK(d1 == 3);
  // Sizes: 3*5*4 = 60 -> 64, Q8_0 4*2*34 = 272 -> 288, 7*4 = 28 -> 32.
  CHECK(gguf::tensor_bytes(gguf::TensorType::Q8_0, 256) == 272);
  const std::size_t payload = 64 + 288 + 32;
  CHECK((bytes.size() - payload) % 32 == 0);
}

TEST_CASE("distinct errors") {
  const auto good = gguf::serialize(sample_doc());
  SUBCASE("bad magic") {
    auto b = good;
    b[3] = 'X';
    CHECK(code_of(b) == gguf::ErrorCode::BadMagic);
    try {
      gguf::parse(b);
    } catch (const gguf::FormatError& e) {
      CHECK(std::string(e.what()).find("not a GGUF file") != std::string::npos);
    }
  }
  SUBCASE("version") {
    auto b = good;
    poke<std::uint32_t>(b, 4, 2);
    CHECK(code_of(b) == gguf::ErrorCode::UnsupportedVersion);
  }
  SUBCASE("truncated payload names the tensor") {
    auto b = good;
    b.resize(b.size() - 40);
    try {
      gguf::parse(b);
      FAIL("expected error");
    } catch (const gguf::FormatError& e) {
      CHECK(e.code() == gguf::ErrorCode::Truncated);
      CHECK(std::string(e.what()).find("c.bias") != std::string::npos);
    }
  }
  SUBCASE("misaligned offset") {
    auto b = good;
    const std::size_t at = after_name(b, "b.weight");
    poke<std::uint64_t>(b, at + 4 + 16 + 4, 68);
    CHECK(code_of(b) == gguf::ErrorCode::Misaligned);
  }
  SUBCASE("unknown tensor type") {
    auto b = good;
    const std::size_t at = after_name(b, "c.bias");
    poke<std::uint32_t>(b, at + 4 + 8, 99);
    CHECK(code_of(b) == gguf::ErrorCode::UnknownTensorType);
  }
  SUBCASE("huge declared counts are rejected without allocating") {
    auto b = good;
    poke<std::uint64_t>(b, 8, ~0ULL);
    CHECK_THROWS_AS(gguf::parse(b), gguf::FormatError);
    b = good;
    poke<std::uint64_t>(b, 16, 1ULL << 60);
    CHECK_THROWS_AS(gguf::parse(b), gguf::FormatError);
  }
}

TEST_CASE("single-byte corruption never crashes") {
  const auto good = gguf::serialize(sample_doc());
  std::mt19937_64 g(99);
  int errors = 0, changed = 0;
  for (int i = 0; i < 1000; ++i) {
    auto b = good;
    const std::size_t at = g() % b.size();
    b[at] ^= std::uint8_t(1 + g() % 255);
    try {
      const auto d = gguf::parse(b);
      CHECK(gguf::serialize(d) != good);
      ++changed;
    } catch (const gguf::FormatError&) {
      ++errors;
    }
  }
  CHECK(errors + changed == 1000);
}

TEST_CASE("typed getters") {
  const auto doc = sample_doc();
  CHECK(gguf::get_string(doc, "general.architecture") == "gpt2");
  CHECK(gguf::get_uint(doc, "u8") == 7);
  CHECK(gguf::get_float(doc, "f64") == 2.5);
  CHECK(gguf::get_bool(doc, "flag"));
  CHECK_THROWS_AS(gguf::get_uint(doc, "i16"), gguf::FormatError);
  CHECK_THROWS_AS(gguf::get_string(doc, "missing"), gguf::FormatError);
}
