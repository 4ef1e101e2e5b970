#include <algorithm>
#include <bit>
#include <functional>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "metagpt/error.hpp"
#include "metagpt/tensor_store.hpp"
#include "test_support.hpp"

using namespace metagpt;
using testing::TempDir;

namespace {

void write_raw(const std::filesystem::path& path, const std::string& header, const std::vector<unsigned char>& data) {
  std::ofstream out(path, std::ios::binary);
  std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((n >> (8 * i)) & 0xFF));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

std::vector<unsigned char> f32_bytes(std::initializer_list<float> values) {
  std::vector<unsigned char> out;
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  return out;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("open reports index and parameter count without loading payloads") {
  TempDir dir;
  const auto path = dir / "two.safetensors";
  write_raw(path,
            R"({"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]},"b":{"dtype":"F32","shape":[3],"data_offsets":[16,28]}})",
            f32_bytes({1, 2, 3, 4, 5, 6, 7}));
  const auto h = open_checkpoint(path);
  CHECK(h.total_params() == 7);
  CHECK(h.index().size() == 2);
  CHECK(h.meta("a").shape == Shape{2, 2});
  CHECK(h.metadata().empty());
}

TEST_CASE("open rejects structurally invalid files") {
  TempDir dir;
  const auto path = dir / "bad.safetensors";

  SUBCASE("range past end of file") {
    write_raw(path, R"({"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})", f32_bytes({1, 2}));
    CHECK(error_of([&] { open_checkpoint(path); }).find("truncated payload") != std::string::npos);
  }
  SUBCASE("unsupported dtype") {
    write_raw(path, R"({"a":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})", f32_bytes({1, 2}));
    CHECK(error_of([&] { open_checkpoint(path); }).find("unsupported dtype") != std::string::npos);
  }
  SUBCASE("duplicate names") {
    write_raw(path,
              R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
              f32_bytes({1, 2}));
    CHECK(error_of([&] { open_checkpoint(path); }).find("duplicate") != std::string::npos);
  }
  SUBCASE("overlapping ranges") {
    write_raw(path,
              R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
              f32_bytes({1, 2, 3}));
    CHECK(error_of([&] { open_checkpoint(path); }).find("overlapping") != std::string::npos);
  }
  SUBCASE("byte length disagrees with shape") {
    write_raw(path, R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", f32_bytes({1, 2, 3}));
    CHECK(error_of([&] { open_checkpoint(path); }).find("malformed header") != std::string::npos);
  }
  SUBCASE("garbage JSON") {
    write_raw(path, "{not json", {});
    CHECK(error_of([&] { open_checkpoint(path); }).find("malformed header") != std::string::npos);
  }
  SUBCASE("header length beyond file") {
    std::ofstream out(path, std::ios::binary);
    const unsigned char prefix[8] = {0xff, 0xff, 0, 0, 0, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(prefix), 8);
    out.close();
    CHECK(error_of([&] { open_checkpoint(path); }).find("malformed header") != std::string::npos);
  }
  SUBCASE("no tensors") {
    write_raw(path, R"({"__metadata__":{"k":"v"}})", {});
    CHECK(error_of([&] { open_checkpoint(path); }).find("no tensors") != std::string::npos);
  }
  SUBCASE("missing file is an I/O error") {
    try {
      open_checkpoint(dir / "nope.safetensors");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::io);
    }
  }
}

TEST_CASE("read_tensor decodes each storage dtype") {
  TempDir dir;
  const auto path = dir / "mixed.safetensors";
  // F32 [1.0, -2.5], F16 0x3C00, BF16 0x3F80
  auto data = f32_bytes({1.0f, -2.5f});
  data.insert(data.end(), {0x00, 0x3C, 0x80, 0x3F});
  write_raw(path,
            R"({"f32":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
            R"("f16":{"dtype":"F16","shape":[1],"data_offsets":[8,10]},)"
            R"("bf16":{"dtype":"BF16","shape":[1],"data_offsets":[10,12]}})",
            data);
  const auto h = open_checkpoint(path);
  CHECK(read_tensor(h, "f32").values == std::vector<double>{1.0, -2.5});
  CHECK(read_tensor(h, "f16").values == std::vector<double>{1.0});
  CHECK(read_tensor(h, "bf16").values == std::vector<double>{1.0});
  CHECK(error_of([&] { read_tensor(h, "missing"); }).find("unknown tensor") != std::string::npos);
}

TEST_CASE("non-finite payload is a hard error on read") {
  TempDir dir;
  const auto path = dir / "nan.safetensors";
  write_raw(path, R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", f32_bytes({1.0f, NAN}));
  const auto h = open_checkpoint(path);
  CHECK(error_of([&] { h.read("a"); }).find("non-finite") != std::string::npos);
}

TEST_CASE("write then read round-trips and is byte deterministic") {
  TempDir dir;
  const std::vector<TensorBuffer> tensors = {{"x", {1}, {3.0}}, {"w", {2}, {0.5, -0.25}}};
  write_checkpoint(dir / "a.safetensors", tensors, DType::f32, {{"note", "hi"}});
  write_checkpoint(dir / "b.safetensors", std::vector<TensorBuffer>{tensors[1], tensors[0]}, DType::f32,
                   {{"note", "hi"}});
  CHECK(testing::file_bytes(dir / "a.safetensors") == testing::file_bytes(dir / "b.safetensors"));

  const auto h = open_checkpoint(dir / "a.safetensors");
  CHECK(h.read("x").values == std::vector<double>{3.0});
  CHECK(h.metadata().at("note") == "hi");
  // Contiguous in sorted-name order.
  CHECK(h.meta("w").range == ByteRange{0, 8});
  CHECK(h.meta("x").range == ByteRange{8, 12});
  CHECK(h.data_offset() % 8 == 0);
}

TEST_CASE("narrowing overflow and non-finite values are refused on write") {
  TempDir dir;
  const auto path = dir / "o.safetensors";
  const std::vector<TensorBuffer> big = {{"a", {1}, {70000.0}}};
  CHECK(error_of([&] { write_checkpoint(path, big, DType::f16); }).find("overflow for dtype") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(path));
  CHECK_FALSE(std::filesystem::exists(dir / "o.safetensors.partial"));

  const std::vector<TensorBuffer> bad = {{"a", {1}, {std::nan("")}}};
  CHECK(error_of([&] { write_checkpoint(path, bad, DType::f32); }).find("non-finite") != std::string::npos);

  const std::vector<TensorBuffer> dup = {{"a", {1}, {1.0}}, {"a", {1}, {2.0}}};
  CHECK(error_of([&] { write_checkpoint(path, dup, DType::f32); }).find("duplicate") != std::string::npos);

  CHECK(encode_f16(65504.0) == 0x7BFF);
  CHECK_THROWS_AS(encode_f16(65520.0), Error);
  CHECK_THROWS_AS(encode_f32(1e39), Error);
}

TEST_CASE("half and bfloat16 codecs are exact inverses on every finite pattern") {
  for (std::uint32_t bits = 0; bits <= 0xFFFF; ++bits) {
    const auto b = static_cast<std::uint16_t>(bits);
    const double h = decode_f16(b);
    if (std::isfinite(h)) REQUIRE(encode_f16(h) == b);
    const double bf = decode_bf16(b);
    if (std::isfinite(bf)) REQUIRE(encode_bf16(bf) == b);
  }
  // Round to nearest even between 1 and the next half (1 + 2^-10).
  CHECK(encode_f16(1.0 + std::ldexp(1.0, -11)) == 0x3C00);
  CHECK(encode_f16(1.0 + 3 * std::ldexp(1.0, -11)) == 0x3C02);
  CHECK(decode_f16(0x0001) == std::ldexp(1.0, -24));
}

TEST_CASE("random F32 checkpoints round-trip bit-exactly") {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<TensorBuffer> tensors;
    const auto layout = testing::layout_of(1 + seed % 7, seed, 9);
    for (const auto& [name, shape] : layout) tensors.push_back(testing::random_tensor(name, shape, rng, 100.0));
    const auto path = dir / ("r" + std::to_string(seed) + ".safetensors");
    write_checkpoint(path, tensors, DType::f32);
    const auto h = open_checkpoint(path);
    for (const auto& t : tensors) {
      const auto back = h.read(t.name);
      REQUIRE(back.shape == t.shape);
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        REQUIRE(std::bit_cast<std::uint64_t>(back.values[i]) == std::bit_cast<std::uint64_t>(t.values[i]));
      }
    }
  }
}

TEST_CASE("opening reads the header only") {
  TempDir dir;
  std::mt19937_64 rng(7);
  const std::vector<TensorBuffer> tensors = {testing::random_tensor("big", {256, 256}, rng)};
  const auto path = dir / "lazy.safetensors";
  write_checkpoint(path, tensors, DType::f32);
  const auto h = open_checkpoint(path);
  CHECK(h.bytes_read() == h.data_offset());
  CHECK(h.bytes_read() < 256);
  h.read("big");
  CHECK(h.bytes_read() == h.data_offset() + 256 * 256 * 4);
}

TEST_CASE("concurrent reads of one handle agree") {
  TempDir dir;
  std::mt19937_64 rng(11);
  std::vector<TensorBuffer> tensors;
  for (int i = 0; i < 8; ++i) tensors.push_back(testing::random_tensor("t" + std::to_string(i), {64, 32}, rng));
  const auto path = dir / "conc.safetensors";
  write_checkpoint(path, tensors, DType::f32);
  const auto h = open_checkpoint(path);
  std::vector<int> ok(8, 0);
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i) {
    pool.emplace_back([&, i] {
      bool same = true;
      for (int rep = 0; rep < 10; ++rep) same = same && h.read(tensors[(i + rep) % 8].name).values == tensors[(i + rep) % 8].values;
      ok[i] = same;
    });
  }
  for (auto& t : pool) t.join();
  CHECK(std::all_of(ok.begin(), ok.end(), [](int v) { return v == 1; }));
}

TEST_CASE("validate_compatibility reports missing and mismatched names") {
  TempDir dir;
  const std::vector<TensorBuffer> a = {{"emb", {2, 2}, {1, 2, 3, 4}}, {"lm_head", {2}, {1, 2}}};
  const std::vector<TensorBuffer> same = a;
  const std::vector<TensorBuffer> lacking = {{"emb", {2, 2}, {1, 2, 3, 4}}};
  const std::vector<TensorBuffer> reshaped = {{"emb", {4}, {1, 2, 3, 4}}, {"lm_head", {2}, {1, 2}}};
  write_checkpoint(dir / "a", a, DType::f32);
  write_checkpoint(dir / "same", same, DType::f32);
  write_checkpoint(dir / "lacking", lacking, DType::f32);
  write_checkpoint(dir / "reshaped", reshaped, DType::f16);

  const auto ha = open_checkpoint(dir / "a");
  {
    const std::vector<CheckpointHandle> hs = {ha, open_checkpoint(dir / "same")};
    const auto r = validate_compatibility(hs);
    CHECK(r.keys_match());
    CHECK(r.dtype_mismatch.empty());
    CHECK(r.common == std::vector<std::string>{"emb", "lm_head"});
  }
  {
    const std::vector<CheckpointHandle> hs = {ha, open_checkpoint(dir / "lacking")};
    const auto r = validate_compatibility(hs);
    REQUIRE(r.missing.size() == 1);
    CHECK(r.missing[0].name == "lm_head");
    CHECK(r.missing[0].absent_from == std::vector<std::size_t>{1});
  }
  {
    const std::vector<CheckpointHandle> hs = {ha, open_checkpoint(dir / "reshaped")};
    const auto r = validate_compatibility(hs);
    CHECK(r.shape_mismatch == std::vector<std::string>{"emb"});
    CHECK(r.dtype_mismatch == std::vector<std::string>{"emb", "lm_head"});
  }
  const std::vector<CheckpointHandle> one = {ha};
  CHECK_THROWS_AS(validate_compatibility(one), Error);
}
