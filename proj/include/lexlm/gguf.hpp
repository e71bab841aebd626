#pragma once

// GGUF v3 container: little-endian header, typed key/value metadata, tensor
// directory, then a payload with every tensor aligned to `alignment` bytes.
// Shapes here are row-major (outermost first); on disk the dimension list is
// reversed so that ne[0] is the contiguous axis, as ggml expects.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "lexlm/error.hpp"
#include "lexlm/quant.hpp"
#include "lexlm/tensor.hpp"

namespace lexlm::gguf {

inline constexpr std::uint32_t kVersion = 3;
inline constexpr std::uint32_t kDefaultAlignment = 32;
inline constexpr std::size_t kMaxDims = 4;

enum class ValueType : std::uint32_t {
  Uint8 = 0, Int8 = 1, Uint16 = 2, Int16 = 3, Uint32 = 4, Int32 = 5, Float32 = 6,
  Bool = 7, String = 8, Array = 9, Uint64 = 10, Int64 = 11, Float64 = 12,
};

enum class TensorType : std::uint32_t { F32 = 0, Q8_0 = 8 };

struct Value;

struct Array {
  ValueType type = ValueType::Uint8;
  std::vector<Value> items;
  friend bool operator==(const Array&, const Array&) = default;
};

struct Value {
  std::variant<std::uint8_t, std::int8_t, std::uint16_t, std::int16_t, std::uint32_t, std::int32_t,
               float, bool, std::string, Array, std::uint64_t, std::int64_t, double>
      v;

  ValueType type() const noexcept;
  friend bool operator==(const Value&, const Value&) = default;
};

using TensorData = std::variant<Tensor, QuantizedTensor>;

struct TensorEntry {
  std::string name;
  TensorData data;

  const Shape& shape() const noexcept;
  TensorType type() const noexcept;
  std::size_t byte_size() const noexcept;
};

struct Document {
  std::vector<std::pair<std::string, Value>> metadata;
  std::vector<TensorEntry> tensors;

  const Value* find(std::string_view key) const noexcept;
  void set(std::string key, Value value);
  const TensorEntry* tensor(std::string_view name) const noexcept;
  std::uint32_t alignment() const noexcept;
};

enum class ErrorCode {
  BadMagic,
  UnsupportedVersion,
  Truncated,
  Misaligned,
  UnknownTensorType,
  Malformed,
  Io,
};

class FormatError : public DataError {
 public:
  FormatError(ErrorCode code, const std::string& what) : DataError(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Declared byte length of a tensor of the given type and element count.
std::size_t tensor_bytes(TensorType type, std::size_t numel) noexcept;

std::vector<std::uint8_t> serialize(const Document& doc);
/// Validates everything (magic, version, counts, offsets, lengths) against
/// the buffer size before allocating anything proportional to declared sizes.
Document parse(std::span<const std::uint8_t> bytes);

/// Exact size serialize() will produce.
std::size_t planned_size(const Document& doc);

void write_file(const Document& doc, const std::filesystem::path& path);
Document read_file(const std::filesystem::path& path);

// Typed metadata helpers. Throw FormatError(Malformed) on a missing key or a
// type mismatch.
std::string get_string(const Document& doc, std::string_view key);
std::uint64_t get_uint(const Document& doc, std::string_view key);
double get_float(const Document& doc, std::string_view key);
bool get_bool(const Document& doc, std::string_view key);

}  // namespace lexlm::gguf
