#include "lexlm/gguf.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace lexlm::gguf {

static_assert(std::endian::native == std::endian::little, "GGUF I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'G', 'G', 'U', 'F'};
constexpr std::size_t kMaxArrayDepth = 4;

std::size_t align_up(std::size_t n, std::size_t a) noexcept { return (n + a - 1) / a * a; }

[[noreturn]] void fail(ErrorCode code, const std::string& msg) { throw FormatError(code, msg); }

// ---------------------------------------------------------------- writing

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void str(std::string_view s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void pad_to(std::size_t alignment) { out_.resize(align_up(out_.size(), alignment), 0); }
  std::size_t size() const noexcept { return out_.size(); }

  void value(const Value& v) {
    std::visit(
        [this](const auto& x) {
          using T = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<T, std::string>) {
            str(x);
          } else if constexpr (std::is_same_v<T, Array>) {
            pod<std::uint32_t>(static_cast<std::uint32_t>(x.type));
            pod<std::uint64_t>(x.items.size());
            for (const auto& item : x.items) {
              if (item.type() != x.type) throw ShapeError("GGUF array holds mixed value types");
              value(item);
            }
          } else if constexpr (std::is_same_v<T, bool>) {
            pod<std::uint8_t>(x ? 1 : 0);
          } else {
            pod<T>(x);
          }
        },
        v.v);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

void write_header(Writer& w, const Document& doc) {
  w.bytes(kMagic, 4);
  w.pod<std::uint32_t>(kVersion);
  w.pod<std::uint64_t>(doc.tensors.size());
  w.pod<std::uint64_t>(doc.metadata.size());
  for (const auto& [key, value] : doc.metadata) {
    w.str(key);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(value.type()));
    w.value(value);
  }
  const std::size_t alignment = doc.alignment();
  std::uint64_t offset = 0;
  for (const auto& t : doc.tensors) {
    const Shape& shape = t.shape();
    w.str(t.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto it = shape.rbegin(); it != shape.rend(); ++it) w.pod<std::uint64_t>(*it);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.type()));
    w.pod<std::uint64_t>(offset);
    offset += align_up(t.byte_size(), alignment);
  }
  w.pad_to(alignment);
}

void check_writable(const Document& doc) {
  const std::uint32_t a = doc.alignment();
  if (a == 0 || (a & (a - 1)) != 0) throw ShapeError("GGUF alignment must be a power of two");
  std::set<std::string_view> names;
  for (const auto& t : doc.tensors) {
    const Shape& s = t.shape();
    if (s.empty() || s.size() > kMaxDims) {
      throw ShapeError("tensor " + t.name + " has unsupported rank " + std::to_string(s.size()));
    }
    if (shape_numel(s) == 0) throw ShapeError("tensor " + t.name + " is empty");
    if (t.type() == TensorType::Q8_0 && !q8_0_row_aligned(s)) {
      throw ShapeError("Q8_0 tensor " + t.name + " needs a last dimension divisible by 32, got " +
                       shape_str(s));
    }
    if (!names.insert(t.name).second) throw ShapeError("duplicate tensor name " + t.name);
  }
}

// ---------------------------------------------------------------- reading

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> buf) : buf_(buf) {}

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (n > remaining()) fail(ErrorCode::Truncated, std::string("truncated GGUF header while reading ") + what);
  }

  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(const char* what) {
    const auto len = pod<std::uint64_t>(what);
    if (len > remaining()) fail(ErrorCode::Truncated, std::string("truncated GGUF string in ") + what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), static_cast<std::size_t>(len));
    pos_ += static_cast<std::size_t>(len);
    return s;
  }

  Value value(ValueType type, std::size_t depth) {
    switch (type) {
      case ValueType::Uint8: return {pod<std::uint8_t>("u8")};
      case ValueType::Int8: return {pod<std::int8_t>("i8")};
      case ValueType::Uint16: return {pod<std::uint16_t>("u16")};
      case ValueType::Int16: return {pod<std::int16_t>("i16")};
      case ValueType::Uint32: return {pod<std::uint32_t>("u32")};
      case ValueType::Int32: return {pod<std::int32_t>("i32")};
      case ValueType::Float32: return {pod<float>("f32")};
      case ValueType::Uint64: return {pod<std::uint64_t>("u64")};
      case ValueType::Int64: return {pod<std::int64_t>("i64")};
      case ValueType::Float64: return {pod<double>("f64")};
      case ValueType::Bool: {
        const auto b = pod<std::uint8_t>("bool");
        if (b > 1) fail(ErrorCode::Malformed, "GGUF bool value is not 0 or 1");
        return {b == 1};
      }
      case ValueType::String: return {str("string value")};
      case ValueType::Array: {
        if (depth >= kMaxArrayDepth) fail(ErrorCode::Malformed, "GGUF arrays nested too deeply");
        Array arr;
        const auto raw = pod<std::uint32_t>("array type");
        arr.type = checked_type(raw);
        const auto count = pod<std::uint64_t>("array length");
        if (count > remaining() / min_size(arr.type)) {
          fail(ErrorCode::Truncated, "GGUF array length exceeds file size");
        }
        arr.items.reserve(static_cast<std::size_t>(count));
        for (std::uint64_t i = 0; i < count; ++i) arr.items.push_back(value(arr.type, depth + 1));
        return {std::move(arr)};
      }
    }
    fail(ErrorCode::Malformed, "unknown GGUF value type");
  }

  static ValueType checked_type(std::uint32_t raw) {
    if (raw > static_cast<std::uint32_t>(ValueType::Float64)) {
      fail(ErrorCode::Malformed, "unknown GGUF value type " + std::to_string(raw));
    }
    return static_cast<ValueType>(raw);
  }

  static std::size_t min_size(ValueType t) noexcept {
    switch (t) {
      case ValueType::Uint8: case ValueType::Int8: case ValueType::Bool: return 1;
      case ValueType::Uint16: case ValueType::Int16: return 2;
      case ValueType::Uint32: case ValueType::Int32: case ValueType::Float32: return 4;
      case ValueType::Uint64: case ValueType::Int64: case ValueType::Float64: case ValueType::String: return 8;
      case ValueType::Array: return 12;
    }
    return 1;
  }

 private:
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

struct TensorInfo {
  std::string name;
  Shape shape;
  TensorType type;
  std::uint64_t offset;
  std::size_t bytes;
};

}  // namespace

ValueType Value::type() const noexcept {
  static constexpr ValueType kOrder[] = {
      ValueType::Uint8, ValueType::Int8,   ValueType::Uint16, ValueType::Int16, ValueType::Uint32,
      ValueType::Int32, ValueType::Float32, ValueType::Bool,  ValueType::String, ValueType::Array,
      ValueType::Uint64, ValueType::Int64, ValueType::Float64};
  return kOrder[v.index()];
}

const Shape& TensorEntry::shape() const noexcept {
  return std::visit([](const auto& t) -> const Shape& {
    if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Tensor>) return t.shape();
    else return t.shape;
  }, data);
}

TensorType TensorEntry::type() const noexcept {
  return std::holds_alternative<Tensor>(data) ? TensorType::F32 : TensorType::Q8_0;
}

std::size_t TensorEntry::byte_size() const noexcept { return tensor_bytes(type(), shape_numel(shape())); }

const Value* Document::find(std::string_view key) const noexcept {
  for (const auto& [k, v] : metadata) {
    if (k == key) return &v;
  }
  return nullptr;
}

void Document::set(std::string key, Value value) {
  for (auto& [k, v] : metadata) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  metadata.emplace_back(std::move(key), std::move(value));
}

const TensorEntry* Document::tensor(std::string_view name) const noexcept {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::uint32_t Document::alignment() const noexcept {
  if (const Value* v = find("general.alignment")) {
    if (const auto* a = std::get_if<std::uint32_t>(&v->v)) return *a;
  }
  return kDefaultAlignment;
}

std::size_t tensor_bytes(TensorType type, std::size_t numel) noexcept {
  return type == TensorType::F32 ? numel * sizeof(float) : q8_0_bytes(numel);
}

std::size_t planned_size(const Document& doc) {
  check_writable(doc);
  std::vector<std::uint8_t> header;
  Writer w(header);
  write_header(w, doc);
  std::size_t total = header.size();
  for (const auto& t : doc.tensors) total += align_up(t.byte_size(), doc.alignment());
  return total;
}

std::vector<std::uint8_t> serialize(const Document& doc) {
  check_writable(doc);
  std::vector<std::uint8_t> out;
  Writer w(out);
  write_header(w, doc);
  const std::size_t alignment = doc.alignment();
  for (const auto& t : doc.tensors) {
    if (const auto* f = std::get_if<Tensor>(&t.data)) {
      w.bytes(f->data(), f->size() * sizeof(float));
    } else {
      const auto& q = std::get<QuantizedTensor>(t.data);
      w.bytes(q.blocks.data(), q.byte_size());
    }
    w.pad_to(alignment);
  }
  return out;
}

Document parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::BadMagic, "not a GGUF file (bad magic)");
  }
  r.pod<std::uint32_t>("magic");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kVersion) {
    fail(ErrorCode::UnsupportedVersion, "unsupported GGUF version " + std::to_string(version));
  }
  const auto n_tensors = r.pod<std::uint64_t>("tensor count");
  const auto n_kv = r.pod<std::uint64_t>("metadata count");
  // Each entry occupies at least 8 bytes on disk.
  if (n_kv > r.remaining() / 8 || n_tensors > r.remaining() / 8) {
    fail(ErrorCode::Truncated, "GGUF counts exceed file size");
  }

  Document doc;
  std::set<std::string> keys;
  doc.metadata.reserve(static_cast<std::size_t>(n_kv));
  for (std::uint64_t i = 0; i < n_kv; ++i) {
    std::string key = r.str("metadata key");
    const auto type = Reader::checked_type(r.pod<std::uint32_t>("metadata type"));
    Value v = r.value(type, 0);
    if (!keys.insert(key).second) fail(ErrorCode::Malformed, "duplicate metadata key " + key);
    doc.metadata.emplace_back(std::move(key), std::move(v));
  }

  std::uint32_t alignment = kDefaultAlignment;
  if (const Value* v = doc.find("general.alignment")) {
    const auto* a = std::get_if<std::uint32_t>(&v->v);
    if (a == nullptr || *a == 0 || (*a & (*a - 1)) != 0) {
      fail(ErrorCode::Malformed, "general.alignment must be a power-of-two u32");
    }
    alignment = *a;
  }

  std::vector<TensorInfo> infos;
  infos.reserve(static_cast<std::size_t>(n_tensors));
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    TensorInfo info;
    info.name = r.str("tensor name");
    const auto n_dims = r.pod<std::uint32_t>("tensor rank");
    if (n_dims == 0 || n_dims > kMaxDims) {
      fail(ErrorCode::Malformed, "tensor " + info.name + " has unsupported rank " + std::to_string(n_dims));
    }
    std::uint64_t numel = 1;
    info.shape.resize(n_dims);
    for (std::uint32_t d = 0; d < n_dims; ++d) {
      const auto dim = r.pod<std::uint64_t>("tensor dims");
      if (dim == 0 || dim > bytes.size() || numel > bytes.size() / dim) {
        fail(ErrorCode::Malformed, "tensor " + info.name + " declares a size larger than the file");
      }
      numel *= dim;
      info.shape[n_dims - 1 - d] = static_cast<std::size_t>(dim);
    }
    const auto raw_type = r.pod<std::uint32_t>("tensor type");
    if (raw_type != static_cast<std::uint32_t>(TensorType::F32) &&
        raw_type != static_cast<std::uint32_t>(TensorType::Q8_0)) {
      fail(ErrorCode::UnknownTensorType,
           "tensor " + info.name + " has unknown type tag " + std::to_string(raw_type));
    }
    info.type = static_cast<TensorType>(raw_type);
    if (info.type == TensorType::Q8_0 && info.shape.back() % kQ8BlockSize != 0) {
      fail(ErrorCode::Malformed, "Q8_0 tensor " + info.name + " has a row length not divisible by 32");
    }
    info.offset = r.pod<std::uint64_t>("tensor offset");
    if (info.offset % alignment != 0) {
      fail(ErrorCode::Misaligned, "tensor " + info.name + " offset " + std::to_string(info.offset) +
                                      " is not aligned to " + std::to_string(alignment));
    }
    info.bytes = tensor_bytes(info.type, static_cast<std::size_t>(numel));
    if (!infos.empty()) {
      const auto& prev = infos.back();
      if (info.offset < prev.offset + prev.bytes || info.offset <= prev.offset) {
        fail(ErrorCode::Malformed, "tensor " + info.name + " overlaps the previous tensor");
      }
    }
    if (!names.insert(info.name).second) fail(ErrorCode::Malformed, "duplicate tensor name " + info.name);
    infos.push_back(std::move(info));
  }

  const std::size_t data_start = align_up(r.pos(), alignment);
  for (const auto& info : infos) {
    if (data_start > bytes.size() || info.offset > bytes.size() - data_start ||
        info.bytes > bytes.size() - data_start - info.offset) {
      fail(ErrorCode::Truncated, "truncated payload in tensor " + info.name);
    }
  }

  // Everything outside the tensors is alignment padding: zero, and no more
  // than one alignment unit past the last tensor.
  const std::size_t body_end = infos.empty() ? r.pos() : data_start + infos.back().offset + infos.back().bytes;
  if (bytes.size() > align_up(body_end, alignment)) {
    fail(ErrorCode::Malformed, "unexpected trailing data after the last tensor");
  }
  auto check_zero = [&](std::size_t from, std::size_t to) {
    to = std::min(to, bytes.size());
    for (std::size_t i = from; i < to; ++i) {
      if (bytes[i] != 0) fail(ErrorCode::Malformed, "nonzero padding byte at offset " + std::to_string(i));
    }
  };
  std::size_t cursor = r.pos();
  for (const auto& info : infos) {
    check_zero(cursor, data_start + info.offset);
    cursor = data_start + info.offset + info.bytes;
  }
  check_zero(cursor, bytes.size());

  doc.tensors.reserve(infos.size());
  for (auto& info : infos) {
    const std::uint8_t* src = bytes.data() + data_start + info.offset;
    if (info.type == TensorType::F32) {
      std::vector<float> data(info.bytes / sizeof(float));
      std::memcpy(data.data(), src, info.bytes);
      doc.tensors.push_back({std::move(info.name), Tensor(std::move(info.shape), std::move(data))});
    } else {
      QuantizedTensor q;
      q.shape = std::move(info.shape);
      q.blocks.resize(info.bytes / sizeof(BlockQ8_0));
      std::memcpy(q.blocks.data(), src, info.bytes);
      for (std::size_t b = 0; b < q.blocks.size(); ++b) {
        const float d = kernels::fp16_to_fp32(q.blocks[b].scale);
        const bool bad_code = std::any_of(std::begin(q.blocks[b].codes), std::end(q.blocks[b].codes),
                                          [](std::int8_t c) { return c == -128; });
        if (!std::isfinite(d) || bad_code) {
          fail(ErrorCode::Malformed, "corrupt Q8_0 block " + std::to_string(b) + " in tensor " + info.name);
        }
      }
      doc.tensors.push_back({std::move(info.name), std::move(q)});
    }
  }
  return doc;
}

void write_file(const Document& doc, const std::filesystem::path& path) {
  const auto bytes = serialize(doc);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(ErrorCode::Io, "failed writing " + tmp.string() + " (disk full?)");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::Io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Document read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.code(), path.string() + ": " + e.what());
  }
}

namespace {
const Value& require(const Document& doc, std::string_view key) {
  const Value* v = doc.find(key);
  if (v == nullptr) fail(ErrorCode::Malformed, "missing metadata key " + std::string(key));
  return *v;
}
}  // namespace

std::string get_string(const Document& doc, std::string_view key) {
  if (const auto* s = std::get_if<std::string>(&require(doc, key).v)) return *s;
  fail(ErrorCode::Malformed, "metadata key " + std::string(key) + " is not a string");
}

std::uint64_t get_uint(const Document& doc, std::string_view key) {
  return std::visit(
      [&](const auto& x) -> std::uint64_t {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
          if (x < 0) fail(ErrorCode::Malformed, "metadata key " + std::string(key) + " is negative");
          return static_cast<std::uint64_t>(x);
        } else {
          fail(ErrorCode::Malformed, "metadata key " + std::string(key) + " is not an integer");
        }
      },
      require(doc, key).v);
}

double get_float(const Document& doc, std::string_view key) {
  const Value& v = require(doc, key);
  if (const auto* f = std::get_if<float>(&v.v)) return *f;
  if (const auto* d = std::get_if<double>(&v.v)) return *d;
  fail(ErrorCode::Malformed, "metadata key " + std::string(key) + " is not a float");
}

bool get_bool(const Document& doc, std::string_view key) {
  if (const auto* b = std::get_if<bool>(&require(doc, key).v)) return *b;
  fail(ErrorCode::Malformed, "metadata key " + std::string(key) + " is not a bool");
}

}  // namespace lexlm::gguf
