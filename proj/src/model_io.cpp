#include "lexlm/model_io.hpp"

#include <cstdio>
#include <unordered_map>

#include "lexlm/error.hpp"

namespace lexlm {

namespace {

constexpr std::uint32_t kFileTypeAllF32 = 0;
constexpr std::uint32_t kFileTypeMostlyQ8_0 = 7;

using gguf::Value;

Value u32(std::size_t v) { return {static_cast<std::uint32_t>(v)}; }

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

const char* precision_name(Precision p) noexcept { return p == Precision::F32 ? "FP32" : "Q8_0"; }

gguf::Document to_document(const ParameterSet& p, const ModelConfig& c, const ModelMeta& meta) {
  c.validate();
  gguf::Document doc;
  doc.set("general.architecture", {std::string("gpt2")});
  doc.set("general.name", {meta.name});
  doc.set("general.file_type", u32(kFileTypeAllF32));
  doc.set("gpt2.context_length", u32(c.context_len));
  doc.set("gpt2.embedding_length", u32(c.d_model));
  doc.set("gpt2.feed_forward_length", u32(c.d_ff));
  doc.set("gpt2.block_count", u32(c.n_layers));
  doc.set("gpt2.attention.head_count", u32(c.n_heads));
  doc.set("gpt2.attention.layer_norm_epsilon", {c.layernorm_eps});
  doc.set("lexlm.vocab_size", u32(c.vocab_size));
  doc.set("lexlm.init_mean", {c.init_mean});
  doc.set("lexlm.init_std", {c.init_std});
  doc.set("lexlm.tie_embeddings", {c.tie_embeddings});
  doc.set("lexlm.tokenizer_fingerprint", {hex64(meta.tokenizer_fingerprint)});
  doc.set("lexlm.quantization", {std::string("F32")});
  if (!meta.run_config.empty()) doc.set("lexlm.run_config", {meta.run_config});
  for (const auto& r : p.refs()) doc.tensors.push_back({r.name, *r.tensor});
  return doc;
}

ModelConfig config_from_document(const gguf::Document& doc) {
  const std::string arch = gguf::get_string(doc, "general.architecture");
  if (arch != "gpt2") throw gguf::FormatError(gguf::ErrorCode::Malformed, "unsupported architecture " + arch);
  ModelConfig c;
  c.context_len = gguf::get_uint(doc, "gpt2.context_length");
  c.d_model = gguf::get_uint(doc, "gpt2.embedding_length");
  c.d_ff = gguf::get_uint(doc, "gpt2.feed_forward_length");
  c.n_layers = gguf::get_uint(doc, "gpt2.block_count");
  c.n_heads = gguf::get_uint(doc, "gpt2.attention.head_count");
  c.layernorm_eps = static_cast<float>(gguf::get_float(doc, "gpt2.attention.layer_norm_epsilon"));
  c.vocab_size = gguf::get_uint(doc, "lexlm.vocab_size");
  c.init_mean = static_cast<float>(gguf::get_float(doc, "lexlm.init_mean"));
  c.init_std = static_cast<float>(gguf::get_float(doc, "lexlm.init_std"));
  c.tie_embeddings = gguf::get_bool(doc, "lexlm.tie_embeddings");
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw gguf::FormatError(gguf::ErrorCode::Malformed, e.what());
  }
  return c;
}

Precision precision_of(const gguf::Document& doc) {
  for (const auto& t : doc.tensors) {
    if (t.type() == gguf::TensorType::Q8_0) return Precision::Q8_0;
  }
  return Precision::F32;
}

std::uint64_t tokenizer_fingerprint_of(const gguf::Document& doc) {
  const gguf::Value* v = doc.find("lexlm.tokenizer_fingerprint");
  if (v == nullptr) return 0;
  const auto* s = std::get_if<std::string>(&v->v);
  if (s == nullptr) return 0;
  try {
    return std::stoull(*s, nullptr, 16);
  } catch (const std::exception&) {
    return 0;
  }
}

ParameterSet params_from_document(const gguf::Document& doc, const ModelConfig& c) {
  return params_from_tensors(c, [&doc](const std::string& name) -> const Tensor* {
    const gguf::TensorEntry* e = doc.tensor(name);
    return e ? std::get_if<Tensor>(&e->data) : nullptr;
  });
}

InferenceModel inference_model_from_document(const gguf::Document& doc) {
  const ModelConfig c = config_from_document(doc);
  // Shapes are checked against an FP32 template of the same config.
  const ParameterSet shapes = ParameterSet::zeros(c);
  std::unordered_map<std::string, const gguf::TensorEntry*> by_name;
  for (const auto& t : doc.tensors) by_name.emplace(t.name, &t);

  auto entry = [&](const ConstParamRef& r) -> const gguf::TensorEntry& {
    auto it = by_name.find(r.name);
    if (it == by_name.end()) throw DataError("model file lacks tensor " + r.name);
    if (it->second->shape() != r.tensor->shape()) {
      throw DataError("tensor " + r.name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                      shape_str(r.tensor->shape()));
    }
    return *it->second;
  };
  auto f32 = [&](const ConstParamRef& r) -> Tensor {
    const auto& e = entry(r);
    if (const auto* t = std::get_if<Tensor>(&e.data)) return *t;
    return dequantize_q8_0(std::get<QuantizedTensor>(e.data));
  };
  auto any = [&](const ConstParamRef& r) -> std::variant<Tensor, QuantizedTensor> { return entry(r).data; };

  const auto refs = shapes.refs();
  std::size_t i = 0;
  InferenceModel m;
  m.cfg = c;
  m.wte = any(refs[i++]);
  m.wpe = f32(refs[i++]);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    InferenceLayer L;
    L.ln1_g = f32(refs[i++]);
    L.ln1_b = f32(refs[i++]);
    L.qkv.weight = any(refs[i++]);
    L.qkv.bias = f32(refs[i++]);
    L.proj.weight = any(refs[i++]);
    L.proj.bias = f32(refs[i++]);
    L.ln2_g = f32(refs[i++]);
    L.ln2_b = f32(refs[i++]);
    L.fc.weight = any(refs[i++]);
    L.fc.bias = f32(refs[i++]);
    L.fcproj.weight = any(refs[i++]);
    L.fcproj.bias = f32(refs[i++]);
    m.layers.push_back(std::move(L));
  }
  m.lnf_g = f32(refs[i++]);
  m.lnf_b = f32(refs[i++]);
  if (!c.tie_embeddings) m.lm_head = Linear{any(refs[i++]), Tensor{}};
  return m;
}

bool quantizable_role(const std::string& name, const Shape& shape) noexcept {
  if (shape.size() != 2) return false;
  if (name == "position_embd.weight") return false;
  if (name.find("_norm") != std::string::npos) return false;
  return ends_with(name, ".weight");
}

gguf::Document quantize_document(const gguf::Document& fp32, UnalignedPolicy policy, QuantizeStats* stats) {
  QuantizeStats local;
  QuantizeStats& st = stats ? *stats : local;
  st = {};

  gguf::Document out;
  out.metadata = fp32.metadata;
  for (const auto& t : fp32.tensors) {
    const auto* f = std::get_if<Tensor>(&t.data);
    const bool eligible = f != nullptr && quantizable_role(t.name, t.shape());
    if (!eligible) {
      out.tensors.push_back(t);
      ++st.kept_f32;
      continue;
    }
    if (!q8_0_row_aligned(t.shape())) {
      if (policy == UnalignedPolicy::Error) {
        throw ShapeError("tensor " + t.name + " of shape " + shape_str(t.shape()) +
                         " cannot be stored as Q8_0: row length is not a multiple of 32");
      }
      out.tensors.push_back(t);
      st.fallback.push_back(t.name);
      ++st.kept_f32;
      continue;
    }
    out.tensors.push_back({t.name, quantize_q8_0(*f, t.name)});
    ++st.quantized;
  }

  if (st.quantized > 0) {
    out.set("general.file_type", u32(kFileTypeMostlyQ8_0));
    out.set("general.quantization_version", u32(2));
    out.set("lexlm.quantization", {std::string("Q8_0")});
  }
  if (!st.fallback.empty()) {
    gguf::Array names{gguf::ValueType::String, {}};
    for (const auto& n : st.fallback) names.items.push_back({n});
    out.set("lexlm.f32_fallback", {std::move(names)});
  }
  return out;
}

InferenceModel quantized_model(const ParameterSet& p, const ModelConfig& c) {
  return inference_model_from_document(quantize_document(to_document(p, c)));
}

void write_model(const std::filesystem::path& path, const ParameterSet& p, const ModelConfig& c,
                 const ModelMeta& meta) {
  gguf::write_file(to_document(p, c, meta), path);
}

}  // namespace lexlm
