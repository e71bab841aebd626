#pragma once

// Mapping between models and GGUF documents: canonical tensor names,
// architecture metadata, and the FP32 -> Q8_0 conversion.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lexlm/gguf.hpp"
#include "lexlm/model.hpp"

namespace lexlm {

enum class Precision { F32, Q8_0 };
const char* precision_name(Precision p) noexcept;

struct ModelMeta {
  std::string name = "lexlm";
  std::uint64_t tokenizer_fingerprint = 0;
  std::string run_config;  // JSON echo of the effective configuration, optional
};

gguf::Document to_document(const ParameterSet& p, const ModelConfig& c, const ModelMeta& meta = {});

/// Reads the architecture keys. Throws FormatError on missing or bad keys.
ModelConfig config_from_document(const gguf::Document& doc);
Precision precision_of(const gguf::Document& doc);
std::uint64_t tokenizer_fingerprint_of(const gguf::Document& doc);

/// Requires every tensor in FP32.
ParameterSet params_from_document(const gguf::Document& doc, const ModelConfig& c);
/// Accepts FP32 and Q8_0 tensors.
InferenceModel inference_model_from_document(const gguf::Document& doc);

/// Whether a tensor takes part in Q8_0 conversion: 2-D projection, MLP and
/// embedding matrices. Position embeddings, norms and biases stay FP32.
bool quantizable_role(const std::string& name, const Shape& shape) noexcept;

enum class UnalignedPolicy {
  KeepF32,  // leave the tensor FP32 and list it under lexlm.f32_fallback
  Error,    // throw ShapeError
};

struct QuantizeStats {
  std::size_t quantized = 0;
  std::size_t kept_f32 = 0;
  std::vector<std::string> fallback;  // quantizable role, unaligned shape
};

gguf::Document quantize_document(const gguf::Document& fp32, UnalignedPolicy policy = UnalignedPolicy::KeepF32,
                                 QuantizeStats* stats = nullptr);

/// Same weights with every eligible matrix converted to Q8_0.
InferenceModel quantized_model(const ParameterSet& p, const ModelConfig& c);

void write_model(const std::filesystem::path& path, const ParameterSet& p, const ModelConfig& c,
                 const ModelMeta& meta = {});

}  // namespace lexlm
