#pragma once

// GPT-2 style decoder: learned absolute positions, pre-layernorm blocks,
// causal multi-head attention, GELU MLP, tied output head.
// Linear weights are stored [out x in] (row per output unit), the layout ggml
// uses, so Q8_0 blocks run along the reduction axis.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lexlm/quant.hpp"
#include "lexlm/rng.hpp"
#include "lexlm/tensor.hpp"
#include "lexlm/tokenizer.hpp"

namespace lexlm {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t context_len = 128;
  std::size_t vocab_size = 1024;
  float init_mean = 0.0f;
  float init_std = 0.02f;
  float layernorm_eps = 1e-5f;
  bool tie_embeddings = true;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  /// Throws UsageError describing the first violated constraint.
  void validate() const;

  static ModelConfig gpt2_small();

  nlohmann::json to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Standard GPT-2 parameter accounting (tied head counted once).
std::size_t parameter_count(const ModelConfig& c) noexcept;

enum class ParamRole { TokenEmbedding, PositionEmbedding, Weight, Bias, NormGain, NormBias };

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor qkv_w, qkv_b;    // [3C x C], [3C]
  Tensor proj_w, proj_b;  // [C x C], [C]
  Tensor ln2_g, ln2_b;
  Tensor fc_w, fc_b;          // [F x C], [F]
  Tensor fcproj_w, fcproj_b;  // [C x F], [C]

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ParamRef {
  std::string name;  // canonical GGUF tensor name
  Tensor* tensor;
  ParamRole role;
};
struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
  ParamRole role;
};

struct ParameterSet {
  Tensor wte;  // [V x C]
  Tensor wpe;  // [T x C]
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor lm_head;  // [V x C], only when embeddings are untied

  /// All tensors zero, shaped for `c`.
  static ParameterSet zeros(const ModelConfig& c);

  /// Canonical order: embeddings, blocks, final norm, optional head.
  std::vector<ParamRef> refs();
  std::vector<ConstParamRef> refs() const;
  std::size_t numel() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

/// Weight matrices and embeddings ~ N(init_mean, init_std) drawn from
/// Rng(seed) split per tensor; biases and norm offsets 0; norm gains 1.
ParameterSet init_params(const ModelConfig& c, std::uint64_t seed);

/// Loads tensors by canonical name; shapes must match the config.
ParameterSet params_from_tensors(const ModelConfig& c,
                                 const std::function<const Tensor*(const std::string&)>& lookup);

// ------------------------------------------------------------- training graph

/// Activation buffers for one (batch, seq_len) shape, reused across steps.
class TrainWorkspace {
 public:
  TrainWorkspace(const ModelConfig& c, std::size_t batch, std::size_t seq_len);

  std::size_t batch() const noexcept { return B_; }
  std::size_t seq_len() const noexcept { return T_; }
  /// Logits of the last forward, [B*T x V].
  std::span<const float> logits() const noexcept { return logits_; }

 private:
  friend float forward_train(const ParameterSet&, const ModelConfig&, std::span<const TokenId>,
                             std::span<const TokenId>, TrainWorkspace&);
  friend void backward_train(const ParameterSet&, const ModelConfig&, std::span<const TokenId>,
                             std::span<const TokenId>, TrainWorkspace&, ParameterSet&);

  struct Layer {
    std::vector<float> ln1, ln1_mean, ln1_rstd, qkv, att, atty, res2, ln2, ln2_mean, ln2_rstd,
        fch, fch_gelu, res3;
  };
  std::size_t B_, T_;
  std::vector<float> x0_;
  std::vector<Layer> layers_;
  std::vector<float> lnf_, lnf_mean_, lnf_rstd_, logits_, probs_;
  // backward scratch
  std::vector<float> dres_, dtmp_c_, dtmp_c2_, dqkv_, datty_, dfch_, datt_row_;
};

/// Mean next-token cross entropy of `inputs` (B*T ids) against `targets`.
float forward_train(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> inputs,
                    std::span<const TokenId> targets, TrainWorkspace& ws);

/// Gradients of the loss computed by the preceding forward_train call.
/// `grads` is overwritten.
void backward_train(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> inputs,
                    std::span<const TokenId> targets, TrainWorkspace& ws, ParameterSet& grads);

struct LossAndGrads {
  float loss;
  ParameterSet grads;
};

/// Single sequence: predicts tokens[1..] from tokens[..n-1]. Needs n >= 2.
LossAndGrads loss_and_backward(const ParameterSet& p, const ModelConfig& c,
                               std::span<const TokenId> tokens);

// ------------------------------------------------------------- inference

/// A linear layer whose weight is either FP32 or Q8_0.
struct Linear {
  std::variant<Tensor, QuantizedTensor> weight;  // [out x in]
  Tensor bias;                                   // [out], may be empty

  std::size_t out_features() const noexcept;
  std::size_t in_features() const noexcept;
  bool quantized() const noexcept { return std::holds_alternative<QuantizedTensor>(weight); }
};

struct InferenceLayer {
  Tensor ln1_g, ln1_b;
  Linear qkv, proj;
  Tensor ln2_g, ln2_b;
  Linear fc, fcproj;
};

class KvCache;

class InferenceModel {
 public:
  static InferenceModel from_params(const ParameterSet& p, const ModelConfig& c);

  const ModelConfig& config() const noexcept { return cfg; }
  /// True when any weight is stored as Q8_0.
  bool quantized() const noexcept;

  ModelConfig cfg;
  std::variant<Tensor, QuantizedTensor> wte;
  Tensor wpe;
  std::vector<InferenceLayer> layers;
  Tensor lnf_g, lnf_b;
  std::optional<Linear> lm_head;
};

// Per-session mutable state: keys/values of processed positions plus scratch.
class KvCache {
 public:
  explicit KvCache(const ModelConfig& c);

  std::size_t length() const noexcept { return length_; }
  std::size_t capacity() const noexcept { return capacity_; }
  void clear() noexcept { length_ = 0; }

 private:
  friend void forward_token(const InferenceModel&, TokenId, KvCache&, std::span<float>);
  std::size_t capacity_, d_;
  std::size_t length_ = 0;
  std::vector<std::vector<float>> k_, v_;  // per layer [capacity x C]
  std::vector<float> x_, h_, qkv_, atty_, tmp_, ff_, scores_;
  std::vector<BlockQ8_0> xq_;
};

/// Feeds `tokens` at positions cache.length().. and returns logits
/// [len x V]. Without a cache the sequence starts at position 0.
/// Throws DataError on context overflow or a bad id.
Tensor forward(const InferenceModel& m, std::span<const TokenId> tokens, KvCache* cache = nullptr);
Tensor forward(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> tokens,
               KvCache* cache = nullptr);

/// Advances the cache by one token; writes logits when `logits` is non-empty.
void forward_token(const InferenceModel& m, TokenId token, KvCache& cache, std::span<float> logits);

struct SamplingOptions {
  std::size_t max_new = 64;
  float temperature = 0.0f;  // 0 = greedy, ties to the lowest id
  std::optional<std::size_t> top_k;
  std::uint64_t seed = 0;
  bool stop_at_eod = true;
  TokenId eod_id = -1;
  /// Bytes the continuation must start with. While any remain, only tokens
  /// consistent with them may be emitted (used to re-synthesize a prompt
  /// tail whose tokenization depends on what follows).
  std::string forced_prefix;
  const Tokenizer* tokenizer = nullptr;  // required with forced_prefix
};

struct GenerationResult {
  std::vector<TokenId> tokens;
  std::size_t prompt_truncated = 0;  // tokens dropped from the prompt's left
  std::size_t context_shifts = 0;    // times history was cut to make room
  bool hit_eod = false;
};

GenerationResult generate(const InferenceModel& m, std::span<const TokenId> prompt,
                          const SamplingOptions& opt);
GenerationResult generate(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> prompt,
                          const SamplingOptions& opt);

/// Index of the largest value, lowest index on ties.
std::size_t argmax(std::span<const float> v) noexcept;

}  // namespace lexlm
