#pragma once

// AdamW with linear warmup + cosine decay, global-norm clipping, and a
// deterministic training loop with GGUF checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lexlm/model.hpp"

namespace lexlm {

struct OptimizerHyper {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float base_lr = 3e-4f;
  float weight_decay = 0.01f;
  float warmup_frac = 0.10f;
  std::size_t total_steps = 2000;
  float min_lr_frac = 0.1f;
  float clip_norm = 1.0f;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerHyper from_json(const nlohmann::json& j);

  friend bool operator==(const OptimizerHyper&, const OptimizerHyper&) = default;
};

/// round(warmup_frac * total_steps)
std::size_t warmup_steps(const OptimizerHyper& h) noexcept;

/// Linear warmup to base_lr over W steps, then half-cosine down to
/// min_lr_frac * base_lr at total_steps. Steps past the end clamp.
float lr_at(std::size_t step, const OptimizerHyper& h) noexcept;

struct OptimizerState {
  ParameterSet m, v;
  std::uint64_t t = 0;

  static OptimizerState zeros(const ModelConfig& c);
};

/// Whether weight decay applies to a parameter of this role (2-D weight
/// matrices only; embeddings, biases and norms are exempt).
bool decays(ParamRole role) noexcept;

/// One decoupled AdamW update. Throws DataError naming the first non-finite
/// gradient, leaving params and state untouched.
void adamw_step(ParameterSet& params, const ParameterSet& grads, OptimizerState& state,
                const OptimizerHyper& h, float lr);

double global_norm(const ParameterSet& grads);
/// Scales grads so their global L2 norm is at most clip_norm. Returns the
/// norm before clipping.
double clip_gradients(ParameterSet& grads, float clip_norm);

/// Endless stream of (T+1)-token windows stepping by T over the documents.
/// Each epoch visits the documents in a fresh seeded order; windows run on
/// across epoch boundaries.
class BatchStream {
 public:
  BatchStream(std::vector<std::vector<TokenId>> documents, std::size_t seq_len, std::uint64_t seed);

  /// Fills inputs and targets, each batch * seq_len ids.
  void next_batch(std::size_t batch, std::vector<TokenId>& inputs, std::vector<TokenId>& targets);
  /// Skips n windows (used to resume).
  void skip(std::size_t n_windows);
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void refill();
  std::vector<std::vector<TokenId>> docs_;
  std::size_t T_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<TokenId> buf_;  // tokens not yet consumed, buf_[pos_] is the next input
  std::size_t pos_ = 0;
};

struct LossRecord {
  std::size_t step;
  float lr;
  float loss;
  std::size_t tokens_seen;
  double wall_ms;
};

struct TrainOptions {
  ModelConfig config;
  OptimizerHyper hyper;
  std::size_t batch_size = 8;
  std::size_t seq_len = 0;  // 0 = config.context_len
  std::uint64_t seed = 1;
  bool deterministic = false;
  std::size_t checkpoint_every = 500;  // 0 = only at the end
  std::filesystem::path out_dir;       // empty = no files
  bool resume = false;
  std::uint64_t tokenizer_fingerprint = 0;
  std::string run_config;  // echoed into checkpoints
  std::function<void(const LossRecord&)> on_step;
};

struct TrainResult {
  ParameterSet params;
  OptimizerState state;
  std::vector<LossRecord> log;
  std::size_t steps = 0;
  float final_loss = 0.0f;
};

/// Trains from `documents` (token ids, each ending with the end token).
/// Writes model.gguf, optimizer.gguf, train_state.json and loss.jsonl to
/// out_dir every checkpoint_every steps and at the end.
TrainResult train_loop(const TrainOptions& opt, const std::vector<std::vector<TokenId>>& documents);

void save_optimizer(const std::filesystem::path& path, const OptimizerState& s);
OptimizerState load_optimizer(const std::filesystem::path& path, const ModelConfig& c);

}  // namespace lexlm
