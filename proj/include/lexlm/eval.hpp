#pragma once

// Evaluation metrics and the FP32 vs Q8_0 ablation report.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lexlm/corpus.hpp"
#include "lexlm/model.hpp"
#include "lexlm/model_io.hpp"
#include "lexlm/tokenizer.hpp"

namespace lexlm {

/// exp(mean next-token NLL) over non-overlapping windows of context_len
/// predictions. Throws DataError when the stream has fewer than 2 tokens.
double perplexity(const InferenceModel& m, std::span<const TokenId> stream);

/// Lowercase, collapse whitespace runs to one space, strip leading and
/// trailing punctuation and whitespace.
std::string normalize_text(std::string_view s);
bool exact_match(std::string_view generated, std::string_view expected);
/// Token-level F1 over whitespace tokens of the normalized strings.
double token_f1(std::string_view generated, std::string_view expected);
inline constexpr double kDefinitionF1 = 0.8;

/// Bytes of prompt tail re-generated under a byte constraint by complete().
inline constexpr std::size_t kHealBytes = 16;

/// Greedy continuation of `prompt` as it would appear at the start of a
/// document: the end token is prepended and the last prompt tokens (at least
/// kHealBytes bytes) are re-generated under a byte constraint so the
/// continuation can tokenize as it did in training. Returns the continuation
/// text only.
std::string complete(const InferenceModel& m, const Tokenizer& tok, std::string_view prompt, std::size_t max_new);
/// Same with caller-chosen sampling; eod_id, tokenizer and forced_prefix are
/// filled in here.
std::string complete(const InferenceModel& m, const Tokenizer& tok, std::string_view prompt, SamplingOptions opt);

struct ProbeVerdict {
  std::string prompt, expected, generated;
  bool exact = false;
  double f1 = 0.0;
};

struct ProbeScores {
  double exact_match = 0.0;
  double definition_accuracy = 0.0;
  std::vector<ProbeVerdict> verdicts;
};

/// Greedy generation per probe, budget = expected length in tokens + 16.
ProbeScores score_probes(const InferenceModel& m, const Tokenizer& tok, const std::vector<Probe>& probes);

struct Citation {
  std::string act, section;
  friend bool operator==(const Citation&, const Citation&) = default;
};
/// Mentions of the form "Section <id> [of the] <ACT>".
std::vector<Citation> extract_citations(std::string_view text);

struct HallucinationResult {
  std::optional<double> rate;  // empty when no response cites anything
  std::size_t citing = 0;
  std::size_t hallucinating = 0;
  nlohmann::json evidence = nlohmann::json::array();
};
HallucinationResult hallucination_rate(const std::vector<std::string>& responses, const CitationIndex& index);

struct LatencyResult {
  double ms_per_token = 0.0;  // median
  std::vector<double> samples;
};
/// Greedy generation of exactly n_tokens after `warmup` discarded runs;
/// median over `runs` timed runs.
LatencyResult latency(const InferenceModel& m, std::span<const TokenId> prompt, std::size_t n_tokens,
                      std::size_t warmup = 1, std::size_t runs = 5);

struct EvalReport {
  std::string model_id;
  Precision precision = Precision::F32;
  std::uint64_t file_bytes = 0;
  double ppl = 0.0;
  double exact_match = 0.0;
  double definition_accuracy = 0.0;
  std::optional<double> hallucination_rate;
  double ms_per_token = 0.0;
  std::size_t probe_count = 0;
  nlohmann::json config;
  std::vector<double> latency_samples;
  std::vector<ProbeVerdict> verdicts;
  nlohmann::json hallucination_evidence = nlohmann::json::array();

  nlohmann::json to_json() const;
};

struct EvalInputs {
  std::vector<TokenId> val_stream;
  std::vector<Probe> probes;
  const CitationIndex* index = nullptr;
  std::size_t latency_tokens = 32;
  std::size_t latency_runs = 5;
};

EvalReport evaluate(const InferenceModel& m, const Tokenizer& tok, const EvalInputs& in, std::string model_id,
                    std::uint64_t file_bytes);

struct Ablation {
  EvalReport fp32, q8;
  nlohmann::json to_json() const;
  /// Rows Size, ms/token, PPL, Exact Match with FP32, Q8_0 and delta columns.
  std::string table() const;
};

}  // namespace lexlm
