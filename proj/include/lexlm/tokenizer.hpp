#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lexlm {

using TokenId = std::int32_t;

// Byte-level BPE vocabulary. Ids 0..255 are raw bytes, ids 256.. are merges in
// learned order, and the last id is the end-of-document token.
struct Vocab {
  std::vector<std::string> tokens;
  std::vector<std::pair<TokenId, TokenId>> merges;
  TokenId eod_id = 256;

  std::size_t size() const noexcept { return tokens.size(); }
  /// Stable FNV-1a hash over tokens and merges.
  std::uint64_t fingerprint() const noexcept;

  friend bool operator==(const Vocab&, const Vocab&) = default;
};

/// Greedy BPE over the documents (pairs never span two documents). Each round
/// merges the most frequent adjacent pair, ties going to the smaller
/// (left, right) id pair. Training ends early if no adjacent pair is left.
Vocab bpe_train(std::span<const std::string> documents, std::size_t vocab_size);
Vocab bpe_train(std::string_view corpus, std::size_t vocab_size);

class Tokenizer {
 public:
  explicit Tokenizer(Vocab vocab);

  const Vocab& vocab() const noexcept { return vocab_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  TokenId eod_id() const noexcept { return vocab_.eod_id; }

  /// Applies merges in learned order. Never fails.
  std::vector<TokenId> encode(std::string_view text) const;
  /// The end-of-document token decodes to nothing. Throws DataError on an
  /// out-of-range id.
  std::string decode(std::span<const TokenId> ids) const;
  const std::string& token_bytes(TokenId id) const;

  std::string to_json() const;
  static Tokenizer from_json(std::string_view json);
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

 private:
  Vocab vocab_;
  std::unordered_map<std::uint64_t, TokenId> rank_;  // packed pair -> merge index
};

std::string base64_encode(std::string_view bytes);
/// Throws DataError on malformed input.
std::string base64_decode(std::string_view text);

}  // namespace lexlm
