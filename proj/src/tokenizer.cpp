#include "lexlm/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lexlm/error.hpp"

namespace lexlm {
namespace {

constexpr std::size_t kByteTokens = 256;
constexpr std::uint32_t kNone = 0xFFFFFFFFu;

std::uint64_t pack(TokenId l, TokenId r) noexcept {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) | static_cast<std::uint32_t>(r);
}
TokenId left_of(std::uint64_t key) noexcept { return static_cast<TokenId>(key >> 32); }
TokenId right_of(std::uint64_t key) noexcept { return static_cast<TokenId>(key & 0xFFFFFFFFu); }

Vocab base_vocab() {
  Vocab v;
  v.tokens.reserve(kByteTokens + 1);
  for (std::size_t b = 0; b < kByteTokens; ++b) v.tokens.emplace_back(1, static_cast<char>(b));
  return v;
}

// Symbol sequence as a doubly linked list over byte positions.
struct SymbolList {
  std::vector<TokenId> sym;
  std::vector<std::uint32_t> prev, next;
  std::vector<bool> alive;

  void append_document(std::string_view doc) {
    const auto base = static_cast<std::uint32_t>(sym.size());
    for (std::size_t i = 0; i < doc.size(); ++i) {
      sym.push_back(static_cast<unsigned char>(doc[i]));
      prev.push_back(i == 0 ? kNone : base + static_cast<std::uint32_t>(i) - 1);
      next.push_back(i + 1 == doc.size() ? kNone : base + static_cast<std::uint32_t>(i) + 1);
      alive.push_back(true);
    }
  }
};

class PairTable {
 public:
  void add(std::uint64_t key, std::int64_t delta, std::uint32_t pos) {
    auto& c = count_[key];
    if (c > 0) order_.erase({-c, key});
    c += delta;
    if (c > 0) {
      order_.insert({-c, key});
    } else {
      count_.erase(key);
    }
    if (delta > 0) occurrences_[key].push_back(pos);
  }

  bool empty() const noexcept { return order_.empty(); }
  std::uint64_t best() const noexcept { return order_.begin()->second; }

  std::vector<std::uint32_t> take_occurrences(std::uint64_t key) {
    auto it = occurrences_.find(key);
    if (it == occurrences_.end()) return {};
    auto out = std::move(it->second);
    occurrences_.erase(it);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

 private:
  std::unordered_map<std::uint64_t, std::int64_t> count_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> occurrences_;
  std::set<std::pair<std::int64_t, std::uint64_t>> order_;
};

}  // namespace

std::uint64_t Vocab::fingerprint() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ull;
  };
  auto mix_u32 = [&mix](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) mix(static_cast<unsigned char>(v >> (8 * i)));
  };
  mix_u32(static_cast<std::uint32_t>(tokens.size()));
  for (const auto& t : tokens) {
    mix_u32(static_cast<std::uint32_t>(t.size()));
    for (char c : t) mix(static_cast<unsigned char>(c));
  }
  for (const auto& [l, r] : merges) {
    mix_u32(static_cast<std::uint32_t>(l));
    mix_u32(static_cast<std::uint32_t>(r));
  }
  mix_u32(static_cast<std::uint32_t>(eod_id));
  return h;
}

Vocab bpe_train(std::span<const std::string> documents, std::size_t vocab_size) {
  if (vocab_size < kByteTokens + 1) {
    throw UsageError("vocab_size must be at least 257, got " + std::to_string(vocab_size));
  }
  std::size_t total = 0;
  for (const auto& d : documents) total += d.size();
  if (total == 0) throw DataError("cannot train a tokenizer on an empty corpus");
  if (total >= kNone) throw DataError("tokenizer corpus too large (" + std::to_string(total) + " bytes)");

  Vocab vocab = base_vocab();
  SymbolList s;
  s.sym.reserve(total);
  for (const auto& d : documents) s.append_document(d);

  PairTable pairs;
  for (std::uint32_t i = 0; i < s.sym.size(); ++i) {
    if (s.next[i] != kNone) pairs.add(pack(s.sym[i], s.sym[s.next[i]]), 1, i);
  }

  const std::size_t target_merges = vocab_size - kByteTokens - 1;
  while (vocab.merges.size() < target_merges && !pairs.empty()) {
    const std::uint64_t key = pairs.best();
    const TokenId a = left_of(key), b = right_of(key);
    const auto z = static_cast<TokenId>(vocab.tokens.size());
    vocab.merges.emplace_back(a, b);
    vocab.tokens.push_back(vocab.tokens[static_cast<std::size_t>(a)] + vocab.tokens[static_cast<std::size_t>(b)]);

    for (std::uint32_t pos : pairs.take_occurrences(key)) {
      if (!s.alive[pos] || s.sym[pos] != a) continue;
      const std::uint32_t nxt = s.next[pos];
      if (nxt == kNone || s.sym[nxt] != b) continue;

      const std::uint32_t p = s.prev[pos];
      const std::uint32_t nn = s.next[nxt];
      if (p != kNone) pairs.add(pack(s.sym[p], a), -1, p);
      if (nn != kNone) pairs.add(pack(b, s.sym[nn]), -1, nxt);
      pairs.add(key, -1, pos);

      s.sym[pos] = z;
      s.alive[nxt] = false;
      s.next[pos] = nn;
      if (nn != kNone) s.prev[nn] = pos;

      if (p != kNone) pairs.add(pack(s.sym[p], z), 1, p);
      if (nn != kNone) pairs.add(pack(z, s.sym[nn]), 1, pos);
    }
  }

  vocab.eod_id = static_cast<TokenId>(vocab.tokens.size());
  vocab.tokens.emplace_back();
  return vocab;
}

Vocab bpe_train(std::string_view corpus, std::size_t vocab_size) {
  const std::array<std::string, 1> docs{std::string(corpus)};
  return bpe_train(std::span<const std::string>(docs), vocab_size);
}

Tokenizer::Tokenizer(Vocab vocab) : vocab_(std::move(vocab)) {
  for (std::size_t i = 0; i < vocab_.merges.size(); ++i) {
    const auto& [l, r] = vocab_.merges[i];
    rank_.emplace(pack(l, r), static_cast<TokenId>(i));
  }
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                    std::to_string(vocab_.size()));
  }
  return vocab_.tokens[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  const std::size_t n = text.size();
  std::vector<TokenId> sym(n);
  std::vector<std::uint32_t> prev(n), next(n);
  std::vector<bool> alive(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    sym[i] = static_cast<unsigned char>(text[i]);
    prev[i] = i == 0 ? kNone : static_cast<std::uint32_t>(i - 1);
    next[i] = i + 1 == n ? kNone : static_cast<std::uint32_t>(i + 1);
  }

  // (rank, position of left symbol); lowest rank first, then leftmost.
  using Item = std::pair<TokenId, std::uint32_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  auto push = [&](std::uint32_t pos) {
    const std::uint32_t nx = next[pos];
    if (nx == kNone) return;
    auto it = rank_.find(pack(sym[pos], sym[nx]));
    if (it != rank_.end()) heap.emplace(it->second, pos);
  };
  for (std::uint32_t i = 0; i + 1 < n; ++i) push(i);

  while (!heap.empty()) {
    const auto [rank, pos] = heap.top();
    heap.pop();
    if (!alive[pos]) continue;
    const std::uint32_t nx = next[pos];
    if (nx == kNone) continue;
    const auto& [l, r] = vocab_.merges[static_cast<std::size_t>(rank)];
    if (sym[pos] != l || sym[nx] != r) continue;

    sym[pos] = static_cast<TokenId>(kByteTokens) + rank;
    alive[nx] = false;
    next[pos] = next[nx];
    if (next[nx] != kNone) prev[next[nx]] = pos;
    if (prev[pos] != kNone) push(prev[pos]);
    push(pos);
  }

  std::vector<TokenId> out;
  for (std::uint32_t i = 0; i < n; i = next[i]) {
    out.push_back(sym[i]);
    if (next[i] == kNone) break;
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

std::string Tokenizer::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["vocab_size"] = vocab_.size();
  auto& toks = j["tokens"] = nlohmann::json::array();
  for (const auto& t : vocab_.tokens) toks.push_back(base64_encode(t));
  auto& merges = j["merges"] = nlohmann::json::array();
  for (const auto& [l, r] : vocab_.merges) merges.push_back({l, r});
  j["eod_id"] = vocab_.eod_id;
  return j.dump();
}

Tokenizer Tokenizer::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tokenizer file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1) throw DataError("unsupported tokenizer version");
    const auto vocab_size = j.at("vocab_size").get<std::size_t>();
    if (vocab_size < kByteTokens + 1) throw DataError("tokenizer vocab_size below 257");
    Vocab v;
    for (const auto& t : j.at("tokens")) v.tokens.push_back(base64_decode(t.get<std::string>()));
    for (const auto& m : j.at("merges")) v.merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
    v.eod_id = j.at("eod_id").get<TokenId>();

    if (v.tokens.size() != vocab_size) throw DataError("tokenizer token list does not match vocab_size");
    if (v.merges.size() + kByteTokens + 1 != vocab_size) {
      throw DataError("tokenizer merge count does not match vocab_size");
    }
    if (static_cast<std::size_t>(v.eod_id) != vocab_size - 1) {
      throw DataError("tokenizer eod_id must be the last id");
    }
    for (std::size_t b = 0; b < kByteTokens; ++b) {
      if (v.tokens[b] != std::string(1, static_cast<char>(b))) {
        throw DataError("tokenizer id " + std::to_string(b) + " is not the matching single byte");
      }
    }
    for (std::size_t i = 0; i < v.merges.size(); ++i) {
      const auto [l, r] = v.merges[i];
      const auto id = static_cast<TokenId>(kByteTokens + i);
      if (l < 0 || r < 0 || l >= id || r >= id) {
        throw DataError("tokenizer merge " + std::to_string(i) + " references an unknown token");
      }
      if (v.tokens[static_cast<std::size_t>(id)] != v.tokens[static_cast<std::size_t>(l)] + v.tokens[static_cast<std::size_t>(r)]) {
        throw DataError("tokenizer token " + std::to_string(id) + " is not the concatenation of its parents");
      }
    }
    return Tokenizer(std::move(v));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed tokenizer file: ") + e.what());
  }
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tokenizer file " + path.string());
  out << to_json() << '\n';
  if (!out) throw DataError("failed writing tokenizer file " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read tokenizer file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) noexcept {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                            static_cast<unsigned char>(bytes[i + 2]);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw DataError("base64 length is not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int pad = 0;
    std::uint32_t v = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && last && k >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int x = b64_value(c);
      if (x < 0 || pad > 0) throw DataError("invalid base64 character");
      v = (v << 6) | static_cast<std::uint32_t>(x);
    }
    out += static_cast<char>((v >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((v >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(v & 0xFF);
  }
  return out;
}

}  // namespace lexlm
