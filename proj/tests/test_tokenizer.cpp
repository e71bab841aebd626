#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "lexlm/error.hpp"
#include "lexlm/tokenizer.hpp"

using namespace lexlm;

TEST_CASE("training on aaabdaaabac") {
  // Classic BPE example: first merge is (a,a), then (aa,a) or similar.
  const Vocab v = bpe_train(std::string_view("aaabdaaabac"), 260);
  REQUIRE(v.merges.size() >= 1);
  CHECK(v.merges[0] == std::pair<TokenId, TokenId>{'a', 'a'});
  CHECK(v.tokens[256] == "aa");
  CHECK(v.tokens.back().empty());
  CHECK(v.eod_id == TokenId(v.tokens.size() - 1));
}

TEST_CASE("ties broken by smaller pair") {
  // "ab" and "cd" each appear twice; (a,b) < (c,d).
  const Vocab v = bpe_train(std::string_view("abcdabcd"), 258);
  REQUIRE(v.merges.size() == 1);
  CHECK(v.merges[0] == std::pair<TokenId, TokenId>{'a', 'b'});
}

TEST_CASE("early stop when no pair remains") {
  const Vocab v = bpe_train(std::string_view("ab"), 300);
  CHECK(v.merges.size() == 1);
  CHECK(v.size() == 258);
}

TEST_CASE("merges never span documents") {
  const std::string docs[] = {"xa", "ay", "xa"};
  const Vocab v = bpe_train(std::span<const std::string>(docs), 258);
  REQUIRE(v.merges.size() == 1);
  CHECK(v.merges[0] == std::pair<TokenId, TokenId>{'x', 'a'});
}

TEST_CASE("encode/decode roundtrip") {
  const std::string corpus =
      "IPC Section 302. Punishment for murder. Whoever commits murder shall be punished with death. "
      "IPC Section 304. Punishment for culpable homicide. Whoever commits culpable homicide shall be punished.";
  const Tokenizer tok(bpe_train(std::string_view(corpus), 320));
  for (const std::string s : {corpus, std::string(""), std::string("\xff\x00 z", 4), std::string("murder murder")}) {
    const auto ids = tok.encode(s);
    CHECK(tok.decode(ids) == s);
  }
  CHECK(tok.encode("murder").size() < 6);
  const TokenId bad[] = {TokenId(tok.vocab_size())};
  CHECK_THROWS_AS(tok.decode(bad), DataError);
  const TokenId eod[] = {tok.eod_id()};
  CHECK(tok.decode(eod).empty());
}

TEST_CASE("encode applies merges in learned order") {
  const Tokenizer tok(bpe_train(std::string_view("aaabdaaabac"), 262));
  // Reference: repeatedly apply the lowest-ranked merge present.
  const auto& v = tok.vocab();
  std::vector<TokenId> ids;
  const std::string text = "aaabdaaabacaaaa";
  for (unsigned char c : text) ids.push_back(c);
  for (;;) {
    std::size_t best = v.merges.size(), pos = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i)
      for (std::size_t r = 0; r < v.merges.size(); ++r)
        if (v.merges[r] == std::pair{ids[i], ids[i + 1]} && r < best) best = r, pos = i;
    if (best == v.merges.size()) break;
    std::vector<TokenId> next;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && v.merges[best] == std::pair{ids[i], ids[i + 1]}) {
        next.push_back(TokenId(256 + best));
        ++i;
      } else {
        next.push_back(ids[i]);
      }
    }
    ids = next;
    (void)pos;
  }
  CHECK(tok.encode(text) == ids);
}

TEST_CASE("vocab size limits") {
  CHECK_THROWS_AS(bpe_train(std::string_view("abc"), 256), UsageError);
  CHECK_THROWS_AS(bpe_train(std::string_view(""), 300), DataError);
}

TEST_CASE("save/load roundtrip and validation") {
  const Tokenizer tok(bpe_train(std::string_view("the quick brown fox the quick"), 270));
  const auto p = std::filesystem::temp_directory_path() / "lexlm_tok_test.json";
  tok.save(p);
  const Tokenizer back = Tokenizer::load(p);
  CHECK(back.vocab() == tok.vocab());
  CHECK(back.vocab().fingerprint() == tok.vocab().fingerprint());
  std::filesystem::remove(p);
  CHECK_THROWS_AS(Tokenizer::load(p), DataError);
  CHECK_THROWS_AS(Tokenizer::from_json("{\"version\":1}"), DataError);
  CHECK_THROWS_AS(Tokenizer::from_json("not json"), DataError);
}

TEST_CASE("base64") {
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
  CHECK(base64_decode("Zm9vYg==") == "foob");
  CHECK_THROWS_AS(base64_decode("Zm9v!"), DataError);
}
