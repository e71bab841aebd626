#include <doctest.h>

#include <cmath>

#include "lexlm/error.hpp"
#include "lexlm/eval.hpp"

using namespace lexlm;

namespace {

ModelConfig small(std::size_t V) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_ff = 64;
  c.context_len = 16;
  c.vocab_size = V;
  return c;
}

}  // namespace

TEST_CASE("uniform model has perplexity equal to vocab size") {
  const ModelConfig c = small(50);
  ParameterSet p = ParameterSet::zeros(c);
  for (auto& L : p.layers) L.ln1_g.fill(1), L.ln2_g.fill(1);
  p.lnf_g.fill(1);
  const InferenceModel m = InferenceModel::from_params(p, c);
  std::vector<TokenId> stream;
  for (int i = 0; i < 40; ++i) stream.push_back(TokenId(i % 50));
  CHECK(perplexity(m, stream) == doctest::Approx(50.0).epsilon(1e-5));
  const TokenId one[] = {3};
  CHECK_THROWS_AS(perplexity(m, one), DataError);
}

TEST_CASE("perplexity is at least one") {
  const ModelConfig c = small(30);
  const InferenceModel m = InferenceModel::from_params(init_params(c, 3), c);
  std::vector<TokenId> s(37);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = TokenId((i * 7) % 30);
  CHECK(perplexity(m, s) >= 1.0);
}

TEST_CASE("normalization and exact match") {
  CHECK(normalize_text("  Whoever  Commits\tMurder. ") == "whoever commits murder");
  CHECK(exact_match("Whoever commits murder.", "whoever  commits   murder"));
  CHECK(exact_match("\"Quoted.\"", "quoted"));
  CHECK_FALSE(exact_match("whoever commits theft", "whoever commits murder"));
}

TEST_CASE("token F1") {
  CHECK(token_f1("a b c", "a b c") == 1.0);
  CHECK(token_f1("x y z", "a b c") == 0.0);
  // 4 of 5 reference tokens, nothing extra: P = 1, R = 0.8, F1 = 8/9.
  CHECK(token_f1("a b c d", "a b c d e") == doctest::Approx(16.0 / 18.0));
  // 4 shared of 5 each: P = R = 0.8, F1 = 0.8 exactly at the threshold.
  const double f = token_f1("a b c d x", "a b c d e");
  CHECK(f == doctest::Approx(0.8));
  CHECK(f >= kDefinitionF1 - 1e-12);
  CHECK(token_f1("a b c x y", "a b c d e") < kDefinitionF1);
}

TEST_CASE("citation extraction") {
  const auto c = extract_citations("as in Section 302 of the IPC and Section 438 CrPC, see Section 21A of the COI.");
  REQUIRE(c.size() == 3);
  CHECK(c[0] == Citation{"IPC", "302"});
  CHECK(c[1] == Citation{"CrPC", "438"});
  CHECK(c[2] == Citation{"COI", "21A"});
  CHECK(extract_citations("IPC Section 302. Punishment for murder.").empty());
}

TEST_CASE("hallucination rate") {
  const auto idx = CitationIndex::build(synthetic_statutes());
  const std::vector<std::string> responses = {
      "punishable under Section 302 of the IPC", "nothing cited here", "contrary to Section 9999 of the IPC",
      "see Section 299 of the IPC and Section 1234 of the CrPC"};
  const auto r = hallucination_rate(responses, idx);
  CHECK(r.citing == 3);
  CHECK(r.hallucinating == 2);
  REQUIRE(r.rate.has_value());
  CHECK(*r.rate == doctest::Approx(2.0 / 3.0));
  CHECK(r.evidence.size() == 3);
  CHECK_FALSE(hallucination_rate({"no citations"}, idx).rate.has_value());
}

TEST_CASE("latency is positive and reports samples") {
  const ModelConfig c = small(30);
  const InferenceModel m = InferenceModel::from_params(init_params(c, 1), c);
  const TokenId prompt[] = {1, 2, 3};
  const auto r = latency(m, prompt, 8, 1, 5);
  CHECK(r.ms_per_token > 0);
  CHECK(r.samples.size() == 5);
}

TEST_CASE("ablation table has the expected rows") {
  Ablation a;
  a.fp32.file_bytes = 1000000;
  a.q8.file_bytes = 265625;
  a.fp32.ms_per_token = 2.0;
  a.q8.ms_per_token = 1.0;
  a.fp32.ppl = 1.2;
  a.q8.ppl = 1.21;
  a.fp32.exact_match = 0.96;
  a.q8.exact_match = 0.94;
  const std::string t = a.table();
  for (const char* row : {"Size", "ms/token", "PPL", "Exact Match", "-73.4%", "2.00x", "-2.0 pts"}) {
    CHECK(t.find(row) != std::string::npos);
  }
  const auto j = a.to_json();
  CHECK(j["delta"]["size_rel"].get<double>() == doctest::Approx(-0.734375));
  CHECK(j["fp32"]["hallucination_rate"].is_null());
}
