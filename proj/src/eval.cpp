#include "lexlm/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <regex>
#include <sstream>

#include "lexlm/error.hpp"

namespace lexlm {

using nlohmann::json;

double perplexity(const InferenceModel& m, std::span<const TokenId> stream) {
  if (stream.size() < 2) throw DataError("perplexity needs at least 2 tokens");
  const std::size_t L = m.config().context_len, V = m.config().vocab_size;
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < stream.size(); start += L) {
    const std::size_t n = std::min(L, stream.size() - 1 - start);
    const Tensor logits = forward(m, stream.subspan(start, n));
    for (std::size_t t = 0; t < n; ++t) {
      const auto row = logits.row(t);
      const float mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      const auto target = static_cast<std::size_t>(stream[start + t + 1]);
      nll += std::log(z) + mx - static_cast<double>(row[target]);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

std::string normalize_text(std::string_view s) {
  std::string out;
  bool space = false;
  for (unsigned char ch : s) {
    if (std::isspace(ch)) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(ch));
  }
  auto strip = [](unsigned char ch) { return std::ispunct(ch) || std::isspace(ch); };
  std::size_t a = 0, b = out.size();
  while (a < b && strip(static_cast<unsigned char>(out[a]))) ++a;
  while (b > a && strip(static_cast<unsigned char>(out[b - 1]))) --b;
  return out.substr(a, b - a);
}

bool exact_match(std::string_view generated, std::string_view expected) {
  return normalize_text(generated) == normalize_text(expected);
}

double token_f1(std::string_view generated, std::string_view expected) {
  auto words = [](const std::string& s) {
    std::map<std::string, int> bag;
    std::istringstream in(s);
    std::string w;
    int n = 0;
    while (in >> w) ++bag[w], ++n;
    return std::pair{bag, n};
  };
  const auto [g, ng] = words(normalize_text(generated));
  const auto [e, ne] = words(normalize_text(expected));
  if (ng == 0 && ne == 0) return 1.0;
  if (ng == 0 || ne == 0) return 0.0;
  int common = 0;
  for (const auto& [w, k] : g) {
    auto it = e.find(w);
    if (it != e.end()) common += std::min(k, it->second);
  }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / ng, r = static_cast<double>(common) / ne;
  return 2 * p * r / (p + r);
}

std::string complete(const InferenceModel& m, const Tokenizer& tok, std::string_view prompt, std::size_t max_new) {
  SamplingOptions o;
  o.max_new = max_new;
  return complete(m, tok, prompt, o);
}

std::string complete(const InferenceModel& m, const Tokenizer& tok, std::string_view prompt, SamplingOptions o) {
  std::vector<TokenId> ids{tok.eod_id()};
  const auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  o.eod_id = tok.eod_id();
  o.tokenizer = &tok;
  // Back off whole tokens covering the prompt's tail and let the model
  // re-tokenize it, constrained to the same bytes.
  std::string tail;
  std::size_t dropped = 0;
  while (ids.size() > 1 && tail.size() < kHealBytes) {
    tail = tok.token_bytes(ids.back()) + tail;
    ids.pop_back();
    ++dropped;
  }
  o.forced_prefix = tail;
  o.max_new += dropped;
  const auto res = generate(m, ids, o);
  const std::string text = tok.decode(res.tokens);
  return text.size() >= o.forced_prefix.size() ? text.substr(o.forced_prefix.size()) : std::string();
}

ProbeScores score_probes(const InferenceModel& m, const Tokenizer& tok, const std::vector<Probe>& probes) {
  ProbeScores s;
  if (probes.empty()) throw DataError("no probes to score");
  std::size_t em = 0, da = 0;
  for (const auto& p : probes) {
    ProbeVerdict v;
    v.prompt = p.prompt;
    v.expected = p.expected;
    v.generated = complete(m, tok, p.prompt, tok.encode(p.expected).size() + 16);
    v.exact = exact_match(v.generated, p.expected);
    v.f1 = token_f1(v.generated, p.expected);
    em += v.exact;
    da += v.f1 >= kDefinitionF1;
    s.verdicts.push_back(std::move(v));
  }
  s.exact_match = static_cast<double>(em) / static_cast<double>(probes.size());
  s.definition_accuracy = static_cast<double>(da) / static_cast<double>(probes.size());
  return s;
}

std::vector<Citation> extract_citations(std::string_view text) {
  static const std::regex re(R"(Section\s+(\d+[A-Za-z]?)\s+(?:of\s+the\s+)?([A-Z][A-Za-z]*[A-Z][A-Za-z]*))");
  std::vector<Citation> out;
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
    out.push_back({(*it)[2].str(), (*it)[1].str()});
  }
  return out;
}

HallucinationResult hallucination_rate(const std::vector<std::string>& responses, const CitationIndex& index) {
  HallucinationResult r;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const auto cites = extract_citations(responses[i]);
    if (cites.empty()) continue;
    ++r.citing;
    json missing = json::array();
    for (const auto& c : cites) {
      if (index.lookup(c.act, c.section) == nullptr) missing.push_back(c.act + " " + c.section);
    }
    if (!missing.empty()) ++r.hallucinating;
    json cited = json::array();
    for (const auto& c : cites) cited.push_back(c.act + " " + c.section);
    r.evidence.push_back({{"response", i}, {"cited", cited}, {"missing", missing}});
  }
  if (r.citing > 0) r.rate = static_cast<double>(r.hallucinating) / static_cast<double>(r.citing);
  return r;
}

LatencyResult latency(const InferenceModel& m, std::span<const TokenId> prompt, std::size_t n_tokens,
                      std::size_t warmup, std::size_t runs) {
  if (n_tokens == 0 || runs == 0) throw UsageError("latency needs n_tokens > 0 and runs > 0");
  SamplingOptions o;
  o.max_new = n_tokens;
  o.stop_at_eod = false;
  for (std::size_t i = 0; i < warmup; ++i) generate(m, prompt, o);
  LatencyResult r;
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto g = generate(m, prompt, o);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    r.samples.push_back(ms / static_cast<double>(g.tokens.size()));
  }
  auto sorted = r.samples;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.ms_per_token = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return r;
}

json EvalReport::to_json() const {
  json probes = json::array();
  for (const auto& v : verdicts) {
    probes.push_back({{"prompt", v.prompt},
                      {"expected", v.expected},
                      {"generated", v.generated},
                      {"exact_match", v.exact},
                      {"f1", v.f1}});
  }
  return {{"model_id", model_id},
          {"precision", precision_name(precision)},
          {"file_bytes", file_bytes},
          {"ppl", ppl},
          {"exact_match", exact_match},
          {"definition_accuracy", definition_accuracy},
          {"hallucination_rate", hallucination_rate ? json(*hallucination_rate) : json(nullptr)},
          {"ms_per_token", ms_per_token},
          {"latency_samples_ms", latency_samples},
          {"probe_count", probe_count},
          {"config", config},
          {"probes", probes},
          {"hallucination_evidence", hallucination_evidence}};
}

EvalReport evaluate(const InferenceModel& m, const Tokenizer& tok, const EvalInputs& in, std::string model_id,
                    std::uint64_t file_bytes) {
  EvalReport r;
  r.model_id = std::move(model_id);
  r.precision = m.quantized() ? Precision::Q8_0 : Precision::F32;
  r.file_bytes = file_bytes;
  r.config = m.config().to_json();
  r.ppl = perplexity(m, in.val_stream);

  const ProbeScores s = score_probes(m, tok, in.probes);
  r.exact_match = s.exact_match;
  r.definition_accuracy = s.definition_accuracy;
  r.probe_count = in.probes.size();
  r.verdicts = s.verdicts;

  if (in.index != nullptr) {
    std::vector<std::string> responses;
    for (const auto& v : s.verdicts) responses.push_back(v.generated);
    auto h = hallucination_rate(responses, *in.index);
    r.hallucination_rate = h.rate;
    r.hallucination_evidence = std::move(h.evidence);
  }

  std::vector<TokenId> prompt{tok.eod_id()};
  const auto p = tok.encode(in.probes.front().prompt);
  prompt.insert(prompt.end(), p.begin(), p.end());
  const auto lat = latency(m, prompt, in.latency_tokens, 1, in.latency_runs);
  r.ms_per_token = lat.ms_per_token;
  r.latency_samples = lat.samples;
  return r;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double rel(double a, double b) { return a == 0 ? 0.0 : (b - a) / a; }

}  // namespace

json Ablation::to_json() const {
  return {{"fp32", fp32.to_json()},
          {"q8_0", q8.to_json()},
          {"delta",
           {{"size_rel", rel(static_cast<double>(fp32.file_bytes), static_cast<double>(q8.file_bytes))},
            {"ms_per_token_rel", rel(fp32.ms_per_token, q8.ms_per_token)},
            {"speedup", q8.ms_per_token > 0 ? fp32.ms_per_token / q8.ms_per_token : 0.0},
            {"ppl_abs", q8.ppl - fp32.ppl},
            {"ppl_rel", rel(fp32.ppl, q8.ppl)},
            {"exact_match_points", 100.0 * (q8.exact_match - fp32.exact_match)}}}};
}

std::string Ablation::table() const {
  struct Row {
    std::string name, a, b, d;
  };
  const double speedup = q8.ms_per_token > 0 ? fp32.ms_per_token / q8.ms_per_token : 0.0;
  const std::vector<Row> rows = {
      {"Metric", "FP32", "Q8_0", "Delta"},
      {"Size", fmt("%.3f MB", static_cast<double>(fp32.file_bytes) / 1e6),
       fmt("%.3f MB", static_cast<double>(q8.file_bytes) / 1e6),
       fmt("%+.1f%%", 100 * rel(static_cast<double>(fp32.file_bytes), static_cast<double>(q8.file_bytes)))},
      {"ms/token", fmt("%.3f", fp32.ms_per_token), fmt("%.3f", q8.ms_per_token),
       fmt("%+.1f%%", 100 * rel(fp32.ms_per_token, q8.ms_per_token)) + fmt(" (%.2fx)", speedup)},
      {"PPL", fmt("%.4f", fp32.ppl), fmt("%.4f", q8.ppl),
       fmt("%+.4f", q8.ppl - fp32.ppl) + fmt(" (%+.2f%%)", 100 * rel(fp32.ppl, q8.ppl))},
      {"Exact Match", fmt("%.1f%%", 100 * fp32.exact_match), fmt("%.1f%%", 100 * q8.exact_match),
       fmt("%+.1f pts", 100 * (q8.exact_match - fp32.exact_match))},
  };
  std::size_t w[4] = {0, 0, 0, 0};
  for (const auto& r : rows) {
    w[0] = std::max(w[0], r.name.size());
    w[1] = std::max(w[1], r.a.size());
    w[2] = std::max(w[2], r.b.size());
    w[3] = std::max(w[3], r.d.size());
  }
  auto pad = [](const std::string& s, std::size_t n) { return s + std::string(n - s.size(), ' '); };
  std::string out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out += pad(r.name, w[0]) + " | " + pad(r.a, w[1]) + " | " + pad(r.b, w[2]) + " | " + r.d + "\n";
    if (i == 0) {
      out += std::string(w[0], '-') + "-+-" + std::string(w[1], '-') + "-+-" + std::string(w[2], '-') + "-+-" +
             std::string(w[3], '-') + "\n";
    }
  }
  return out;
}

}  // namespace lexlm
