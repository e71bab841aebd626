// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "lexlm/cli.hpp"
#include "lexlm/corpus.hpp"
#include "lexlm/eval.hpp"
#include "lexlm/gguf.hpp"
#include "lexlm/model_io.hpp"
#include "lexlm/quant.hpp"
#include "lexlm/rng.hpp"
#include "lexlm/train.hpp"
#include "oracles.hpp"

// Largest single allocation while tracking is on.
static std::atomic<bool> g_track{false};
static std::atomic<std::size_t> g_max_alloc{0};

void* operator new(std::size_t n) {
  if (g_track.load(std::memory_order_relaxed)) {
    std::size_t cur = g_max_alloc.load(std::memory_order_relaxed);
    while (n > cur && !g_max_alloc.compare_exchange_weak(cur, n)) {
    }
  }
  if (void* p = std::malloc(n == 0 ? 1 : n)) return p;
  throw std::bad_alloc();
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }

using namespace lexlm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path work_dir() {
  static const fs::path d = [] {
    const fs::path p = fs::temp_directory_path() / "lexlm_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// ---------------------------------------------------------------- 1

Outcome size_reduction() {
  gguf::Document doc;
  doc.set("general.architecture", {std::string("gpt2")});
  doc.set("general.name", {std::string("matrix-fixture")});
  const std::vector<std::pair<std::string, Shape>> mats = {
      {"token_embd.weight", {1024, 128}},       {"blk.0.attn_qkv.weight", {384, 128}},
      {"blk.0.attn_output.weight", {128, 128}}, {"blk.0.ffn_up.weight", {512, 128}},
      {"blk.0.ffn_down.weight", {128, 512}},    {"blk.1.attn_qkv.weight", {384, 128}},
      {"blk.1.attn_output.weight", {128, 128}}, {"blk.1.ffn_up.weight", {512, 128}},
      {"blk.1.ffn_down.weight", {128, 512}},
  };
  std::uint64_t seed = 1;
  for (const auto& [name, shape] : mats) doc.tensors.push_back({name, oracle::random_tensor(shape, seed++)});
  const fs::path f32 = work_dir() / "fixture_f32.gguf", q8 = work_dir() / "fixture_q8.gguf";
  gguf::write_file(doc, f32);
  QuantizeStats st;
  gguf::write_file(quantize_document(gguf::read_file(f32), UnalignedPolicy::Error, &st), q8);
  const double red = 1.0 - double(fs::file_size(q8)) / double(fs::file_size(f32));

  // The full toy model keeps position embeddings, norms and biases in FP32.
  ModelConfig c;
  const auto model = to_document(init_params(c, 1), c);
  const double model_red =
      1.0 - double(gguf::planned_size(quantize_document(model))) / double(gguf::planned_size(model));

  const bool pass = st.quantized == mats.size() && st.kept_f32 == 0 && red >= 0.72 && red <= 0.75;
  return {pass, fmt("matrix fixture %zu -> %zu bytes, reduction %.2f%% (band 72-75%%); full toy model %.2f%%",
                    std::size_t(fs::file_size(f32)), std::size_t(fs::file_size(q8)), 100 * red, 100 * model_red)};
}

// ---------------------------------------------------------------- 2

Outcome quantization_error() {
  constexpr std::size_t kBlocks = 1'000'000, kChunk = 4096;
  Rng rng(2024);
  std::size_t checked = 0, mismatched = 0, violations = 0;
  double worst = 0.0;  // error / bound
  std::vector<float> buf(kChunk * 32);
  for (std::size_t done = 0; done < kBlocks; done += kChunk) {
    const std::size_t nb = std::min(kChunk, kBlocks - done);
    for (std::size_t i = 0; i < nb * 32; ++i) buf[i] = float(-10.0 + 20.0 * rng.uniform());
    // sprinkle exact half-way and all-zero blocks
    if (done == 0) {
      std::fill(buf.begin(), buf.begin() + 32, 0.0f);
      for (int i = 0; i < 32; ++i) buf[32 + i] = float(i - 16) * 0.5f;
    }
    const Tensor t({nb, 32}, std::vector<float>(buf.begin(), buf.begin() + std::ptrdiff_t(nb * 32)));
    const QuantizedTensor q = quantize_q8_0(t);
    const Tensor back = dequantize_q8_0(q);
    for (std::size_t b = 0; b < nb; ++b) {
      const oracle::RefBlock ref = oracle::quantize_block(&buf[b * 32]);
      const float scale = oracle::half_to_float(q.blocks[b].scale);
      bool same = scale == ref.scale;
      for (int i = 0; i < 32; ++i) same = same && q.blocks[b].codes[i] == ref.codes[i];
      mismatched += !same;
      const double slack = 127.0 * std::fabs(double(ref.scale) - double(ref.exact));
      const double bound = double(ref.exact) / 2 + slack;
      for (int i = 0; i < 32; ++i) {
        const double err = std::fabs(double(back[b * 32 + i]) - double(buf[b * 32 + i]));
        const double tol = bound + 1e-6 * std::fabs(double(buf[b * 32 + i]));
        if (err > tol) ++violations;
        if (bound > 0) worst = std::max(worst, err / bound);
      }
      ++checked;
    }
  }
  return {mismatched == 0 && violations == 0,
          fmt("%zu blocks in [-10,10]: %zu differ from reference quantizer, %zu elements over d/2 + 127*|d_fp16 - d|, "
              "max error/bound %.4f",
              checked, mismatched, violations, worst)};
}

// ---------------------------------------------------------------- 3

Outcome qmatmul_fidelity() {
  Rng rng(3);
  double worst = 0.0;
  std::size_t over = 0;
  for (int pair = 0; pair < 1000; ++pair) {
    // n >= 16 outputs per row; a single dot product near zero has no useful relative error
    const std::size_t n = 16 + rng.below(64), k = 32 * (1 + rng.below(8)), m = 1 + rng.below(4);
    const Tensor w = oracle::random_tensor({n, k}, 10'000 + pair);
    const Tensor x = oracle::random_tensor({m, k}, 20'000 + pair);
    const QuantizedTensor q = quantize_q8_0(w);
    const Tensor got = qmatmul(q, x);  // [m x n]
    const Tensor wd = dequantize_q8_0(q);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double ref = 0;
        for (std::size_t p = 0; p < k; ++p) ref += double(wd[j * k + p]) * double(x[i * k + p]);
        const double d = double(got[i * n + j]) - ref;
        num += d * d;
        den += ref * ref;
      }
    const double rel = std::sqrt(num / std::max(den, 1e-30));
    worst = std::max(worst, rel);
    over += rel > 0.01;
  }
  return {over == 0, fmt("1000 random pairs, w [16..79 x 32..256], x [1..4 x k], entries in [-1,1]: max relative Frobenius "
                         "distance %.5f (limit 0.01)",
                         worst)};
}

// ---------------------------------------------------------------- 4

Outcome gradient_check() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 64;
  c.context_len = 16;
  c.vocab_size = 64;
  ModelConfig k = c;
  k.init_std = 0.2f;
  ParameterSet p = init_params(k, 4);
  Rng noise(4, 77);
  for (auto& r : p.refs())
    if (r.role != ParamRole::Weight && r.role != ParamRole::TokenEmbedding)
      for (auto& v : r.tensor->storage()) v += float(noise.normal(0, 0.1));
  Rng tr(41);
  std::vector<TokenId> toks(13);
  for (auto& t : toks) t = TokenId(tr.below(c.vocab_size));

  const auto g = loss_and_backward(p, c, toks);
  auto refs = p.refs();
  const auto grefs = g.grads.refs();
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t ti = 0; ti < refs.size(); ++ti)
    for (std::size_t i = 0; i < refs[ti].tensor->size(); ++i) all.emplace_back(ti, i);
  Rng pick(42);
  for (std::size_t i = all.size() - 1; i > 0; --i) std::swap(all[i], all[pick.below(i + 1)]);
  const std::size_t n = std::min<std::size_t>(1200, all.size());

  const double h = 1e-3;
  double worst = 0.0;
  std::size_t bad = 0;
  std::string worst_name;
  for (std::size_t s = 0; s < n; ++s) {
    const auto [ti, i] = all[s];
    float& w = (*refs[ti].tensor)[i];
    const float orig = w;
    const float wp = float(orig + h), wm = float(orig - h);
    w = wp;
    const double lp = oracle::model_loss(p, c, toks);
    w = wm;
    const double lm = oracle::model_loss(p, c, toks);
    w = orig;
    const double fd = (lp - lm) / (double(wp) - double(wm));
    const double an = (*grefs[ti].tensor)[i];
    const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-3});
    if (rel > worst) {
      worst = rel;
      worst_name = refs[ti].name;
    }
    bad += rel > 1e-2;
  }
  return {bad == 0 && n >= 1000,
          fmt("%zu of %zu parameters sampled (2 layers, d=16, vocab 64, h=1e-3): max relative error %.2e at %s",
              n, all.size(), worst, worst_name.c_str())};
}

// ---------------------------------------------------------------- 5, 6, 7

struct Toy {
  bool trained = false;
  Tokenizer tok{Vocab{}};
  ModelConfig config;
  ParameterSet params;
  std::vector<StatuteRecord> records;
  std::vector<TokenId> stream;
  double tail_loss = 0, seconds = 0;
  std::size_t steps = 0;
  ProbeScores fp32, q8;
  InferenceModel fm, qm;
};

Toy& toy() {
  static Toy t;
  if (t.trained) return t;
  const auto t0 = std::chrono::steady_clock::now();
  t.records = synthetic_statutes(50);
  std::vector<std::string> docs;
  for (const auto& r : t.records) docs.push_back(render_document(r));
  t.tok = Tokenizer(bpe_train(docs, 1024));
  const Dataset ds = build_dataset(t.records, t.tok, 0.0, 1);
  TrainOptions o;
  o.config.vocab_size = t.tok.vocab_size();
  o.config.context_len = 128;
  o.batch_size = 4;
  o.hyper.base_lr = 1e-3f;
  o.hyper.total_steps = 1500;
  o.seed = 1;
  const TrainResult res = train_loop(o, ds.train);
  t.config = o.config;
  t.params = res.params;
  t.steps = res.steps;
  const std::size_t tail = std::min<std::size_t>(50, res.log.size());
  for (std::size_t i = res.log.size() - tail; i < res.log.size(); ++i) t.tail_loss += res.log[i].loss / double(tail);
  t.stream = Dataset::flatten(ds.train);
  t.fm = InferenceModel::from_params(t.params, t.config);
  t.qm = quantized_model(t.params, t.config);
  const auto probes = make_probes(t.records);
  t.fp32 = score_probes(t.fm, t.tok, probes);
  t.q8 = score_probes(t.qm, t.tok, probes);
  t.seconds = seconds_since(t0);
  t.trained = true;
  return t;
}

Outcome toy_convergence() {
  Toy& t = toy();
  std::size_t misses = 0;
  for (const auto& v : t.fp32.verdicts) misses += !v.exact;
  return {t.tail_loss < 1.0 && t.fp32.exact_match >= 0.9 && t.steps <= 2000,
          fmt("50 statutes, 2 layers, d=128, vocab %zu, %zu steps in %.0f s: loss %.3f (mean of last 50 steps), "
              "exact match %.1f%% (%zu misses), definition accuracy %.1f%%",
              t.tok.vocab_size(), t.steps, t.seconds, t.tail_loss, 100 * t.fp32.exact_match, misses,
              100 * t.fp32.definition_accuracy)};
}

Outcome ablation_drift() {
  Toy& t = toy();
  const double pf = perplexity(t.fm, t.stream), pq = perplexity(t.qm, t.stream);
  const double drift = (pq - pf) / pf;
  const double drop = 100 * (t.fp32.exact_match - t.q8.exact_match);
  return {drift <= 0.05 && drop <= 5.0,
          fmt("PPL %.4f -> %.4f (%+.3f%%, limit +5%%); exact match %.1f%% -> %.1f%% (%+.1f points, limit -5)", pf, pq,
              100 * drift, 100 * t.fp32.exact_match, 100 * t.q8.exact_match, -drop)};
}

Outcome latency_report() {
  Toy& t = toy();
  const auto prompt = t.tok.encode(render_prompt(t.records.front()));
  std::vector<TokenId> ids{t.tok.eod_id()};
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  const auto f = latency(t.fm, ids, 32, 1, 5), q = latency(t.qm, ids, 32, 1, 5);
  return {true, fmt("report only, median of 5 runs x 32 tokens: FP32 %.4f ms/token, Q8_0 %.4f ms/token (%.2fx)",
                    f.ms_per_token, q.ms_per_token, f.ms_per_token / q.ms_per_token)};
}

// ---------------------------------------------------------------- 8

Outcome gguf_robustness() {
  ModelConfig c;
  c.d_model = 64;
  c.n_heads = 2;
  c.d_ff = 128;
  c.context_len = 32;
  c.vocab_size = 256;
  const auto f32 = to_document(init_params(c, 8), c, {"fuzz", 0xabcdef, "{}"});
  const auto q8 = quantize_document(f32);
  bool roundtrip = true;
  std::vector<std::vector<std::uint8_t>> files;
  for (const auto* d : {&f32, &q8}) {
    const auto bytes = gguf::serialize(*d);
    const auto back = gguf::parse(bytes);
    roundtrip = roundtrip && gguf::serialize(back) == bytes && back.metadata == d->metadata &&
                back.tensors.size() == d->tensors.size() && bytes.size() == gguf::planned_size(*d);
    for (std::size_t i = 0; roundtrip && i < back.tensors.size(); ++i) {
      roundtrip = back.tensors[i].name == d->tensors[i].name && back.tensors[i].data == d->tensors[i].data;
    }
    files.push_back(bytes);
  }

  Rng rng(8);
  std::size_t rejected = 0, accepted = 0, unfaithful = 0, other = 0;
  std::size_t worst_alloc = 0;
  for (int i = 0; i < 10'000; ++i) {
    auto bytes = files[i % 2];
    const std::size_t at = rng.below(bytes.size());
    bytes[at] ^= std::uint8_t(1 + rng.below(255));
    g_max_alloc = 0;
    g_track = true;
    try {
      const auto d = gguf::parse(bytes);
      g_track = false;
      ++accepted;
      if (gguf::serialize(d) != bytes) ++unfaithful;
    } catch (const gguf::FormatError&) {
      g_track = false;
      ++rejected;
    } catch (...) {
      g_track = false;
      ++other;
    }
    worst_alloc = std::max(worst_alloc, g_max_alloc.load());
  }
  const std::size_t limit = 2 * std::max(files[0].size(), files[1].size());
  return {roundtrip && other == 0 && unfaithful == 0 && worst_alloc <= limit,
          fmt("roundtrip bit-identical FP32 (%zu B) and Q8_0 (%zu B): %s; 10000 single-byte corruptions: %zu rejected "
              "with FormatError, %zu parsed and re-serialize byte-exact, %zu other errors, largest allocation %zu B "
              "(limit %zu)",
              files[0].size(), files[1].size(), roundtrip ? "yes" : "NO", rejected, accepted - unfaithful, other,
              worst_alloc, limit)};
}

// ---------------------------------------------------------------- 9

Outcome determinism() {
  const fs::path d = work_dir() / "det";
  fs::create_directories(d);
  const auto p = [&](const char* n) { return (d / n).string(); };
  std::ostringstream sink, err;
  std::istringstream in;
  const auto cli = [&](std::vector<std::string> args) { return run_cli(args, in, sink, err); };
  if (cli({"ingest", "--synthetic", "50", "--out", p("corpus.jsonl")}) != 0 ||
      cli({"train-tokenizer", "--corpus", p("corpus.jsonl"), "--vocab-size", "512", "--out", p("tok.json")}) != 0) {
    return {false, "setup failed: " + err.str()};
  }
  for (const char* run : {"a", "b"}) {
    const int rc = cli({"train", "--quiet", "--deterministic", "--seed", "7", "--corpus", p("corpus.jsonl"),
                        "--tokenizer", p("tok.json"), "--out-dir", p(run), "--set", "train.batch_size=2", "--set",
                        "model.context_len=64", "--set", "optimizer.total_steps=12", "--set",
                        "train.checkpoint_every=5"});
    if (rc != 0) return {false, "train failed: " + err.str()};
  }
  bool same = true;
  for (const char* f : {"model.gguf", "optimizer.gguf", "train_state.json"}) {
    same = same && slurp(d / "a" / f) == slurp(d / "b" / f);
  }
  std::vector<std::string> outs;
  for (int i = 0; i < 2; ++i) {
    sink.str("");
    cli({"generate", "--model", p("a/model.gguf"), "--tokenizer", p("tok.json"), "--prompt", "IPC Section 302.",
         "--temperature", "0", "--max-tokens", "24"});
    outs.push_back(sink.str());
    sink.str("");
    cli({"generate", "--model", p("a/model.gguf"), "--tokenizer", p("tok.json"), "--prompt", "IPC Section 302.",
         "--temperature", "0.8", "--top-k", "20", "--seed", "5", "--max-tokens", "24"});
    outs.push_back(sink.str());
  }
  const bool gen = outs[0] == outs[2] && outs[1] == outs[3] && !outs[0].empty();
  return {same && gen, fmt("two --deterministic runs (12 steps, checkpoint at 5, 10, 12): checkpoints %s; "
                           "greedy generate %s, seeded sampling %s",
                           same ? "bit-identical" : "DIFFER", outs[0] == outs[2] ? "reproducible" : "DIFFERS",
                           outs[1] == outs[3] ? "reproducible" : "DIFFERS")};
}

// ---------------------------------------------------------------- 10

Outcome schedule_and_adamw() {
  double worst = 0;
  const auto track = [&](double got, double want) { worst = std::max(worst, std::fabs(got - want)); };
  OptimizerHyper h;
  h.base_lr = 3e-4f;
  h.total_steps = 2000;
  const double base = h.base_lr, floor = base * h.min_lr_frac;
  const std::size_t W = warmup_steps(h);
  track(double(W), 200.0);
  track(lr_at(0, h), base / 200);
  track(lr_at(W - 1, h), base);
  track(lr_at(W, h), base);
  track(lr_at(W + (2000 - W) / 2, h), (base + floor) / 2);
  track(lr_at(2000, h), floor);
  track(lr_at(10'000, h), floor);
  for (std::size_t s = W; s <= 2000; s += 37) {
    const double prog = double(s - W) / double(2000 - W);
    track(lr_at(s, h), floor + 0.5 * (base - floor) * (1 + std::cos(M_PI * prog)));
  }

  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_ff = 64;
  c.context_len = 16;
  c.vocab_size = 40;
  const float lr = 1e-3f;
  // zero gradient, no decay
  {
    OptimizerHyper z = h;
    z.weight_decay = 0;
    ParameterSet p = init_params(c, 1);
    const ParameterSet before = p;
    OptimizerState s = OptimizerState::zeros(c);
    adamw_step(p, ParameterSet::zeros(c), s, z, lr);
    const auto a = p.refs();
    const auto b = before.refs();
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].tensor->size(); ++k) track((*a[i].tensor)[k], (*b[i].tensor)[k]);
  }
  // pure decay
  {
    OptimizerHyper z = h;
    z.weight_decay = 0.1f;
    ParameterSet p = init_params(c, 2);
    const ParameterSet before = p;
    OptimizerState s = OptimizerState::zeros(c);
    adamw_step(p, ParameterSet::zeros(c), s, z, lr);
    const auto a = p.refs();
    const auto b = before.refs();
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].tensor->size(); ++k) {
        const double w0 = (*b[i].tensor)[k];
        track((*a[i].tensor)[k], decays(a[i].role) ? w0 * (1 - double(lr) * double(z.weight_decay)) : w0);
      }
  }
  // first step with gradients and decay
  {
    OptimizerHyper z = h;
    z.weight_decay = 0.01f;
    ParameterSet p = init_params(c, 3);
    const ParameterSet before = p;
    ParameterSet g = ParameterSet::zeros(c);
    Rng r(10);
    for (auto& ref : g.refs())
      for (auto& v : ref.tensor->storage()) v = float(r.normal(0, 0.05));
    OptimizerState s = OptimizerState::zeros(c);
    adamw_step(p, g, s, z, lr);
    const auto a = p.refs();
    const auto b = before.refs();
    const auto gr = std::as_const(g).refs();
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i].tensor->size(); ++k) {
        const double w0 = (*b[i].tensor)[k], gk = (*gr[i].tensor)[k];
        const double lambda = decays(a[i].role) ? double(z.weight_decay) : 0.0;
        track((*a[i].tensor)[k], w0 - double(lr) * (gk / (std::fabs(gk) + double(z.eps)) + lambda * w0));
      }
  }
  return {worst <= 1e-7, fmt("lr endpoints, midpoint and cosine samples; AdamW zero-gradient, pure-decay and "
                             "first-step forms: max |error| %.2e (limit 1e-7)",
                             worst)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "size reduction", size_reduction},
      {2, "quantization error bound", quantization_error},
      {3, "quantized matmul fidelity", qmatmul_fidelity},
      {4, "gradient correctness", gradient_check},
      {5, "toy training convergence and retrieval", toy_convergence},
      {6, "quantization ablation drift", ablation_drift},
      {7, "latency report", latency_report},
      {8, "GGUF robustness", gguf_robustness},
      {9, "determinism", determinism},
      {10, "schedule and optimizer identities", schedule_and_adamw},
  };
  int failed = 0;
  for (const auto& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, seconds_since(t0),
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", int(all.size()) - failed, all.size());
  return failed == 0 ? 0 : 1;
}
