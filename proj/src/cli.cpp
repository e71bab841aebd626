#include "lexlm/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lexlm/corpus.hpp"
#include "lexlm/error.hpp"
#include "lexlm/eval.hpp"
#include "lexlm/gguf.hpp"
#include "lexlm/kernels.hpp"
#include "lexlm/model_io.hpp"
#include "lexlm/train.hpp"

namespace lexlm {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ run config

json default_run_config() {
  json model = ModelConfig{}.to_json();
  model.erase("vocab_size");  // taken from the tokenizer unless given
  return {{"model", model},
          {"optimizer", OptimizerHyper{}.to_json()},
          {"train",
           {{"batch_size", 8},
            {"seq_len", 0},
            {"seed", 1},
            {"checkpoint_every", 500},
            {"val_frac", 0.0},
            {"deterministic", false},
            {"log_every", 50}}},
          {"paths", {{"corpus", ""}, {"tokenizer", ""}, {"out_dir", ""}}}};
}

namespace {

void merge_into(json& base, const json& over, const std::string& where) {
  if (!over.is_object()) throw UsageError("config section " + where + " must be an object");
  for (const auto& [k, v] : over.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    const bool known = base.contains(k) || (where == "model" && k == "vocab_size");
    if (!known) throw UsageError("unknown config key \"" + path + "\"");
    if (base.contains(k) && base[k].is_object()) {
      merge_into(base[k], v, path);
    } else {
      base[k] = v;
    }
  }
}

}  // namespace

json merge_run_config(const json& overrides) {
  json cfg = default_run_config();
  merge_into(cfg, overrides, "");
  return cfg;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got \"" + assignment + "\"");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  json defaults = default_run_config();
  merge_into(defaults, config, "");
  merge_into(defaults, patch, "");
  config = defaults;
}

// ------------------------------------------------------------------ helpers

namespace {

struct Io {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
  bool quiet = false;
};

Tokenizer load_tokenizer(const std::string& path) { return Tokenizer::load(path); }

struct LoadedModel {
  InferenceModel model;
  gguf::Document doc;
  std::uint64_t bytes = 0;
};

LoadedModel load_model(const std::string& path, const Tokenizer* tok) {
  LoadedModel lm;
  lm.doc = gguf::read_file(path);
  lm.bytes = fs::file_size(path);
  lm.model = inference_model_from_document(lm.doc);
  if (tok != nullptr) {
    const std::uint64_t fp = tokenizer_fingerprint_of(lm.doc);
    if (fp != 0 && fp != tok->vocab().fingerprint()) {
      throw DataError("tokenizer does not match model " + path + " (fingerprint mismatch)");
    }
    if (tok->vocab_size() != lm.model.config().vocab_size) {
      throw DataError("tokenizer has " + std::to_string(tok->vocab_size()) + " tokens but model " + path +
                      " expects " + std::to_string(lm.model.config().vocab_size));
    }
  }
  return lm;
}

json read_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << j.dump(2) << "\n";
  if (!f) throw DataError("failed writing " + path);
}

std::vector<TokenId> corpus_stream(const std::vector<StatuteRecord>& recs, const Tokenizer& tok, double val_frac,
                                   std::uint64_t seed) {
  if (val_frac > 0) return Dataset::flatten(build_dataset(recs, tok, val_frac, seed).val);
  std::vector<TokenId> s;
  for (const auto& r : recs) {
    const auto ids = tok.encode(render_document(r));
    s.push_back(tok.eod_id());
    s.insert(s.end(), ids.begin(), ids.end());
  }
  s.push_back(tok.eod_id());
  return s;
}

// ------------------------------------------------------------------ commands

struct IngestArgs {
  std::vector<std::string> inputs;
  std::string format = "jsonl", act, out, probes_out;
  std::size_t synthetic = 0;
};

int cmd_ingest(const IngestArgs& a, Io& io) {
  std::vector<StatuteRecord> recs;
  if (a.synthetic > 0) recs = synthetic_statutes(a.synthetic);
  if (!a.inputs.empty()) {
    const auto fmt = parse_corpus_format(a.format);
    if (!fmt) throw UsageError("--format must be jsonl or plain");
    std::vector<fs::path> paths(a.inputs.begin(), a.inputs.end());
    auto more = ingest(paths, *fmt, a.act.empty() ? std::nullopt : std::optional<std::string>(a.act));
    recs.insert(recs.end(), more.begin(), more.end());
  }
  if (a.inputs.empty() && a.synthetic == 0) throw UsageError("give --input files or --synthetic N");
  CitationIndex::build(recs);  // rejects duplicates across inputs
  write_jsonl(a.out, recs);
  if (!a.probes_out.empty()) {
    std::ofstream f(a.probes_out, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + a.probes_out);
    f << probes_to_jsonl(make_probes(recs));
  }
  io.out << json{{"records", recs.size()}, {"out", a.out}}.dump() << "\n";
  return 0;
}

struct TokArgs {
  std::string corpus, out;
  std::size_t vocab_size = 1024;
};

int cmd_train_tokenizer(const TokArgs& a, Io& io) {
  const auto recs = ingest({fs::path(a.corpus)}, CorpusFormat::Jsonl);
  if (recs.empty()) throw DataError(a.corpus + " holds no records");
  std::vector<std::string> docs;
  for (const auto& r : recs) docs.push_back(render_document(r));
  const Tokenizer tok(bpe_train(docs, a.vocab_size));
  tok.save(a.out);
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(tok.vocab().fingerprint()));
  io.out << json{{"vocab_size", tok.vocab_size()}, {"merges", tok.vocab().merges.size()}, {"fingerprint", fp}}.dump()
         << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, corpus, tokenizer, out_dir;
  std::optional<std::uint64_t> seed;
  bool deterministic = false, resume = false;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a, Io& io) {
  json cfg = a.config.empty() ? default_run_config() : merge_run_config(read_json_file(a.config));
  for (const auto& s : a.sets) apply_override(cfg, s);
  if (!a.corpus.empty()) cfg["paths"]["corpus"] = a.corpus;
  if (!a.tokenizer.empty()) cfg["paths"]["tokenizer"] = a.tokenizer;
  if (!a.out_dir.empty()) cfg["paths"]["out_dir"] = a.out_dir;
  if (a.seed) cfg["train"]["seed"] = *a.seed;
  if (a.deterministic) cfg["train"]["deterministic"] = true;
  for (const char* k : {"corpus", "tokenizer", "out_dir"}) {
    if (cfg["paths"][k].get<std::string>().empty()) throw UsageError(std::string("missing --") + (std::string(k) == "out_dir" ? "out-dir" : k));
  }

  const Tokenizer tok = load_tokenizer(cfg["paths"]["tokenizer"]);
  if (!cfg["model"].contains("vocab_size")) cfg["model"]["vocab_size"] = tok.vocab_size();
  TrainOptions o;
  const auto& t = cfg["train"];
  try {
    o.config = ModelConfig::from_json(cfg["model"]);
    o.hyper = OptimizerHyper::from_json(cfg["optimizer"]);
    o.batch_size = t.at("batch_size").get<std::size_t>();
    o.seq_len = t.at("seq_len").get<std::size_t>();
    o.seed = t.at("seed").get<std::uint64_t>();
    o.checkpoint_every = t.at("checkpoint_every").get<std::size_t>();
    o.deterministic = t.at("deterministic").get<bool>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad config value: ") + e.what());
  }
  o.config.validate();
  if (o.config.vocab_size != tok.vocab_size()) {
    throw UsageError("model.vocab_size " + std::to_string(o.config.vocab_size) + " differs from the tokenizer's " +
                     std::to_string(tok.vocab_size()));
  }
  const double val_frac = t.at("val_frac").get<double>();
  const std::size_t log_every = t.at("log_every").get<std::size_t>();

  const auto recs = ingest({fs::path(cfg["paths"]["corpus"].get<std::string>())}, CorpusFormat::Jsonl);
  const Dataset ds = build_dataset(recs, tok, val_frac, o.seed);

  o.out_dir = cfg["paths"]["out_dir"].get<std::string>();
  o.resume = a.resume;
  o.tokenizer_fingerprint = tok.vocab().fingerprint();
  json echo = cfg;
  echo.erase("paths");  // paths vary between otherwise identical runs
  o.run_config = echo.dump();
  if (!io.quiet) {
    o.on_step = [&](const LossRecord& r) {
      if (log_every != 0 && (r.step % log_every == 0 || r.step + 1 == o.hyper.total_steps)) {
        io.err << "step " << r.step << " loss " << r.loss << " lr " << r.lr << "\n";
      }
    };
  }
  fs::create_directories(o.out_dir);
  write_json_file((o.out_dir / "run_config.json").string(), cfg);
  const TrainResult res = train_loop(o, ds.train);
  io.out << json{{"steps", res.steps}, {"final_loss", res.final_loss}, {"out_dir", o.out_dir.string()},
                 {"model", (o.out_dir / "model.gguf").string()}}
                .dump()
         << "\n";
  return 0;
}

struct QuantArgs {
  std::string in, out, on_unaligned = "keep";
};

int cmd_quantize(const QuantArgs& a, Io& io) {
  UnalignedPolicy policy;
  if (a.on_unaligned == "keep") policy = UnalignedPolicy::KeepF32;
  else if (a.on_unaligned == "error") policy = UnalignedPolicy::Error;
  else throw UsageError("--on-unaligned must be keep or error");
  const auto doc = gguf::read_file(a.in);
  if (precision_of(doc) != Precision::F32) throw DataError(a.in + " is already quantized");
  QuantizeStats st;
  gguf::Document q;
  try {
    q = quantize_document(doc, policy, &st);
  } catch (const ShapeError& e) {
    throw DataError(e.what());
  }
  gguf::write_file(q, a.out);
  const auto in_bytes = fs::file_size(a.in), out_bytes = fs::file_size(a.out);
  io.out << json{{"in_bytes", in_bytes},
                 {"out_bytes", out_bytes},
                 {"ratio", static_cast<double>(out_bytes) / static_cast<double>(in_bytes)},
                 {"quantized_tensors", st.quantized},
                 {"f32_tensors", st.kept_f32},
                 {"f32_fallback", st.fallback}}
                .dump()
         << "\n";
  return 0;
}

struct GenArgs {
  std::string model, tokenizer, prompt;
  std::size_t max_tokens = 64;
  float temperature = 0.0f;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
};

SamplingOptions sampling(const GenArgs& a) {
  if (a.temperature < 0) throw UsageError("--temperature must be >= 0");
  SamplingOptions o;
  o.max_new = a.max_tokens;
  o.temperature = a.temperature;
  if (a.top_k > 0) o.top_k = a.top_k;
  o.seed = a.seed;
  return o;
}

int cmd_generate(const GenArgs& a, Io& io) {
  const Tokenizer tok = load_tokenizer(a.tokenizer);
  const auto lm = load_model(a.model, &tok);
  io.out << complete(lm.model, tok, a.prompt, sampling(a)) << "\n";
  return 0;
}

int cmd_repl(const GenArgs& a, Io& io) {
  const Tokenizer tok = load_tokenizer(a.tokenizer);
  const auto lm = load_model(a.model, &tok);
  const SamplingOptions o = sampling(a);
  if (!io.quiet) io.err << "lexlm repl: type a prompt, :quit to exit\n";
  std::string line;
  for (;;) {
    if (!io.quiet) io.err << "> " << std::flush;
    if (!std::getline(io.in, line)) break;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    const std::string prompt = line.substr(b, e - b + 1);
    if (prompt == ":quit") break;
    io.out << complete(lm.model, tok, prompt, o) << "\n" << std::flush;
  }
  return 0;
}

struct EvalArgs {
  std::string model, fp32, q8, tokenizer, corpus, probes, report;
  double val_frac = 0.0;
  std::uint64_t seed = 1;
  std::size_t latency_tokens = 32, latency_runs = 5;
};

EvalInputs eval_inputs(const EvalArgs& a, const Tokenizer& tok, std::vector<StatuteRecord>& recs,
                       CitationIndex& index) {
  recs = ingest({fs::path(a.corpus)}, CorpusFormat::Jsonl);
  if (recs.empty()) throw DataError(a.corpus + " holds no records");
  index = CitationIndex::build(recs);
  EvalInputs in;
  in.val_stream = corpus_stream(recs, tok, a.val_frac, a.seed);
  in.probes = load_probes(a.probes);
  if (in.probes.empty()) throw DataError(a.probes + " holds no probes");
  in.index = &index;
  in.latency_tokens = a.latency_tokens;
  in.latency_runs = a.latency_runs;
  return in;
}

void print_summary(const EvalReport& r, std::ostream& out) {
  out << r.model_id << " [" << precision_name(r.precision) << "] bytes=" << r.file_bytes << " ppl=" << r.ppl
      << " exact_match=" << r.exact_match << " definition_accuracy=" << r.definition_accuracy
      << " hallucination_rate=" << (r.hallucination_rate ? std::to_string(*r.hallucination_rate) : "null")
      << " ms/token=" << r.ms_per_token << "\n";
}

int cmd_eval(const EvalArgs& a, Io& io) {
  const Tokenizer tok = load_tokenizer(a.tokenizer);
  const auto lm = load_model(a.model, &tok);
  std::vector<StatuteRecord> recs;
  CitationIndex index;
  const EvalInputs in = eval_inputs(a, tok, recs, index);
  const EvalReport r = evaluate(lm.model, tok, in, a.model, lm.bytes);
  if (!r.hallucination_rate) io.err << "warning: no generation cited a section; hallucination rate is null\n";
  write_json_file(a.report, r.to_json());
  if (!io.quiet) print_summary(r, io.out);
  return 0;
}

int cmd_ablate(const EvalArgs& a, Io& io) {
  const Tokenizer tok = load_tokenizer(a.tokenizer);
  const auto f = load_model(a.fp32, &tok);
  const auto q = load_model(a.q8, &tok);
  if (f.model.config() != q.model.config()) {
    throw DataError("model configs differ between " + a.fp32 + " and " + a.q8);
  }
  if (f.model.quantized()) io.err << "warning: " << a.fp32 << " holds quantized tensors\n";
  if (!q.model.quantized()) io.err << "warning: " << a.q8 << " holds no quantized tensors\n";
  std::vector<StatuteRecord> recs;
  CitationIndex index;
  const EvalInputs in = eval_inputs(a, tok, recs, index);
  Ablation ab{evaluate(f.model, tok, in, a.fp32, f.bytes), evaluate(q.model, tok, in, a.q8, q.bytes)};
  write_json_file(a.report, ab.to_json());
  io.out << ab.table();
  return 0;
}

}  // namespace

// ------------------------------------------------------------------ entry

int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"lexlm: train, quantize and evaluate small statute language models on the CPU"};
  app.name("lexlm");
  app.require_subcommand(1);
  app.fallthrough();
  Io io{in, out, err};
  app.add_flag("--quiet", io.quiet, "Suppress progress and timing output");
  std::string backend;
  app.add_option("--backend", backend, "Kernel backend: scalar, avx2 or neon (default: best available)");

  IngestArgs ia;
  auto* ingest_cmd = app.add_subcommand("ingest", "Parse statute files into the canonical JSONL corpus");
  ingest_cmd->add_option("--input", ia.inputs, "Input files or directories");
  ingest_cmd->add_option("--format", ia.format, "Input format: jsonl or plain")->capture_default_str();
  ingest_cmd->add_option("--act", ia.act, "Act code for plain files (else read from <file>.act)");
  ingest_cmd->add_option("--synthetic", ia.synthetic, "Include N built-in synthetic statutes (max 50)");
  ingest_cmd->add_option("--out", ia.out, "Output corpus.jsonl")->required();
  ingest_cmd->add_option("--probes-out", ia.probes_out, "Also write one evaluation probe per record");

  TokArgs ta;
  auto* tok_cmd = app.add_subcommand("train-tokenizer", "Train a byte-level BPE tokenizer on a corpus");
  tok_cmd->add_option("--corpus", ta.corpus, "Corpus JSONL")->required();
  tok_cmd->add_option("--vocab-size", ta.vocab_size, "Vocabulary size including the end token")->capture_default_str();
  tok_cmd->add_option("--out", ta.out, "Output tokenizer JSON")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model from scratch");
  train_cmd->add_option("--config", tr.config, "Run config JSON (model, optimizer, train, paths)");
  train_cmd->add_option("--corpus", tr.corpus, "Corpus JSONL");
  train_cmd->add_option("--tokenizer", tr.tokenizer, "Tokenizer JSON");
  train_cmd->add_option("--out-dir", tr.out_dir, "Checkpoint directory");
  train_cmd->add_option("--seed", tr.seed, "Random seed");
  train_cmd->add_flag("--deterministic", tr.deterministic, "Scalar kernels with sequential reductions");
  train_cmd->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out-dir");
  train_cmd->add_option("--set", tr.sets, "Override a config field, e.g. --set optimizer.base_lr=1e-3");

  QuantArgs qa;
  auto* quant_cmd = app.add_subcommand("quantize", "Convert an FP32 model to Q8_0");
  quant_cmd->add_option("--in", qa.in, "FP32 model GGUF")->required();
  quant_cmd->add_option("--out", qa.out, "Output Q8_0 GGUF")->required();
  quant_cmd->add_option("--on-unaligned", qa.on_unaligned,
                        "Matrices whose rows are not a multiple of 32: keep (stay FP32) or error")
      ->capture_default_str();

  GenArgs ga;
  auto* gen_cmd = app.add_subcommand("generate", "Continue a prompt");
  auto add_gen = [&ga](CLI::App* c) {
    c->add_option("--model", ga.model, "Model GGUF")->required();
    c->add_option("--tokenizer", ga.tokenizer, "Tokenizer JSON")->required();
    c->add_option("--max-tokens", ga.max_tokens, "Tokens to generate")->capture_default_str();
    c->add_option("--temperature", ga.temperature, "0 = greedy")->capture_default_str();
    c->add_option("--top-k", ga.top_k, "Sample from the k most likely tokens (0 = all)")->capture_default_str();
    c->add_option("--seed", ga.seed, "Sampling seed")->capture_default_str();
  };
  add_gen(gen_cmd);
  gen_cmd->add_option("--prompt", ga.prompt, "Prompt text")->required();
  auto* repl_cmd = app.add_subcommand("repl", "Interactive prompt loop; :quit exits");
  add_gen(repl_cmd);

  EvalArgs ea;
  auto add_eval = [&ea](CLI::App* c) {
    c->add_option("--tokenizer", ea.tokenizer, "Tokenizer JSON")->required();
    c->add_option("--corpus", ea.corpus, "Corpus JSONL (perplexity stream and citation index)")->required();
    c->add_option("--probes", ea.probes, "Probes JSONL {prompt, expected, act, section}")->required();
    c->add_option("--report", ea.report, "Output report JSON")->required();
    c->add_option("--val-frac", ea.val_frac, "Measure perplexity on this held-out fraction (0 = whole corpus)")
        ->capture_default_str();
    c->add_option("--seed", ea.seed, "Split seed, must match training")->capture_default_str();
    c->add_option("--latency-tokens", ea.latency_tokens, "Tokens per timed run")->capture_default_str();
    c->add_option("--latency-runs", ea.latency_runs, "Timed runs (median reported)")->capture_default_str();
  };
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate one model");
  eval_cmd->add_option("--model", ea.model, "Model GGUF")->required();
  add_eval(eval_cmd);
  auto* ablate_cmd = app.add_subcommand("ablate", "Compare an FP32 model with its Q8_0 conversion");
  ablate_cmd->add_option("--fp32", ea.fp32, "FP32 model GGUF")->required();
  ablate_cmd->add_option("--q8", ea.q8, "Q8_0 model GGUF")->required();
  add_eval(ablate_cmd);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (!backend.empty()) {
      const auto b = kernels::parse_backend(backend);
      if (!b) throw UsageError("unknown backend " + backend);
      if (!kernels::select(*b)) throw UsageError("backend " + backend + " is not available on this machine");
    }
    if (*ingest_cmd) return cmd_ingest(ia, io);
    if (*tok_cmd) return cmd_train_tokenizer(ta, io);
    if (*train_cmd) return cmd_train(tr, io);
    if (*quant_cmd) return cmd_quantize(qa, io);
    if (*gen_cmd) return cmd_generate(ga, io);
    if (*repl_cmd) return cmd_repl(ga, io);
    if (*eval_cmd) return cmd_eval(ea, io);
    if (*ablate_cmd) return cmd_ablate(ea, io);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace lexlm
