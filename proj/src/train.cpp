#include "lexlm/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "lexlm/error.hpp"
#include "lexlm/gguf.hpp"
#include "lexlm/kernels.hpp"
#include "lexlm/model_io.hpp"
#include "lexlm/rng.hpp"

namespace lexlm {

namespace fs = std::filesystem;
using nlohmann::json;

void OptimizerHyper::validate() const {
  auto bad = [](const std::string& what) { throw UsageError("invalid optimizer settings: " + what); };
  if (!(beta1 > 0 && beta1 < beta2 && beta2 < 1)) bad("need 0 < beta1 < beta2 < 1");
  if (!(eps > 0)) bad("eps must be > 0");
  if (!(base_lr >= 0)) bad("base_lr must be >= 0");
  if (!(weight_decay >= 0)) bad("weight_decay must be >= 0");
  if (!(warmup_frac >= 0 && warmup_frac < 1)) bad("warmup_frac must be in [0, 1)");
  if (total_steps == 0) bad("total_steps must be > 0");
  if (!(min_lr_frac >= 0 && min_lr_frac <= 1)) bad("min_lr_frac must be in [0, 1]");
  if (!(clip_norm > 0)) bad("clip_norm must be > 0");
}

json OptimizerHyper::to_json() const {
  return {{"beta1", beta1},         {"beta2", beta2},           {"eps", eps},
          {"base_lr", base_lr},     {"weight_decay", weight_decay}, {"warmup_frac", warmup_frac},
          {"total_steps", total_steps}, {"min_lr_frac", min_lr_frac}, {"clip_norm", clip_norm}};
}

OptimizerHyper OptimizerHyper::from_json(const json& j) {
  if (!j.is_object()) throw UsageError("optimizer settings must be a JSON object");
  OptimizerHyper h;
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "beta1") h.beta1 = v.get<float>();
      else if (k == "beta2") h.beta2 = v.get<float>();
      else if (k == "eps") h.eps = v.get<float>();
      else if (k == "base_lr") h.base_lr = v.get<float>();
      else if (k == "weight_decay") h.weight_decay = v.get<float>();
      else if (k == "warmup_frac") h.warmup_frac = v.get<float>();
      else if (k == "total_steps") h.total_steps = v.get<std::size_t>();
      else if (k == "min_lr_frac") h.min_lr_frac = v.get<float>();
      else if (k == "clip_norm") h.clip_norm = v.get<float>();
      else throw UsageError("unknown optimizer key \"" + k + "\"");
    } catch (const json::exception&) {
      throw UsageError("optimizer key \"" + k + "\" has the wrong type");
    }
  }
  h.validate();
  return h;
}

std::size_t warmup_steps(const OptimizerHyper& h) noexcept {
  return static_cast<std::size_t>(std::llround(static_cast<double>(h.warmup_frac) * static_cast<double>(h.total_steps)));
}

float lr_at(std::size_t step, const OptimizerHyper& h) noexcept {
  const std::size_t W = warmup_steps(h), N = h.total_steps;
  const double base = h.base_lr, min_lr = static_cast<double>(h.min_lr_frac) * base;
  if (step > N) step = N;
  if (step < W) return static_cast<float>(base * static_cast<double>(step + 1) / static_cast<double>(W));
  if (N <= W) return static_cast<float>(min_lr);
  const double progress = static_cast<double>(step - W) / static_cast<double>(N - W);
  return static_cast<float>(min_lr + (base - min_lr) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

OptimizerState OptimizerState::zeros(const ModelConfig& c) {
  return {ParameterSet::zeros(c), ParameterSet::zeros(c), 0};
}

bool decays(ParamRole role) noexcept { return role == ParamRole::Weight; }

void adamw_step(ParameterSet& params, const ParameterSet& grads, OptimizerState& state,
                const OptimizerHyper& h, float lr) {
  auto p = params.refs();
  const auto g = grads.refs();
  auto m = state.m.refs();
  auto v = state.v.refs();
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw ShapeError("optimizer state does not match the parameter set");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (g[i].tensor->shape() != p[i].tensor->shape() || m[i].tensor->shape() != p[i].tensor->shape()) {
      throw ShapeError("gradient " + g[i].name + " has shape " + shape_str(g[i].tensor->shape()) +
                       ", parameter has " + shape_str(p[i].tensor->shape()));
    }
    const auto span = g[i].tensor->span();
    for (std::size_t k = 0; k < span.size(); ++k) {
      if (!std::isfinite(span[k])) {
        throw DataError("non-finite gradient in " + g[i].name + " at index " + std::to_string(k) +
                        "; step aborted");
      }
    }
  }

  const std::uint64_t t = ++state.t;
  const double bc1 = 1.0 - std::pow(static_cast<double>(h.beta1), static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(h.beta2), static_cast<double>(t));
  const float b1 = h.beta1, b2 = h.beta2;
  for (std::size_t i = 0; i < p.size(); ++i) {
    float* w = p[i].tensor->data();
    const float* gr = g[i].tensor->data();
    float* mm = m[i].tensor->data();
    float* vv = v[i].tensor->data();
    const float decay = decays(p[i].role) ? h.weight_decay : 0.0f;
    const std::size_t n = p[i].tensor->size();
    for (std::size_t k = 0; k < n; ++k) {
      mm[k] = b1 * mm[k] + (1.0f - b1) * gr[k];
      vv[k] = b2 * vv[k] + (1.0f - b2) * gr[k] * gr[k];
      const float mhat = static_cast<float>(mm[k] / bc1);
      const float vhat = static_cast<float>(vv[k] / bc2);
      w[k] -= lr * (mhat / (std::sqrt(vhat) + h.eps) + decay * w[k]);
    }
  }
}

double global_norm(const ParameterSet& grads) {
  double s = 0.0;
  for (const auto& r : grads.refs())
    for (float x : r.tensor->span()) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

double clip_gradients(ParameterSet& grads, float clip_norm) {
  const double norm = global_norm(grads);
  if (norm > clip_norm) {
    const float scale = static_cast<float>(clip_norm / norm);
    for (auto& r : grads.refs())
      for (float& x : r.tensor->span()) x *= scale;
  }
  return norm;
}

// ------------------------------------------------------------------ batching

BatchStream::BatchStream(std::vector<std::vector<TokenId>> documents, std::size_t seq_len, std::uint64_t seed)
    : docs_(std::move(documents)), T_(seq_len), seed_(seed) {
  if (T_ == 0) throw UsageError("sequence length must be > 0");
  const std::size_t total = std::accumulate(docs_.begin(), docs_.end(), std::size_t{0},
                                            [](std::size_t a, const auto& d) { return a + d.size(); });
  if (total < 2) throw DataError("training data needs at least 2 tokens");
}

void BatchStream::refill() {
  std::vector<std::size_t> order(docs_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed_, 0x5eed0000ULL + epoch_);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i : order) buf_.insert(buf_.end(), docs_[i].begin(), docs_[i].end());
  ++epoch_;
}

void BatchStream::next_batch(std::size_t batch, std::vector<TokenId>& inputs, std::vector<TokenId>& targets) {
  inputs.resize(batch * T_);
  targets.resize(batch * T_);
  for (std::size_t b = 0; b < batch; ++b) {
    while (buf_.size() - pos_ < T_ + 1) refill();
    std::copy_n(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), T_, inputs.begin() + static_cast<std::ptrdiff_t>(b * T_));
    std::copy_n(buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + 1), T_,
                targets.begin() + static_cast<std::ptrdiff_t>(b * T_));
    pos_ += T_;
    if (pos_ > buf_.size() / 2) {
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
      pos_ = 0;
    }
  }
}

void BatchStream::skip(std::size_t n_windows) {
  std::vector<TokenId> in, tg;
  for (std::size_t i = 0; i < n_windows; ++i) next_batch(1, in, tg);
}

// ------------------------------------------------------------------ checkpoints

namespace {

std::string m_name(const std::string& n) { return n + ".adam_m"; }
std::string v_name(const std::string& n) { return n + ".adam_v"; }

json state_json(const TrainOptions& opt, std::size_t step, std::size_t tokens_seen, std::size_t seq_len) {
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(opt.tokenizer_fingerprint));
  return {{"step", step},
          {"tokens_seen", tokens_seen},
          {"seed", opt.seed},
          {"batch_size", opt.batch_size},
          {"seq_len", seq_len},
          {"deterministic", opt.deterministic},
          {"model", opt.config.to_json()},
          {"optimizer", opt.hyper.to_json()},
          {"tokenizer_fingerprint", fp}};
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw DataError("failed writing " + tmp.string() + " (disk full?)");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace

void save_optimizer(const fs::path& path, const OptimizerState& s) {
  gguf::Document doc;
  doc.set("general.architecture", {std::string("lexlm-adamw")});
  doc.set("lexlm.adam_t", {static_cast<std::uint64_t>(s.t)});
  const auto m = s.m.refs();
  const auto v = s.v.refs();
  for (std::size_t i = 0; i < m.size(); ++i) {
    doc.tensors.push_back({m_name(m[i].name), *m[i].tensor});
    doc.tensors.push_back({v_name(v[i].name), *v[i].tensor});
  }
  gguf::write_file(doc, path);
}

OptimizerState load_optimizer(const fs::path& path, const ModelConfig& c) {
  const auto doc = gguf::read_file(path);
  OptimizerState s;
  s.t = gguf::get_uint(doc, "lexlm.adam_t");
  auto lookup = [&doc](const std::string& name) -> const Tensor* {
    const auto* e = doc.tensor(name);
    return e ? std::get_if<Tensor>(&e->data) : nullptr;
  };
  s.m = params_from_tensors(c, [&](const std::string& n) { return lookup(m_name(n)); });
  s.v = params_from_tensors(c, [&](const std::string& n) { return lookup(v_name(n)); });
  return s;
}

// ------------------------------------------------------------------ loop

namespace {

class DeterminismGuard {
 public:
  explicit DeterminismGuard(bool on) : prev_(kernels::deterministic()) { kernels::set_deterministic(on); }
  ~DeterminismGuard() { kernels::set_deterministic(prev_); }
  DeterminismGuard(const DeterminismGuard&) = delete;
  DeterminismGuard& operator=(const DeterminismGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace

TrainResult train_loop(const TrainOptions& opt, const std::vector<std::vector<TokenId>>& documents) {
  opt.config.validate();
  opt.hyper.validate();
  if (opt.batch_size == 0) throw UsageError("batch_size must be > 0");
  const std::size_t T = opt.seq_len == 0 ? opt.config.context_len : opt.seq_len;
  if (T > opt.config.context_len) {
    throw UsageError("seq_len " + std::to_string(T) + " exceeds context_len " +
                     std::to_string(opt.config.context_len));
  }
  for (const auto& d : documents)
    for (TokenId id : d)
      if (id < 0 || static_cast<std::size_t>(id) >= opt.config.vocab_size) {
        throw DataError("token id " + std::to_string(id) + " outside the model vocabulary of " +
                        std::to_string(opt.config.vocab_size));
      }

  DeterminismGuard guard(opt.deterministic);
  const ModelConfig& c = opt.config;
  const std::size_t B = opt.batch_size;

  TrainResult res;
  std::size_t start = 0, tokens_seen = 0;
  BatchStream stream(documents, T, opt.seed);
  const bool files = !opt.out_dir.empty();
  if (files) fs::create_directories(opt.out_dir);

  if (opt.resume) {
    if (!files) throw UsageError("resume needs an output directory");
    std::ifstream in(opt.out_dir / "train_state.json");
    if (!in) throw DataError("cannot resume: " + (opt.out_dir / "train_state.json").string() + " not found");
    json st;
    try {
      st = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError("cannot resume: bad train_state.json: " + std::string(e.what()));
    }
    if (ModelConfig::from_json(st.at("model")) != c || st.at("batch_size") != B || st.at("seq_len") != T ||
        st.at("seed") != opt.seed) {
      throw UsageError("cannot resume: checkpoint was made with different settings");
    }
    start = st.at("step").get<std::size_t>();
    tokens_seen = st.at("tokens_seen").get<std::size_t>();
    const auto doc = gguf::read_file(opt.out_dir / "model.gguf");
    res.params = params_from_document(doc, c);
    res.state = load_optimizer(opt.out_dir / "optimizer.gguf", c);
    stream.skip(start * B);
  } else {
    res.params = init_params(c, opt.seed);
    res.state = OptimizerState::zeros(c);
  }

  std::ofstream log;
  if (files) {
    log.open(opt.out_dir / "loss.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot write " + (opt.out_dir / "loss.jsonl").string());
  }

  ModelMeta meta;
  meta.tokenizer_fingerprint = opt.tokenizer_fingerprint;
  meta.run_config = opt.run_config;
  auto checkpoint = [&](std::size_t step) {
    if (!files) return;
    write_model(opt.out_dir / "model.gguf", res.params, c, meta);
    save_optimizer(opt.out_dir / "optimizer.gguf", res.state);
    write_text(opt.out_dir / "train_state.json", state_json(opt, step, tokens_seen, T).dump(2) + "\n");
  };

  TrainWorkspace ws(c, B, T);
  ParameterSet grads = ParameterSet::zeros(c);
  std::vector<TokenId> inputs, targets;
  const auto t0 = std::chrono::steady_clock::now();
  res.steps = start;
  for (std::size_t step = start; step < opt.hyper.total_steps; ++step) {
    stream.next_batch(B, inputs, targets);
    const float loss = forward_train(res.params, c, inputs, targets, ws);
    if (!std::isfinite(loss)) throw DataError("loss became non-finite at step " + std::to_string(step));
    backward_train(res.params, c, inputs, targets, ws, grads);
    clip_gradients(grads, opt.hyper.clip_norm);
    const float lr = lr_at(step, opt.hyper);
    adamw_step(res.params, grads, res.state, opt.hyper, lr);
    tokens_seen += B * T;

    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    LossRecord rec{step, lr, loss, tokens_seen, ms};
    res.log.push_back(rec);
    res.final_loss = loss;
    res.steps = step + 1;
    if (log.is_open()) {
      log << json{{"step", step}, {"lr", lr}, {"loss", loss}, {"tokens_seen", tokens_seen}, {"wall_ms", ms}}.dump()
          << "\n";
    }
    if (opt.checkpoint_every != 0 && (step + 1) % opt.checkpoint_every == 0 && step + 1 < opt.hyper.total_steps) {
      log.flush();
      checkpoint(step + 1);
    }
    if (opt.on_step) opt.on_step(rec);
  }
  checkpoint(res.steps);
  return res;
}

}  // namespace lexlm
