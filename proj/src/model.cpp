#include "lexlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lexlm/error.hpp"
#include "lexlm/kernels.hpp"
#include "lexlm/ops.hpp"

namespace lexlm {

// ------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto bad = [](const std::string& msg) { throw UsageError("invalid model config: " + msg); };
  if (n_layers == 0) bad("n_layers must be >= 1");
  if (n_heads == 0) bad("n_heads must be >= 1");
  if (d_model == 0 || d_model % n_heads != 0) bad("d_model must be a positive multiple of n_heads");
  if (d_ff == 0) bad("d_ff must be >= 1");
  if (context_len == 0) bad("context_len must be >= 1");
  if (vocab_size < 2) bad("vocab_size must be >= 2");
  if (!(init_std >= 0.0f) || !std::isfinite(init_mean)) bad("init_std must be >= 0 and init_mean finite");
  if (!(layernorm_eps > 0.0f)) bad("layernorm_eps must be > 0");
}

ModelConfig ModelConfig::gpt2_small() {
  ModelConfig c;
  c.n_layers = 12;
  c.n_heads = 12;
  c.d_model = 768;
  c.d_ff = 3072;
  c.context_len = 1024;
  c.vocab_size = 50257;
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},       {"n_heads", n_heads},
          {"d_model", d_model},         {"d_ff", d_ff},
          {"context_len", context_len}, {"vocab_size", vocab_size},
          {"init_mean", init_mean},     {"init_std", init_std},
          {"layernorm_eps", layernorm_eps}, {"tie_embeddings", tie_embeddings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("model config must be a JSON object");
  ModelConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n_layers") c.n_layers = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
      else if (key == "context_len") c.context_len = value.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "init_mean") c.init_mean = value.get<float>();
      else if (key == "init_std") c.init_std = value.get<float>();
      else if (key == "layernorm_eps") c.layernorm_eps = value.get<float>();
      else if (key == "tie_embeddings") c.tie_embeddings = value.get<bool>();
      else throw UsageError("unknown model config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad model config value: ") + e.what());
  }
  return c;
}

std::size_t parameter_count(const ModelConfig& c) noexcept {
  const std::size_t C = c.d_model, F = c.d_ff;
  const std::size_t per_layer = 2 * C            // ln1
                                + 3 * C * C + 3 * C  // qkv
                                + C * C + C          // proj
                                + 2 * C              // ln2
                                + F * C + F          // fc
                                + C * F + C;         // fcproj
  std::size_t n = c.vocab_size * C + c.context_len * C + c.n_layers * per_layer + 2 * C;
  if (!c.tie_embeddings) n += c.vocab_size * C;
  return n;
}

// ------------------------------------------------------------- parameters

ParameterSet ParameterSet::zeros(const ModelConfig& c) {
  const std::size_t C = c.d_model, F = c.d_ff;
  ParameterSet p;
  p.wte = Tensor({c.vocab_size, C});
  p.wpe = Tensor({c.context_len, C});
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.ln1_g = Tensor({C});
    l.ln1_b = Tensor({C});
    l.qkv_w = Tensor({3 * C, C});
    l.qkv_b = Tensor({3 * C});
    l.proj_w = Tensor({C, C});
    l.proj_b = Tensor({C});
    l.ln2_g = Tensor({C});
    l.ln2_b = Tensor({C});
    l.fc_w = Tensor({F, C});
    l.fc_b = Tensor({F});
    l.fcproj_w = Tensor({C, F});
    l.fcproj_b = Tensor({C});
  }
  p.lnf_g = Tensor({C});
  p.lnf_b = Tensor({C});
  if (!c.tie_embeddings) p.lm_head = Tensor({c.vocab_size, C});
  return p;
}

namespace {

template <typename Ref, typename Self>
std::vector<Ref> collect_refs(Self& p) {
  std::vector<Ref> out;
  out.push_back({"token_embd.weight", &p.wte, ParamRole::TokenEmbedding});
  out.push_back({"position_embd.weight", &p.wpe, ParamRole::PositionEmbedding});
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string b = "blk." + std::to_string(i) + ".";
    out.push_back({b + "attn_norm.weight", &l.ln1_g, ParamRole::NormGain});
    out.push_back({b + "attn_norm.bias", &l.ln1_b, ParamRole::NormBias});
    out.push_back({b + "attn_qkv.weight", &l.qkv_w, ParamRole::Weight});
    out.push_back({b + "attn_qkv.bias", &l.qkv_b, ParamRole::Bias});
    out.push_back({b + "attn_output.weight", &l.proj_w, ParamRole::Weight});
    out.push_back({b + "attn_output.bias", &l.proj_b, ParamRole::Bias});
    out.push_back({b + "ffn_norm.weight", &l.ln2_g, ParamRole::NormGain});
    out.push_back({b + "ffn_norm.bias", &l.ln2_b, ParamRole::NormBias});
    out.push_back({b + "ffn_up.weight", &l.fc_w, ParamRole::Weight});
    out.push_back({b + "ffn_up.bias", &l.fc_b, ParamRole::Bias});
    out.push_back({b + "ffn_down.weight", &l.fcproj_w, ParamRole::Weight});
    out.push_back({b + "ffn_down.bias", &l.fcproj_b, ParamRole::Bias});
  }
  out.push_back({"output_norm.weight", &p.lnf_g, ParamRole::NormGain});
  out.push_back({"output_norm.bias", &p.lnf_b, ParamRole::NormBias});
  if (!p.lm_head.empty()) out.push_back({"output.weight", &p.lm_head, ParamRole::Weight});
  return out;
}

}  // namespace

std::vector<ParamRef> ParameterSet::refs() { return collect_refs<ParamRef>(*this); }
std::vector<ConstParamRef> ParameterSet::refs() const { return collect_refs<ConstParamRef>(*this); }

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& r : refs()) n += r.tensor->size();
  return n;
}

ParameterSet init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParameterSet p = ParameterSet::zeros(c);
  const Rng root(seed);
  std::uint64_t stream = 0;
  for (auto& r : p.refs()) {
    Rng rng = root.split(stream++);
    switch (r.role) {
      case ParamRole::TokenEmbedding:
      case ParamRole::PositionEmbedding:
      case ParamRole::Weight:
        for (float& v : r.tensor->span()) v = static_cast<float>(rng.normal(c.init_mean, c.init_std));
        break;
      case ParamRole::NormGain: r.tensor->fill(1.0f); break;
      case ParamRole::Bias:
      case ParamRole::NormBias: break;
    }
  }
  return p;
}

ParameterSet params_from_tensors(const ModelConfig& c,
                                 const std::function<const Tensor*(const std::string&)>& lookup) {
  c.validate();
  ParameterSet p = ParameterSet::zeros(c);
  for (auto& r : p.refs()) {
    const Tensor* src = lookup(r.name);
    if (src == nullptr) throw DataError("model file lacks FP32 tensor " + r.name);
    if (src->shape() != r.tensor->shape()) {
      throw DataError("tensor " + r.name + " has shape " + shape_str(src->shape()) + ", expected " +
                      shape_str(r.tensor->shape()));
    }
    *r.tensor = *src;
  }
  return p;
}

// ------------------------------------------------------------- training graph

TrainWorkspace::TrainWorkspace(const ModelConfig& c, std::size_t batch, std::size_t seq_len)
    : B_(batch), T_(seq_len) {
  c.validate();
  if (batch == 0 || seq_len == 0) throw UsageError("batch and sequence length must be >= 1");
  if (seq_len > c.context_len) {
    throw UsageError("sequence length " + std::to_string(seq_len) + " exceeds context_len " +
                     std::to_string(c.context_len));
  }
  const std::size_t BT = B_ * T_, C = c.d_model, F = c.d_ff, V = c.vocab_size, NH = c.n_heads;
  x0_.resize(BT * C);
  layers_.resize(c.n_layers);
  for (auto& l : layers_) {
    l.ln1.resize(BT * C);
    l.ln1_mean.resize(BT);
    l.ln1_rstd.resize(BT);
    l.qkv.resize(BT * 3 * C);
    l.att.resize(B_ * NH * T_ * T_);
    l.atty.resize(BT * C);
    l.res2.resize(BT * C);
    l.ln2.resize(BT * C);
    l.ln2_mean.resize(BT);
    l.ln2_rstd.resize(BT);
    l.fch.resize(BT * F);
    l.fch_gelu.resize(BT * F);
    l.res3.resize(BT * C);
  }
  lnf_.resize(BT * C);
  lnf_mean_.resize(BT);
  lnf_rstd_.resize(BT);
  logits_.resize(BT * V);
  probs_.resize(BT * V);
  dres_.resize(BT * C);
  dtmp_c_.resize(BT * C);
  dtmp_c2_.resize(BT * C);
  dqkv_.resize(BT * 3 * C);
  datty_.resize(BT * C);
  dfch_.resize(BT * F);
  datt_row_.resize(T_);
}

namespace {

void check_ids(std::span<const TokenId> ids, std::size_t vocab) {
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                      std::to_string(vocab));
    }
  }
}

// out[n][o] = b[o] + dot(in[n], W[o])
void linear_forward(float* out, const float* in, const Tensor& w, const Tensor& b, std::size_t N,
                    std::size_t in_dim, std::size_t out_dim) {
  const auto dot = kernels::active().dot_f32;
  for (std::size_t n = 0; n < N; ++n) {
    const float* x = in + n * in_dim;
    float* y = out + n * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const float bias = b.empty() ? 0.0f : b[o];
      y[o] = bias + dot(x, w.data() + o * in_dim, in_dim);
    }
  }
}

// din += dout W ; dW += dout^T in ; db += colsum(dout)
void linear_backward(float* din, Tensor& dw, Tensor* db, const float* dout, const float* in,
                     const Tensor& w, std::size_t N, std::size_t in_dim, std::size_t out_dim) {
  const auto axpy = kernels::active().axpy_f32;
  for (std::size_t n = 0; n < N; ++n) {
    const float* g = dout + n * out_dim;
    const float* x = in + n * in_dim;
    float* dx = din + n * in_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const float go = g[o];
      if (go == 0.0f) continue;
      axpy(dx, go, w.data() + o * in_dim, in_dim);
      axpy(dw.data() + o * in_dim, go, x, in_dim);
      if (db) (*db)[o] += go;
    }
  }
}

void layernorm_forward(float* out, float* mean, float* rstd, const float* in, const Tensor& g,
                       const Tensor& b, std::size_t N, std::size_t C, float eps) {
  for (std::size_t n = 0; n < N; ++n) {
    ops::layernorm_row({in + n * C, C}, g.span(), b.span(), eps, {out + n * C, C}, mean + n, rstd + n);
  }
}

void layernorm_backward(float* dinp, Tensor& dg, Tensor& db, const float* dout, const float* inp,
                        const float* mean, const float* rstd, const Tensor& g, std::size_t N,
                        std::size_t C) {
  for (std::size_t n = 0; n < N; ++n) {
    const float* x = inp + n * C;
    const float* dy = dout + n * C;
    float* dx = dinp + n * C;
    const float m = mean[n], rs = rstd[n];
    float dnorm_mean = 0.0f, dnorm_norm_mean = 0.0f;
    for (std::size_t i = 0; i < C; ++i) {
      const float norm = (x[i] - m) * rs;
      const float dnorm = g[i] * dy[i];
      dnorm_mean += dnorm;
      dnorm_norm_mean += dnorm * norm;
    }
    dnorm_mean /= static_cast<float>(C);
    dnorm_norm_mean /= static_cast<float>(C);
    for (std::size_t i = 0; i < C; ++i) {
      const float norm = (x[i] - m) * rs;
      const float dnorm = g[i] * dy[i];
      db[i] += dy[i];
      dg[i] += norm * dy[i];
      dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rs;
    }
  }
}

void attention_forward(float* out, float* att, const float* qkv, std::size_t B, std::size_t T,
                       std::size_t C, std::size_t NH) {
  const auto& kt = kernels::active();
  const std::size_t hs = C / NH, C3 = 3 * C;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hs));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < NH; ++h) {
        const float* q = qkv + (b * T + t) * C3 + h * hs;
        float* row = att + ((b * NH + h) * T + t) * T;
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const float* k = qkv + (b * T + t2) * C3 + C + h * hs;
          row[t2] = kt.dot_f32(q, k, hs) * scale;
        }
        ops::softmax_inplace({row, t + 1});
        std::fill(row + t + 1, row + T, 0.0f);
        float* o = out + (b * T + t) * C + h * hs;
        std::fill(o, o + hs, 0.0f);
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          kt.axpy_f32(o, row[t2], qkv + (b * T + t2) * C3 + 2 * C + h * hs, hs);
        }
      }
    }
  }
}

void attention_backward(float* dqkv, float* datt_row, const float* dout, const float* att,
                        const float* qkv, std::size_t B, std::size_t T, std::size_t C, std::size_t NH) {
  const auto& kt = kernels::active();
  const std::size_t hs = C / NH, C3 = 3 * C;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hs));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < NH; ++h) {
        const float* row = att + ((b * NH + h) * T + t) * T;
        const float* dy = dout + (b * T + t) * C + h * hs;
        const float* q = qkv + (b * T + t) * C3 + h * hs;
        float* dq = dqkv + (b * T + t) * C3 + h * hs;
        // out = sum_t2 p[t2] v[t2]
        float weighted = 0.0f;
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const float* v = qkv + (b * T + t2) * C3 + 2 * C + h * hs;
          float* dv = dqkv + (b * T + t2) * C3 + 2 * C + h * hs;
          datt_row[t2] = kt.dot_f32(dy, v, hs);
          kt.axpy_f32(dv, row[t2], dy, hs);
          weighted += row[t2] * datt_row[t2];
        }
        // softmax backward, then scores = scale * q.k
        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const float dscore = row[t2] * (datt_row[t2] - weighted) * scale;
          if (dscore == 0.0f) continue;
          const float* k = qkv + (b * T + t2) * C3 + C + h * hs;
          float* dk = dqkv + (b * T + t2) * C3 + C + h * hs;
          kt.axpy_f32(dq, dscore, k, hs);
          kt.axpy_f32(dk, dscore, q, hs);
        }
      }
    }
  }
}

const Tensor& head_of(const ParameterSet& p, const ModelConfig& c) {
  return c.tie_embeddings ? p.wte : p.lm_head;
}

}  // namespace

float forward_train(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> inputs,
                    std::span<const TokenId> targets, TrainWorkspace& ws) {
  const std::size_t B = ws.B_, T = ws.T_, BT = B * T;
  const std::size_t C = c.d_model, F = c.d_ff, V = c.vocab_size, NH = c.n_heads;
  if (inputs.size() != BT || targets.size() != BT) {
    throw ShapeError("expected " + std::to_string(BT) + " input and target ids, got " +
                     std::to_string(inputs.size()) + " and " + std::to_string(targets.size()));
  }
  check_ids(inputs, V);
  check_ids(targets, V);

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t bt = b * T + t;
      const float* e = p.wte.data() + static_cast<std::size_t>(inputs[bt]) * C;
      const float* pe = p.wpe.data() + t * C;
      float* x = ws.x0_.data() + bt * C;
      for (std::size_t i = 0; i < C; ++i) x[i] = e[i] + pe[i];
    }
  }

  const float* residual = ws.x0_.data();
  for (std::size_t li = 0; li < c.n_layers; ++li) {
    auto& a = ws.layers_[li];
    const auto& lp = p.layers[li];
    layernorm_forward(a.ln1.data(), a.ln1_mean.data(), a.ln1_rstd.data(), residual, lp.ln1_g, lp.ln1_b,
                      BT, C, c.layernorm_eps);
    linear_forward(a.qkv.data(), a.ln1.data(), lp.qkv_w, lp.qkv_b, BT, C, 3 * C);
    attention_forward(a.atty.data(), a.att.data(), a.qkv.data(), B, T, C, NH);
    linear_forward(a.res2.data(), a.atty.data(), lp.proj_w, lp.proj_b, BT, C, C);
    for (std::size_t i = 0; i < BT * C; ++i) a.res2[i] += residual[i];
    layernorm_forward(a.ln2.data(), a.ln2_mean.data(), a.ln2_rstd.data(), a.res2.data(), lp.ln2_g,
                      lp.ln2_b, BT, C, c.layernorm_eps);
    linear_forward(a.fch.data(), a.ln2.data(), lp.fc_w, lp.fc_b, BT, C, F);
    for (std::size_t i = 0; i < BT * F; ++i) a.fch_gelu[i] = ops::gelu(a.fch[i]);
    linear_forward(a.res3.data(), a.fch_gelu.data(), lp.fcproj_w, lp.fcproj_b, BT, F, C);
    for (std::size_t i = 0; i < BT * C; ++i) a.res3[i] += a.res2[i];
    residual = a.res3.data();
  }
  layernorm_forward(ws.lnf_.data(), ws.lnf_mean_.data(), ws.lnf_rstd_.data(), residual, p.lnf_g, p.lnf_b,
                    BT, C, c.layernorm_eps);
  linear_forward(ws.logits_.data(), ws.lnf_.data(), head_of(p, c), Tensor{}, BT, C, V);

  double loss = 0.0;
  for (std::size_t bt = 0; bt < BT; ++bt) {
    float* pr = ws.probs_.data() + bt * V;
    std::copy_n(ws.logits_.data() + bt * V, V, pr);
    ops::softmax_inplace({pr, V});
    loss -= std::log(static_cast<double>(pr[static_cast<std::size_t>(targets[bt])]));
  }
  return static_cast<float>(loss / static_cast<double>(BT));
}

void backward_train(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> inputs,
                    std::span<const TokenId> targets, TrainWorkspace& ws, ParameterSet& grads) {
  const std::size_t B = ws.B_, T = ws.T_, BT = B * T;
  const std::size_t C = c.d_model, F = c.d_ff, V = c.vocab_size, NH = c.n_heads;
  const auto axpy = kernels::active().axpy_f32;

  if (grads.layers.size() != c.n_layers || grads.wte.shape() != p.wte.shape()) {
    grads = ParameterSet::zeros(c);
  } else {
    for (auto& r : grads.refs()) r.tensor->fill(0.0f);
  }

  // Cross entropy through softmax: dlogits = (probs - onehot) / BT, stored in probs_.
  const float inv_bt = 1.0f / static_cast<float>(BT);
  for (std::size_t bt = 0; bt < BT; ++bt) {
    float* d = ws.probs_.data() + bt * V;
    d[static_cast<std::size_t>(targets[bt])] -= 1.0f;
    for (std::size_t v = 0; v < V; ++v) d[v] *= inv_bt;
  }

  std::fill(ws.dtmp_c_.begin(), ws.dtmp_c_.end(), 0.0f);
  Tensor& dhead = c.tie_embeddings ? grads.wte : grads.lm_head;
  linear_backward(ws.dtmp_c_.data(), dhead, nullptr, ws.probs_.data(), ws.lnf_.data(), head_of(p, c), BT,
                  C, V);

  const float* last = c.n_layers > 0 ? ws.layers_.back().res3.data() : ws.x0_.data();
  std::fill(ws.dres_.begin(), ws.dres_.end(), 0.0f);
  layernorm_backward(ws.dres_.data(), grads.lnf_g, grads.lnf_b, ws.dtmp_c_.data(), last, ws.lnf_mean_.data(),
                     ws.lnf_rstd_.data(), p.lnf_g, BT, C);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    auto& a = ws.layers_[li];
    const auto& lp = p.layers[li];
    auto& g = grads.layers[li];
    const float* residual = li == 0 ? ws.x0_.data() : ws.layers_[li - 1].res3.data();

    std::fill(ws.dfch_.begin(), ws.dfch_.end(), 0.0f);
    linear_backward(ws.dfch_.data(), g.fcproj_w, &g.fcproj_b, ws.dres_.data(), a.fch_gelu.data(), lp.fcproj_w,
                    BT, F, C);
    for (std::size_t i = 0; i < BT * F; ++i) ws.dfch_[i] *= ops::gelu_grad(a.fch[i]);

    std::fill(ws.dtmp_c_.begin(), ws.dtmp_c_.end(), 0.0f);
    linear_backward(ws.dtmp_c_.data(), g.fc_w, &g.fc_b, ws.dfch_.data(), a.ln2.data(), lp.fc_w, BT, C, F);
    layernorm_backward(ws.dres_.data(), g.ln2_g, g.ln2_b, ws.dtmp_c_.data(), a.res2.data(), a.ln2_mean.data(),
                       a.ln2_rstd.data(), lp.ln2_g, BT, C);

    std::fill(ws.datty_.begin(), ws.datty_.end(), 0.0f);
    linear_backward(ws.datty_.data(), g.proj_w, &g.proj_b, ws.dres_.data(), a.atty.data(), lp.proj_w, BT, C, C);

    std::fill(ws.dqkv_.begin(), ws.dqkv_.end(), 0.0f);
    attention_backward(ws.dqkv_.data(), ws.datt_row_.data(), ws.datty_.data(), a.att.data(), a.qkv.data(), B, T,
                       C, NH);

    std::fill(ws.dtmp_c_.begin(), ws.dtmp_c_.end(), 0.0f);
    linear_backward(ws.dtmp_c_.data(), g.qkv_w, &g.qkv_b, ws.dqkv_.data(), a.ln1.data(), lp.qkv_w, BT, C, 3 * C);
    layernorm_backward(ws.dres_.data(), g.ln1_g, g.ln1_b, ws.dtmp_c_.data(), residual, a.ln1_mean.data(),
                       a.ln1_rstd.data(), lp.ln1_g, BT, C);
  }

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t bt = b * T + t;
      const float* d = ws.dres_.data() + bt * C;
      axpy(grads.wte.data() + static_cast<std::size_t>(inputs[bt]) * C, 1.0f, d, C);
      axpy(grads.wpe.data() + t * C, 1.0f, d, C);
    }
  }
}

LossAndGrads loss_and_backward(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw UsageError("loss needs at least two tokens");
  const std::size_t T = tokens.size() - 1;
  if (T > c.context_len) {
    throw DataError("sequence of " + std::to_string(T) + " tokens exceeds context_len " +
                    std::to_string(c.context_len));
  }
  TrainWorkspace ws(c, 1, T);
  LossAndGrads out{0.0f, ParameterSet::zeros(c)};
  const auto inputs = tokens.first(T);
  const auto targets = tokens.subspan(1);
  out.loss = forward_train(p, c, inputs, targets, ws);
  backward_train(p, c, inputs, targets, ws, out.grads);
  return out;
}

// ------------------------------------------------------------- inference

std::size_t Linear::out_features() const noexcept {
  return std::visit([](const auto& w) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(w)>, Tensor>) return w.dim(0);
    else return w.shape[0];
  }, weight);
}

std::size_t Linear::in_features() const noexcept {
  return std::visit([](const auto& w) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(w)>, Tensor>) return w.dim(1);
    else return w.shape[1];
  }, weight);
}

InferenceModel InferenceModel::from_params(const ParameterSet& p, const ModelConfig& c) {
  c.validate();
  InferenceModel m;
  m.cfg = c;
  m.wte = p.wte;
  m.wpe = p.wpe;
  for (const auto& l : p.layers) {
    m.layers.push_back({l.ln1_g, l.ln1_b, Linear{l.qkv_w, l.qkv_b}, Linear{l.proj_w, l.proj_b}, l.ln2_g,
                        l.ln2_b, Linear{l.fc_w, l.fc_b}, Linear{l.fcproj_w, l.fcproj_b}});
  }
  m.lnf_g = p.lnf_g;
  m.lnf_b = p.lnf_b;
  if (!c.tie_embeddings) m.lm_head = Linear{p.lm_head, Tensor{}};
  return m;
}

bool InferenceModel::quantized() const noexcept {
  if (std::holds_alternative<QuantizedTensor>(wte)) return true;
  for (const auto& l : layers) {
    if (l.qkv.quantized() || l.proj.quantized() || l.fc.quantized() || l.fcproj.quantized()) return true;
  }
  return lm_head && lm_head->quantized();
}

KvCache::KvCache(const ModelConfig& c) : capacity_(c.context_len), d_(c.d_model) {
  k_.assign(c.n_layers, std::vector<float>(capacity_ * d_));
  v_.assign(c.n_layers, std::vector<float>(capacity_ * d_));
  x_.resize(d_);
  h_.resize(d_);
  qkv_.resize(3 * d_);
  atty_.resize(d_);
  tmp_.resize(d_);
  ff_.resize(c.d_ff);
  scores_.resize(capacity_);
  xq_.resize((std::max(c.d_ff, d_) + kQ8BlockSize - 1) / kQ8BlockSize);
}

namespace {

void apply_linear(const Linear& lin, std::span<const float> x, std::span<float> out,
                  std::vector<BlockQ8_0>& xq) {
  if (const auto* w = std::get_if<Tensor>(&lin.weight)) {
    const auto dot = kernels::active().dot_f32;
    const std::size_t in = x.size();
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = dot(x.data(), w->data() + o * in, in);
  } else {
    const auto& q = std::get<QuantizedTensor>(lin.weight);
    const std::span<BlockQ8_0> blocks(xq.data(), x.size() / kQ8BlockSize);
    quantize_activation(x, blocks);
    qmatvec(q, blocks, out);
  }
  if (!lin.bias.empty()) {
    for (std::size_t o = 0; o < out.size(); ++o) out[o] += lin.bias[o];
  }
}

}  // namespace

void forward_token(const InferenceModel& m, TokenId token, KvCache& cache, std::span<float> logits) {
  const ModelConfig& c = m.cfg;
  const std::size_t C = c.d_model, NH = c.n_heads, hs = C / NH, V = c.vocab_size;
  if (token < 0 || static_cast<std::size_t>(token) >= V) {
    throw DataError("token id " + std::to_string(token) + " out of range for vocabulary of " + std::to_string(V));
  }
  const std::size_t pos = cache.length_;
  if (pos >= cache.capacity_) {
    throw DataError("context overflow: position " + std::to_string(pos) + " exceeds context_len " +
                    std::to_string(cache.capacity_));
  }
  const auto& kt = kernels::active();
  auto& x = cache.x_;
  auto& h = cache.h_;

  if (const auto* e = std::get_if<Tensor>(&m.wte)) {
    std::copy_n(e->data() + static_cast<std::size_t>(token) * C, C, x.data());
  } else {
    const auto& q = std::get<QuantizedTensor>(m.wte);
    kt.dequantize_row_q8_0(q.row(static_cast<std::size_t>(token)).data(), x.data(), C);
  }
  for (std::size_t i = 0; i < C; ++i) x[i] += m.wpe[pos * C + i];

  const float scale = 1.0f / std::sqrt(static_cast<float>(hs));
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& L = m.layers[li];
    ops::layernorm_row(x, L.ln1_g.span(), L.ln1_b.span(), c.layernorm_eps, h);
    apply_linear(L.qkv, h, cache.qkv_, cache.xq_);
    float* kc = cache.k_[li].data();
    float* vc = cache.v_[li].data();
    std::copy_n(cache.qkv_.data() + C, C, kc + pos * C);
    std::copy_n(cache.qkv_.data() + 2 * C, C, vc + pos * C);

    for (std::size_t hd = 0; hd < NH; ++hd) {
      const float* q = cache.qkv_.data() + hd * hs;
      float* sc = cache.scores_.data();
      for (std::size_t t2 = 0; t2 <= pos; ++t2) sc[t2] = kt.dot_f32(q, kc + t2 * C + hd * hs, hs) * scale;
      ops::softmax_inplace({sc, pos + 1});
      float* o = cache.atty_.data() + hd * hs;
      std::fill(o, o + hs, 0.0f);
      for (std::size_t t2 = 0; t2 <= pos; ++t2) kt.axpy_f32(o, sc[t2], vc + t2 * C + hd * hs, hs);
    }
    apply_linear(L.proj, cache.atty_, cache.tmp_, cache.xq_);
    for (std::size_t i = 0; i < C; ++i) x[i] += cache.tmp_[i];

    ops::layernorm_row(x, L.ln2_g.span(), L.ln2_b.span(), c.layernorm_eps, h);
    apply_linear(L.fc, h, cache.ff_, cache.xq_);
    for (float& v : cache.ff_) v = ops::gelu(v);
    apply_linear(L.fcproj, cache.ff_, cache.tmp_, cache.xq_);
    for (std::size_t i = 0; i < C; ++i) x[i] += cache.tmp_[i];
  }
  ++cache.length_;

  if (logits.empty()) return;
  if (logits.size() != V) throw ShapeError("logits buffer must hold vocab_size values");
  ops::layernorm_row(x, m.lnf_g.span(), m.lnf_b.span(), c.layernorm_eps, h);
  if (m.lm_head) {
    apply_linear(*m.lm_head, h, logits, cache.xq_);
  } else if (const auto* e = std::get_if<Tensor>(&m.wte)) {
    for (std::size_t v = 0; v < V; ++v) logits[v] = kt.dot_f32(h.data(), e->data() + v * C, C);
  } else {
    const auto& q = std::get<QuantizedTensor>(m.wte);
    const std::span<BlockQ8_0> blocks(cache.xq_.data(), C / kQ8BlockSize);
    quantize_activation(h, blocks);
    qmatvec(q, blocks, logits);
  }
}

Tensor forward(const InferenceModel& m, std::span<const TokenId> tokens, KvCache* cache) {
  const ModelConfig& c = m.config();
  std::optional<KvCache> local;
  if (cache == nullptr) cache = &local.emplace(c);
  if (cache->length() + tokens.size() > cache->capacity()) {
    throw DataError("context overflow: " + std::to_string(cache->length() + tokens.size()) +
                    " positions exceed context_len " + std::to_string(cache->capacity()));
  }
  Tensor logits({tokens.size(), c.vocab_size});
  for (std::size_t t = 0; t < tokens.size(); ++t) forward_token(m, tokens[t], *cache, logits.row(t));
  return logits;
}

Tensor forward(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> tokens, KvCache* cache) {
  return forward(InferenceModel::from_params(p, c), tokens, cache);
}

std::size_t argmax(std::span<const float> v) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

namespace {

TokenId sample(std::span<const float> logits, const std::vector<bool>* allowed, const SamplingOptions& opt,
               Rng& rng) {
  std::vector<std::size_t> ids;
  ids.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (allowed == nullptr || (*allowed)[i]) ids.push_back(i);
  }
  if (ids.empty()) throw DataError("no token is allowed at this step");

  if (opt.temperature <= 0.0f) {
    std::size_t best = ids.front();
    for (std::size_t i : ids) {
      if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
  }

  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  if (opt.top_k && *opt.top_k > 0 && *opt.top_k < ids.size()) ids.resize(*opt.top_k);

  const double inv_t = 1.0 / static_cast<double>(opt.temperature);
  const double mx = logits[ids.front()] * inv_t;
  std::vector<double> w(ids.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    w[i] = std::exp(logits[ids[i]] * inv_t - mx);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<TokenId>(ids[i]);
  }
  return static_cast<TokenId>(ids.back());
}

}  // namespace

GenerationResult generate(const InferenceModel& m, std::span<const TokenId> prompt, const SamplingOptions& opt) {
  const ModelConfig& c = m.config();
  if (prompt.empty()) throw UsageError("generation needs a non-empty prompt");
  if (!opt.forced_prefix.empty() && opt.tokenizer == nullptr) {
    throw UsageError("forced_prefix requires a tokenizer");
  }

  GenerationResult res;
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  if (history.size() > c.context_len) {
    res.prompt_truncated = history.size() - c.context_len;
    history.erase(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(res.prompt_truncated));
  }

  KvCache cache(c);
  std::vector<float> logits(c.vocab_size);
  for (std::size_t i = 0; i < history.size(); ++i) {
    forward_token(m, history[i], cache, i + 1 == history.size() ? std::span<float>(logits) : std::span<float>());
  }

  Rng rng(opt.seed);
  std::string pending = opt.forced_prefix;
  std::vector<bool> allowed;
  for (std::size_t step = 0; step < opt.max_new; ++step) {
    const std::vector<bool>* mask = nullptr;
    if (!pending.empty()) {
      allowed.assign(c.vocab_size, false);
      for (std::size_t id = 0; id < c.vocab_size; ++id) {
        const auto tid = static_cast<TokenId>(id);
        if (tid == opt.eod_id || id >= opt.tokenizer->vocab_size()) continue;
        const std::string& b = opt.tokenizer->token_bytes(tid);
        if (b.empty()) continue;
        allowed[id] = b.size() <= pending.size() ? pending.compare(0, b.size(), b) == 0
                                                 : b.compare(0, pending.size(), pending) == 0;
      }
      mask = &allowed;
    }
    const TokenId next = sample(logits, mask, opt, rng);
    if (!pending.empty()) {
      const std::string& b = opt.tokenizer->token_bytes(next);
      pending = b.size() < pending.size() ? pending.substr(b.size()) : std::string();
    }
    if (opt.stop_at_eod && next == opt.eod_id) {
      res.hit_eod = true;
      break;
    }
    res.tokens.push_back(next);
    history.push_back(next);
    if (step + 1 == opt.max_new) break;

    if (cache.length() == cache.capacity()) {
      const std::size_t keep = std::max<std::size_t>(1, c.context_len / 2);
      cache.clear();
      const std::size_t start = history.size() - std::min(keep, history.size());
      for (std::size_t i = start; i < history.size(); ++i) {
        forward_token(m, history[i], cache, i + 1 == history.size() ? std::span<float>(logits) : std::span<float>());
      }
      ++res.context_shifts;
    } else {
      forward_token(m, next, cache, logits);
    }
  }
  return res;
}

GenerationResult generate(const ParameterSet& p, const ModelConfig& c, std::span<const TokenId> prompt,
                          const SamplingOptions& opt) {
  return generate(InferenceModel::from_params(p, c), prompt, opt);
}

}  // namespace lexlm
