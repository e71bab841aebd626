#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lexlm/error.hpp"
#include "lexlm/gguf.hpp"
#include "lexlm/train.hpp"
#include "oracles.hpp"

using namespace lexlm;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_ff = 64;
  c.context_len = 16;
  c.vocab_size = 40;
  return c;
}

std::vector<std::vector<TokenId>> toy_docs() {
  return {{1, 2, 3, 4, 5, 6, 7, 39}, {8, 9, 10, 11, 12, 39}, {13, 14, 15, 16, 17, 18, 19, 20, 39}};
}

// Textbook Adam on one scalar, used as an oracle.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double w, double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return w - lr * (mh / (std::sqrt(vh) + eps) + wd * w);
  }
};

}  // namespace

TEST_CASE("lr schedule closed forms") {
  OptimizerHyper h;
  h.base_lr = 3e-4f;
  h.total_steps = 2000;
  const std::size_t W = warmup_steps(h);
  CHECK(W == 200);
  CHECK(lr_at(0, h) == doctest::Approx(3e-4 / 200));
  CHECK(lr_at(W - 1, h) == doctest::Approx(3e-4).epsilon(1e-6));
  CHECK(lr_at(W, h) == doctest::Approx(3e-4).epsilon(1e-6));
  CHECK(lr_at(W + (2000 - W) / 2, h) == doctest::Approx((3e-4 + 3e-5) / 2).epsilon(1e-6));
  CHECK(lr_at(2000, h) == doctest::Approx(3e-5).epsilon(1e-6));
  CHECK(lr_at(5000, h) == lr_at(2000, h));
  for (std::size_t s = 1; s <= 2000; ++s) CHECK(lr_at(s, h) <= 3e-4f * (1 + 1e-6f));
}

TEST_CASE("hyper validation and json") {
  OptimizerHyper h;
  CHECK(OptimizerHyper::from_json(h.to_json()) == h);
  auto j = h.to_json();
  j["momentum"] = 0.5;
  CHECK_THROWS_AS(OptimizerHyper::from_json(j), UsageError);
  h.beta1 = 0.9999f;
  CHECK_THROWS_AS(h.validate(), UsageError);
}

TEST_CASE("adamw identities") {
  const ModelConfig c = tiny();
  OptimizerHyper h;
  SUBCASE("zero gradient, no decay leaves params unchanged") {
    h.weight_decay = 0;
    ParameterSet p = init_params(c, 1);
    const ParameterSet before = p;
    OptimizerState s = OptimizerState::zeros(c);
    adamw_step(p, ParameterSet::zeros(c), s, h, 1e-3f);
    CHECK(p == before);
  }
  SUBCASE("zero gradient with decay scales only decayed weights") {
    h.weight_decay = 0.1f;
    ParameterSet p = init_params(c, 2);
    for (auto& r : p.refs())
      for (auto& v : r.tensor->storage()) v += 0.5f;
    const ParameterSet before = p;
    OptimizerState s = OptimizerState::zeros(c);
    const float lr = 1e-2f;
    adamw_step(p, ParameterSet::zeros(c), s, h, lr);
    auto now = p.refs();
    const auto was = before.refs();
    for (std::size_t i = 0; i < now.size(); ++i) {
      for (std::size_t k = 0; k < now[i].tensor->size(); ++k) {
        const double expect = decays(now[i].role) ? (*was[i].tensor)[k] * (1.0 - double(lr) * 0.1) : (*was[i].tensor)[k];
        REQUIRE(std::fabs((*now[i].tensor)[k] - expect) <= 1e-7);
      }
    }
    CHECK(decays(ParamRole::Weight));
    CHECK_FALSE(decays(ParamRole::TokenEmbedding));
    CHECK_FALSE(decays(ParamRole::PositionEmbedding));
    CHECK_FALSE(decays(ParamRole::Bias));
    CHECK_FALSE(decays(ParamRole::NormGain));
  }
  SUBCASE("first step moves by lr * g / (|g| + eps)") {
    h.weight_decay = 0;
    ParameterSet p = ParameterSet::zeros(c);
    ParameterSet g = ParameterSet::zeros(c);
    g.lnf_b[0] = 0.5f;
    OptimizerState s = OptimizerState::zeros(c);
    const float lr = 1e-3f;
    adamw_step(p, g, s, h, lr);
    CHECK(std::fabs(p.lnf_b[0] - (-lr * 0.5 / (0.5 + 1e-8))) <= 1e-7);
    CHECK(std::fabs(p.lnf_b[0] + lr) <= 1e-7);
    CHECK(p.lnf_b[1] == 0.0f);
  }
  SUBCASE("matches scalar Adam oracle over many steps") {
    h.weight_decay = 0;
    ParameterSet p = ParameterSet::zeros(c);
    OptimizerState s = OptimizerState::zeros(c);
    Rng r(3);
    ScalarAdam ref[4];
    double w[4] = {0.3, -0.2, 1.0, 0.0};
    for (int i = 0; i < 4; ++i) p.lnf_g[i] = float(w[i]);
    for (int t = 0; t < 50; ++t) {
      ParameterSet g = ParameterSet::zeros(c);
      for (int i = 0; i < 4; ++i) {
        g.lnf_g[i] = float(r.normal(0, 1));
        w[i] = ref[i].step(w[i], g.lnf_g[i], 1e-2, 0.9, 0.999, 1e-8, 0);
      }
      adamw_step(p, g, s, h, 1e-2f);
    }
    for (int i = 0; i < 4; ++i) CHECK(p.lnf_g[i] == doctest::Approx(w[i]).epsilon(1e-4));
    for (float v : s.v.lnf_g.span()) CHECK(v >= 0.0f);
  }
  SUBCASE("NaN gradient aborts without touching state") {
    ParameterSet p = init_params(c, 4);
    const ParameterSet before = p;
    ParameterSet g = ParameterSet::zeros(c);
    g.layers[0].fc_w[7] = NAN;
    OptimizerState s = OptimizerState::zeros(c);
    try {
      adamw_step(p, g, s, h, 1e-3f);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("blk.0.ffn_up.weight") != std::string::npos);
    }
    CHECK(p == before);
    CHECK(s.t == 0);
  }
}

TEST_CASE("gradient clipping") {
  const ModelConfig c = tiny();
  ParameterSet g = ParameterSet::zeros(c);
  g.lnf_b[0] = 0.3f;
  g.lnf_b[1] = 0.4f;
  CHECK(clip_gradients(g, 1.0f) == doctest::Approx(0.5));
  CHECK(g.lnf_b[0] == 0.3f);
  g.lnf_b[0] = 1.2f;
  g.lnf_b[1] = 1.6f;
  CHECK(clip_gradients(g, 1.0f) == doctest::Approx(2.0));
  CHECK(g.lnf_b[0] == doctest::Approx(0.6f));
  CHECK(global_norm(g) <= 1.0 + 1e-6);
}

TEST_CASE("batch stream") {
  BatchStream s(toy_docs(), 5, 7);
  std::vector<TokenId> in, tg;
  s.next_batch(3, in, tg);
  CHECK(in.size() == 15);
  for (std::size_t i = 0; i + 1 < 5; ++i) CHECK(in[i + 1] == tg[i]);
  BatchStream a(toy_docs(), 5, 7), b(toy_docs(), 5, 7);
  std::vector<TokenId> ia, ta, ib, tb;
  a.next_batch(4, ia, ta);
  a.next_batch(4, ia, ta);
  b.skip(4);
  b.next_batch(4, ib, tb);
  CHECK(ia == ib);
  CHECK(ta == tb);
  // Tiny data: many epochs per batch still works.
  BatchStream tiny_s({{1, 2}}, 8, 1);
  tiny_s.next_batch(2, in, tg);
  CHECK(tiny_s.epoch() >= 8);
}

TEST_CASE("training reduces loss and is reproducible") {
  TrainOptions o;
  o.config = tiny();
  o.hyper.total_steps = 60;
  o.hyper.base_lr = 3e-3f;
  o.batch_size = 2;
  o.seq_len = 8;
  o.deterministic = true;
  const auto a = train_loop(o, toy_docs());
  const auto b = train_loop(o, toy_docs());
  CHECK(a.params == b.params);
  CHECK(a.log.front().loss == doctest::Approx(std::log(40.0)).epsilon(0.05));
  CHECK(a.final_loss < a.log.front().loss * 0.6f);
}

TEST_CASE("single document loss decreases on a moving average") {
  TrainOptions o;
  o.config = tiny();
  o.hyper.total_steps = 200;
  o.hyper.base_lr = 2e-3f;
  o.batch_size = 1;
  o.seq_len = 8;
  const auto r = train_loop(o, {{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 39}});
  std::vector<double> avg;
  for (std::size_t i = 50; i <= r.log.size(); i += 25) {
    double s = 0;
    for (std::size_t k = i - 50; k < i; ++k) s += r.log[k].loss;
    avg.push_back(s / 50);
  }
  for (std::size_t i = 1; i < avg.size(); ++i) CHECK(avg[i] < avg[i - 1]);
}

TEST_CASE("checkpoint and resume reproduce an uninterrupted run") {
  const fs::path dir = fs::temp_directory_path() / "lexlm_train_test";
  const fs::path dir2 = fs::temp_directory_path() / "lexlm_train_test2";
  fs::remove_all(dir);
  fs::remove_all(dir2);
  TrainOptions o;
  o.config = tiny();
  o.hyper.total_steps = 20;
  o.batch_size = 2;
  o.seq_len = 8;
  o.deterministic = true;
  o.out_dir = dir;
  o.checkpoint_every = 10;
  const auto full = train_loop(o, toy_docs());
  CHECK(fs::exists(dir / "model.gguf"));
  CHECK(fs::exists(dir / "optimizer.gguf"));
  CHECK(fs::exists(dir / "train_state.json"));
  std::ifstream log(dir / "loss.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("wall_ms"));
    CHECK(j.contains("tokens_seen"));
    ++lines;
  }
  CHECK(lines == 20);

  // Stop at 10, then resume to 20.
  o.out_dir = dir2;
  o.hyper.total_steps = 20;
  // Interrupt right after the step-10 checkpoint.
  {
    TrainOptions partial = o;
    std::size_t stop_after = 10;
    partial.on_step = [&](const LossRecord& r) {
      if (r.step + 1 == stop_after) throw std::runtime_error("interrupt");
    };
    CHECK_THROWS(train_loop(partial, toy_docs()));
  }
  TrainOptions resume = o;
  resume.resume = true;
  const auto resumed = train_loop(resume, toy_docs());
  CHECK(resumed.params == full.params);
  const auto bytes_a = gguf::serialize(gguf::read_file(dir / "model.gguf"));
  const auto bytes_b = gguf::serialize(gguf::read_file(dir2 / "model.gguf"));
  CHECK(bytes_a == bytes_b);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
