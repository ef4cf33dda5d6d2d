// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "knowtrace/checkpoint.hpp"
#include "knowtrace/model.hpp"
#include "knowtrace/numerics.hpp"
#include "knowtrace/rng.hpp"

#include <cmath>
#include <filesystem>

using namespace knowtrace;
using namespace knowtrace::model;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 100;
  cfg.d_model = 32;
  cfg.n_layers = 4;
  cfg.n_heads = 2;
  cfg.d_mlp = 64;
  cfg.max_seq_len = 32;
  cfg.seed = 7;
  return cfg;
}

TokenSequence random_sequence(Rng& rng, const ModelConfig& cfg, int len) {
  TokenSequence seq;
  for (int i = 0; i < len; ++i)
    seq.ids.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.vocab_size))));
  seq.subject_begin = 1;
  seq.subject_end = std::max(2, len / 2);
  return seq;
}

}  // namespace

TEST_CASE("residual identity and attention rows on random traces") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  Rng rng(3, "model-random");
  for (int rep = 0; rep < 20; ++rep) {
    TokenSequence seq = random_sequence(rng, cfg, 4 + static_cast<int>(rng.uniform_int(12)));
    Trace trace = forward_traced(params, seq);
    const int T = trace.seq_len();
    for (int l = 1; l <= cfg.n_layers; ++l) {
      MatF expect = trace.hidden[static_cast<size_t>(l - 1)] +
                    trace.attn_out[static_cast<size_t>(l - 1)] +
                    trace.mlp_out[static_cast<size_t>(l - 1)];
      CHECK((trace.hidden[static_cast<size_t>(l)] - expect).cwiseAbs().maxCoeff() <= 1e-5f);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const MatF& attn = trace.attn_weights[static_cast<size_t>(l - 1)][static_cast<size_t>(h)];
        for (int i = 0; i < T; ++i) {
          CHECK(std::abs(attn.row(i).sum() - 1.0f) <= 1e-5f);
          for (int j = i + 1; j < T; ++j) CHECK(attn(i, j) == 0.0f);
          for (int j = 0; j <= i; ++j) CHECK(attn(i, j) >= 0.0f);
        }
      }
    }
  }
}

TEST_CASE("forward is bitwise deterministic") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  Rng rng(5, "det");
  TokenSequence seq = random_sequence(rng, cfg, 10);
  Trace a = forward_traced(params, seq);
  Trace b = forward_traced(params, seq);
  CHECK((a.last_logits - b.last_logits).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((a.final_postnorm - b.final_postnorm).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("logits at position i ignore later tokens") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  Rng rng(9, "causal");
  TokenSequence a = random_sequence(rng, cfg, 12);
  TokenSequence b = a;
  for (int i = 6; i < 12; ++i)
    b.ids[static_cast<size_t>(i)] =
        static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.vocab_size)));

  TraceOptions opts;
  opts.keep_all_logits = true;
  Trace ta = forward_traced(params, a, {}, opts);
  Trace tb = forward_traced(params, b, {}, opts);
  for (int i = 0; i < 6; ++i)
    CHECK((ta.all_logits->row(i) - tb.all_logits->row(i)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("patching with clean values is an identity intervention") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  Rng rng(11, "identity-patch");
  TokenSequence seq = random_sequence(rng, cfg, 9);
  Trace clean = forward_traced(params, seq);

  Hooks hooks;
  PatchSpec<float> patch;
  patch.layer = 2;
  patch.positions = {1, 2};
  patch.values.resize(2, cfg.d_model);
  patch.values.row(0) = clean.mlp_out[1].row(1);
  patch.values.row(1) = clean.mlp_out[1].row(2);
  hooks.patches.push_back(patch);

  Trace hooked = forward_traced(params, seq, hooks);
  numerics::Distribution p(clean.last_distribution);
  numerics::Distribution q(hooked.last_distribution);
  CHECK(numerics::js_divergence(p, q) <= 1e-12);

  // residual variant
  Hooks rhooks;
  PatchSpec<float> rpatch;
  rpatch.layer = 3;
  rpatch.positions = {0};
  rpatch.values.resize(1, cfg.d_model);
  rpatch.values.row(0) = clean.hidden[3].row(0);
  rpatch.patch_residual = true;
  rhooks.patches.push_back(rpatch);
  Trace rhooked = forward_traced(params, seq, rhooks);
  CHECK(numerics::js_divergence(p, numerics::Distribution(rhooked.last_distribution)) <= 1e-12);
}

TEST_CASE("hook validation") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  Rng rng(13, "hooks");
  TokenSequence seq = random_sequence(rng, cfg, 6);

  Hooks bad_layer;
  PatchSpec<float> patch;
  patch.layer = 99;
  patch.positions = {0};
  patch.values = MatF::Zero(1, cfg.d_model);
  bad_layer.patches.push_back(patch);
  CHECK_THROWS_AS(forward_traced(params, seq, bad_layer), InvalidInput);

  TokenSequence bad_tokens = seq;
  bad_tokens.ids[0] = cfg.vocab_size + 5;
  CHECK_THROWS_AS(forward_traced(params, bad_tokens), InvalidInput);

  TokenSequence too_long;
  too_long.ids.assign(static_cast<size_t>(cfg.max_seq_len) + 1, 1);
  too_long.subject_begin = 0;
  too_long.subject_end = 1;
  CHECK_THROWS_AS(forward_traced(params, too_long), InvalidInput);
}

TEST_CASE("greedy decoding breaks exact ties toward the lowest token id") {
  // All block weights zeroed: the residual carries the embedding straight to
  // the final norm, so logits are hand-computable.
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 2;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_mlp = 4;
  cfg.max_seq_len = 4;
  cfg.seed = 1;
  Params params = init_params<float>(cfg);
  for (auto& l : params.layers) {
    l.wq.setZero();
    l.wk.setZero();
    l.wv.setZero();
    l.wo.setZero();
    l.w_up.setZero();
    l.w_down.setZero();
  }
  params.embed.setZero();
  params.pos.setZero();
  params.embed(5, 0) = 1.0f;
  params.unembed.setZero();
  params.unembed(0, 7) = 1.0f;
  params.unembed(0, 12) = 1.0f;
  params.unembed(1, 12) = 33.0f;  // multiplies a zero activation: exact tie with 7

  TokenSequence prompt;
  prompt.ids = {5};
  prompt.subject_begin = 0;
  prompt.subject_end = 1;
  Trace trace = forward_traced(params, prompt);
  CHECK(trace.last_logits[7] == trace.last_logits[12]);
  CHECK(trace.last_logits[7] > trace.last_logits[0]);
  std::vector<int> out = greedy_decode(params, prompt, 1, 0);
  REQUIRE(out.size() == 1);
  CHECK(out[0] == 7);
}

TEST_CASE("argmax_lowest picks the first maximum") {
  RowVec<float> logits(5);
  logits << 0.0f, 3.0f, 3.0f, 1.0f, -2.0f;
  CHECK(argmax_lowest<float>(logits) == 1);
}

TEST_CASE("greedy decoding on a forced point mass emits that token and stops at eot") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  params.unembed.setZero();
  params.unembed.col(9).setConstant(100.0f);  // dominated by token 9 regardless of state sign?
  // Make the state deterministic-positive by zeroing blocks and using a fixed
  // positive embedding, so logit 9 is strictly maximal.
  for (auto& l : params.layers) {
    l.wq.setZero();
    l.wk.setZero();
    l.wv.setZero();
    l.wo.setZero();
    l.w_up.setZero();
    l.w_down.setZero();
  }
  params.embed.setZero();
  params.pos.setZero();
  params.embed.col(0).setConstant(1.0f);

  TokenSequence prompt;
  prompt.ids = {3, 4};
  prompt.subject_begin = 0;
  prompt.subject_end = 1;
  std::vector<int> out = greedy_decode(params, prompt, 5, /*eot=*/9);
  REQUIRE(out.size() == 1);  // token 9 is both argmax and eot
  CHECK(out[0] == 9);

  numerics::Distribution dist(next_distribution(params, prompt));
  CHECK(dist[9] > 0.999);
}

TEST_CASE("checkpoint round-trips bitwise") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  const std::string dir = "checkpoint_test_dir";
  std::filesystem::remove_all(dir);
  save_checkpoint(params, dir, 42, "test");
  Params loaded = load_checkpoint(dir);
  CHECK(params_hash(loaded) == params_hash(params));
  CHECK(loaded.config.d_model == cfg.d_model);

  // corrupt the blob: loader must reject it
  {
    std::ofstream f(dir + "/params.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(100);
    const float junk = 1234.5f;
    f.write(reinterpret_cast<const char*>(&junk), sizeof(junk));
  }
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("next_distribution is a valid distribution") {
  ModelConfig cfg = small_config();
  Params params = init_params<float>(cfg);
  Rng rng(15, "dist");
  TokenSequence seq = random_sequence(rng, cfg, 7);
  VecD dist = next_distribution(params, seq);
  CHECK_NOTHROW(numerics::Distribution{dist});
  CHECK(std::abs(dist.sum() - 1.0) < 1e-9);
}
