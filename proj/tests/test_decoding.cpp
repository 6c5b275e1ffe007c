#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "blockdiff/decoding.hpp"
#include "blockdiff/trainer.hpp"

using namespace blockdiff;

namespace {

ModelConfig cfg(int vocab = 12, int max_len = 40) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_len = max_len;
  c.init_std = 0.5;
  return c;
}

TokenSeq random_prompt(Rng& rng, int n, int vocab) {
  TokenSeq x(static_cast<std::size_t>(n));
  for (auto& t : x) t = static_cast<Token>(rng.uniform_index(static_cast<std::uint64_t>(vocab - 1)));
  return x;
}

Transformer<double> zero_model() {
  const auto c = cfg();
  auto p = init_params<double>(c, 1);
  for (auto& [name, m] : p) {
    if (!name.ends_with("norm")) m.setZero();
  }
  return Transformer<double>(c, p);
}

}  // namespace

TEST_CASE("block-1 decoding reproduces greedy next-token decoding") {
  const auto c = cfg();
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto model = Transformer<double>::initialized(c, seed);
    Rng rng(seed, 3);
    for (int r = 0; r < 10; ++r) {
      const TokenSeq prompt = random_prompt(rng, 1 + static_cast<int>(rng.uniform_index(8)), c.vocab_size);
      DecodeConfig dc;
      dc.block_size = 1;
      dc.steps_per_block = 1;
      dc.max_new_tokens = 10;
      const auto a = decode_blockwise(model, prompt, dc);
      const auto b = decode_ar(model, prompt, 10);
      CHECK(a == b);
    }
  }
}

TEST_CASE("prompt prefix preserved, commitments monotone, blocks isolated") {
  auto model = Transformer<double>::initialized(cfg(), 5);
  const Token mask = model.config().resolved_mask_id();
  const TokenSeq prompt{1, 2, 3, 4, 5};
  for (int B : {1, 2, 3, 4}) {
    DecodeConfig dc;
    dc.block_size = B;
    dc.steps_per_block = B;
    dc.max_new_tokens = 9;
    TokenSeq prev;
    std::vector<std::uint8_t> prev_masked;
    int calls = 0;
    auto obs = [&](const DecodeState& s) {
      ++calls;
      CHECK(s.block_begin >= s.prompt_len);
      CHECK(s.block_end - s.block_begin <= B);
      const bool aligned = s.block_end % B == 0 || s.block_end == static_cast<int>(s.canvas.size());
      CHECK(aligned);
      CHECK(s.committed_now.size() == 1u);
      for (std::size_t i = 0; i < s.canvas.size(); ++i) {
        const int pos = static_cast<int>(i);
        if (pos >= s.block_end) CHECK(s.masked[i]);
        if (pos < s.block_begin) CHECK_FALSE(s.masked[i]);
        CHECK((s.canvas[i] == mask) == static_cast<bool>(s.masked[i]));
        if (!prev.empty() && !prev_masked[i]) CHECK(s.canvas[i] == prev[i]);
      }
      prev = s.canvas;
      prev_masked = s.masked;
    };
    const auto out = decode_blockwise(model, prompt, dc, obs);
    CHECK(calls == 9);
    REQUIRE(out.size() == 14u);
    CHECK(TokenSeq(out.begin(), out.begin() + 5) == prompt);
    for (Token t : out) CHECK(t != mask);
  }
}

TEST_CASE("one forward per block when k equals B") {
  auto model = Transformer<double>::initialized(cfg(), 6);
  DecodeConfig dc;
  dc.block_size = 4;
  dc.steps_per_block = 1;
  dc.commits_per_step = 4;
  dc.max_new_tokens = 8;
  const TokenSeq prompt{1, 2, 3, 4};
  int calls = 0;
  decode_blockwise(model, prompt, dc, [&](const DecodeState& s) {
    ++calls;
    CHECK(s.committed_now.size() == 4u);
  });
  CHECK(calls == 2);
}

TEST_CASE("ties go to the lowest position and lowest id") {
  auto model = zero_model();
  DecodeConfig dc;
  dc.block_size = 4;
  dc.steps_per_block = 4;
  dc.max_new_tokens = 4;
  std::vector<int> order;
  const auto out = decode_blockwise(model, TokenSeq{3, 3, 3, 3}, dc, [&](const DecodeState& s) {
    order.push_back(s.committed_now.at(0));
  });
  CHECK(order == std::vector<int>{4, 5, 6, 7});
  for (int i = 4; i < 8; ++i) CHECK(out[static_cast<std::size_t>(i)] == 0);
}

TEST_CASE("mask token is never emitted even when it wins") {
  const auto c = cfg();
  auto p = init_params<double>(c, 1);
  for (auto& [name, m] : p) {
    if (!name.ends_with("norm")) m.setZero();
  }
  p.at("head_bias")(0, c.resolved_mask_id()) = 100.0;
  p.at("head_bias")(0, 7) = 1.0;
  Transformer<double> model(c, p);
  DecodeConfig dc;
  dc.block_size = 2;
  dc.steps_per_block = 2;
  dc.max_new_tokens = 4;
  const auto out = decode_blockwise(model, TokenSeq{1}, dc);
  for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i] == 7);
  CHECK(decode_ar(model, TokenSeq{1}, 3) == TokenSeq{1, 7, 7, 7});
}

TEST_CASE("configuration checks") {
  auto model = Transformer<double>::initialized(cfg(), 7);
  DecodeConfig dc;
  dc.block_size = 4;
  dc.steps_per_block = 2;
  dc.commits_per_step = 1;
  CHECK_THROWS_AS(decode_blockwise(model, TokenSeq{1}, dc), std::invalid_argument);
  dc.steps_per_block = 4;
  dc.attention = MaskKind::causal;
  CHECK_THROWS_AS(decode_blockwise(model, TokenSeq{1}, dc), std::invalid_argument);
  dc.attention = MaskKind::block_causal;
  dc.max_new_tokens = 0;
  CHECK(decode_blockwise(model, TokenSeq{1, 2}, dc) == TokenSeq{1, 2});
  CHECK(decode_ar(model, TokenSeq{1, 2}, 0) == TokenSeq{1, 2});
  dc.max_new_tokens = 40;
  CHECK_THROWS_AS(decode_blockwise(model, TokenSeq{1, 2}, dc), std::out_of_range);
  CHECK_THROWS_AS(decode_blockwise(model, TokenSeq{}, dc), std::invalid_argument);
}

TEST_CASE("eos stops after the block that produced it") {
  const auto c = cfg();
  auto p = init_params<double>(c, 1);
  for (auto& [name, m] : p) {
    if (!name.ends_with("norm")) m.setZero();
  }
  p.at("head_bias")(0, 9) = 1.0;
  Transformer<double> model(c, p);
  DecodeConfig dc;
  dc.block_size = 2;
  dc.steps_per_block = 2;
  dc.max_new_tokens = 6;
  dc.eos = 9;
  CHECK(decode_blockwise(model, TokenSeq{1, 2}, dc) == TokenSeq{1, 2});
  CHECK(decode_ar(model, TokenSeq{1, 2}, 6, 9) == TokenSeq{1, 2});
}

TEST_CASE("decoding is deterministic") {
  auto model = Transformer<float>::initialized(cfg(), 8);
  DecodeConfig dc;
  dc.block_size = 4;
  dc.steps_per_block = 4;
  dc.max_new_tokens = 12;
  CHECK(decode_blockwise(model, TokenSeq{1, 2, 3}, dc) == decode_blockwise(model, TokenSeq{1, 2, 3}, dc));
}

TEST_CASE("a trained model continues a periodic sequence") {
  ModelConfig c = cfg();
  c.init_std = 0.02;
  TrainState st{Transformer<float>::initialized(c, 1), {}, 0, 0};
  CurriculumStage stage;
  stage.name = "ar";
  stage.objective = Objective::ar;
  AdamWConfig opt;
  opt.weight_decay = 0.0;
  // Period-4 streams at every phase.
  TrainBatch batch;
  for (int phase = 0; phase < 4; ++phase) {
    TokenSeq s;
    for (int i = 0; i < 16; ++i) s.push_back(1 + (i + phase) % 4);
    batch.tokens.push_back(s);
  }
  stage.lr.peak = 1e-2;
  double last = 0.0;
  for (int step = 0; step < 150; ++step) last = train_step(st, stage, step, batch, opt).loss;
  CHECK(last < 0.05);
  const auto out = decode_ar(st.model, TokenSeq{2, 3, 4}, 8);
  CHECK(out == TokenSeq{2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
}
