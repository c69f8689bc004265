#include <doctest.h>

#include <cmath>
#include <random>

#include "decompx/encoder.hpp"
#include "test_support.hpp"

using namespace decompx;
using namespace decompx::testing;

namespace {

struct Shape {
  std::size_t d, heads, layers;
};

}  // namespace

TEST_CASE("fuse_attention: one head, identity output, zero value bias") {
  auto cfg = make_config(4, 1, 1, 2);
  Model m = random_model(cfg, 3);
  auto& l = m.layers[0];
  l.out_weight = Matrix::identity(4);
  l.v_bias.assign(4, 0.0f);
  l.out_bias.assign(4, 0.0f);
  const auto f = fuse_attention(l, cfg);
  REQUIRE(f.weight.size() == 1);
  CHECK(f.weight[0] == l.v_weight);
  CHECK(f.bias == std::vector<float>(4, 0.0f));

  l.out_bias = {1.0f, -2.0f, 0.5f, 3.0f};
  CHECK(fuse_attention(l, cfg).bias == l.out_bias);
}

TEST_CASE("fuse_attention: two heads split value columns and output rows") {
  auto cfg = make_config(4, 2, 1, 2);
  Model m = random_model(cfg, 5);
  auto& l = m.layers[0];
  const auto f = fuse_attention(l, cfg);
  REQUIRE(f.weight.size() == 2);
  const Mat wv = to_mat(l.v_weight), wo = to_mat(l.out_weight);
  for (std::size_t h = 0; h < 2; ++h) {
    const Mat want = naive_matmul(cols(wv, 2 * h, 2), rows(wo, 2 * h, 2));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(f.weight[h](i, j) == doctest::Approx(want[i][j]));
  }
  Vec bias = to_vec(l.out_bias);
  for (std::size_t h = 0; h < 2; ++h)
    bias = add(bias, naive_vecmat(cols(Mat{to_vec(l.v_bias)}, 2 * h, 2)[0], rows(wo, 2 * h, 2)));
  CHECK(max_abs_diff(f.bias, bias) <= 1e-6);
}

TEST_CASE("fused attention reproduces the per-head computation") {
  std::mt19937_64 rng(17);
  for (Shape s : {Shape{8, 1, 1}, Shape{8, 2, 1}, Shape{16, 4, 1}, Shape{32, 2, 1}, Shape{32, 4, 1}}) {
    const auto cfg = make_config(s.d, s.heads, s.layers, 2);
    const Model m = random_model(cfg, rng());
    const auto t = random_tokens(cfg, 3 + rng() % 8, rng);
    const auto tr = forward(m, t);
    const auto f = fuse_attention(m.layers[0], cfg);
    const Mat x = to_mat(tr.layers[0].input);
    for (std::size_t i = 0; i < t.size(); ++i) {
      Vec z = to_vec(f.bias);
      for (std::size_t h = 0; h < s.heads; ++h) {
        const Mat w = to_mat(f.weight[h]);
        for (std::size_t j = 0; j < t.size(); ++j) {
          const Vec xw = naive_vecmat(x[j], w);
          for (std::size_t c = 0; c < s.d; ++c) z[c] += tr.layers[0].attention[h](i, j) * xw[c];
        }
      }
      CHECK(max_abs_diff(tr.layers[0].attention_output.row(i), z) <= 1e-5);
    }
  }
}

TEST_CASE("embed: a pre-normalized word row passes through unchanged") {
  auto cfg = make_config(4, 1, 1, 2);
  cfg.layer_norm_eps = 0.0;
  Model m = random_model(cfg, 1);
  auto& c = m.classifier;
  c.position_embeddings = Matrix(cfg.max_positions, 4);
  c.token_type_embeddings = Matrix(cfg.type_vocab_size, 4);
  const std::vector<float> row{1.0f, -1.0f, 1.0f, -1.0f};  // mean 0, variance 1
  std::copy(row.begin(), row.end(), c.word_embeddings.row(7).begin());
  const Matrix e = embed(m, TokenSequence{{7}, {}});
  for (std::size_t k = 0; k < 4; ++k) CHECK(e(0, k) == doctest::Approx(row[k]));
}

TEST_CASE("embed: matches a per-token reference including token types") {
  const auto cfg = make_config(16, 2, 1, 2);
  const Model m = random_model(cfg, 2, {.scale = 0.5f, .randomize_layer_norm = true});
  std::mt19937_64 rng(8);
  auto t = random_tokens(cfg, 10, rng);
  t.pair_boundary = 6;
  const Matrix e = embed(m, t);
  const Mat want = naive_embed(m, t);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(max_abs_diff(e.row(i), want[i]) <= 1e-5);
  CHECK(embed(m, t) == e);
}

TEST_CASE("forward: single token attends only to itself") {
  const auto cfg = make_config(8, 2, 2, 2);
  const Model m = random_model(cfg, 4);
  const auto tr = forward(m, TokenSequence{{cfg.special_tokens.cls_id}, {}});
  for (const auto& layer : tr.layers)
    for (const auto& a : layer.attention) CHECK(a(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("forward: matches a layer-by-layer double-precision reference") {
  std::mt19937_64 rng(23);
  for (Shape s : {Shape{8, 2, 2}, Shape{16, 4, 3}, Shape{32, 1, 1}}) {
    for (auto act : {ActivationKind::GeluExact, ActivationKind::Relu, ActivationKind::Tanh}) {
      auto cfg = make_config(s.d, s.heads, s.layers, 3);
      cfg.activation = act;
      const Model m = random_model(cfg, rng(), {.scale = 0.3f, .randomize_layer_norm = true});
      auto t = random_tokens(cfg, 2 + rng() % 10, rng);
      if (t.size() > 3) t.pair_boundary = t.size() / 2;
      const auto tr = forward(m, t);
      const auto ref = naive_forward(m, t);
      REQUIRE(tr.layers.size() == s.layers);
      for (std::size_t l = 0; l < s.layers; ++l) {
        for (std::size_t h = 0; h < s.heads; ++h)
          for (std::size_t i = 0; i < t.size(); ++i)
            CHECK(max_abs_diff(tr.layers[l].attention[h].row(i), ref.layers[l].alpha[h][i]) <= 1e-5);
        for (std::size_t i = 0; i < t.size(); ++i)
          CHECK(max_abs_diff(tr.layers[l].output.row(i), ref.layers[l].out[i]) <= 1e-5);
      }
      CHECK(max_abs_diff(tr.logits, ref.logits) <= 1e-5);
      CHECK(logits(m, t) == tr.logits);
    }
  }
}

TEST_CASE("forward: attention rows are probability vectors") {
  const auto cfg = make_config(16, 4, 2, 2);
  const Model m = random_model(cfg, 12, {.scale = 1.0f});
  std::mt19937_64 rng(2);
  const auto tr = forward(m, random_tokens(cfg, 12, rng));
  for (const auto& layer : tr.layers) {
    for (const auto& a : layer.attention) {
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (float v : a.row(i)) {
          CHECK(v >= 0.0f);
          s += v;
        }
        CHECK(std::fabs(s - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("forward: bit-identical across repeated runs") {
  const auto cfg = make_config(16, 4, 3, 2);
  const Model m = random_model(cfg, 31);
  std::mt19937_64 rng(1);
  const auto t = random_tokens(cfg, 9, rng);
  const auto a = forward(m, t), b = forward(m, t);
  CHECK(a.logits == b.logits);
  for (std::size_t l = 0; l < a.layers.size(); ++l) CHECK(a.layers[l].output == b.layers[l].output);
}

TEST_CASE("forward_from_embedding_sum agrees with forward") {
  const auto cfg = make_config(8, 2, 2, 2);
  const Model m = random_model(cfg, 6);
  std::mt19937_64 rng(3);
  const auto t = random_tokens(cfg, 5, rng);
  const auto tr = forward(m, t);
  CHECK(forward_from_embedding_sum(m, embedding_sum(m, t)).logits == tr.logits);
  CHECK(logits_from_embedding_sum(m, tr.embedding_sum) == tr.logits);
}

TEST_CASE("token validation") {
  const auto cfg = make_config(8, 2, 1, 2);
  const Model m = random_model(cfg, 6);
  CHECK_THROWS_AS(forward(m, TokenSequence{{2, static_cast<std::uint32_t>(cfg.vocab_size)}, {}}),
                  ValidationError);
  CHECK_THROWS_AS(forward(m, TokenSequence{std::vector<std::uint32_t>(cfg.max_positions + 1, 5), {}}),
                  ValidationError);
  CHECK_THROWS(forward(m, TokenSequence{}));
}

TEST_CASE("softmax and argmax helpers") {
  const auto p = softmax(std::vector<float>{0.0f, std::log(3.0f)});
  CHECK(p[0] == doctest::Approx(0.25));
  CHECK(argmax(std::vector<float>{1.0f, 3.0f, 3.0f, 2.0f}) == 1);
}
