#include <doctest.h>

#include <cmath>
#include <random>

#include "decompx/decompose.hpp"
#include "test_support.hpp"

using namespace decompx;
using namespace decompx::testing;

namespace {

double sum_rows_diff(const Matrix& parts, std::span<const float> want) {
  double worst = 0;
  for (std::size_t t = 0; t < parts.cols(); ++t) {
    double s = 0;
    for (std::size_t k = 0; k < parts.rows(); ++k) s += parts(k, t);
    worst = std::max(worst, std::fabs(s - want[t]));
  }
  return worst;
}

Model rich_model(std::size_t d, std::size_t h, std::size_t l, std::uint64_t seed,
                 ActivationKind act = ActivationKind::GeluExact) {
  auto cfg = make_config(d, h, l, 3);
  cfg.activation = act;
  return random_model(cfg, seed, {.scale = 0.3f, .randomize_layer_norm = true});
}

}  // namespace

TEST_CASE("init_decomposition: each token owns exactly its embedding") {
  const Matrix e = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const auto s = init_decomposition(e);
  REQUIRE(s.tokens() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t t = 0; t < 2; ++t) CHECK(s.parts[i](k, t) == (i == k ? e(i, t) : 0.0f));
    }
    CHECK(s.reconstruct(i) == std::vector<float>(e.row(i).begin(), e.row(i).end()));
  }
}

TEST_CASE("absdot: hand examples") {
  SUBCASE("bias aligned with one part") {
    Matrix p = Matrix::from_rows({{2, 0}, {0, 5}});
    const auto w = absdot_distribute(std::vector<float>{1, 0}, p);
    CHECK(w.omega == std::vector<float>{1.0f, 0.0f});
    CHECK(p == Matrix::from_rows({{3, 0}, {0, 5}}));
  }
  SUBCASE("bias split by |b . p|") {
    Matrix p = Matrix::from_rows({{1, 0}, {0, 3}});
    const auto w = absdot_distribute(std::vector<float>{1, 1}, p);
    CHECK(w.omega[0] == doctest::Approx(0.25));
    CHECK(w.omega[1] == doctest::Approx(0.75));
    CHECK(p(0, 0) == doctest::Approx(1.25));
    CHECK(p(1, 1) == doctest::Approx(3.75));
  }
  SUBCASE("negative dot products count by magnitude") {
    Matrix p = Matrix::from_rows({{-1, 0}, {0, 1}});
    const auto w = absdot_distribute(std::vector<float>{1, 1}, p);
    CHECK(w.omega[0] == doctest::Approx(0.5));
  }
  SUBCASE("orthogonal bias falls back to uniform") {
    Matrix p = Matrix::from_rows({{0, 1}, {0, 2}, {0, 0}, {0, -4}});
    const auto w = absdot_distribute(std::vector<float>{3, 0}, p);
    for (float o : w.omega) CHECK(o == doctest::Approx(0.25));
    CHECK(p(2, 0) == doctest::Approx(0.75));
  }
}

TEST_CASE("absdot: weights are a distribution and the bias is fully handed out") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 12, d = 1 + rng() % 16;
    Matrix p(n, d);
    for (auto& v : p.data()) v = g(rng);
    std::vector<float> b(d);
    for (auto& v : b) v = g(rng);
    Matrix before = p;
    const auto w = absdot_distribute(b, p);
    double total = 0;
    for (float o : w.omega) {
      CHECK(o >= 0.0f);
      total += o;
    }
    CHECK(std::fabs(total - 1.0) <= 1e-6);
    std::vector<float> want(d);
    for (std::size_t t = 0; t < d; ++t) {
      double s = b[t];
      for (std::size_t k = 0; k < n; ++k) s += before(k, t);
      want[t] = static_cast<float>(s);
    }
    CHECK(sum_rows_diff(p, want) <= 1e-5);
  }
}

TEST_CASE("attention parts at the first layer reduce to the per-token mixing terms") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Model m = rich_model(16, 4, 1, rng());
    const auto t = random_tokens(m.config, 3 + rng() % 7, rng);
    const auto tr = forward(m, t);
    const auto fused = fuse_attention(m.layers[0], m.config);
    const auto state = init_decomposition(tr.embeddings, BiasMode::NoBias);
    const auto z = attention_decompose(state, tr.layers[0].attention, fused);
    const Mat x = to_mat(tr.embeddings);
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t k = 0; k < t.size(); ++k) {
        // z_{i<-k} = sum_h alpha^h_{ik} x_k W^h_att
        Vec want(16, 0.0);
        for (std::size_t h = 0; h < 4; ++h) {
          const Vec xw = naive_vecmat(x[k], to_mat(fused.weight[h]));
          for (std::size_t c = 0; c < 16; ++c) want[c] += tr.layers[0].attention[h](i, k) * xw[c];
        }
        CHECK(max_abs_diff(z[i].row(k), want) <= 1e-6);
      }
    }
  }
}

TEST_CASE("attention parts sum to the attention output") {
  std::mt19937_64 rng(8);
  const Model m = rich_model(16, 2, 1, 5);
  const auto t = random_tokens(m.config, 7, rng);
  const auto tr = forward(m, t);
  const auto z = attention_decompose(init_decomposition(tr.embeddings), tr.layers[0].attention,
                                     fuse_attention(m.layers[0], m.config));
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(sum_rows_diff(z[i], tr.layers[0].attention_output.row(i)) <= 1e-5);
}

TEST_CASE("layernorm_decompose: a single part is plain LayerNorm") {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> g(0.5f, 2.0f);
  std::vector<float> x(12), gamma(12), beta(12);
  for (auto* v : {&x, &gamma, &beta})
    for (auto& e : *v) e = g(rng);
  Matrix parts(1, 12);
  std::copy(x.begin(), x.end(), parts.row(0).begin());
  const Matrix out = layernorm_decompose(parts, x, gamma, beta, 1e-12);
  const Vec want = naive_layer_norm(to_vec(x), to_vec(gamma), to_vec(beta), 1e-12);
  CHECK(max_abs_diff(out.row(0), want) <= 1e-5);
}

TEST_CASE("layernorm_decompose: a zero part receives only its bias share") {
  const std::vector<float> x{1, 2, 3, 4}, gamma{1, 1, 1, 1}, beta{0.5f, 0.5f, 0.5f, 0.5f};
  Matrix parts(2, 4);
  std::copy(x.begin(), x.end(), parts.row(0).begin());
  const Matrix out = layernorm_decompose(parts, x, gamma, beta, 0.0);
  // beta . g(x) = 0 (g(x) has zero mean), so AbsDot falls back to halves.
  for (std::size_t t = 0; t < 4; ++t) CHECK(out(1, t) == doctest::Approx(0.25));
}

TEST_CASE("layernorm_decompose: parts sum to LayerNorm of the total") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 8, d = 2 + rng() % 16;
    Matrix parts(n, d);
    for (auto& v : parts.data()) v = g(rng);
    std::vector<float> gamma(d), beta(d), total(d, 0.0f);
    for (auto& v : gamma) v = 1.0f + 0.2f * g(rng);
    for (auto& v : beta) v = g(rng);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t t = 0; t < d; ++t) total[t] += parts(k, t);
    const Matrix out = layernorm_decompose(parts, total, gamma, beta, 1e-12);
    const Vec want = naive_layer_norm(to_vec(total), to_vec(gamma), to_vec(beta), 1e-12);
    std::vector<float> wantf(want.begin(), want.end());
    CHECK(sum_rows_diff(out, wantf) <= 1e-4);
  }
}

TEST_CASE("ffn_decompose: identity activation without biases is the linear map") {
  auto cfg = make_config(8, 2, 1, 2);
  cfg.activation = ActivationKind::Identity;
  Model m = zero_bias(random_model(cfg, 9));
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  Matrix parts(3, 8);
  for (auto& v : parts.data()) v = g(rng);
  const auto& l = m.layers[0];
  const std::vector<float> pre(cfg.ffn_size, 1.0f);  // any nonzero pre-activation
  const Matrix out = ffn_decompose(parts, pre, l, ActivationKind::Identity);
  const Mat want = naive_matmul(naive_matmul(to_mat(parts), to_mat(l.ffn_w1)), to_mat(l.ffn_w2));
  for (std::size_t k = 0; k < 3; ++k) CHECK(max_abs_diff(out.row(k), want[k]) <= 1e-5);
}

TEST_CASE("ffn_decompose: parts sum to the FFN output of the total") {
  std::mt19937_64 rng(5);
  for (auto act : {ActivationKind::GeluExact, ActivationKind::Relu, ActivationKind::Tanh}) {
    auto cfg = make_config(8, 2, 1, 2);
    cfg.activation = act;
    const Model m = random_model(cfg, rng(), {.scale = 0.5f});
    const auto& l = m.layers[0];
    std::normal_distribution<float> g;
    for (std::size_t n : {1u, 2u, 6u}) {
      Matrix parts(n, 8);
      for (auto& v : parts.data()) v = g(rng);
      Vec total(8, 0.0);
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t t = 0; t < 8; ++t) total[t] += parts(k, t);
      Vec pre = add(naive_vecmat(total, to_mat(l.ffn_w1)), to_vec(l.ffn_b1));
      const std::vector<float> pref(pre.begin(), pre.end());
      for (auto& v : pre) v = naive_act(act, v);
      const Vec want = add(naive_vecmat(pre, to_mat(l.ffn_w2)), to_vec(l.ffn_b2));
      const std::vector<float> wantf(want.begin(), want.end());
      CHECK(sum_rows_diff(ffn_decompose(parts, pref, l, act), wantf) <= 1e-4);
    }
  }
}

TEST_CASE("encoder_layer_decompose: single token reproduces the layer output") {
  const Model m = rich_model(16, 4, 2, 13);
  const TokenSequence t{{m.config.special_tokens.cls_id}, {}};
  const auto tr = forward(m, t);
  auto s = init_decomposition(tr.embeddings);
  for (std::size_t l = 0; l < 2; ++l) {
    s = encoder_layer_decompose(s, tr.layers[l], m.layers[l], fuse_attention(m.layers[l], m.config),
                                m.config);
    CHECK(max_abs_diff(s.parts[0].row(0), to_vec(tr.layers[l].output.row(0))) <= 1e-5);
  }
}

TEST_CASE("propagation matches an independent double-precision decomposition") {
  std::mt19937_64 rng(19);
  for (auto act : {ActivationKind::GeluExact, ActivationKind::Relu, ActivationKind::Tanh}) {
    for (BiasMode mode : {BiasMode::AbsDot, BiasMode::NoBias}) {
      const Model m = rich_model(16, 2, 2, rng(), act);
      auto t = random_tokens(m.config, 6, rng);
      t.pair_boundary = 3;
      std::vector<DecompositionState> states;
      const auto ex_states = propagate(m, t, mode, [&](const auto& s) { states.push_back(s); });
      const auto ref = naive_decompx(m, t, mode == BiasMode::AbsDot);
      REQUIRE(states.size() == 3);
      for (std::size_t l = 0; l < 3; ++l) {
        for (std::size_t i = 0; i < t.size(); ++i) {
          for (std::size_t k = 0; k < t.size(); ++k) {
            CHECK(max_abs_diff(states[l].parts[i].row(k), ref.states[l][i][k]) <= 1e-4);
          }
        }
      }
      const auto ex = explain(m, t, mode);
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(max_abs_diff(ex.attributions.row(c), ref.attributions[c]) <= 1e-4);
      (void)ex_states;
    }
  }
}

TEST_CASE("completeness: hidden states and logits are reconstructed") {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = std::vector<std::size_t>{8, 16, 32}[trial % 3];
    const std::size_t h = std::vector<std::size_t>{1, 2, 4}[(trial / 3) % 3];
    const Model m = rich_model(d, h, 1 + trial % 4, rng());
    const auto t = random_tokens(m.config, 1 + rng() % 16, rng);
    const auto r = check_completeness(m, t);
    CAPTURE(r.hidden);
    CAPTURE(r.logits);
    CHECK(r.within(1e-4));
    const auto ex = explain(m, t);
    for (std::size_t c = 0; c < ex.attributions.rows(); ++c) {
      double s = 0;
      for (float v : ex.attributions.row(c)) s += v;
      CHECK(std::fabs(s - ex.logits[c]) <= 1e-4 * (1 + std::fabs(ex.logits[c])));
    }
  }
}

TEST_CASE("zero-bias models: AbsDot and NoBias coincide") {
  std::mt19937_64 rng(31);
  const Model m = zero_bias(rich_model(16, 4, 3, 77));
  const auto t = random_tokens(m.config, 8, rng);
  const auto a = explain(m, t, BiasMode::AbsDot), b = explain(m, t, BiasMode::NoBias);
  CHECK(a.attributions == b.attributions);
}

TEST_CASE("NoBias leaves the forward pass untouched") {
  std::mt19937_64 rng(37);
  const Model m = rich_model(16, 4, 2, 78);
  const auto t = random_tokens(m.config, 8, rng);
  CHECK(explain(m, t, BiasMode::NoBias).logits == forward(m, t).logits);
}

TEST_CASE("classifier_decompose: zero classifier column gives zero contributions") {
  Model m = zero_bias(rich_model(8, 2, 1, 4));
  for (std::size_t t = 0; t < 8; ++t) m.classifier.cls_weight(t, 1) = 0.0f;
  std::mt19937_64 rng(1);
  const auto ex = explain(m, random_tokens(m.config, 5, rng));
  for (float v : ex.attributions.row(1)) CHECK(v == 0.0f);
}

TEST_CASE("classifier_decompose: identity pooler gives linear per-part logits") {
  auto cfg = make_config(8, 2, 1, 3);
  cfg.pooler_activation = ActivationKind::Identity;
  Model m = random_model(cfg, 3);
  m.classifier.pool_bias.assign(8, 0.0f);
  m.classifier.cls_bias.assign(3, 0.0f);
  std::mt19937_64 rng(2);
  const auto t = random_tokens(cfg, 4, rng);
  const auto p = propagate(m, t, BiasMode::AbsDot);
  const Matrix y = classifier_decompose(p.state.parts[0], m, p.trace);
  const Mat want = naive_matmul(naive_matmul(to_mat(p.state.parts[0]), to_mat(m.classifier.pool_weight)),
                                to_mat(m.classifier.cls_weight));
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c) CHECK(y(c, k) == doctest::Approx(want[k][c]).epsilon(1e-5));
}

TEST_CASE("explain: predicted class is the argmax and logits match forward exactly") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const Model m = rich_model(8, 2, 2, rng());
    const auto t = random_tokens(m.config, 5, rng);
    const auto ex = explain(m, t);
    const auto lg = forward(m, t).logits;
    CHECK(ex.logits == lg);
    std::size_t best = 0;
    for (std::size_t c = 1; c < lg.size(); ++c)
      if (lg[c] > lg[best]) best = c;
    CHECK(ex.predicted_class == best);
    CHECK(ex.linearization_residual <= 1e-5);
  }
}

TEST_CASE("norm_attribution") {
  SUBCASE("identity initialization yields embedding norms on the diagonal") {
    const Matrix e = Matrix::from_rows({{3, 4}, {0, 1}});
    const auto s = init_decomposition(e);
    CHECK(norm_attribution(s, 0) == std::vector<float>{5.0f, 0.0f});
    CHECK(norm_attribution(s, 1) == std::vector<float>{0.0f, 1.0f});
  }
  SUBCASE("matches norms of the reference parts after two layers") {
    std::mt19937_64 rng(43);
    const Model m = rich_model(16, 4, 2, 90);
    const auto t = random_tokens(m.config, 7, rng);
    const auto p = propagate(m, t, BiasMode::AbsDot);
    const auto ref = naive_decompx(m, t);
    const auto got = norm_attribution(p.state, 0);
    for (std::size_t k = 0; k < t.size(); ++k) {
      double n = 0;
      for (double v : ref.states.back()[0][k]) n += v * v;
      CHECK(got[k] >= 0.0f);
      CHECK(std::fabs(got[k] - std::sqrt(n)) <= 1e-5 * (1 + std::sqrt(n)) + 1e-5);
    }
  }
}

TEST_CASE("bias mode names") {
  CHECK(parse_bias_mode("absdot") == BiasMode::AbsDot);
  CHECK(parse_bias_mode("nobias") == BiasMode::NoBias);
  CHECK(bias_mode_name(BiasMode::NoBias) == "nobias");
  CHECK_THROWS(parse_bias_mode("both"));
}
