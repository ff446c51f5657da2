#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "mgavqa/fusion.hpp"

using namespace mgavqa;
using namespace mgavqa::fusion;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.values()) x = scale * rng.uniform(-1, 1);
  return m;
}

FusionWeights random_weights(std::size_t d, Rng& rng, double scale) {
  FusionWeights w = FusionWeights::zeros(d);
  w.for_each_parameter([&](double& x) { x = scale * rng.normal(); });
  return w;
}

std::vector<TrainingExample> random_corpus(std::size_t d, std::size_t n, Rng& rng) {
  std::vector<TrainingExample> out;
  for (std::size_t e = 0; e < n; ++e) {
    TrainingExample ex;
    ex.pooled.resize(kNumStreams * d);
    for (double& x : ex.pooled) x = rng.uniform(-1, 1);
    const std::size_t spans = 2 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    ex.span_states = random_matrix(spans, d, rng);
    ex.gold_index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(spans) - 1));
    for (double& b : ex.gold_bbox) b = rng.uniform(0.05, 0.95);
    out.push_back(std::move(ex));
  }
  return out;
}

// Direct loss evaluation without any shared code from loss_and_gradient.
double reference_loss(const FusionWeights& w, const std::vector<TrainingExample>& batch) {
  double total = 0;
  for (const auto& ex : batch) {
    const Vector f = matvec(w.W_proj, ex.pooled);
    const auto p = predict_answer(f, ex.span_states, w);
    const auto b = predict_bbox(f, w);
    double mse = 0;
    for (int k = 0; k < 4; ++k) mse += (b[k] - ex.gold_bbox[k]) * (b[k] - ex.gold_bbox[k]);
    total += -std::log(p[ex.gold_index]) + mse / 4;
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

TEST(CrossAttention, SingleKey) {
  Rng rng(1);
  const auto q = random_matrix(4, 3, rng);
  const Matrix k = Matrix::from_rows({{0.1, -0.2, 0.3}});
  const auto out = cross_attention_stream(q, k);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(out.row_vector(r), k.row_vector(0));
  EXPECT_EQ(cross_attention_stream(k, k).row_vector(0), k.row_vector(0));
}

TEST(CrossAttention, TwoKeyHandUnroll) {
  const Matrix q = Matrix::from_rows({{1, 0}, {0, 2}});
  const Matrix k = Matrix::from_rows({{1, 1}, {-1, 0.5}});
  const auto out = cross_attention_stream(q, k);
  const double s = 1 / std::sqrt(2.0);
  for (std::size_t r = 0; r < 2; ++r) {
    const double l0 = (q(r, 0) * 1 + q(r, 1) * 1) * s;
    const double l1 = (q(r, 0) * -1 + q(r, 1) * 0.5) * s;
    const double a0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
    EXPECT_NEAR(out(r, 0), a0 * 1 + (1 - a0) * -1, 1e-15);
    EXPECT_NEAR(out(r, 1), a0 * 1 + (1 - a0) * 0.5, 1e-15);
  }
  EXPECT_THROW(cross_attention_stream(Matrix(1, 2), Matrix(1, 3)), InvalidArgument);
}

TEST(CrossAttention, RowStochastic) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto a = attention_weights(random_matrix(1 + t % 6, 5, rng, 4), random_matrix(1 + t % 9, 5, rng, 4));
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double s = 0;
      for (double v : a.row(r)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(FuseStreams, ZeroShapeAndLinearity) {
  Rng rng(3);
  const std::size_t d = 4;
  const auto w = random_weights(d, rng, 0.5);
  const Matrix z(3, d);
  EXPECT_EQ(fuse_streams(z, z, z, z, Vector(d, 0.0), z, w), Vector(d, 0.0));
  const auto a = random_matrix(3, d, rng), b = random_matrix(5, d, rng), c = random_matrix(1, d, rng),
             e = random_matrix(2, d, rng), t = random_matrix(7, d, rng);
  Vector m(d);
  for (double& x : m) x = rng.uniform(-1, 1);
  const auto f1 = fuse_streams(a, b, c, e, m, t, w);
  EXPECT_EQ(f1.size(), d);
  auto twice = [](const Matrix& x) {
    Matrix y = x;
    for (double& v : y.values()) v *= 2;
    return y;
  };
  const auto f2 = fuse_streams(twice(a), twice(b), twice(c), twice(e), scaled(m, 2), twice(t), w);
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(f2[i], 2 * f1[i], 1e-12);
}

TEST(FuseStreams, PoolingOrderAndEmptyStreams) {
  const std::size_t d = 2;
  const Matrix tt = Matrix::from_rows({{1, 3}, {3, 5}});
  const Matrix none(0, d);
  const auto p = pool_streams(tt, none, none, none, Vector{}, Matrix::from_rows({{7, 8}}), d);
  EXPECT_EQ(p.concat, (Vector{2, 4, 0, 0, 0, 0, 0, 0, 0, 0, 7, 8}));
  EXPECT_EQ(p.empty_streams, (std::vector<std::string>{"ts", "st", "ss", "memory"}));
  EXPECT_NEAR(p.norms[0], std::sqrt(20.0), 1e-15);
  EXPECT_THROW(pool_streams(Matrix(1, 3), none, none, none, Vector{}, none, d), InvalidArgument);
}

TEST(AnswerHead, Examples) {
  Rng rng(4);
  const std::size_t d = 3;
  auto w = random_weights(d, rng, 1.0);
  const Vector f{0.2, -0.1, 0.4};
  EXPECT_EQ(predict_answer(f, random_matrix(1, d, rng), w), Vector{1.0});
  auto w0 = w;
  w0.W_a = Matrix(d, d);
  for (double p : predict_answer(f, random_matrix(5, d, rng), w0)) EXPECT_NEAR(p, 0.2, 1e-15);

  FusionWeights w1 = FusionWeights::zeros(1);
  w1.W_a(0, 0) = 2.0;
  w1.b_a = 0.3;
  const Matrix s = Matrix::from_rows({{1.0}, {-0.5}, {0.25}});
  const auto p = predict_answer(Vector{0.7}, s, w1);
  const double z[3] = {1.0 * 2 * 0.7 + 0.3, -0.5 * 2 * 0.7 + 0.3, 0.25 * 2 * 0.7 + 0.3};
  const double den = std::exp(z[0]) + std::exp(z[1]) + std::exp(z[2]);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], std::exp(z[i]) / den, 1e-15);
  EXPECT_THROW(predict_answer(f, Matrix(0, d), w), InvalidArgument);
}

TEST(AnswerHead, SumsToOneAndArgmaxShiftInvariant) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 4;
    auto w = random_weights(d, rng, 1.0);
    Vector f(d);
    for (double& x : f) x = rng.uniform(-2, 2);
    const auto s = random_matrix(2 + t % 10, d, rng);
    const auto p = predict_answer(f, s, w);
    double sum = 0;
    for (double v : p) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    const auto before = argmax(answer_logits(f, s, w));
    w.b_a += rng.uniform(-50, 50);
    EXPECT_EQ(argmax(answer_logits(f, s, w)), before);
    EXPECT_EQ(argmax(predict_answer(f, s, w)), argmax(p));
  }
  EXPECT_EQ(argmax(Vector{1, 3, 3}), 1u);
}

TEST(BoxHead, Examples) {
  EXPECT_EQ(predict_bbox(Vector{1, 2}, FusionWeights::zeros(2)), (std::array<double, 4>{0.5, 0.5, 0.5, 0.5}));
  FusionWeights w = FusionWeights::zeros(1);
  w.W_b = Matrix(4, 1, std::vector<double>{1, -2, 0.5, 0});
  w.b_b = {0.1, 0.2, -0.3, 4};
  const auto b = predict_bbox(Vector{0.8}, w);
  const double want[4] = {0.8 + 0.1, -1.6 + 0.2, 0.4 - 0.3, 4};
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(b[k], 1 / (1 + std::exp(-want[k])), 1e-15);
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const auto r = random_weights(3, rng, 2.0);
    for (double x : predict_bbox(Vector{rng.normal(), rng.normal(), rng.normal()}, r)) {
      EXPECT_GT(x, 0);
      EXPECT_LT(x, 1);
    }
  }
}

TEST(Loss, MatchesIndependentForwardPass) {
  Rng rng(7);
  const auto corpus = random_corpus(3, 6, rng);
  const auto w = random_weights(3, rng, 0.3);
  EXPECT_NEAR(loss_only(w, corpus), reference_loss(w, corpus), 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto corpus = random_corpus(3, 5, rng);
    auto w = random_weights(3, rng, 0.3);
    const auto lg = loss_and_gradient(w, corpus);
    auto params = w.flatten();
    const auto analytic = lg.grad.flatten();
    auto loss = [&](std::span<const double> p) {
      FusionWeights t = w;
      t.assign(p);
      return reference_loss(t, corpus);
    };
    const auto res = numeric_gradient_check(loss, params, analytic, 1e-5);
    EXPECT_LE(res.max_relative_error, 1e-4) << "worst index " << res.worst_index;
    EXPECT_EQ(res.checked, params.size());
  }
}

TEST(Loss, BiasGradientIsZero) {
  Rng rng(9);
  const auto corpus = random_corpus(2, 4, rng);
  EXPECT_EQ(loss_and_gradient(random_weights(2, rng, 0.5), corpus).grad.b_a, 0.0);
}

TEST(GradientCheck, HarnessExamples) {
  // L(x) = Σ c_i x_i², gradient 2 c_i x_i.
  const Vector c{1.0, -2.0, 0.5};
  auto quad = [&](std::span<const double> x) {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) s += c[i] * x[i] * x[i];
    return s;
  };
  Vector x{0.3, -1.2, 2.0};
  const Vector exact{2 * c[0] * x[0], 2 * c[1] * x[1], 2 * c[2] * x[2]};
  EXPECT_LE(numeric_gradient_check(quad, x, exact, 1e-5).max_relative_error, 1e-7);
  EXPECT_NEAR(numeric_gradient_check(quad, x, scaled(exact, 2), 1e-5).max_relative_error, 0.5, 1e-6);
  Vector zero(3, 0.0);
  EXPECT_LE(numeric_gradient_check(quad, zero, Vector(3, 0.0), 1e-5).max_relative_error, 1e-6);
  EXPECT_EQ(x, (Vector{0.3, -1.2, 2.0}));
  const std::size_t coords[] = {1};
  EXPECT_EQ(numeric_gradient_check(quad, x, exact, 1e-5, coords).checked, 1u);
  EXPECT_THROW(numeric_gradient_check(quad, x, exact, 0.0), InvalidArgument);
}

TEST(Train, ZeroStepsUnchanged) {
  Rng rng(10);
  const auto corpus = random_corpus(3, 4, rng);
  const auto init = init_fusion_weights(3, 1);
  TrainOptions opt;
  opt.steps = 0;
  opt.lr = 0;
  const auto res = train_heads(corpus, init, opt);
  EXPECT_EQ(res.weights, init);
  EXPECT_EQ(res.loss_history.size(), 1u);
}

TEST(Train, LossDecreasesAndIsReproducible) {
  Rng rng(11);
  const auto corpus = random_corpus(4, 10, rng);
  const auto init = init_fusion_weights(4, 2, InitScheme::kRandom);
  for (auto optim : {Optimizer::kAdamW, Optimizer::kSgd}) {
    TrainOptions opt;
    opt.steps = 10;
    opt.optimizer = optim;
    opt.lr = optim == Optimizer::kSgd ? 0.05 : 1e-2;
    const auto a = train_heads(corpus, init, opt);
    EXPECT_LE(a.loss_history[10], a.loss_history[0]);
    const auto b = train_heads(corpus, init, opt);
    EXPECT_EQ(a.weights, b.weights);
    EXPECT_EQ(a.loss_history, b.loss_history);
  }
  TrainOptions mb;
  mb.steps = 20;
  mb.batch_size = 3;
  EXPECT_EQ(train_heads(corpus, init, mb).weights, train_heads(corpus, init, mb).weights);
}

TEST(Train, Errors) {
  Rng rng(12);
  const auto corpus = random_corpus(2, 2, rng);
  TrainOptions opt;
  opt.lr = 0;
  EXPECT_THROW(train_heads(corpus, init_fusion_weights(2, 1), opt), InvalidArgument);
  EXPECT_THROW(train_heads({}, init_fusion_weights(2, 1), TrainOptions{}), InvalidArgument);
}

TEST(Init, StructuredBlocks) {
  const auto w = init_fusion_weights(8, 3);
  w.validate();
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(w.W_proj(i, 4 * 8 + i), 1.0, 0.06);
    EXPECT_NEAR(w.W_proj(i, 5 * 8 + i), 1.0, 0.06);
    EXPECT_NEAR(w.W_proj(i, i), 0.0, 0.06);
    EXPECT_NEAR(w.W_a(i, i), 0.1, 0.12);
  }
  EXPECT_EQ(w, init_fusion_weights(8, 3));
  EXPECT_NE(w, init_fusion_weights(8, 4));
}

TEST(Checkpoint, RoundTripAndErrors) {
  Rng rng(13);
  const auto w = random_weights(3, rng, 1.0);
  const auto j = weights_to_json(w, {{"seed", 7}});
  EXPECT_EQ(j["seed"], 7);
  EXPECT_EQ(weights_from_json(j), w);
  const auto path = std::filesystem::temp_directory_path() / "mgavqa_test_weights.json";
  save_weights(path, w);
  EXPECT_EQ(load_weights(path), w);
  std::filesystem::remove(path);

  auto bad = j;
  bad["version"] = 2;
  EXPECT_THROW(weights_from_json(bad), SchemaError);
  bad = j;
  bad["W_a"]["rows"] = 2;
  EXPECT_THROW(weights_from_json(bad), SchemaError);
  bad = j;
  bad.erase("W_b");
  EXPECT_THROW(weights_from_json(bad), SchemaError);
  bad = j;
  bad["b_b"] = {1, 2};
  EXPECT_THROW(weights_from_json(bad), SchemaError);
}
