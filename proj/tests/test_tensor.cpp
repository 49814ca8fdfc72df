#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <random>

#include "lgpt/ops.hpp"
#include "lgpt/optim.hpp"
#include "grad_check.hpp"

using namespace lgpt;

using testutil::max_grad_error;
using testutil::random_tensor;
using testutil::weighted_sum;

// --- matmul -----------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor i2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor m = Tensor::matrix(2, 2, {3, 4, 5, 6});
  const Tensor r = matmul(i2, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  const Tensor r = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  ASSERT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, MatchesNaiveProduct) {
  Rng rng(1);
  const Tensor a = random_tensor(3, 5, rng, 1.0, false), b = random_tensor(5, 4, rng, 1.0, false);
  const auto ref = oracle::matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, 3, 5, 4);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros(2, 3), Tensor::zeros(4, 2));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("4"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor a = random_tensor(3, 4, rng), b = random_tensor(4, 2, rng);
  EXPECT_LT(max_grad_error({a, b}, [&] { return weighted_sum(matmul(a, b)); }), 1e-6);
}

TEST(MatmulNt, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor a = random_tensor(3, 4, rng), b = random_tensor(5, 4, rng);
  EXPECT_LT(max_grad_error({a, b}, [&] { return weighted_sum(matmul_nt(a, b)); }), 1e-6);
}

// --- softmax ----------------------------------------------------------------

TEST(Softmax, UniformRow) {
  const Tensor s = softmax_rows(Tensor::matrix(1, 3, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const Tensor s = softmax_rows(Tensor::matrix(1, 2, {1000, 0}));
  EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(4);
  const Tensor a = random_tensor(5, 7, rng, 10.0, false);
  const Tensor s = softmax_rows(a);
  Tensor shifted = a.clone();
  for (std::size_t c = 0; c < 7; ++c) shifted.mutable_data()[2 * 7 + c] += 123.0;
  const Tensor s2 = softmax_rows(shifted);
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) total += s.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  for (std::size_t c = 0; c < 7; ++c) EXPECT_NEAR(s.at(2, c), s2.at(2, c), 1e-12);
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  Rng rng(5);
  Tensor a = random_tensor(2, 3, rng);
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(softmax_rows(a)); }), 1e-6);
}

// --- layer norm -------------------------------------------------------------

TEST(LayerNorm, ConstantRowGivesZeros) {
  const Tensor out = layer_norm(Tensor::matrix(1, 4, {2.5, 2.5, 2.5, 2.5}), Tensor(Shape{4}, 1.0), Tensor(Shape{4}, 0.0));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(LayerNorm, NormalizedRowIsFixedPoint) {
  const Tensor out = layer_norm(Tensor::matrix(1, 2, {1, -1}), Tensor(Shape{2}, 1.0), Tensor(Shape{2}, 0.0));
  // var = 1, so the output is x / sqrt(1 + eps)
  EXPECT_NEAR(out[0], 1.0, 1e-5);
  EXPECT_NEAR(out[1], -1.0, 1e-5);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  Tensor a = random_tensor(2, 4, rng), g = random_tensor(1, 4, rng), b = random_tensor(1, 4, rng);
  Tensor gain(Shape{4}, std::vector<double>(g.data().begin(), g.data().end()));
  Tensor bias(Shape{4}, std::vector<double>(b.data().begin(), b.data().end()));
  gain.set_requires_grad(true);
  bias.set_requires_grad(true);
  EXPECT_LT(max_grad_error({a, gain, bias}, [&] { return weighted_sum(layer_norm(a, gain, bias)); }), 1e-6);
}

// --- cross entropy ----------------------------------------------------------

TEST(CrossEntropy, ConfidentCorrectPredictionNearZero) {
  Tensor logits = Tensor::zeros(3, 5);
  const std::vector<std::size_t> targets{1, 4, 2};
  for (std::size_t t = 0; t < 3; ++t) logits.mutable_data()[t * 5 + targets[t]] = 20.0;
  const std::vector<std::uint8_t> mask{1, 1, 1};
  EXPECT_LT(cross_entropy_masked(logits, targets, mask).item(), 1e-7);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const Tensor logits = Tensor::zeros(2, 4);
  const std::vector<std::size_t> targets{3, 0};
  const std::vector<std::uint8_t> mask{0, 1};
  EXPECT_NEAR(cross_entropy_masked(logits, targets, mask).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, MaskedRowsGetExactlyZeroGradient) {
  Rng rng(7);
  Tensor logits = random_tensor(4, 6, rng, 3.0);
  const std::vector<std::size_t> targets{0, 5, 2, 3};
  const std::vector<std::uint8_t> mask{1, 0, 1, 0};
  Tape tape;
  TapeScope scope(tape);
  backward(cross_entropy_masked(logits, targets, mask));
  const auto g = logits.grad();
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(g[1 * 6 + c], 0.0);
    EXPECT_EQ(g[3 * 6 + c], 0.0);
  }
  EXPECT_NE(g[0], 0.0);
}

TEST(CrossEntropy, AllZeroMaskIsDegenerate) {
  const std::vector<std::size_t> targets{0, 1};
  const std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(cross_entropy_masked(Tensor::zeros(2, 3), targets, mask), DegenerateLossError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  Tensor logits = random_tensor(3, 5, rng, 2.0);
  const std::vector<std::size_t> targets{4, 1, 0};
  const std::vector<std::uint8_t> mask{1, 1, 0};
  EXPECT_LT(max_grad_error({logits}, [&] { return cross_entropy_masked(logits, targets, mask); }), 1e-6);
}

// --- backward / tape ----------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor p(Shape{2, 3}, 0.7);
  p.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(p));
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesParameter) {
  Rng rng(9);
  Tensor p = random_tensor(3, 2, rng);
  Tape tape;
  TapeScope scope(tape);
  backward(scale(sum(mul(p, p)), 0.5));
  const auto g = p.grad();
  for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_DOUBLE_EQ(g[i], p[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor p(Shape{2, 2}, 1.0);
  p.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  EXPECT_THROW(backward(scale(p, 2.0)), ContractError);
}

TEST(Backward, NonParticipatingParameterGetsZeroGrad) {
  Tensor used(Shape{1, 2}, 1.0), unused(Shape{1, 2}, 1.0);
  used.set_requires_grad(true);
  unused.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(used));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ReusedInputAccumulates) {
  Tensor p(Shape{1, 3}, 2.0);
  p.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(add(p, p)));
  for (double g : p.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Tape, InputsPrecedeEachRecord) {
  Rng rng(10);
  Tensor a = random_tensor(2, 3, rng), b = random_tensor(3, 3, rng);
  Tape tape;
  TapeScope scope(tape);
  const Tensor loss = sum(gelu(matmul(softmax_rows(matmul(a, b)), b)));
  ASSERT_GT(tape.size(), 3u);
  for (std::size_t i = 0; i < tape.records().size(); ++i) {
    const auto& r = tape.records()[i];
    EXPECT_EQ(r.output_id, i);
    for (const auto& in : r.input_ids)
      if (in) EXPECT_LT(*in, i);
  }
  (void)loss;
}

TEST(Tape, NoRecordsWithoutGradInputs) {
  Tape tape;
  TapeScope scope(tape);
  const Tensor x = matmul(Tensor::zeros(2, 2), Tensor::zeros(2, 2));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(x.tape_id().has_value());
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(11);
    Tensor a = random_tensor(3, 4, rng), b = random_tensor(4, 4, rng);
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = weighted_sum(layer_norm(gelu(matmul(a, b)), Tensor(Shape{4}, 1.0), Tensor(Shape{4}, 0.0)));
    backward(loss);
    std::vector<double> out{loss.item()};
    for (double g : a.grad()) out.push_back(g);
    for (double g : b.grad()) out.push_back(g);
    return out;
  };
  const auto r1 = run(), r2 = run();
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(r1[i]), std::bit_cast<std::uint64_t>(r2[i]));
}

// --- remaining primitives: finite differences at 1e-6 ------------------------

TEST(PrimitiveGradients, ElementwiseAndShapeOps) {
  Rng rng(12);
  Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng), r = random_tensor(1, 4, rng);
  Tensor rv(Shape{4}, std::vector<double>(r.data().begin(), r.data().end()));
  rv.set_requires_grad(true);
  EXPECT_LT(max_grad_error({a, b}, [&] { return weighted_sum(add(a, b)); }), 1e-6);
  EXPECT_LT(max_grad_error({a, b}, [&] { return weighted_sum(mul(a, b)); }), 1e-6);
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(scale(a, -1.7)); }), 1e-6);
  EXPECT_LT(max_grad_error({a, rv}, [&] { return weighted_sum(add_row(a, rv)); }), 1e-6);
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(gelu(a)); }), 1e-6);
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(mean_rows(a)); }), 1e-6);
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(transpose(a)); }), 1e-6);
  EXPECT_LT(max_grad_error({a, b}, [&] { return weighted_sum(concat_rows({a, b, a})); }), 1e-6);
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(slice_rows(a, 1, 2)); }), 1e-6);
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  EXPECT_LT(max_grad_error({a}, [&] { return weighted_sum(gather_rows(a, ids)); }), 1e-6);
}

TEST(PrimitiveGradients, GraphAttention) {
  Rng rng(13);
  Tensor q = random_tensor(3, 4, rng), k = random_tensor(4, 4, rng), v = random_tensor(4, 4, rng),
         e = random_tensor(2, 4, rng);
  const std::vector<std::vector<Neighbor>> in{{{0, -1}, {1, 0}, {3, 1}}, {{1, -1}}, {{2, -1}, {0, 1}, {1, 0}, {3, 0}}};
  EXPECT_LT(max_grad_error({q, k, v, e}, [&] { return weighted_sum(graph_attention(q, k, v, e, in, 2)); }), 1e-6);
}

TEST(PrimitiveGradients, CausalAttention) {
  Rng rng(14);
  Tensor q = random_tensor(4, 6, rng), k = random_tensor(4, 6, rng), v = random_tensor(4, 6, rng);
  EXPECT_LT(max_grad_error({q, k, v}, [&] { return weighted_sum(causal_attention(q, k, v, 3)); }), 1e-6);
}

TEST(CausalAttention, FirstPositionCopiesItsValue) {
  Rng rng(15);
  const Tensor q = random_tensor(3, 4, rng, 1.0, false), k = random_tensor(3, 4, rng, 1.0, false),
               v = random_tensor(3, 4, rng, 1.0, false);
  const Tensor out = causal_attention(q, k, v, 2);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(0, c), v.at(0, c), 1e-15);
}

// --- AdamW ------------------------------------------------------------------

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
  w.zero_grad();
  AdamW opt;
  opt.step(store);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::scalar(1.0));
  w.zero_grad();
  w.node()->grad_buffer()[0] = 1.0;
  AdamW opt;  // lr 1e-4, betas (0.9, 0.999), eps 1e-8, wd 0
  opt.step(store);
  EXPECT_NEAR(w.item(), 1.0 - 1e-4, 1e-11);
  EXPECT_EQ(opt.steps(), 1u);
  EXPECT_NEAR(opt.first_moment("w")[0], 0.1, 1e-15);
  EXPECT_NEAR(opt.second_moment("w")[0], 0.001, 1e-15);
}

TEST(AdamW, QuadraticLossDecreasesMonotonically) {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::scalar(0.0));
  AdamWConfig cfg;
  cfg.lr = 0.1;
  AdamW opt(cfg);
  double prev = 4.5;  // (0 - 3)^2 / 2
  for (int s = 0; s < 10; ++s) {
    w.zero_grad();
    w.node()->grad_buffer()[0] = w.item() - 3.0;
    opt.step(store);
    const double loss = 0.5 * (w.item() - 3.0) * (w.item() - 3.0);
    EXPECT_LT(loss, prev);
    prev = loss;
    EXPECT_EQ(opt.steps(), static_cast<std::uint64_t>(s + 1));
  }
}

TEST(AdamW, DecoupledWeightDecayShrinksWithoutGradient) {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::scalar(2.0));
  w.zero_grad();
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  opt.step(store);
  EXPECT_NEAR(w.item(), 2.0 * (1.0 - 0.1 * 0.5), 1e-15);
}

TEST(AdamW, NonFiniteGradientNamesGroup) {
  ParameterStore store;
  Tensor w = store.add("gnn_graph.layer0.w_query", Tensor::zeros(1, 2));
  w.zero_grad();
  w.node()->grad_buffer()[1] = std::nan("");
  AdamW opt;
  try {
    opt.step(store);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("gnn_graph"), std::string::npos);
  }
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(AdamW, FrozenStoreRefusesUpdates) {
  ParameterStore store;
  store.add("lm.w", Tensor::zeros(1, 1));
  store.freeze();
  AdamW opt;
  EXPECT_THROW(opt.step(store), ContractError);
}

TEST(AdamW, NonPositiveLearningRateRejected) {
  AdamWConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(AdamW{cfg}, ConfigError);
}

TEST(ParameterStore, DigestTracksValues) {
  ParameterStore a, b;
  a.add("x", Tensor::matrix(1, 2, {1, 2}));
  b.add("x", Tensor::matrix(1, 2, {1, 2}));
  EXPECT_EQ(parameter_digest(a), parameter_digest(b));
  b.get("x").mutable_data()[1] = 2.0000000001;
  EXPECT_NE(parameter_digest(a), parameter_digest(b));
}

TEST(ParameterStore, GroupIsNamePrefix) {
  EXPECT_EQ(group_of("gnn_query.query_link"), "gnn_query");
  EXPECT_EQ(group_of("lgpt.tokens"), "lgpt");
  EXPECT_EQ(group_of("proj.w1"), "proj");
}
