#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "tense/error.hpp"
#include "tense/fft.hpp"
#include "tense/graph.hpp"
#include "tense/training.hpp"
#include "test_util.hpp"

namespace tense {
namespace {

using testing::random_tensor;

Tensor eval1(const Graph& g, NodeId out, const TensorMap& in) { return g.evaluate(in).value(out); }

TEST(TensorTest, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{3, 2}).shape(), (Shape{3, 2}));
  EXPECT_EQ(Tensor::scalar(2.0f).rank(), 0u);
  EXPECT_FLOAT_EQ(Tensor::scalar(2.0f).item(), 2.0f);
}

TEST(TensorTest, ReductionsAccumulateInDouble) {
  // 1 + 1e-8 * 1e6 loses everything in float accumulation.
  std::vector<float> v(1000001, 1e-8f);
  v[0] = 1.0f;
  EXPECT_NEAR(sum(v), 1.01, 1e-6);
  EXPECT_DOUBLE_EQ(l1_norm(std::vector<float>{1, -2, 3}), 6.0);
  EXPECT_DOUBLE_EQ(l2_norm(std::vector<float>{3, -4}), 5.0);
}

TEST(TensorTest, GatherAndStack) {
  Tensor t(Shape{3, 2}, std::vector<float>{0, 1, 2, 3, 4, 5});
  const std::vector<std::size_t> ids{2, 0};
  const Tensor g = gather_rows(t, ids);
  EXPECT_EQ(g.storage(), (std::vector<float>{4, 5, 0, 1}));
  std::vector<Tensor> rows{slice_row(t, 1), slice_row(t, 2)};
  EXPECT_EQ(stack(rows).storage(), (std::vector<float>{2, 3, 4, 5}));
}

TEST(GraphTest, ReluForward) {
  Graph g;
  auto x = g.input("x");
  auto y = g.relu(x);
  EXPECT_EQ(eval1(g, y, {{"x", Tensor::vector({-1, 0, 2})}}).storage(), (std::vector<float>{0, 0, 2}));
}

TEST(GraphTest, IdentityMatmul) {
  Graph g;
  auto a = g.input("a");
  auto x = g.input("x");
  auto y = g.matmul(a, x);
  Tensor eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1;
  Tensor v(Shape{3, 1}, std::vector<float>{0.25f, -7, 3});
  EXPECT_EQ(eval1(g, y, {{"a", eye}, {"x", v}}).storage(), v.storage());
}

TEST(GraphTest, ConvOfOnesSumsWindow) {
  Graph g;
  auto x = g.input("x");
  auto w = g.input("w");
  auto y = g.conv2d(x, w, 1, 0);
  const Tensor out = eval1(g, y, {{"x", Tensor(Shape{1, 1, 5, 5}, 1.0f)}, {"w", Tensor(Shape{1, 1, 3, 3}, 1.0f)}});
  EXPECT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  for (float v : out.data()) EXPECT_EQ(v, 9.0f);
}

TEST(GraphTest, ConvStridePaddingMatchesDirectSum) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 3, 7, 6}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Graph g;
  auto y = g.conv2d(g.input("x"), g.input("w"), 2, 1);
  const Tensor out = eval1(g, y, {{"x", x}, {"w", w}});
  ASSERT_EQ(out.shape(), (Shape{2, 4, 4, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
          double acc = 0;
          for (std::size_t ci = 0; ci < 3; ++ci)
            for (std::size_t i = 0; i < 3; ++i)
              for (std::size_t j = 0; j < 3; ++j) {
                const long rr = static_cast<long>(r * 2 + i) - 1, cc = static_cast<long>(c * 2 + j) - 1;
                if (rr < 0 || cc < 0 || rr >= 7 || cc >= 6) continue;
                acc += x[((n * 3 + ci) * 7 + rr) * 6 + cc] * w[((o * 3 + ci) * 3 + i) * 3 + j];
              }
          EXPECT_NEAR(out[((n * 4 + o) * 4 + r) * 3 + c], acc, 1e-5);
        }
}

TEST(GraphTest, ShapeMismatchNamesNode) {
  Graph g;
  auto a = g.input("a");
  auto b = g.input("b");
  auto y = g.add(a, b);
  try {
    g.evaluate({{"a", Tensor(Shape{2})}, {"b", Tensor(Shape{3})}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.node(), static_cast<long>(y.index));
  }
}

TEST(GraphTest, NonFiniteOutputRejected) {
  Graph g;
  auto y = g.scale(g.scale(g.input("x"), 1e30), 1e30);
  EXPECT_THROW(g.evaluate({{"x", Tensor::vector({1.0f})}}), NonFiniteError);
  (void)y;
}

TEST(GraphTest, MissingInputRejected) {
  Graph g;
  g.relu(g.input("x"));
  EXPECT_ANY_THROW(g.evaluate(TensorMap{}));
}

TEST(BackwardTest, LinearGradient) {
  Graph g;
  auto w = g.input("w");
  auto x = g.input("x");
  auto y = g.dot(w, x);
  auto ev = g.evaluate({{"w", Tensor::vector({2, -3})}, {"x", Tensor::vector({1, 4})}});
  EXPECT_FLOAT_EQ(ev.value(y).item(), -10.0f);
  const auto grads = ev.backward(y, std::vector<NodeId>{x});
  EXPECT_EQ(grads.values[0].storage(), (std::vector<float>{2, -3}));
}

TEST(BackwardTest, InactiveAndKinkReluPassNothing) {
  Graph g;
  auto x = g.input("x");
  auto y = g.sum(g.relu(x));
  auto ev = g.evaluate({{"x", Tensor::vector({-5, 0, 3})}});
  const auto gr = ev.backward(y, std::vector<NodeId>{x});
  EXPECT_EQ(gr.values[0].storage(), (std::vector<float>{0, 0, 1}));
}

TEST(BackwardTest, NonAncestorIsZeroAndFlagged) {
  Graph g;
  auto x = g.input("x");
  auto z = g.input("z");
  auto y = g.sum(x);
  auto ev = g.evaluate({{"x", Tensor::vector({1, 2})}, {"z", Tensor::vector({3, 4, 5})}});
  const auto gr = ev.backward(y, std::vector<NodeId>{z, x});
  EXPECT_FALSE(gr.connected[0]);
  EXPECT_TRUE(gr.connected[1]);
  EXPECT_EQ(gr.values[0].storage(), (std::vector<float>{0, 0, 0}));
}

TEST(BackwardTest, NonScalarOutputRejected) {
  Graph g;
  auto x = g.input("x");
  auto y = g.relu(x);
  auto ev = g.evaluate({{"x", Tensor::vector({1, 2})}});
  EXPECT_ANY_THROW(ev.backward(y, std::vector<NodeId>{x}));
}

TEST(GradCheckTest, LinearGraphIsExact) {
  Rng rng(1);
  Graph g;
  auto x = g.input("x");
  auto w = g.input("w");
  auto y = g.sum(g.scale(g.matmul(x, w), 0.5));
  const TensorMap in{{"x", random_tensor({3, 4}, rng)}, {"w", random_tensor({4, 2}, rng)}};
  for (double step : {1e-1, 1e-3, 1e-5}) EXPECT_LT(grad_check(g, in, y, x, step).max_rel_error, 1e-6);
  EXPECT_THROW(grad_check(g, in, y, x, 0.0), InvalidArgument);
}

TEST(GradCheckTest, ToyAbsModel) {
  const Model m = toy_model(ToyTask::abs(), 12, 5);
  Graph g;
  auto x = g.input("x");
  const ModelNodes nodes = append_model(g, x, m, ParamBinding::Constants);
  auto y = g.sum(nodes.output);
  Rng rng(2);
  const GradCheckResult r = grad_check(g, {{"x", random_tensor({4, 6}, rng)}}, y, x, 1e-3);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradCheckTest, ReluAtZeroIsSkipped) {
  Graph g;
  auto x = g.input("x");
  auto y = g.sum(g.relu(x));
  const GradCheckResult r = grad_check(g, {{"x", Tensor::vector({0.0f, 1.0f})}}, y, x, 1e-3);
  EXPECT_TRUE(r.kink_adjacent());
  EXPECT_EQ(r.skipped_kink, 1u);
  EXPECT_EQ(r.checked, 1u);
}

// Every differentiable op against central differences.
struct OpCase {
  const char* name;
  std::function<NodeId(Graph&, NodeId)> build;  // scalar node from probe x
  Shape shape;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const OpCase& c = GetParam();
  Rng rng(11);
  Graph g;
  auto x = g.input("x");
  auto y = c.build(g, x);
  const TensorMap in{{"x", random_tensor(c.shape, rng, -1.0, 1.0)}};
  const GradCheckResult r = grad_check(g, in, y, x, 1e-3);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-3) << c.name;
}

Tensor fixed(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  return random_tensor(std::move(s), rng, lo, hi);
}

// Weighted sum keeps gradients from being uniform.
NodeId weigh(Graph& g, NodeId v, Shape s) { return g.dot(v, g.constant(fixed(std::move(s), 99))); }

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"add_sub_mul", [](Graph& g, NodeId x) {
                 auto c = g.constant(fixed({2, 3}, 1));
                 return weigh(g, g.mul(g.sub(g.add(x, c), g.scale(c, 2)), x), {2, 3});
               }, {2, 3}},
        OpCase{"matmul_transpose", [](Graph& g, NodeId x) {
                 return weigh(g, g.matmul(x, g.transpose(g.constant(fixed({5, 4}, 2)))), {3, 5});
               }, {3, 4}},
        OpCase{"add_bias", [](Graph& g, NodeId x) {
                 return weigh(g, g.mul(g.add_bias(x, g.constant(fixed({3}, 3))), x), {2, 3, 2, 2});
               }, {2, 3, 2, 2}},
        OpCase{"conv2d", [](Graph& g, NodeId x) {
                 return weigh(g, g.conv2d(x, g.constant(fixed({3, 2, 3, 3}, 4)), 2, 1), {1, 3, 3, 3});
               }, {1, 2, 5, 5}},
        OpCase{"conv2d_weight", [](Graph& g, NodeId w) {
                 return weigh(g, g.conv2d(g.constant(fixed({2, 2, 4, 4}, 5)), w, 1, 0), {2, 3, 2, 2});
               }, {3, 2, 3, 3}},
        OpCase{"sigmoid", [](Graph& g, NodeId x) { return weigh(g, g.sigmoid(g.scale(x, 3)), {7}); }, {7}},
        OpCase{"norms", [](Graph& g, NodeId x) {
                 return g.add(g.norm_l1(x), g.scale(g.norm_l2(x), 2.5));
               }, {4, 3}},
        OpCase{"batch_norm_training", [](Graph& g, NodeId x) {
                 auto gamma = g.constant(fixed({3}, 6, 0.5, 1.5));
                 auto beta = g.constant(fixed({3}, 7));
                 auto rm = g.constant(Tensor(Shape{3}, 0.0f));
                 auto rv = g.constant(Tensor(Shape{3}, 1.0f));
                 return weigh(g, g.batch_norm(x, gamma, beta, rm, rv, BatchNormMode::Training), {4, 3, 2, 2});
               }, {4, 3, 2, 2}},
        OpCase{"batch_norm_inference", [](Graph& g, NodeId x) {
                 auto gamma = g.constant(fixed({3}, 6, 0.5, 1.5));
                 auto beta = g.constant(fixed({3}, 7));
                 auto rm = g.constant(fixed({3}, 8));
                 auto rv = g.constant(fixed({3}, 9, 0.5, 2));
                 return weigh(g, g.batch_norm(x, gamma, beta, rm, rv, BatchNormMode::Inference), {5, 3});
               }, {5, 3}},
        OpCase{"resize", [](Graph& g, NodeId x) {
                 auto box = g.constant(Tensor::vector({0.4f, 0.7f, 5.1f, 4.6f}));
                 return weigh(g, g.resize(x, box, 6, 6), {1, 2, 6, 6});
               }, {1, 2, 6, 6}},
        OpCase{"reshape_flatten", [](Graph& g, NodeId x) {
                 return weigh(g, g.flatten(g.reshape(x, {2, 3, 2})), {2, 6});
               }, {2, 6}},
        OpCase{"select_position", [](Graph& g, NodeId x) {
                 return weigh(g, g.select_position(x, 1, 2), {2, 3});
               }, {2, 3, 3, 4}},
        OpCase{"ifft2_real", [](Graph& g, NodeId x) {
                 return weigh(g, g.ifft2_real(x), {2, 4, 8});
               }, {2, 4, 8, 2}},
        OpCase{"polar_to_complex", [](Graph& g, NodeId x) {
                 return weigh(g, g.polar_to_complex(g.constant(fixed({2, 2, 2}, 10, 0.2, 1)), x), {2, 2, 2, 2});
               }, {2, 2, 2}},
        OpCase{"softmax_cross_entropy", [](Graph& g, NodeId x) {
                 Tensor t(Shape{3, 4});
                 t[1] = 1;
                 t[4] = 1;
                 t[11] = 0.5f;
                 t[10] = 0.5f;
                 return g.softmax_cross_entropy(g.scale(x, 2), g.constant(t));
               }, {3, 4}},
        OpCase{"dot_cosine", [](Graph& g, NodeId x) {
                 return g.dot_cosine(x, g.constant(fixed({9}, 12)), 2.0);
               }, {9}},
        OpCase{"dot_cosine_odd_power", [](Graph& g, NodeId x) {
                 return g.dot_cosine(x, g.constant(fixed({9}, 13)), 3.0);
               }, {9}}),
    [](const auto& info) { return std::string(info.param.name); });

// Random MLPs: backward agrees with central differences on every probe.
TEST(GradCheckTest, RandomMlps) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 2 + rng.below(5);
    std::vector<std::size_t> widths{2 + rng.below(6), 2 + rng.below(6), 1 + rng.below(4)};
    Model m = testing::random_mlp(in, widths, 100 + trial, true);
    testing::randomize_biases(m, rng);
    Graph g;
    auto x = g.input("x");
    const ModelNodes nodes = append_model(g, x, m, ParamBinding::Constants);
    auto y = g.dot(nodes.output, g.constant(random_tensor({2, widths.back()}, rng)));
    const auto r = grad_check(g, {{"x", random_tensor({2, in}, rng)}}, y, x, 1e-3);
    EXPECT_LT(r.max_rel_error, 1e-3) << "trial " << trial;
  }
}

// A composition of linear ops: gradient is input-independent and f(x) = grad . x.
TEST(GraphProperty, LinearGraphsAreTheirGradient) {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    auto x = g.input("x");
    auto h = g.matmul(x, g.constant(random_tensor({5, 4}, rng)));
    h = g.scale(g.add(h, g.scale(h, -0.3)), 1.7);
    h = g.conv2d(g.reshape(h, {1, 1, 2, 2}), g.constant(random_tensor({2, 1, 2, 2}, rng)), 1, 1);
    auto y = g.sum(g.sub(g.flatten(h), g.scale(g.flatten(h), 0.25)));
    const Tensor x1 = random_tensor({1, 5}, rng), x2 = random_tensor({1, 5}, rng);
    auto e1 = g.evaluate({{"x", x1}});
    auto e2 = g.evaluate({{"x", x2}});
    const Tensor g1 = e1.backward(y, std::vector<NodeId>{x}).values[0];
    const Tensor g2 = e2.backward(y, std::vector<NodeId>{x}).values[0];
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g1[i], g2[i], 1e-5 * (std::abs(g1[i]) + 1e-3));
    double dot = 0;
    for (std::size_t i = 0; i < 5; ++i) dot += g1[i] * x1[i];
    EXPECT_NEAR(e1.value(y).item(), dot, 1e-5 * (std::abs(dot) + 1e-3));
  }
}

TEST(GraphProperty, EvaluationIsDeterministic) {
  Rng rng(41);
  Model m = testing::random_mlp(8, {16, 16, 4}, 3, true);
  testing::randomize_biases(m, rng);
  Graph g;
  auto x = g.input("x");
  const ModelNodes nodes = append_model(g, x, m, ParamBinding::Constants);
  g.set_output("y", nodes.output);
  const TensorMap in{{"x", random_tensor({32, 8}, rng)}};
  EXPECT_EQ(forward_eval(g, in).at("y"), forward_eval(g, in).at("y"));
}

TEST(GraphProperty, BatchNormTrainingNormalizesChannels) {
  Rng rng(51);
  Graph g;
  auto x = g.input("x");
  auto one = g.constant(Tensor(Shape{2}, 1.0f));
  auto zero = g.constant(Tensor(Shape{2}, 0.0f));
  auto y = g.batch_norm(x, one, zero, zero, one, BatchNormMode::Training, 0.0);
  auto ev = g.evaluate({{"x", random_tensor({6, 2, 3, 3}, rng, -2, 5)}});
  const Tensor& out = ev.value(y);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t k = 0; k < 9; ++k) {
        const double v = out[(n * 2 + c) * 9 + k];
        s += v;
        s2 += v * v;
      }
    EXPECT_NEAR(s / 54, 0.0, 1e-5);
    EXPECT_NEAR(s2 / 54, 1.0, 1e-4);
  }
  ASSERT_NE(ev.batch_stats(y), nullptr);
  EXPECT_EQ(ev.batch_stats(y)->mean.size(), 2u);
}

TEST(GraphProperty, IdentityResizeIsExact) {
  Rng rng(61);
  const Tensor img = random_tensor({2, 5, 7}, rng);
  EXPECT_EQ(resize_bilinear(img, 5, 7), img);
}

TEST(FftTest, MatchesNaiveDft) {
  Rng rng(71);
  for (std::size_t n : {1u, 2u, 8u, 32u}) {
    std::vector<std::complex<double>> x(n);
    for (auto& v : x) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    auto y = x;
    fft::transform(y, false);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<double> acc;
      for (std::size_t t = 0; t < n; ++t)
        acc += x[t] * std::polar(1.0, -2 * std::numbers::pi * double(k * t) / double(n));
      EXPECT_NEAR(std::abs(acc - y[k]), 0.0, 1e-9);
    }
    fft::transform(y, true);
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(std::abs(y[k] / double(n) - x[k]), 0.0, 1e-12);
  }
}

TEST(FftTest, TwoDimensionalRoundTrip) {
  Rng rng(72);
  std::vector<std::complex<double>> x(4 * 8);
  for (auto& v : x) v = {rng.uniform(-1, 1), 0};
  auto y = x;
  fft::transform_2d(y, 4, 8, false);
  // DC term is the plain sum.
  std::complex<double> s;
  for (auto v : x) s += v;
  EXPECT_NEAR(std::abs(y[0] - s), 0.0, 1e-12);
  fft::transform_2d(y, 4, 8, true);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(std::abs(y[i] / 32.0 - x[i]), 0.0, 1e-12);
  EXPECT_FALSE(fft::is_power_of_two(12));
}

TEST(FftTest, Ifft2RealNodeMatchesLibraryTransform) {
  Rng rng(73);
  const Tensor z = random_tensor({1, 4, 4, 2}, rng);
  Graph g;
  auto y = g.ifft2_real(g.input("z"));
  const Tensor out = eval1(g, y, {{"z", z}});
  std::vector<std::complex<double>> c(16);
  for (std::size_t i = 0; i < 16; ++i) c[i] = {z[2 * i], z[2 * i + 1]};
  fft::transform_2d(c, 4, 4, true);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(out[i], c[i].real() / 4.0, 1e-5);  // 1/sqrt(HW)
}

}  // namespace
}  // namespace tense
