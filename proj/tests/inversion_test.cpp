#include <gtest/gtest.h>

#include <cmath>

#include "tense/error.hpp"
#include "tense/inversion.hpp"
#include "test_util.hpp"

namespace tense {
namespace {

using testing::random_tensor;

double dotcos(std::vector<float> h, std::vector<float> s, double p) {
  return objective_dotcos(h, s, p).value;
}

TEST(DotCosTest, HandValues) {
  EXPECT_NEAR(dotcos({1, 2}, {1, 2}, 2), 5.0, 1e-12);  // |h||S| when parallel
  EXPECT_NEAR(dotcos({1, 0}, {0, 3}, 2), 0.0, 1e-12);
  EXPECT_NEAR(dotcos({1, 1}, {1, 0}, 2), 0.5, 1e-12);
  EXPECT_NEAR(dotcos({1, 1}, {1, 0}, 0), 1.0, 1e-12);  // p = 0 is the plain dot product
  // Anti-alignment stays negative for even p + 1.
  EXPECT_NEAR(dotcos({-1, 0}, {2, 0}, 1), -2.0, 1e-12);
  EXPECT_NEAR(dotcos({-1, 0}, {2, 0}, 2), -2.0, 1e-12);
}

TEST(DotCosTest, ZeroVectorsHaveNoGradient) {
  const std::vector<float> z{0, 0}, s{1, 2};
  EXPECT_TRUE(objective_dotcos(z, s, 2).zero_gradient);
  EXPECT_TRUE(objective_dotcos(s, z, 2).zero_gradient);
  EXPECT_EQ(objective_dotcos(z, s, 2).value, 0.0);
  EXPECT_THROW(objective_dotcos(s, std::vector<float>{1}, 2), ShapeError);
  EXPECT_THROW(objective_dotcos(s, s, -1), InvalidArgument);
}

TEST(DotCosTest, HomogeneousInBothArguments) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<float> h(7), s(7);
    for (auto& v : h) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : s) v = static_cast<float>(rng.uniform(-1, 1));
    const double p = rng.uniform(0, 4), a = rng.uniform(0.1, 5);
    std::vector<float> ha = h, sa = s;
    for (auto& v : ha) v = static_cast<float>(v * a);
    for (auto& v : sa) v = static_cast<float>(v * a);
    const double base = dotcos(h, s, p);
    EXPECT_NEAR(dotcos(ha, s, p), a * base, 1e-4 * (1 + std::abs(a * base)));
    EXPECT_NEAR(dotcos(h, sa, p), a * base, 1e-4 * (1 + std::abs(a * base)));
    // Bounded by |h||S| through Cauchy-Schwarz.
    double nh = 0, ns = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      nh += h[i] * h[i];
      ns += s[i] * s[i];
    }
    EXPECT_LE(std::abs(base), std::sqrt(nh * ns) * (1 + 1e-6));
  }
}

TEST(TargetTest, Parts) {
  const Tensor S = Tensor::vector({2, -3, 0, 1});
  EXPECT_EQ(target_vector(S, TargetKind::SPlus).storage(), (std::vector<float>{2, 0, 0, 1}));
  EXPECT_EQ(target_vector(S, TargetKind::SMinus).storage(), (std::vector<float>{0, 3, 0, 0}));
  EXPECT_EQ(target_vector(S, TargetKind::SAbs).storage(), (std::vector<float>{2, 3, 0, 1}));
  EXPECT_EQ(target_vector(S, TargetKind::Raw).storage(), S.storage());
  EXPECT_EQ(parse_target_kind("minus"), TargetKind::SMinus);
  EXPECT_THROW(parse_target_kind("both"), InvalidArgument);
}

Tensor smooth_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  Tensor img(Shape{c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double fx = rng.uniform(0.2, 1.0), fy = rng.uniform(0.2, 1.0);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q)
        img[(ch * h + r) * w + q] = static_cast<float>(0.5 + 0.4 * std::sin(fx * r + fy * q + ch));
  }
  return img;
}

TEST(ParameterizationTest, DecodeStaysInUnitRange) {
  Rng rng(2);
  for (ParamKind kind : {ParamKind::Pixel, ParamKind::Fourier}) {
    const Parameterization P(kind, Shape{3, 8, 8});
    const Tensor img = P.decode(P.noise_coefficients(rng, 50.0));
    for (float v : img.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(ParameterizationTest, EncodeDecodeRoundTrip) {
  Rng rng(3);
  const Tensor img = smooth_image(3, 8, 16, rng);
  for (ParamKind kind : {ParamKind::Pixel, ParamKind::Fourier}) {
    const Parameterization P(kind, img.shape());
    const Tensor back = P.decode(P.encode(img));
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1e-4) << to_string(kind);
  }
  // Phase-only with the image's own magnitude gives the image back.
  const Tensor batch = img.reshaped(Shape{1, 3, 8, 16});
  const Parameterization Pm(ParamKind::Fourier, img.shape(), magnitude_template(batch));
  EXPECT_TRUE(Pm.phase_only());
  const Tensor back = Pm.decode(Pm.encode(img));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1e-3);
}

TEST(ParameterizationTest, RejectsBadShapes) {
  EXPECT_THROW(Parameterization(ParamKind::Fourier, Shape{3, 6, 8}), InvalidArgument);
  EXPECT_NO_THROW(Parameterization(ParamKind::Pixel, Shape{3, 6, 8}));
  EXPECT_THROW(Parameterization(ParamKind::Pixel, Shape{6, 8}), InvalidArgument);
  EXPECT_THROW(Parameterization(ParamKind::Pixel, Shape{3, 8, 8}, Tensor(Shape{3, 8, 8})),
               InvalidArgument);
}

TEST(OpacityTest, QuadrantGradient) {
  GradientHistory hist;
  Tensor g(Shape{3, 8, 8});
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t q = 0; q < 4; ++q) g[(ch * 8 + r) * 8 + q] = -2.0f;
  hist.add(g);
  hist.add(g);
  const OpacityMask m = opacity_mask(hist);
  EXPECT_FALSE(m.flagged);
  EXPECT_FLOAT_EQ(m.alpha[0], 1.0f);
  EXPECT_FLOAT_EQ(m.alpha[63], 0.0f);
  double inside = 0, outside = 0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t q = 0; q < 8; ++q) {
      const float a = m.alpha[r * 8 + q];
      EXPECT_GE(a, 0.0f);
      EXPECT_LE(a, 1.0f);
      (r < 4 && q < 4 ? inside : outside) += a;
    }
  EXPECT_GT(inside / 16, 0.8);
  EXPECT_LT(outside / 48, 0.2);
}

TEST(OpacityTest, ConstantAndZeroFields) {
  GradientHistory c;
  c.add(Tensor(Shape{1, 4, 4}, 0.3f));
  const OpacityMask mc = opacity_mask(c);
  EXPECT_FALSE(mc.flagged);
  for (float a : mc.alpha.data()) EXPECT_EQ(a, 1.0f);

  GradientHistory z;
  z.add(Tensor(Shape{1, 4, 4}));
  const OpacityMask mz = opacity_mask(z);
  EXPECT_TRUE(mz.flagged);
  for (float a : mz.alpha.data()) EXPECT_EQ(a, 1.0f);

  EXPECT_THROW(opacity_mask(GradientHistory{}), InvalidArgument);
}

struct Fixture {
  Model model;
  Tensor x;
  AttributionRecord rec;
};

Fixture make_fixture() {
  Rng rng(4);
  Fixture f{build_model(testing::small_convnet_spec(8), 5), Tensor(), {}};
  f.x = random_tensor({3, 8, 8}, rng, 0, 1);
  f.rec = attribution_vector(f.model, f.x, FeatureRef::unit("fc1", 2, 10), "conv2");
  return f;
}

OptimConfig quick(ParamKind param, std::size_t steps = 48) {
  OptimConfig c;
  c.steps = steps;
  c.param = param;
  c.lr = 0.05;
  c.seed = 11;
  c.transforms.enabled = false;
  return c;
}

TEST(OptimizeTest, ZeroStepsReturnsSeed) {
  const Fixture f = make_fixture();
  OptimConfig c = quick(ParamKind::Fourier, 0);
  c.seed_mode = SeedMode::Image;
  const OptimResult r = optimize_visualization(f.model, f.rec.S, "conv2", c, f.x);
  EXPECT_EQ(r.image.storage(), f.x.storage());
  EXPECT_TRUE(r.objective.empty());
  EXPECT_EQ(r.rgba.dim(0), 4u);
}

TEST(OptimizeTest, ObjectiveRisesAndIsReproducible) {
  const Fixture f = make_fixture();
  for (ParamKind kind : {ParamKind::Pixel, ParamKind::Fourier}) {
    OptimConfig c = quick(kind);
    c.transforms.enabled = true;
    const OptimResult a = optimize_visualization(f.model, f.rec.S, "conv2", c);
    const OptimResult b = optimize_visualization(f.model, f.rec.S, "conv2", c);
    ASSERT_EQ(a.objective.size(), c.steps);
    EXPECT_GT(a.objective.back(), a.objective.front()) << to_string(kind);
    EXPECT_EQ(a.image.storage(), b.image.storage());
    EXPECT_EQ(a.objective, b.objective);
    c.seed = 12;
    const OptimResult d = optimize_visualization(f.model, f.rec.S, "conv2", c);
    EXPECT_NE(a.image.storage(), d.image.storage());
  }
}

TEST(OptimizeTest, InvariantToTargetScale) {
  const Fixture f = make_fixture();
  Tensor S3 = f.rec.S;
  for (auto& v : S3.data()) v *= 3;
  const OptimConfig c = quick(ParamKind::Pixel, 24);
  const OptimResult a = optimize_visualization(f.model, f.rec.S, "conv2", c);
  const OptimResult b = optimize_visualization(f.model, S3, "conv2", c);
  for (std::size_t i = 0; i < a.image.size(); ++i) EXPECT_NEAR(a.image[i], b.image[i], 1e-3);
  for (std::size_t t = 0; t < a.objective.size(); ++t)
    EXPECT_NEAR(b.objective[t], 3 * a.objective[t], 1e-3 * (1 + std::abs(b.objective[t])));
}

TEST(OptimizeTest, ImageSeedStartsAtSeed) {
  const Fixture f = make_fixture();
  OptimConfig c = quick(ParamKind::Fourier, 4);
  c.seed_mode = SeedMode::Image;
  Tensor first;
  optimize_visualization(f.model, f.rec.S, "conv2", c, f.x, std::nullopt,
                         [&](std::size_t step, const Tensor& img) {
                           if (step == 0 && first.size() <= 1) first = img;
                         });
  for (std::size_t i = 0; i < f.x.size(); ++i) EXPECT_NEAR(first[i], f.x[i], 1e-4);
}

TEST(OptimizeTest, RejectsBadRequests) {
  const Fixture f = make_fixture();
  const OptimConfig c = quick(ParamKind::Pixel, 2);
  EXPECT_THROW(optimize_visualization(f.model, Tensor(f.rec.S.shape()), "conv2", c), InvalidArgument);
  EXPECT_THROW(optimize_visualization(f.model, Tensor(Shape{5}), "conv2", c), ShapeError);
  OptimConfig img = c;
  img.seed_mode = SeedMode::Image;
  EXPECT_THROW(optimize_visualization(f.model, f.rec.S, "conv2", img), InvalidArgument);
  OptimConfig phase = quick(ParamKind::Fourier, 2);
  phase.phase_only = true;
  EXPECT_THROW(optimize_visualization(f.model, f.rec.S, "conv2", phase), InvalidArgument);
  OptimConfig bad = c;
  bad.lr = 0;
  EXPECT_THROW(optimize_visualization(f.model, f.rec.S, "conv2", bad), InvalidArgument);
}

TEST(SanityTest, CurvesAreInSigmaUnits) {
  const Fixture f = make_fixture();
  Rng rng(6);
  const Tensor mtis = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  const FeatureRef feat = FeatureRef::unit("fc1", 2, 10);
  OptimConfig c = quick(ParamKind::Pixel, 6);
  const SanityCurves s = sanity_curve(f.model, feat, mtis, "conv1", 2.0, c);
  ASSERT_EQ(s.plus.size(), 2u);
  ASSERT_EQ(s.minus.size(), 2u);
  EXPECT_EQ(s.plus[0].size(), 7u);
  EXPECT_EQ(s.plus_band.median.size(), 7u);
  for (std::size_t t = 0; t < 7; ++t) {
    EXPECT_LE(s.plus_band.min[t], s.plus_band.median[t]);
    EXPECT_LE(s.plus_band.median[t], s.plus_band.max[t]);
  }
  const auto r0 = attribution_vector(f.model, slice_row(mtis, 0), feat, "conv1");
  EXPECT_NEAR(s.mti_values[0], r0.value / 2.0, 1e-9);
  EXPECT_EQ(s.to_json()["units"], "sigma");
  EXPECT_THROW(sanity_curve(f.model, feat, mtis, "conv1", 0.0, c), InvalidArgument);
}

}  // namespace
}  // namespace tense
