#include <gtest/gtest.h>

#include <fstream>

#include "tense/checkpoint.hpp"
#include "tense/error.hpp"
#include "tense/io.hpp"
#include "tense/training.hpp"
#include "test_util.hpp"

namespace tense {
namespace {

using testing::random_tensor;

// W1 = [I; -I], W2 = [I, I]: output_i = relu(x_i) + relu(-x_i) = |x_i|.
Model exact_abs_model(std::size_t n) {
  Model m = build_model(toy_spec(n, 2 * n, n), 0);
  Tensor& w1 = m.params.at("hidden.weight");
  Tensor& w2 = m.params.at("out.weight");
  std::fill(w1.storage().begin(), w1.storage().end(), 0.0f);
  std::fill(w2.storage().begin(), w2.storage().end(), 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    w1[i * n + i] = 1;
    w1[(n + i) * n + i] = -1;
    w2[i * 2 * n + i] = 1;
    w2[i * 2 * n + n + i] = 1;
  }
  return m;
}

TEST(ModelTest, ToyShapes) {
  const Model abs = toy_model(ToyTask::abs(), 12, 0);
  EXPECT_EQ(abs.params.at("hidden.weight").shape(), (Shape{12, 6}));
  EXPECT_EQ(abs.params.at("hidden.bias").shape(), (Shape{12}));
  EXPECT_EQ(abs.params.at("out.weight").shape(), (Shape{6, 12}));
  EXPECT_EQ(abs.params.at("out.bias").shape(), (Shape{6}));
  const Model x = toy_model(ToyTask::xor_task(), 12, 0);
  EXPECT_EQ(x.spec.input_shape, (Shape{12}));
  EXPECT_EQ(x.stage("out").shape, (Shape{6}));
}

TEST(ModelTest, InitIsDeterministicAndBounded) {
  const ModelSpec spec = testing::small_convnet_spec(8);
  const Model a = build_model(spec, 7), b = build_model(spec, 7), c = build_model(spec, 8);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
  for (const auto& st : a.stages) {
    const double bound = std::sqrt(1.0 / static_cast<double>(st.fan_in));
    for (float v : a.params.at(st.name + ".weight").data()) EXPECT_LE(std::abs(v), bound);
    for (float v : a.params.at(st.name + ".bias").data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(ModelTest, InvalidSpecNamesLayer) {
  ModelSpec spec = testing::mlp_spec(4, {3, 2}, true);
  spec.layers[2].units = 0;
  try {
    analyze_spec(spec);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
  }
  ModelSpec conv = testing::small_convnet_spec(8);
  conv.layers.insert(conv.layers.begin(), LayerSpec{LayerKind::Flatten});
  conv.layers.insert(conv.layers.begin() + 1, LayerSpec{LayerKind::Conv2d, "bad", 2, 3});
  EXPECT_THROW(analyze_spec(conv), InvalidArgument);
  ModelSpec rp = testing::mlp_spec(4, {3, 2}, true);
  rp.read_points.push_back({"x", "nope", ReadPoint::Pre});
  EXPECT_THROW(analyze_spec(rp), InvalidArgument);
}

TEST(ModelTest, ExactAbsNetwork) {
  const Model m = exact_abs_model(6);
  Tensor x(Shape{6});
  x[0] = -0.7f;
  const ActivationTrace t = forward_trace(m, x);
  EXPECT_NEAR(t.output[0], 0.7f, 1e-7);
  for (std::size_t i = 1; i < 6; ++i) EXPECT_EQ(t.output[i], 0.0f);
}

TEST(ModelTest, ZeroInputZeroBiasGivesZeroTrace) {
  const Model m = toy_model(ToyTask::abs(), 12, 3);
  const ActivationTrace t = forward_trace(m, Tensor(Shape{6}));
  for (const auto& [name, v] : t.pre)
    for (float f : v.data()) EXPECT_EQ(f, 0.0f) << name;
  for (float f : t.output.data()) EXPECT_EQ(f, 0.0f);
}

TEST(ModelTest, RejectsWrongInputShape) {
  const Model m = toy_model(ToyTask::abs(), 12, 3);
  EXPECT_THROW(forward_trace(m, Tensor(Shape{7})), ShapeError);
}

TEST(ModelProperty, PostIsReluOfPre) {
  Rng rng(5);
  Model m = build_model(testing::small_convnet_spec(8, true, true), 1);
  testing::randomize_biases(m, rng);
  const ActivationTrace t = forward_trace(m, random_tensor({4, 3, 8, 8}, rng, 0, 1));
  ASSERT_FALSE(t.post.empty());
  for (const auto& [name, post] : t.post) {
    const Tensor& pre = t.pre.at(name);
    ASSERT_EQ(pre.shape(), post.shape());
    for (std::size_t i = 0; i < pre.size(); ++i) EXPECT_EQ(post[i], std::max(pre[i], 0.0f));
  }
}

TEST(FeatureTest, UnitReadsPreActivation) {
  Rng rng(6);
  Model m = testing::random_mlp(5, {8, 4}, 2, true);
  testing::randomize_biases(m, rng);
  const ActivationTrace t = forward_trace(m, random_tensor({5}, rng));
  for (std::size_t k = 0; k < 8; ++k)
    EXPECT_EQ(feature_value(m, t, FeatureRef::unit("h1", k, 8)), t.pre.at("h1")[k]);
  EXPECT_EQ(feature_value(m, t, FeatureRef::unit("h1", 3, 8, ReadPoint::Post)), t.post.at("h1")[3]);
  EXPECT_THROW(FeatureRef::unit("h1", 8, 8), InvalidArgument);
}

TEST(FeatureTest, LinearInDirection) {
  Rng rng(7);
  const Model m = testing::random_mlp(5, {8, 4}, 2, true);
  const ActivationTrace t = forward_trace(m, random_tensor({5}, rng));
  FeatureRef f;
  f.layer = "h1";
  for (int i = 0; i < 8; ++i) f.direction.push_back(static_cast<float>(rng.uniform(-1, 1)));
  FeatureRef f2 = f;
  for (auto& v : f2.direction) v *= 2;
  EXPECT_NEAR(feature_value(m, t, f2), 2 * feature_value(m, t, f), 1e-6);
  EXPECT_NEAR(feature_value(m, t, f.negated()), -feature_value(m, t, f), 1e-7);
  f.direction.pop_back();
  EXPECT_ANY_THROW(feature_value(m, t, f));
}

TEST(FeatureTest, MatchesGraphEvaluation) {
  Rng rng(8);
  Model m = build_model(testing::small_convnet_spec(8), 4);
  testing::randomize_biases(m, rng);
  const Tensor x = random_tensor({3, 3, 8, 8}, rng, 0, 1);
  const ActivationTrace t = forward_trace(m, x);
  for (const char* layer : {"conv1", "conv2", "fc1", "logits"}) {
    const auto& st = m.stage(layer);
    FeatureRef f = FeatureRef::unit(layer, 1, st.shape[0]);
    if (st.shape.size() == 3) f.spatial = {SpatialKind::Explicit, 1, 2};
    Graph g;
    auto in = g.input("x");
    const ModelNodes nodes = append_model(g, in, m, ParamBinding::Constants);
    auto out = append_feature(g, nodes, m, f);
    const Tensor v = g.evaluate({{"x", x}}).value(out);
    const auto direct = feature_values(m, t, f);
    ASSERT_EQ(v.size(), 3u);
    for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(static_cast<float>(direct[n]), v[n]) << layer;
  }
}

TEST(FeatureTest, CenterPolicyUsesFloorHalf) {
  EXPECT_EQ(resolve_position({}, 5, 4), (std::pair<std::size_t, std::size_t>{2, 2}));
  EXPECT_EQ(resolve_position({}, 8, 7), (std::pair<std::size_t, std::size_t>{4, 3}));
  EXPECT_EQ(resolve_position({SpatialKind::Explicit, 1, 3}, 8, 7), (std::pair<std::size_t, std::size_t>{1, 3}));
  EXPECT_ANY_THROW(resolve_position({SpatialKind::Explicit, 8, 0}, 8, 7));
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  Rng rng(9);
  Model m = build_model(testing::small_convnet_spec(8, true, true), 5);
  testing::randomize_biases(m, rng);
  m.metadata["task"] = "unit";
  const auto dir = testing::temp_dir("ckpt_roundtrip");
  save_checkpoint(m, dir);
  const Model back = load_checkpoint(dir);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.seed, m.seed);
  EXPECT_EQ(back.metadata, m.metadata);
  EXPECT_EQ(spec_to_json(back.spec), spec_to_json(m.spec));
  for (int i = 0; i < 10; ++i) {
    const Tensor x = random_tensor({3, 8, 8}, rng, 0, 1);
    EXPECT_EQ(forward_trace(back, x).output, forward_trace(m, x).output);
  }
}

TEST(CheckpointTest, RejectsDamage) {
  const Model m = toy_model(ToyTask::abs(), 4, 1);
  const auto dir = testing::temp_dir("ckpt_damage");
  save_checkpoint(m, dir);
  {
    // Truncate one tensor file.
    const auto p = dir / nlohmann::json::parse(std::ifstream(dir / "manifest.json"))["tensors"]["hidden.weight"]["file"]
                             .get<std::string>();
    auto bytes = read_file(p);
    bytes.resize(bytes.size() - 3);
    write_file(p, bytes);
    EXPECT_THROW(load_checkpoint(dir), FormatError);
  }
  save_checkpoint(m, dir);
  {
    auto j = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
    j["version"] = 2;
    write_text(dir / "manifest.json", j.dump());
    try {
      load_checkpoint(dir);
      FAIL();
    } catch (const FormatError& e) {
      EXPECT_EQ(e.field(), "version");
    }
  }
  EXPECT_THROW(load_checkpoint(testing::temp_dir("ckpt_empty")), FormatError);
}

TEST(CheckpointTest, SpecJsonErrorsCarryPath) {
  nlohmann::json j = spec_to_json(testing::small_convnet_spec(8));
  j["layers"][1]["kind"] = "pool";
  try {
    spec_from_json(j);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.field(), "layers[1].kind");
  }
}

TEST(WeightStatsTest, NegativeFractions) {
  Model m = build_model(testing::mlp_spec(2, {1, 2}, false), 0);
  m.params.at("h1.weight").storage() = {1, -1};
  m.params.at("out.weight").storage() = {0.5f, 2.0f};
  const WeightStats ws = weight_stats(m);
  ASSERT_EQ(ws.layers.size(), 2u);
  EXPECT_DOUBLE_EQ(ws.layers[0].negative_fraction, 0.5);
  EXPECT_DOUBLE_EQ(ws.layers[1].negative_fraction, 0.0);
  EXPECT_DOUBLE_EQ(ws.pooled_negative_fraction, 0.25);
  // [1, -1] standardizes to [+1, -1]: bins at 10 and 30 half-widths from the center.
  ASSERT_EQ(ws.layers[0].histogram.size(), WeightStats::kBins);
  std::size_t total = 0;
  for (auto c : ws.layers[0].histogram) total += c;
  EXPECT_EQ(total, 2u);
  EXPECT_EQ(ws.layers[0].histogram[60], 1u);
  EXPECT_EQ(ws.layers[0].histogram[40], 1u);
}

TEST(WeightStatsTest, ZeroVarianceFlagged) {
  Model m = build_model(testing::mlp_spec(2, {2, 2}, false), 0);
  std::fill(m.params.at("h1.weight").storage().begin(), m.params.at("h1.weight").storage().end(), 0.3f);
  const WeightStats ws = weight_stats(m);
  EXPECT_TRUE(ws.layers[0].zero_variance);
  EXPECT_TRUE(ws.layers[0].histogram.empty());
  EXPECT_FALSE(ws.layers[1].zero_variance);
}

TEST(ReceptiveFieldTest, GrowsWithDepth) {
  Rng rng(10);
  Model m = build_model(testing::small_convnet_spec(16), 3);
  const Tensor x = random_tensor({3, 16, 16}, rng, 0.1, 1);
  // conv1: 3x3 at (8, 8) -> rows 7..9, padded by 2 -> 5..11.
  FeatureRef f1 = FeatureRef::unit("conv1", 0, 4, ReadPoint::Pre);
  const auto c1 = receptive_field_crop(m, f1, x);
  EXPECT_FALSE(c1.full_image);
  EXPECT_EQ(c1.box.row, 5u);
  EXPECT_EQ(c1.box.col, 5u);
  EXPECT_EQ(c1.box.rows, 7u);
  EXPECT_EQ(c1.box.cols, 7u);
  EXPECT_EQ(c1.crop.shape(), (Shape{3, 7, 7}));
  const auto c2 = receptive_field_crop(m, FeatureRef::unit("conv2", 0, 6), x);
  EXPECT_GT(c2.box.rows * c2.box.cols, c1.box.rows * c1.box.cols);
  const auto d = receptive_field_crop(m, FeatureRef::unit("fc1", 0, 10), x);
  EXPECT_TRUE(d.full_image);
  EXPECT_EQ(d.box.rows, 16u);
}

TEST(ReceptiveFieldTest, ZeroGradientFallsBack) {
  Model m = build_model(testing::small_convnet_spec(8), 3);
  std::fill(m.params.at("conv1.weight").storage().begin(), m.params.at("conv1.weight").storage().end(), 0.0f);
  const auto c = receptive_field_crop(m, FeatureRef::unit("conv1", 0, 4), Tensor(Shape{3, 8, 8}, 0.5f));
  EXPECT_TRUE(c.zero_gradient);
  EXPECT_TRUE(c.full_image);
}

}  // namespace
}  // namespace tense
