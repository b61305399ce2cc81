#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "robustdistill/nn.hpp"
#include "test_util.hpp"

using namespace robustdistill;
using nn::LayerDesc;
using nn::ModelSpec;

namespace {

ModelSpec mlp_spec(int in, int hidden, int out) {
  ModelSpec s;
  s.input_shape = {in};
  s.num_classes = out;
  s.layers = {LayerDesc::Dense(in, hidden), LayerDesc::Relu(), LayerDesc::Dense(hidden, out)};
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("robustdistill-test-" + name);
}

}  // namespace

TEST_CASE("build_model is deterministic in (spec, seed)") {
  ModelSpec spec = mlp_spec(6, 5, 3);
  auto a = nn::build_model<float>(spec, 42);
  auto b = nn::build_model<float>(spec, 42);
  CHECK(a.digest() == b.digest());
  auto c = nn::build_model<float>(spec, 43);
  CHECK(a.digest() != c.digest());
}

TEST_CASE("MLP 784-100-10 parameter count matches the closed form") {
  // 784*100 + 100 + 100*10 + 10
  auto ps = nn::build_model<float>(mlp_spec(784, 100, 10), 1);
  CHECK(ps.parameter_count() == 79510);
}

TEST_CASE("non-composing spec raises a shape error naming the layer pair") {
  ModelSpec s;
  s.input_shape = {10};
  s.num_classes = 2;
  s.layers = {LayerDesc::Dense(10, 5), LayerDesc::Dense(6, 2)};
  CHECK_THROWS_WITH_AS(nn::validate_spec(s), doctest::Contains("dense(6,2)"), ShapeError);
  CHECK_THROWS_WITH_AS(nn::validate_spec(s), doctest::Contains("dense(10,5)"), ShapeError);
  CHECK_THROWS_AS(nn::build_model<float>(s, 1), ShapeError);
}

TEST_CASE("zero parameters give zero logits and a uniform softmax") {
  ModelSpec spec = mlp_spec(4, 3, 10);
  auto ps = nn::build_model<float>(spec, 7);
  for (auto& [name, t] : ps.params) std::fill(t.v.begin(), t.v.end(), 0.0f);
  Tensor<float> x = Tensor<float>::ones({2, 4});
  Tensor<float> logits = nn::forward(ps, x);
  for (float v : logits.v) CHECK(v == 0.0f);
  Tensor<float> probs = nn::predict_probs(ps, x, 1.0f);
  for (float v : probs.v) CHECK(v == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("duplicated batch rows produce duplicated logit rows") {
  ModelSpec spec = mlp_spec(5, 4, 3);
  auto ps = nn::build_model<float>(spec, 9);
  Rng rng(3);
  Tensor<float> x({2, 5});
  for (int j = 0; j < 5; ++j) x(0, j) = x(1, j) = static_cast<float>(rng.uniform01());
  Tensor<float> logits = nn::forward(ps, x);
  for (int j = 0; j < 3; ++j) CHECK(logits(0, j) == logits(1, j));
}

TEST_CASE("single dense layer computes x*W + b") {
  ModelSpec s;
  s.input_shape = {2};
  s.num_classes = 2;
  s.layers = {LayerDesc::Dense(2, 2)};
  auto ps = nn::build_model<float>(s, 1);
  ps.params["L0.w"] = Tensor<float>({2, 2}, {1, 2, 3, 4});
  ps.params["L0.b"] = Tensor<float>({2}, {10, 20});
  Tensor<float> x({1, 2}, {1, 1});
  Tensor<float> logits = nn::forward(ps, x);
  CHECK(logits(0, 0) == doctest::Approx(14.0));  // 1*1 + 1*3 + 10
  CHECK(logits(0, 1) == doctest::Approx(26.0));  // 1*2 + 1*4 + 20
}

TEST_CASE("forward is pure and rejects shape mismatches") {
  ModelSpec spec = mlp_spec(4, 3, 2);
  auto ps = nn::build_model<float>(spec, 21);
  Rng rng(5);
  Tensor<float> x({3, 4});
  for (auto& v : x.v) v = static_cast<float>(rng.uniform01());
  Tensor<float> l1 = nn::forward(ps, x);
  Tensor<float> l2 = nn::forward(ps, x);
  CHECK(l1.v == l2.v);
  CHECK_THROWS_AS(nn::forward(ps, Tensor<float>::ones({3, 5})), ShapeError);
}

TEST_CASE("predict_probs matches the closed form and flattens at high tau") {
  ModelSpec s;
  s.input_shape = {1};
  s.num_classes = 2;
  s.layers = {LayerDesc::Dense(1, 2)};
  auto ps = nn::build_model<float>(s, 1);
  ps.params["L0.w"] = Tensor<float>({1, 2}, {2.0f, 0.0f});
  ps.params["L0.b"] = Tensor<float>({2}, {0.0f, 0.0f});
  Tensor<float> x({1, 1}, {1.0f});
  Tensor<float> p = nn::predict_probs(ps, x, 2.0f);
  CHECK(p(0, 0) == doctest::Approx(0.73106).epsilon(1e-5));
  CHECK(p(0, 1) == doctest::Approx(0.26894).epsilon(1e-5));

  Tensor<float> flat = nn::predict_probs(ps, x, 1e6f);
  CHECK(std::abs(flat(0, 0) - flat(0, 1)) < 1e-3);

  // rows sum to 1 for a larger random model
  ModelSpec spec = mlp_spec(6, 8, 7);
  auto big = nn::build_model<float>(spec, 77);
  Rng rng(6);
  Tensor<float> xb({4, 6});
  for (auto& v : xb.v) v = static_cast<float>(rng.uniform01());
  Tensor<float> probs = nn::predict_probs(big, xb, 1.0f);
  for (int i = 0; i < 4; ++i) {
    double sum = 0;
    for (int j = 0; j < 7; ++j) sum += probs(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("conv and residual presets compose and run") {
  for (const char* preset : {"cnn_tiny", "cnn_student", "res_tiny", "res_small", "res_medium"}) {
    ModelSpec spec = nn::parse_model_spec(preset, {1, 8, 8}, 5);
    auto ps = nn::build_model<float>(spec, 3);
    Tensor<float> x = Tensor<float>::full({2, 1, 8, 8}, 0.5f);
    Tensor<float> logits = nn::forward(ps, x);
    CHECK(logits.shape == Shape{2, 5});
    CHECK(logits.all_finite());
  }
  // teacher sizes are ordered
  auto small = nn::build_model<float>(nn::parse_model_spec("res_small", {1, 8, 8}, 5), 1);
  auto medium = nn::build_model<float>(nn::parse_model_spec("res_medium", {1, 8, 8}, 5), 1);
  auto large = nn::build_model<float>(nn::parse_model_spec("res_large", {1, 8, 8}, 5), 1);
  CHECK(small.parameter_count() < medium.parameter_count());
  CHECK(medium.parameter_count() < large.parameter_count());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  ModelSpec spec = mlp_spec(7, 6, 4);
  nn::Checkpoint ckpt;
  ckpt.params = nn::build_model<float>(spec, 55);
  ckpt.epoch = 17;
  ckpt.selection_tag = "best";
  ckpt.momentum["L0.w"] = Tensor<float>({7, 6});
  Rng rng(12);
  for (auto& v : ckpt.momentum["L0.w"].v) v = static_cast<float>(rng.gaussian());
  ckpt.history.push_back({3, 0.1, 1.25, 0.5, 0.25, 123.0});

  auto path = temp_file("roundtrip.ckpt");
  nn::save_checkpoint(ckpt, path.string());
  nn::Checkpoint back = nn::load_checkpoint(path.string());
  CHECK(back.epoch == 17);
  CHECK(back.selection_tag == "best");
  CHECK(back.params.params.size() == ckpt.params.params.size());
  for (const auto& [name, t] : ckpt.params.params) {
    const Tensor<float>& got = back.params.params.at(name);
    CHECK(got.shape == t.shape);
    CHECK(got.v == t.v);  // bit-exact float payload
  }
  CHECK(back.momentum.at("L0.w").v == ckpt.momentum.at("L0.w").v);
  REQUIRE(back.history.size() == 1);
  CHECK(back.history[0].epoch == 3);
  CHECK(back.history[0].train_loss == 1.25);
  CHECK(back.params.digest() == ckpt.params.digest());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects bad magic, truncation and spec mismatch") {
  ModelSpec spec = mlp_spec(3, 3, 2);
  nn::Checkpoint ckpt;
  ckpt.params = nn::build_model<float>(spec, 5);
  auto path = temp_file("corrupt.ckpt");
  nn::save_checkpoint(ckpt, path.string());

  // corrupted magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XX", 2);
  }
  CHECK_THROWS_AS(nn::load_checkpoint(path.string()), FormatError);

  // truncated file
  nn::save_checkpoint(ckpt, path.string());
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(nn::load_checkpoint(path.string()), IntegrityError);

  // spec digest mismatch against the caller's expectation
  nn::save_checkpoint(ckpt, path.string());
  uint64_t other_digest = nn::spec_digest(mlp_spec(4, 3, 2));
  CHECK_THROWS_AS(nn::load_checkpoint(path.string(), other_digest), SpecMismatchError);
  CHECK_NOTHROW(nn::load_checkpoint(path.string(), nn::spec_digest(spec)));
  std::filesystem::remove(path);
}

TEST_CASE("model spec strings parse and round trip through canonical form") {
  ModelSpec spec = nn::parse_model_spec("conv:1:4:3:2, relu, flatten, dense:64:5", {1, 8, 8}, 5);
  CHECK(spec.layers.size() == 4);
  std::string canon = nn::canonical_spec(spec);
  ModelSpec back = nn::detail::parse_canonical_spec(canon);
  CHECK(nn::canonical_spec(back) == canon);
  CHECK_THROWS_AS(nn::parse_model_spec("warp:1:2", {1, 8, 8}, 5), ConfigError);
  CHECK_THROWS_AS(nn::parse_model_spec("no_such_preset", {1, 8, 8}, 5), ConfigError);
}
