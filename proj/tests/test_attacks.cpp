#include <doctest.h>

#include "robustdistill/attacks.hpp"
#include "robustdistill/distill.hpp"
#include "test_util.hpp"

using namespace robustdistill;
using attacks::AttackConfig;
using attacks::AttackReference;
using attacks::InnerLoss;
using attacks::Method;
using attacks::RandomStart;
using nn::LayerDesc;
using nn::ModelSpec;

namespace {

ModelSpec dense_spec(int in, int classes) {
  ModelSpec s;
  s.input_shape = {in};
  s.num_classes = classes;
  s.layers = {LayerDesc::Dense(in, classes)};
  return s;
}

ModelSpec mlp_spec(int in, int hidden, int classes) {
  ModelSpec s;
  s.input_shape = {in};
  s.num_classes = classes;
  s.layers = {LayerDesc::Dense(in, hidden), LayerDesc::Relu(),
              LayerDesc::Dense(hidden, classes)};
  return s;
}

Tensor<float> random_batch(int n, int d, Rng& rng) {
  Tensor<float> x({n, d});
  for (auto& v : x.v) v = static_cast<float>(rng.uniform01());
  return x;
}

double linf(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.v[i]) - b.v[i]));
  return m;
}

float ce_value(const nn::ParameterSet<float>& ps, const Tensor<float>& x,
               const std::vector<int>& y) {
  Tape<float> tape;
  Var<float> probs = tape.constant(nn::predict_probs(ps, x, 1.0f));
  return distill::ce_loss(probs, y).val().item();
}

}  // namespace

TEST_CASE("fgsm with zero radius returns the input bit-exactly") {
  auto ps = nn::build_model<float>(mlp_spec(6, 5, 3), 2);
  Rng rng(1);
  Tensor<float> x = random_batch(4, 6, rng);
  std::vector<int> y = {0, 1, 2, 0};
  Tensor<float> adv = attacks::fgsm(ps, x, y, 0.0);
  CHECK(adv.v == x.v);
}

TEST_CASE("fgsm on a positive-weight logistic feature pushes against the weight") {
  // One feature, two classes; class 1 logit = 3x. For the true label 1 the
  // loss decreases in x, so the attack moves x down by epsilon.
  auto ps = nn::build_model<float>(dense_spec(1, 2), 1);
  ps.params["L0.w"] = Tensor<float>({1, 2}, {0.0f, 3.0f});
  ps.params["L0.b"] = Tensor<float>({2}, {0.0f, 0.0f});
  Tensor<float> x({1, 1}, {0.5f});
  std::vector<int> y = {1};
  Tensor<float> adv = attacks::fgsm(ps, x, y, 0.1);
  CHECK(adv(0, 0) == doctest::Approx(0.4).epsilon(1e-6));
  // and for label 0 the gradient flips
  std::vector<int> y0 = {0};
  Tensor<float> adv0 = attacks::fgsm(ps, x, y0, 0.1);
  CHECK(adv0(0, 0) == doctest::Approx(0.6).epsilon(1e-6));
}

TEST_CASE("fgsm equals single-step CE PGD exactly") {
  auto ps = nn::build_model<float>(mlp_spec(8, 6, 4), 5);
  Rng rng(2);
  Tensor<float> x = random_batch(7, 8, rng);
  std::vector<int> y;
  for (int i = 0; i < 7; ++i) y.push_back(static_cast<int>(rng.below(4)));
  Tensor<float> a = attacks::fgsm(ps, x, y, 0.07);
  AttackConfig cfg;
  cfg.epsilon = 0.07;
  cfg.steps = 1;
  cfg.step_size = 0.07;
  cfg.random_start = RandomStart::none;
  cfg.inner_loss = InnerLoss::ce;
  AttackReference<float> ref;
  ref.labels = &y;
  Tensor<float> b = attacks::pgd(ps, x, ref, cfg, 0);
  CHECK(a.v == b.v);
}

TEST_CASE("pgd with zero steps and no random start is a no-op") {
  auto ps = nn::build_model<float>(mlp_spec(5, 4, 3), 8);
  Rng rng(3);
  Tensor<float> x = random_batch(3, 5, rng);
  std::vector<int> y = {0, 1, 2};
  AttackConfig cfg;
  cfg.epsilon = 0.2;
  cfg.steps = 0;
  cfg.random_start = RandomStart::none;
  AttackReference<float> ref;
  ref.labels = &y;
  CHECK(attacks::pgd(ps, x, ref, cfg, 5).v == x.v);
}

TEST_CASE("pgd projection contract holds across random models and configs") {
  Rng rng(42);
  for (int trial = 0; trial < 250; ++trial) {
    int d = 2 + static_cast<int>(rng.below(6));
    int classes = 2 + static_cast<int>(rng.below(4));
    int n = 1 + static_cast<int>(rng.below(4));
    auto ps = nn::build_model<float>(mlp_spec(d, 4, classes), rng.next_u64());
    Tensor<float> x = random_batch(n, d, rng);
    std::vector<int> y;
    for (int i = 0; i < n; ++i) y.push_back(static_cast<int>(rng.below(static_cast<uint32_t>(classes))));

    AttackConfig cfg;
    cfg.epsilon = rng.uniform01() * 0.3;
    cfg.steps = static_cast<int>(rng.below(6));
    cfg.step_size = cfg.steps > 0 ? 0.01 + rng.uniform01() * 0.2 : 1.0;
    int rs = static_cast<int>(rng.below(3));
    cfg.random_start = rs == 0 ? RandomStart::none
                               : (rs == 1 ? RandomStart::uniform : RandomStart::gaussian);
    cfg.random_start_param = rs == 1 ? cfg.epsilon : 0.01;
    int loss_kind = static_cast<int>(rng.below(3));
    AttackReference<float> ref;
    Tensor<float> probs;
    if (loss_kind == 2) {
      cfg.inner_loss = InnerLoss::kl;
      probs = Tensor<float>({n, classes});
      for (int i = 0; i < n; ++i) {
        double s = 0;
        std::vector<double> row(static_cast<size_t>(classes));
        for (auto& v : row) {
          v = 0.05 + rng.uniform01();
          s += v;
        }
        for (int j = 0; j < classes; ++j) probs(i, j) = static_cast<float>(row[static_cast<size_t>(j)] / s);
      }
      ref.probs = &probs;
    } else {
      cfg.inner_loss = loss_kind == 0 ? InnerLoss::ce : InnerLoss::cw_margin;
      ref.labels = &y;
    }

    uint64_t digest_before = ps.digest();
    Tensor<float> adv = attacks::pgd(ps, x, ref, cfg, rng.next_u64());
    CHECK(linf(adv, x) <= cfg.epsilon + 1e-6);
    for (float v : adv.v) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(ps.digest() == digest_before);  // no gradient leakage into parameters
  }
}

TEST_CASE("pgd is deterministic in its seed and epsilon-zero returns x bits") {
  auto ps = nn::build_model<float>(mlp_spec(6, 5, 3), 11);
  Rng rng(4);
  Tensor<float> x = random_batch(5, 6, rng);
  std::vector<int> y = {0, 1, 2, 1, 0};
  AttackConfig cfg;
  cfg.epsilon = 0.15;
  cfg.steps = 5;
  cfg.step_size = 0.03;
  cfg.random_start = RandomStart::uniform;
  cfg.random_start_param = 0.15;
  cfg.inner_loss = InnerLoss::ce;
  AttackReference<float> ref;
  ref.labels = &y;
  Tensor<float> a = attacks::pgd(ps, x, ref, cfg, 99);
  Tensor<float> b = attacks::pgd(ps, x, ref, cfg, 99);
  CHECK(a.v == b.v);
  Tensor<float> c = attacks::pgd(ps, x, ref, cfg, 100);
  CHECK(a.v != c.v);

  cfg.epsilon = 0.0;
  Tensor<float> zero = attacks::pgd(ps, x, ref, cfg, 99);
  CHECK(zero.v == x.v);
}

TEST_CASE("CE loss increases along a 20-step pgd on linear softmax models") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    int d = 3 + static_cast<int>(rng.below(4));
    int classes = 2 + static_cast<int>(rng.below(3));
    auto ps = nn::build_model<float>(dense_spec(d, classes), rng.next_u64());
    Tensor<float> x = random_batch(4, d, rng);
    std::vector<int> y;
    for (int i = 0; i < 4; ++i) y.push_back(static_cast<int>(rng.below(static_cast<uint32_t>(classes))));
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.steps = 20;
    cfg.step_size = 0.01;
    cfg.random_start = RandomStart::none;
    cfg.inner_loss = InnerLoss::ce;
    AttackReference<float> ref;
    ref.labels = &y;
    Tensor<float> adv = attacks::pgd(ps, x, ref, cfg, 1);
    CHECK(ce_value(ps, adv, y) >= ce_value(ps, x, y) - 1e-6);
  }
}

TEST_CASE("cw_inf honors the contract and reduces to CE pgd for 2 classes") {
  auto ps = nn::build_model<float>(dense_spec(4, 2), 23);
  Rng rng(5);
  Tensor<float> x = random_batch(6, 4, rng);
  std::vector<int> y = {0, 1, 0, 1, 0, 1};
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  cfg.steps = 10;
  cfg.step_size = 0.02;
  cfg.random_start = RandomStart::none;
  Tensor<float> same = attacks::cw_inf(ps, x, y, cfg, 3);
  CHECK(same.v == x.v);

  // two-class linear model: the CW margin and CE losses share the sign of
  // their input gradient, so the iterates coincide without random start
  cfg.epsilon = 0.12;
  for (int trial = 0; trial < 10; ++trial) {
    auto lin = nn::build_model<float>(dense_spec(5, 2), rng.next_u64());
    Tensor<float> xb = random_batch(3, 5, rng);
    std::vector<int> yb = {0, 1, 1};
    Tensor<float> via_cw = attacks::cw_inf(lin, xb, yb, cfg, 7);
    AttackConfig ce_cfg = cfg;
    ce_cfg.inner_loss = InnerLoss::ce;
    AttackReference<float> ref;
    ref.labels = &yb;
    Tensor<float> via_ce = attacks::pgd(lin, xb, ref, ce_cfg, 7);
    CHECK(via_cw.v == via_ce.v);
  }
}

TEST_CASE("inner_max dispatches per method") {
  Rng rng(6);
  auto student = nn::build_model<float>(mlp_spec(6, 5, 3), 31);
  auto teacher = nn::build_model<float>(mlp_spec(6, 8, 3), 32, nn::Role::teacher);
  Tensor<float> x = random_batch(4, 6, rng);
  std::vector<int> y = {0, 1, 2, 1};
  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.steps = 3;
  cfg.step_size = 0.03;
  cfg.random_start = RandomStart::none;
  cfg.random_start_explicit = true;  // pin the start so dispatch == direct pgd
  const nn::ParameterSet<float>* no_teacher = nullptr;

  // SAT reduces to plain CE pgd
  Tensor<float> via_dispatch = attacks::inner_max(Method::SAT, student, no_teacher, x, y, cfg, 9);
  AttackConfig ce_cfg = cfg;
  ce_cfg.inner_loss = InnerLoss::ce;
  AttackReference<float> ref;
  ref.labels = &y;
  Tensor<float> direct = attacks::pgd(student, x, ref, ce_cfg, 9);
  CHECK(via_dispatch.v == direct.v);

  // NAT is the identity
  CHECK(attacks::inner_max(Method::NAT, student, no_teacher, x, y, cfg, 9).v == x.v);

  // TRADES with zero steps and no start returns x
  AttackConfig none = cfg;
  none.steps = 0;
  CHECK(attacks::inner_max(Method::TRADES, student, no_teacher, x, y, none, 9).v == x.v);

  // missing teacher is a configuration error
  CHECK_THROWS_AS(attacks::inner_max(Method::RSLAD, student, no_teacher, x, y, cfg, 9), ConfigError);
  CHECK_THROWS_AS(attacks::inner_max(Method::ARD, student, no_teacher, x, y, cfg, 9), ConfigError);
  CHECK_NOTHROW(attacks::inner_max(Method::RSLAD, student, &teacher, x, y, cfg, 9));

  // KL inner loss with a label reference is a contract error
  AttackConfig kl_cfg = cfg;
  kl_cfg.inner_loss = InnerLoss::kl;
  CHECK_THROWS_AS(attacks::pgd(student, x, ref, kl_cfg, 9), ContractError);
}

TEST_CASE("RSLAD inner attack against a one-hot teacher matches CE pgd bit-for-bit") {
  Rng rng(7);
  auto student = nn::build_model<float>(mlp_spec(5, 6, 3), 41);
  // Teacher with huge logit gaps emits exact one-hot rows; KL against a
  // one-hot reference is then cross entropy.
  auto teacher = nn::build_model<float>(dense_spec(5, 3), 42, nn::Role::teacher);
  for (auto& v : teacher.params["L0.w"].v) v = 0.0f;
  teacher.params["L0.w"](0, 0) = 4000.0f;  // always predicts class 0
  Tensor<float> x = random_batch(4, 5, rng);
  for (auto& v : x.v) v = 0.3f + 0.4f * v;  // keep the dot product positive
  std::vector<int> y0 = {0, 0, 0, 0};
  Tensor<float> teacher_rows = nn::predict_probs(teacher, x, 1.0f);
  for (int i = 0; i < 4; ++i) {
    CHECK(teacher_rows(i, 0) == 1.0f);
    CHECK(teacher_rows(i, 1) == 0.0f);
  }
  AttackConfig cfg;
  cfg.epsilon = 0.08;
  cfg.steps = 4;
  cfg.step_size = 0.02;
  cfg.random_start = RandomStart::none;
  cfg.random_start_explicit = true;
  const nn::ParameterSet<float>* no_teacher = nullptr;
  Tensor<float> via_rslad = attacks::inner_max(Method::RSLAD, student, &teacher, x, y0, cfg, 13);
  Tensor<float> via_sat = attacks::inner_max(Method::SAT, student, no_teacher, x, y0, cfg, 13);
  CHECK(via_rslad.v == via_sat.v);
}

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  cfg.epsilon = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg.epsilon = 0.1;
  cfg.steps = -1;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg.steps = 5;
  cfg.step_size = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
}
