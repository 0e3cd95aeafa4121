#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "vqe/drl.hpp"
#include "vqe/synthetic.hpp"

using namespace vqe;
using namespace vqe::drl;
using namespace vqe::testing;

namespace {

DrlConfig toy_config() {
  DrlConfig cfg;
  cfg.stage_channels = {4, 4, 8, 16};
  cfg.residual_blocks_per_stage = 1;
  cfg.working_channels = 4;
  cfg.mlp_hidden = 6;
  cfg.class_count = 5;
  return cfg;
}

// independent scalar-loop references
double ce_ref(const std::vector<double>& logits, const std::vector<int>& labels,
              int r, int c) {
  double total = 0.0;
  for (int i = 0; i < r; ++i) {
    double mx = logits[static_cast<size_t>(i) * c];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits[static_cast<size_t>(i) * c + j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(logits[static_cast<size_t>(i) * c + j] - mx);
    double lp = logits[static_cast<size_t>(i) * c + labels[static_cast<size_t>(i)]] - mx - std::log(z);
    total -= lp;
  }
  return total / r;
}

double nce_ref(const std::vector<double>& vec, const std::vector<int>& pos,
               int r, int d, double tau) {
  auto cosine = [&](int i, int j) {
    double dot = 0.0, ni = 0.0, nj = 0.0;
    for (int k = 0; k < d; ++k) {
      dot += vec[static_cast<size_t>(i) * d + k] * vec[static_cast<size_t>(j) * d + k];
      ni += vec[static_cast<size_t>(i) * d + k] * vec[static_cast<size_t>(i) * d + k];
      nj += vec[static_cast<size_t>(j) * d + k] * vec[static_cast<size_t>(j) * d + k];
    }
    return dot / (std::sqrt(ni) * std::sqrt(nj));
  };
  double total = 0.0;
  for (int i = 0; i < r; ++i) {
    double num = std::exp(cosine(i, pos[static_cast<size_t>(i)]) / tau);
    double den = 0.0;
    for (int k = 0; k < r; ++k)
      if (k != i) den += std::exp(cosine(i, k) / tau);
    total -= std::log(num / den);
  }
  return total / r;
}

}  // namespace

TEST_CASE("encode produces the documented feature pyramid") {
  DrlConfig cfg;  // paper-scale dims
  DrlModel model(cfg, 1);
  Tensor x = Tensor::zeros({1, 1, 64, 64});
  Rng rng(2);
  for (auto& v : x.values()) v = rng.uniform(0.0, 1.0);
  EncoderFeatures f = model.encode(x);
  CHECK(f.f0.shape() == Shape{1, 64, 32, 32});
  CHECK(f.f1.shape() == Shape{1, 64, 16, 16});
  CHECK(f.f2.shape() == Shape{1, 128, 8, 8});
  CHECK(f.f3.shape() == Shape{1, 256, 4, 4});

  EncoderFeatures g = model.encode(x);
  CHECK(f.f3.values() == g.f3.values());

  CHECK_THROWS_AS(model.encode(Tensor::zeros({1, 1, 60, 64})), ShapeError);
}

TEST_CASE("zeroed encoder maps everything to zero") {
  DrlModel model(toy_config(), 3);
  for (const auto& [name, t] : model.params().entries()) {
    Tensor p = t;
    for (auto& v : p.values()) v = 0.0;
  }
  Tensor x = Tensor::full({2, 1, 32, 32}, 0.5);
  EncoderFeatures f = model.encode(x);
  for (double v : f.f0.values()) CHECK(v == 0.0);
  for (double v : f.f3.values()) CHECK(v == 0.0);
}

TEST_CASE("degradation_tensor: shape, zero case and bilinear oracle") {
  DrlModel model(toy_config(), 4);
  Tensor f1 = Tensor::zeros({1, 4, 3, 3});
  Tensor f2 = Tensor::zeros({1, 8, 2, 2});
  Tensor f3 = Tensor::zeros({1, 16, 1, 1});

  // zero features and a zeroed output bias give a zero tensor
  model.params().find("fr.out.b").values().assign(4, 0.0);
  Tensor fr0 = model.degradation_tensor(f1, f2, f3, 12, 12);
  CHECK(fr0.shape() == Shape{1, 4, 12, 12});
  for (double v : fr0.values()) CHECK(v == 0.0);

  // identity projection of a single active feature reduces to the bilinear
  // resize of that feature pushed through the output convolution
  Rng rng(5);
  for (auto& v : f1.values()) v = rng.uniform(-1.0, 1.0);
  Tensor pw = model.params().find("fr.proj1.w");
  pw.values().assign(static_cast<size_t>(pw.numel()), 0.0);
  for (int o = 0; o < 4; ++o) pw.data()[o * 4 + o] = 1.0;

  Tensor fr = model.degradation_tensor(f1, f2, f3, 12, 12);

  std::vector<double> up(static_cast<size_t>(4) * 12 * 12);
  for (int c = 0; c < 4; ++c) {
    std::vector<double> plane(f1.data() + c * 9, f1.data() + (c + 1) * 9);
    auto r = bilinear_resize_ref(plane, 3, 3, 12, 12);
    std::copy(r.begin(), r.end(), up.begin() + static_cast<int64_t>(c) * 144);
  }
  Tensor wout = model.params().find("fr.out.w");
  auto ref = conv2d_ref(up, 1, 4, 12, 12, wout.values(), 4, 3, 3,
                        std::vector<double>(4, 0.0), 1, 1, 1);
  CHECK(max_abs_diff(fr.values(), ref) < 1e-6);
}

TEST_CASE("degradation_vector pools to a fixed-length vector") {
  // constant features pool to the constant, for any spatial size
  for (int s : {4, 8}) {
    Tensor f3 = Tensor::zeros({1, 16, s, s});
    for (int c = 0; c < 16; ++c)
      for (int i = 0; i < s * s; ++i) f3.data()[c * s * s + i] = 0.25 * c;
    Tensor fv = DrlModel::degradation_vector(f3);
    CHECK(fv.shape() == Shape{1, 16});
    for (int c = 0; c < 16; ++c)
      CHECK(fv.data()[c] == doctest::Approx(0.25 * c).epsilon(1e-12));
  }

  Rng rng(6);
  Tensor f3 = Tensor::zeros({2, 16, 4, 4});
  for (auto& v : f3.values()) v = rng.uniform(-2.0, 2.0);
  Tensor fv = DrlModel::degradation_vector(f3);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 16; ++c) {
      double s = 0.0;
      for (int i = 0; i < 16; ++i) s += f3.data()[(n * 16 + c) * 16 + i];
      CHECK(std::fabs(fv.data()[n * 16 + c] - s / 16.0) < 1e-7);
    }
}

TEST_CASE("classify: zero weights, size invariance, matmul oracle") {
  DrlConfig cfg = toy_config();
  DrlModel model(cfg, 7);

  {
    DrlModel zeroed(cfg, 8);
    for (const auto& [name, t] : zeroed.params().entries()) {
      Tensor p = t;
      for (auto& v : p.values()) v = 0.0;
    }
    Tensor fv = Tensor::full({1, 16}, 0.3);
    Tensor logits = zeroed.classify(fv);
    for (double v : logits.values()) CHECK(v == 0.0);
    CHECK(DrlModel::argmax_level(logits) == 0);
  }

  // spatial size of constant features does not reach the logits
  Tensor a = Tensor::full({1, 16, 4, 4}, 0.7);
  Tensor b = Tensor::full({1, 16, 8, 8}, 0.7);
  Tensor la = model.classify(DrlModel::degradation_vector(a));
  Tensor lb = model.classify(DrlModel::degradation_vector(b));
  CHECK(max_abs_diff(la.values(), lb.values()) < 1e-12);

  // explicit two-layer perceptron reference
  Rng rng(9);
  Tensor fv = Tensor::zeros({3, 16});
  for (auto& v : fv.values()) v = rng.uniform(-1.0, 1.0);
  Tensor logits = model.classify(fv);
  const auto& w1 = model.params().find("cls.fc1.w").values();
  const auto& b1 = model.params().find("cls.fc1.b").values();
  const auto& w2 = model.params().find("cls.fc2.w").values();
  const auto& b2 = model.params().find("cls.fc2.b").values();
  for (int n = 0; n < 3; ++n)
    for (int o = 0; o < cfg.class_count; ++o) {
      double s2 = b2[static_cast<size_t>(o)];
      for (int h = 0; h < cfg.mlp_hidden; ++h) {
        double s1 = b1[static_cast<size_t>(h)];
        for (int i = 0; i < 16; ++i)
          s1 += fv.data()[n * 16 + i] * w1[static_cast<size_t>(i) * cfg.mlp_hidden + h];
        s2 += std::max(0.0, s1) * w2[static_cast<size_t>(h) * cfg.class_count + o];
      }
      CHECK(std::fabs(logits.data()[n * cfg.class_count + o] - s2) < 1e-6);
    }
}

TEST_CASE("argmax level is stable under constant shifts") {
  Tensor logits = Tensor::from_data({1, 5}, {0.4, 1.2, 1.2, -3.0, 0.9});
  CHECK(DrlModel::argmax_level(logits) == 1);  // tie resolves low
  Tensor shifted = add_scalar(logits, 17.5);
  CHECK(DrlModel::argmax_level(shifted) == DrlModel::argmax_level(logits));
}

TEST_CASE("cross_entropy_loss values, oracle and gradient") {
  // confidently correct prediction costs nothing
  Tensor sure = Tensor::from_data({2, 3}, {1000.0, 0.0, 0.0, 0.0, 1000.0, 0.0});
  Tensor oh = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
  CHECK(cross_entropy_loss(sure, oh).item() == 0.0);

  // uniform probabilities over 5 classes
  Tensor flat = Tensor::zeros({4, 5});
  Tensor oh5 = Tensor::zeros({4, 5});
  for (int i = 0; i < 4; ++i) oh5.data()[i * 5 + i] = 1.0;
  CHECK(cross_entropy_loss(flat, oh5).item() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // scalar-loop oracle on a random batch of 8
  Rng rng(10);
  Tensor logits = Tensor::zeros({8, 5});
  for (auto& v : logits.values()) v = rng.uniform(-3.0, 3.0);
  std::vector<int> labels;
  Tensor oh8 = Tensor::zeros({8, 5});
  for (int i = 0; i < 8; ++i) {
    labels.push_back(rng.uniform_int(0, 4));
    oh8.data()[i * 5 + labels.back()] = 1.0;
  }
  double ref = ce_ref(logits.values(), labels, 8, 5);
  CHECK(std::fabs(cross_entropy_loss(logits, oh8).item() - ref) < 1e-7);

  CHECK(grad_check([&] { return cross_entropy_loss(logits, oh8); }, {logits},
                   100) < 1e-5);

  Tensor bad = Tensor::from_data({1, 3}, {0.5, 0.5, 0.0});
  CHECK_THROWS_AS(cross_entropy_loss(Tensor::zeros({1, 3}), bad),
                  ValidationError);
  Tensor two = Tensor::from_data({1, 3}, {1.0, 1.0, 0.0});
  CHECK_THROWS_AS(cross_entropy_loss(Tensor::zeros({1, 3}), two),
                  ValidationError);
}

TEST_CASE("info_nce_loss values, oracle, gradient and invariants") {
  std::vector<int> pos4{1, 0, 3, 2};

  // identical vectors: every similarity equal, loss is ln(2N-1) exactly
  Tensor same = Tensor::zeros({4, 8});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j) same.data()[i * 8 + j] = 0.3 * (j + 1);
  CHECK(std::fabs(info_nce_loss(same, pos4, 0.07).item() - std::log(3.0)) <
        1e-9);

  // enormous temperature flattens any batch to ln(2N-1)
  Rng rng(11);
  Tensor batch = Tensor::zeros({6, 8});
  for (auto& v : batch.values()) v = rng.uniform(-1.0, 1.0);
  std::vector<int> pos6{1, 0, 3, 2, 5, 4};
  CHECK(std::fabs(info_nce_loss(batch, pos6, 1e9).item() - std::log(5.0)) <
        1e-6);

  // scalar-loop oracle at tau = 0.07
  double ref = nce_ref(batch.values(), pos6, 6, 8, 0.07);
  CHECK(std::fabs(info_nce_loss(batch, pos6, 0.07).item() - ref) < 1e-6);

  CHECK(grad_check([&] { return info_nce_loss(batch, pos6, 0.07); }, {batch},
                   101) < 1e-5);

  // cosine similarity ignores a common positive scale
  Tensor scaled = mul_scalar(batch, 3.7).detach();
  CHECK(std::fabs(info_nce_loss(batch, pos6, 0.07).item() -
                  info_nce_loss(scaled, pos6, 0.07).item()) < 1e-12);

  // non-negative whenever the positive is the most similar sample
  for (uint64_t seed : {20ull, 21ull, 22ull}) {
    Rng r2(seed);
    Tensor v = Tensor::zeros({6, 32});
    for (int p = 0; p < 3; ++p) {
      std::vector<double> base(32);
      for (auto& x : base) x = r2.uniform(-1.0, 1.0);
      for (int rep = 0; rep < 2; ++rep)
        for (int j = 0; j < 32; ++j)
          v.data()[(2 * p + rep) * 32 + j] = base[static_cast<size_t>(j)] + 0.01 * r2.uniform(-1.0, 1.0);
    }
    CHECK(info_nce_loss(v, pos6, 0.07).item() >= 0.0);
  }

  CHECK_THROWS_AS(info_nce_loss(Tensor::zeros({4, 8}), pos4, 0.07),
                  ValidationError);  // zero-norm rows
  Tensor ok = same;
  CHECK_THROWS_AS(info_nce_loss(ok, {0, 0, 3, 2}, 0.07), ValidationError);
  CHECK_THROWS_AS(info_nce_loss(ok, pos4, -1.0), ValidationError);
  CHECK_THROWS_AS(info_nce_loss(Tensor::full({2, 4}, 1.0), {1, 0}, 0.07),
                  ValidationError);  // batch too small
}

TEST_CASE("drl_total_loss combines the two terms") {
  Tensor a = Tensor::from_data({1}, {0.0});
  Tensor b = Tensor::from_data({1}, {0.0});
  CHECK(drl_total_loss(a, b, 3.0).item() == 0.0);
  Tensor c = Tensor::from_data({1}, {1.0});
  Tensor d = Tensor::from_data({1}, {2.0});
  CHECK(drl_total_loss(c, d, 1.0).item() == 3.0);
  CHECK(drl_total_loss(c, d, 0.0).item() == 1.0);

  Tensor inf = Tensor::from_data({1}, {std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(drl_total_loss(c, inf, 1.0), ValidationError);
}

TEST_CASE("combined drl loss passes the finite-difference check") {
  Rng rng(12);
  Tensor logits = Tensor::zeros({4, 5});
  for (auto& v : logits.values()) v = rng.uniform(-1.0, 1.0);
  Tensor oh = Tensor::zeros({4, 5});
  for (int i = 0; i < 4; ++i) oh.data()[i * 5 + (i % 5)] = 1.0;
  Tensor vec = Tensor::zeros({4, 6});
  for (auto& v : vec.values()) v = rng.uniform(0.2, 1.0);
  std::vector<int> pos{1, 0, 3, 2};
  auto fn = [&] {
    return drl_total_loss(cross_entropy_loss(logits, oh),
                          info_nce_loss(vec, pos, 0.5), 0.7);
  };
  CHECK(grad_check(fn, {logits, vec}, 102) < 1e-5);
}

TEST_CASE("pretrain_drl: epoch-zero identity, descent, determinism") {
  codec::CodecConfig ccfg;
  std::vector<codec::Clip> clips;
  for (int content = 0; content < 2; ++content) {
    codec::Clip raw = codec::make_synthetic_clip(48, 48, 2, 200 + static_cast<uint64_t>(content));
    for (size_t l = 0; l < ccfg.qp_levels.size(); ++l)
      clips.push_back(codec::degrade_clip(raw, ccfg.qp_levels[l], ccfg));
  }

  DrlConfig cfg = toy_config();
  DrlTrainConfig tc;
  tc.epochs = 0;
  tc.patch = 16;
  tc.pairs_per_batch = 3;
  tc.seed = 5;

  DrlModel model(cfg, 40);
  uint64_t before = model.params().value_hash();
  auto curve = pretrain_drl(model, clips, tc);
  CHECK(curve.empty());
  CHECK(model.params().value_hash() == before);

  // fixed evaluation batch; training one epoch must reduce its loss
  codec::PatchBatch eval = make_patch_batch(clips, 4, 16, 999);
  auto eval_loss = [&](const DrlModel& m) {
    NoGrad ng;
    auto [fv, logits] = m.forward_patches(eval.patches);
    Tensor oh = Tensor::zeros({8, cfg.class_count});
    for (int i = 0; i < 8; ++i)
      oh.data()[i * cfg.class_count + eval.labels[static_cast<size_t>(i)]] = 1.0;
    return drl_total_loss(cross_entropy_loss(logits, oh),
                          info_nce_loss(fv, eval.positive, cfg.tau),
                          cfg.lambda_nce)
        .item();
  };
  double init_loss = eval_loss(model);
  tc.epochs = 1;
  tc.steps_per_epoch = 40;
  tc.lr = 1e-3;
  pretrain_drl(model, clips, tc);
  CHECK(eval_loss(model) <= init_loss);

  // bitwise repeatability from equal seeds
  DrlModel m1(cfg, 40), m2(cfg, 40);
  DrlTrainConfig tc2 = tc;
  tc2.steps_per_epoch = 4;
  pretrain_drl(m1, clips, tc2);
  pretrain_drl(m2, clips, tc2);
  CHECK(m1.params().value_hash() == m2.params().value_hash());

  CHECK_THROWS_AS(pretrain_drl(m1, {}, tc2), ConfigError);
}
