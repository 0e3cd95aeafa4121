#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "vqe/eval.hpp"
#include "vqe/synthetic.hpp"
#include "vqe/training.hpp"

using namespace vqe;
using namespace vqe::train;
using namespace vqe::testing;

namespace {

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::temp_directory_path() / "vqe_train_test";
  std::filesystem::create_directories(p);
  return p;
}

drl::DrlConfig toy_drl() {
  drl::DrlConfig cfg;
  cfg.stage_channels = {4, 4, 8, 16};
  cfg.residual_blocks_per_stage = 1;
  cfg.working_channels = 8;
  cfg.mlp_hidden = 6;
  cfg.class_count = 3;
  return cfg;
}

net::NetConfig toy_net() {
  net::NetConfig cfg;
  cfg.feat_channels = 8;
  cfg.heads = 2;
  cfg.window = 4;
  cfg.max_stages = 3;
  cfg.fv_dim = 16;
  cfg.qe_reduction = 4;
  return cfg;
}

}  // namespace

TEST_CASE("charbonnier_loss values and oracle") {
  Tensor a = Tensor::full({1, 1, 4, 4}, 7.0);
  CHECK(charbonnier_loss(a, a, 1e-6).item() == doctest::Approx(1e-3).epsilon(1e-12));

  Tensor b = add_scalar(a, 1.0);
  CHECK(charbonnier_loss(a, b, 1e-6).item() ==
        doctest::Approx(std::sqrt(1.0 + 1e-6)).epsilon(1e-12));

  Rng rng(1);
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  Tensor y = Tensor::zeros({1, 1, 4, 4});
  for (auto& v : x.values()) v = rng.uniform(0.0, 255.0);
  for (auto& v : y.values()) v = rng.uniform(0.0, 255.0);
  double ref = 0.0;
  for (int i = 0; i < 16; ++i) {
    double d = x.values()[static_cast<size_t>(i)] - y.values()[static_cast<size_t>(i)];
    ref += std::sqrt(d * d + 1e-6);
  }
  ref /= 16.0;
  CHECK(std::fabs(charbonnier_loss(x, y, 1e-6).item() - ref) < 1e-9);

  CHECK_THROWS_AS(charbonnier_loss(x, Tensor::zeros({1, 1, 4, 3}), 1e-6), ShapeError);
  CHECK_THROWS_AS(charbonnier_loss(x, y, 0.0), ValidationError);
}

TEST_CASE("charbonnier_loss lower bound and smooth gradient") {
  Rng rng(2);
  for (int c = 0; c < 20; ++c) {
    Tensor x = Tensor::zeros({3, 3});
    Tensor y = Tensor::zeros({3, 3});
    for (auto& v : x.values()) v = rng.uniform(-5.0, 5.0);
    for (auto& v : y.values()) v = rng.uniform(-5.0, 5.0);
    CHECK(charbonnier_loss(x, y, 1e-6).item() >= 1e-3);
  }
  Tensor z = Tensor::full({3, 3}, 2.5);
  CHECK(charbonnier_loss(z, z, 1e-6).item() == doctest::Approx(1e-3).epsilon(1e-12));

  Tensor x = Tensor::zeros({2, 3});
  Tensor y = Tensor::zeros({2, 3});
  Rng rng2(3);
  for (auto& v : x.values()) v = rng2.uniform(-1.0, 1.0);
  for (auto& v : y.values()) v = rng2.uniform(-1.0, 1.0);
  CHECK(grad_check([&] { return charbonnier_loss(x, y, 1e-6); }, {x, y}, 200) <
        1e-4);
  // smooth at the minimum as well
  Tensor same = x.detach();
  CHECK(grad_check([&] { return charbonnier_loss(x, same, 1e-6); }, {x}, 201) <
        1e-4);
}

TEST_CASE("augmentation helpers and loss invariance") {
  codec::Image img(4, 4);
  for (int i = 0; i < 16; ++i) img.v[static_cast<size_t>(i)] = i;
  codec::Image h = flip_h(img);
  CHECK(h.at(0, 0) == 3.0);
  codec::Image v = flip_v(img);
  CHECK(v.at(0, 0) == 12.0);
  codec::Image r1 = rot90(img, 1);
  CHECK(r1.at(0, 3) == 0.0);  // top-left goes to top-right on a CW turn
  codec::Image r4 = rot90(img, 4);
  CHECK(r4.v == img.v);

  // identical transforms on both operands leave the pixel-mean loss alone
  codec::Image a = codec::make_synthetic_clip(16, 16, 1, 4).frames[0];
  codec::Image b = codec::make_synthetic_clip(16, 16, 1, 5).frames[0];
  double base = charbonnier_loss(a, b, 1e-6);
  CHECK(charbonnier_loss(flip_h(a), flip_h(b), 1e-6) == doctest::Approx(base).epsilon(1e-12));
  CHECK(charbonnier_loss(rot90(a, 3), rot90(b, 3), 1e-6) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("flip equivariance of a symmetric stencil on interior crops") {
  // a flip-symmetric convolution commutes with flips away from borders, so
  // augmenting (input, target) together leaves the training loss unchanged
  Rng rng(6);
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  double kv[3][3] = {{0.05, 0.1, 0.05}, {0.1, 0.4, 0.1}, {0.05, 0.1, 0.05}};
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) k.data()[y * 3 + x] = kv[y][x];

  codec::Image xi = codec::make_synthetic_clip(16, 16, 1, 7).frames[0];
  codec::Image yi = codec::make_synthetic_clip(16, 16, 1, 8).frames[0];
  auto net = [&](const codec::Image& im) {
    NoGrad ng;
    Tensor t = conv2d(codec::image_to_tensor(im), k, Tensor(), 1, 1, 1);
    return codec::tensor_to_image(t);
  };
  auto interior = [](const codec::Image& im) {
    codec::Image out(im.w - 2, im.h - 2);
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) out.at(y, x) = im.at(y + 1, x + 1);
    return out;
  };
  double plain = charbonnier_loss(interior(net(xi)), interior(yi), 1e-6);
  double flipped =
      charbonnier_loss(interior(net(flip_h(xi))), interior(flip_h(yi)), 1e-6);
  CHECK(std::fabs(plain - flipped) < 1e-5);
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto dir = tmp_dir();
  drl::DrlModel model(toy_drl(), 10);
  nn::Adam opt;
  opt.init(model.params());
  // produce nontrivial optimizer state
  {
    Tensor x = Tensor::full({1, 1, 16, 16}, 0.3);
    for (int i = 0; i < 2; ++i) {
      model.params().zero_grad();
      auto f = model.encode(x);
      sum_all(mul(f.f3, f.f3)).backward();
      opt.step(model.params());
    }
  }
  uint64_t h = model.params().value_hash();
  auto path = (dir / "drl.ckpt").string();
  save_drl_checkpoint(model, &opt, "{\"note\":\"test\"}", path);

  nn::Adam opt2;
  drl::DrlModel back = load_drl_checkpoint(path, &opt2);
  CHECK(back.params().value_hash() == h);
  CHECK(opt2.step_count == opt.step_count);
  REQUIRE(opt2.m.size() == opt.m.size());
  for (size_t i = 0; i < opt.m.size(); ++i) {
    CHECK(opt2.m[i] == opt.m[i]);
    CHECK(opt2.v[i] == opt.v[i]);
  }
}

TEST_CASE("checkpoint rejects tampering, truncation, kind and version drift") {
  auto dir = tmp_dir();
  drl::DrlModel model(toy_drl(), 11);
  auto path = (dir / "guard.ckpt").string();
  save_drl_checkpoint(model, nullptr, "{}", path);

  auto read_all = [&](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
  };
  auto write_all = [&](const std::string& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };
  std::string body = read_all(path);

  // flipped parameter byte breaks the file checksum
  {
    std::string bad = body;
    bad[bad.size() / 2] ^= 0x5a;
    auto p = (dir / "corrupt.ckpt").string();
    write_all(p, bad);
    CHECK_THROWS_AS(read_checkpoint(p), CheckpointError);
  }
  // tampered config with a refreshed checksum trips the config hash
  {
    std::string bad = body;
    size_t cfg_off = 8 + 4 + 8 + 3 + 8;  // magic, version, "drl", length
    bad[cfg_off + 2] ^= 0x01;
    uint64_t sum = fnv1a(bad.data(), bad.size() - 8);
    std::memcpy(bad.data() + bad.size() - 8, &sum, 8);
    auto p = (dir / "cfg_tamper.ckpt").string();
    write_all(p, bad);
    CHECK_THROWS_WITH_AS(read_checkpoint(p),
                         doctest::Contains("config hash"), CheckpointError);
  }
  // version drift with a refreshed checksum
  {
    std::string bad = body;
    uint32_t v = 99;
    std::memcpy(bad.data() + 8, &v, 4);
    uint64_t sum = fnv1a(bad.data(), bad.size() - 8);
    std::memcpy(bad.data() + bad.size() - 8, &sum, 8);
    auto p = (dir / "version.ckpt").string();
    write_all(p, bad);
    CHECK_THROWS_WITH_AS(read_checkpoint(p), doctest::Contains("version"),
                         CheckpointError);
  }
  // truncation
  {
    auto p = (dir / "short.ckpt").string();
    write_all(p, body.substr(0, body.size() / 3));
    CHECK_THROWS_AS(read_checkpoint(p), CheckpointError);
  }
  // a DRL checkpoint is not a network checkpoint
  CHECK_THROWS_WITH_AS(load_net_checkpoint(path), doctest::Contains("expected"),
                       CheckpointError);
}

TEST_CASE("train_blind: freeze, descent, determinism and epoch zero") {
  codec::CodecConfig ccfg;
  std::vector<PairedClip> dataset;
  for (uint64_t s = 0; s < 2; ++s) {
    codec::Clip raw = codec::make_synthetic_clip(48, 48, 3, 300 + s);
    dataset.push_back({codec::degrade_clip(raw, 37, ccfg), raw});
  }

  drl::DrlModel drl_model(toy_drl(), 20);
  uint64_t drl_hash = drl_model.params().value_hash();

  TrainConfig tc;
  tc.patch = 16;
  tc.batch = 2;
  tc.epochs = 0;
  tc.seed = 9;

  net::QecvModel model(toy_net(), 21);
  uint64_t before = model.params().value_hash();
  auto curve0 = train_blind(model, drl_model, dataset, tc);
  CHECK(curve0.empty());
  CHECK(model.params().value_hash() == before);

  // descent check on a systematically correctable degradation: a constant
  // luma offset that the reconstruction head can regress away
  std::vector<PairedClip> offset_set;
  for (uint64_t s = 0; s < 2; ++s) {
    codec::Clip raw = codec::make_synthetic_clip(48, 48, 3, 400 + s);
    codec::Clip shifted = raw;
    for (auto& f : shifted.frames)
      for (auto& v : f.v) v = std::max(0.0, v - 12.0);
    offset_set.push_back({shifted, raw});
  }
  auto eval_loss = [&](const net::QecvModel& m) {
    NoGrad ng;
    double total = 0.0;
    int count = 0;
    for (const auto& pc : offset_set)
      for (int t = 0; t < pc.degraded.frame_count(); ++t) {
        int n = pc.degraded.frame_count();
        Tensor stack = Tensor::zeros({1, 3, 16, 16});
        for (int d = -1; d <= 1; ++d) {
          int idx = std::min(n - 1, std::max(0, t + d));
          for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
              stack.data()[(d + 1) * 256 + y * 16 + x] =
                  pc.degraded.frames[static_cast<size_t>(idx)].at(8 + y, 8 + x) / 255.0;
        }
        codec::Image target_crop(16, 16), raw_crop(16, 16);
        for (int y = 0; y < 16; ++y)
          for (int x = 0; x < 16; ++x) {
            target_crop.at(y, x) = pc.degraded.frames[static_cast<size_t>(t)].at(8 + y, 8 + x);
            raw_crop.at(y, x) = pc.raw.frames[static_cast<size_t>(t)].at(8 + y, 8 + x);
          }
        drl::DegradationRep rep = drl_model.forward(target_crop);
        auto out = m.forward01(stack, rep, rep.level);
        total += charbonnier_loss(mul_scalar(out.enhanced01, 255.0),
                                  codec::image_to_tensor(raw_crop), 1e-6)
                     .item();
        ++count;
      }
    return total / count;
  };
  double init_loss = eval_loss(model);
  tc.epochs = 1;
  tc.steps_per_epoch = 60;
  tc.lr = 1e-3;
  auto curve = train_blind(model, drl_model, offset_set, tc);
  CHECK(curve.size() == 60);
  CHECK(eval_loss(model) < init_loss * 0.7);
  CHECK(drl_model.params().value_hash() == drl_hash);

  // identical seeds give identical weights
  net::QecvModel m1(toy_net(), 22), m2(toy_net(), 22);
  TrainConfig tc2 = tc;
  tc2.steps_per_epoch = 3;
  train_blind(m1, drl_model, dataset, tc2);
  train_blind(m2, drl_model, dataset, tc2);
  CHECK(m1.params().value_hash() == m2.params().value_hash());

  CHECK_THROWS_AS(train_blind(m1, drl_model, {}, tc2), ConfigError);
  std::vector<PairedClip> bad = dataset;
  bad[0].raw.frames.pop_back();
  CHECK_THROWS_AS(train_blind(m1, drl_model, bad, tc2), ShapeError);
}

TEST_CASE("loss curve csv export") {
  auto dir = tmp_dir();
  auto path = (dir / "curve.csv").string();
  write_loss_curve_csv({{0, 0, 1.5}, {0, 1, 1.25}}, path);
  std::ifstream in(path);
  std::string header, l1, l2;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(header == "epoch,step,loss");
  CHECK(l1 == "0,0,1.5");
  CHECK(l2 == "0,1,1.25");
}
