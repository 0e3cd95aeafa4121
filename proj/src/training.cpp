#include "vqe/training.hpp"

#include <cmath>
#include <fstream>

namespace vqe::train {

Tensor charbonnier_loss(const Tensor& a, const Tensor& b, double eps) {
  if (eps <= 0.0) throw ValidationError("charbonnier_loss: eps must be positive");
  if (a.shape() != b.shape())
    throw ShapeError("charbonnier_loss: shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor d = sub(a, b);
  return mean_all(sqrt_elem(add_scalar(mul(d, d), eps)));
}

double charbonnier_loss(const codec::Image& a, const codec::Image& b, double eps) {
  NoGrad ng;
  return charbonnier_loss(codec::image_to_tensor(a), codec::image_to_tensor(b), eps)
      .item();
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("train: lr must be positive");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (patch < 16 || patch % 16 != 0)
    throw ConfigError("train: patch must be a positive multiple of 16");
  if (epsilon <= 0.0) throw ConfigError("train: epsilon must be positive");
  if (epochs < 0) throw ConfigError("train: negative epochs");
}

codec::Image flip_h(const codec::Image& img) {
  codec::Image out(img.w, img.h);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) out.at(y, x) = img.at(y, img.w - 1 - x);
  return out;
}

codec::Image flip_v(const codec::Image& img) {
  codec::Image out(img.w, img.h);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) out.at(y, x) = img.at(img.h - 1 - y, x);
  return out;
}

codec::Image rot90(const codec::Image& img, int quarter_turns) {
  int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  if (img.w != img.h)
    throw ShapeError("rot90: rotation augmentation expects square crops");
  codec::Image out(img.w, img.h);
  int n = img.w;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double v = img.at(y, x);
      if (k == 1)
        out.at(x, n - 1 - y) = v;
      else if (k == 2)
        out.at(n - 1 - y, n - 1 - x) = v;
      else
        out.at(n - 1 - x, y) = v;
    }
  return out;
}

namespace {

codec::Image crop_of(const codec::Image& img, int y0, int x0, int size) {
  codec::Image out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out.at(y, x) = img.at(y0 + y, x0 + x);
  return out;
}

struct Augment {
  bool hflip = false, vflip = false;
  int rot = 0;

  codec::Image apply(const codec::Image& img) const {
    codec::Image out = img;
    if (hflip) out = flip_h(out);
    if (vflip) out = flip_v(out);
    if (rot) out = rot90(out, rot);
    return out;
  }
};

}  // namespace

std::vector<drl::LossPoint> train_blind(net::QecvModel& model,
                                        const drl::DrlModel& drl_model,
                                        const std::vector<PairedClip>& dataset,
                                        const TrainConfig& cfg) {
  cfg.validate();
  net::check_compat(drl_model.config(), model.config());
  if (dataset.empty()) throw ConfigError("train_blind: empty dataset");
  int total_frames = 0;
  for (const auto& pc : dataset) {
    if (pc.degraded.width != pc.raw.width || pc.degraded.height != pc.raw.height ||
        pc.degraded.frame_count() != pc.raw.frame_count())
      throw ShapeError("train_blind: degraded/raw geometry mismatch");
    if (pc.degraded.width < cfg.patch || pc.degraded.height < cfg.patch)
      throw ConfigError("train_blind: clip smaller than the training patch");
    total_frames += pc.degraded.frame_count();
  }

  uint64_t drl_hash_before = drl_model.params().value_hash();

  int radius = model.config().radius;
  int frames_per_window = model.config().frames();
  int steps = cfg.steps_per_epoch > 0
                  ? cfg.steps_per_epoch
                  : std::max(1, total_frames / std::max(1, cfg.batch));

  nn::Adam opt;
  opt.lr = cfg.lr;
  opt.init(model.params());

  std::vector<drl::LossPoint> curve;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int step = 0; step < steps; ++step) {
      Rng rng(Rng::mix(cfg.seed, (static_cast<uint64_t>(epoch) << 40) |
                                     (static_cast<uint64_t>(step) << 8)));
      model.params().zero_grad();
      double step_loss = 0.0;
      for (int s = 0; s < cfg.batch; ++s) {
        const PairedClip& pc =
            dataset[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(dataset.size()) - 1))];
        int n = pc.degraded.frame_count();
        int t = rng.uniform_int(0, n - 1);
        int y0 = rng.uniform_int(0, pc.degraded.height - cfg.patch);
        int x0 = rng.uniform_int(0, pc.degraded.width - cfg.patch);
        Augment aug;
        if (cfg.augment) {
          aug.hflip = rng.uniform_int(0, 1) != 0;
          aug.vflip = rng.uniform_int(0, 1) != 0;
          aug.rot = rng.uniform_int(0, 3);
        }

        std::vector<codec::Image> window;
        for (int d = -radius; d <= radius; ++d) {
          int idx = std::min(n - 1, std::max(0, t + d));
          window.push_back(aug.apply(
              crop_of(pc.degraded.frames[static_cast<size_t>(idx)], y0, x0, cfg.patch)));
        }
        codec::Image target_raw =
            aug.apply(crop_of(pc.raw.frames[static_cast<size_t>(t)], y0, x0, cfg.patch));

        drl::DegradationRep rep;
        {
          NoGrad ng;
          rep = drl_model.forward(window[static_cast<size_t>(radius)]);
        }

        Tensor stack = Tensor::zeros({1, frames_per_window, cfg.patch, cfg.patch});
        int64_t hw = static_cast<int64_t>(cfg.patch) * cfg.patch;
        for (int f = 0; f < frames_per_window; ++f)
          for (int64_t i = 0; i < hw; ++i)
            stack.data()[f * hw + i] = window[static_cast<size_t>(f)].v[static_cast<size_t>(i)] / 255.0;

        net::QecvModel::ForwardOut out = model.forward01(stack, rep, rep.level);
        Tensor raw255 = codec::image_to_tensor(target_raw);
        Tensor loss =
            charbonnier_loss(mul_scalar(out.enhanced01, 255.0), raw255, cfg.epsilon);
        step_loss += loss.item();
        mul_scalar(loss, 1.0 / cfg.batch).backward();
      }
      opt.step(model.params());
      curve.push_back({epoch, step, step_loss / cfg.batch});
    }
  }

  if (drl_model.params().value_hash() != drl_hash_before)
    throw Error("train_blind: frozen DRL parameters changed during training");
  return curve;
}

void write_loss_curve_csv(const std::vector<drl::LossPoint>& curve,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_loss_curve_csv: cannot open " + path);
  out << "epoch,step,loss\n";
  for (const auto& p : curve)
    out << p.epoch << "," << p.step << "," << p.loss << "\n";
}

}  // namespace vqe::train
