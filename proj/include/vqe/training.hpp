#pragma once
// Optimization loop for the enhancement network with a frozen degradation
// encoder, plus the Charbonnier objective and patch augmentation.

#include "vqe/checkpoint.hpp"

namespace vqe::train {

// mean over pixels of sqrt((a-b)^2 + eps)
Tensor charbonnier_loss(const Tensor& a, const Tensor& b, double eps);
double charbonnier_loss(const codec::Image& a, const codec::Image& b, double eps);

struct TrainConfig {
  double lr = 1e-4;
  int batch = 4;   // samples accumulated per optimizer step
  int patch = 48;  // square crop side, divisible by 16
  double epsilon = 1e-6;
  int epochs = 1;
  uint64_t seed = 0;
  bool augment = true;  // flips plus 90-degree rotations
  int steps_per_epoch = 0;  // 0 derives one pass over the target frames

  void validate() const;
};

struct PairedClip {
  codec::Clip degraded;
  codec::Clip raw;
};

// dihedral augmentation helpers (square images)
codec::Image flip_h(const codec::Image& img);
codec::Image flip_v(const codec::Image& img);
codec::Image rot90(const codec::Image& img, int quarter_turns);

// Minimizes the Charbonnier loss of enhanced patches against raw targets.
// DRL parameters receive no updates; their byte hash is verified before and
// after the run. Deterministic in cfg.seed (single-threaded).
std::vector<drl::LossPoint> train_blind(net::QecvModel& model,
                                        const drl::DrlModel& drl_model,
                                        const std::vector<PairedClip>& dataset,
                                        const TrainConfig& cfg);

void write_loss_curve_csv(const std::vector<drl::LossPoint>& curve,
                          const std::string& path);

}  // namespace vqe::train
