#pragma once
// Degradation representation encoder. A four-stage residual CNN maps a luma
// frame to a full-resolution degradation tensor, a pooled degradation vector
// and a degradation-level classification, pretrained with a joint
// cross-entropy + InfoNCE objective on labeled patch pairs.

#include "vqe/codec_sim.hpp"
#include "vqe/nn.hpp"

namespace vqe::drl {

struct DrlConfig {
  std::vector<int> stage_channels{64, 64, 128, 256};
  int residual_blocks_per_stage = 2;
  int class_count = 5;
  double tau = 0.07;
  double lambda_nce = 1.0;
  int working_channels = 64;
  int mlp_hidden = 128;

  int fv_dim() const { return stage_channels.back(); }
  int total_downsample() const { return 1 << stage_channels.size(); }
  void validate() const;
  std::string to_json() const;
  static DrlConfig from_json(const std::string& s);
};

struct EncoderFeatures {
  Tensor f0, f1, f2, f3;
};

struct DegradationRep {
  Tensor f_r;     // [1, working_channels, H, W] at frame resolution
  Tensor f_v;     // [1, fv_dim]
  Tensor logits;  // [1, class_count]
  int level = 0;  // argmax of logits, ties toward the lower index
};

class DrlModel {
 public:
  DrlModel(const DrlConfig& cfg, uint64_t seed);

  const DrlConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

  // x [N,1,H,W], H and W divisible by the total downsample factor.
  EncoderFeatures encode(const Tensor& x) const;

  // 1x1-projects the three deepest features to working_channels, bilinearly
  // resizes them to (th, tw), sums and applies a 3x3 convolution.
  Tensor degradation_tensor(const Tensor& f1, const Tensor& f2,
                            const Tensor& f3, int th, int tw) const;

  // Global average pooling of f3: [N,C,h,w] -> [N,C].
  static Tensor degradation_vector(const Tensor& f3);

  Tensor classify(const Tensor& fv) const;  // [N, fv] -> [N, C]

  static int argmax_level(const Tensor& logits, int row = 0);

  // Full representation of one frame (values in [0,255]).
  DegradationRep forward(const codec::Image& frame) const;

  // Degradation vectors and logits for a batch of equal-sized patches.
  std::pair<Tensor, Tensor> forward_patches(const std::vector<codec::Image>& patches) const;

 private:
  struct Stage {
    nn::Conv2d entry;
    std::vector<std::pair<nn::Conv2d, nn::Conv2d>> blocks;
    nn::Conv2d down;
  };

  DrlConfig cfg_;
  nn::ParamRegistry reg_;
  std::vector<Stage> stages_;
  nn::Conv2d proj1_, proj2_, proj3_, fr_out_;
  nn::Linear fc1_, fc2_;
};

// -(1/R) sum_i sum_c onehot[i,c] * log softmax(logits)[i,c]. The label rows
// must be exact one-hot vectors.
Tensor cross_entropy_loss(const Tensor& logits, const Tensor& onehot);

// Temperature-scaled contrastive loss over cosine similarities. For every
// row i the denominator runs over all rows k != i, the positive included.
Tensor info_nce_loss(const Tensor& vectors, const std::vector<int>& positive,
                     double tau);

Tensor drl_total_loss(const Tensor& ce, const Tensor& nce, double lambda);

struct DrlTrainConfig {
  double lr = 1e-4;
  int epochs = 1;
  int pairs_per_batch = 4;  // N single frames, 2N patches per step
  int patch = 32;
  int steps_per_epoch = 0;  // 0 derives one pass over the frame count
  uint64_t seed = 0;
};

struct LossPoint {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

// Joint pretraining on labeled degraded clips; mutates `model` in place and
// returns the loss curve. Deterministic in the config seed.
std::vector<LossPoint> pretrain_drl(DrlModel& model,
                                    const std::vector<codec::Clip>& clips,
                                    const DrlTrainConfig& tc);

}  // namespace vqe::drl
