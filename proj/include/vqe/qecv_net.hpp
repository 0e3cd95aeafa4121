#pragma once
// Blind enhancement network. A deformable coarse-alignment front end fuses
// the 2r+1 input frames; a chain of artifact-reduction stages (degradation
// modulation followed by dual windowed-attention / dilated-convolution
// fusion) runs until the predicted degradation level terminates it; a
// two-scale channel-attention head reconstructs the residual.

#include <optional>
#include <utility>

#include "vqe/drl.hpp"

namespace vqe::net {

struct NetConfig {
  int radius = 1;  // inputs are 2*radius+1 frames
  int feat_channels = 64;
  int max_stages = 5;
  int window = 4;
  int heads = 4;
  int attn_depth = 2;
  std::vector<int> dilations{1, 2, 4};
  int deform_points = 9;
  int fv_dim = 256;
  int ff_expand = 2;
  int qe_reduction = 4;
  bool share_stage_weights = false;

  int frames() const { return 2 * radius + 1; }
  void validate() const;
  std::string to_json() const;
  static NetConfig from_json(const std::string& s);
};

// Checks that DRL outputs plug into the network: channel widths, vector
// length and class count versus stage count.
void check_compat(const drl::DrlConfig& dcfg, const NetConfig& ncfg);

struct StageTrace {
  int level = 0;
  int executed_stages = 0;
  std::vector<double> per_stage_cost;  // analytic MACs per executed stage
  double wall_time = 0.0;              // seconds for the whole enhancement
  std::optional<int> qp;               // source context when known
  int frame_index = 0;
};

// Analytic multiply-accumulate counts derived from tensor shapes; wall-time
// independent, so compute-scaling properties are machine checkable.
struct CostModel {
  static double stage_macs(const NetConfig& cfg, int h, int w);
  static double coarse_align_macs(const NetConfig& cfg, int h, int w);
  static double qe_macs(const NetConfig& cfg, int h, int w);
};

class QecvModel {
 public:
  QecvModel(const NetConfig& cfg, uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

  // [N,fv] -> [N,C], logistic-squashed channel gate in (0,1).
  Tensor project_gate(const Tensor& fv) const;

  // frames [N, 2r+1, H, W] -> initial spatio-temporal feature [N,C,H,W].
  Tensor coarse_align(const Tensor& frames) const;

  // f_a = f_prev + ((Conv3x3(f_prev) + f_r) *channel gate)
  Tensor stda(int stage, const Tensor& f_prev, const Tensor& f_r,
              const Tensor& gate) const;

  Tensor dglf_global(int stage, const Tensor& f_a) const;
  Tensor dglf_local(int stage, const Tensor& f_a) const;
  Tensor dglf(int stage, const Tensor& f_a) const;

  // Executes stages 0..level; stages past the level are never evaluated.
  std::pair<Tensor, StageTrace> htar(const Tensor& f0, const Tensor& f_r,
                                     const Tensor& gate, int level) const;

  // Reference path: unconditional execution of all stages.
  Tensor run_all_stages(const Tensor& f0, const Tensor& f_r,
                        const Tensor& gate) const;

  // Two-scale channel-attention head; x01 is the target frame in [0,1].
  // Returns clamp(x01 + residual, 0, 1).
  Tensor quality_enhance(const Tensor& f_final, const Tensor& x01) const;

  struct ForwardOut {
    Tensor enhanced01;
    StageTrace trace;
  };
  // frames01 [1, 2r+1, H, W] in [0,1]; H, W divisible by 16.
  ForwardOut forward01(const Tensor& frames01, const drl::DegradationRep& rep,
                       int level) const;

 private:
  struct AttnBlock {
    nn::LayerNorm ln1, ln2;
    nn::Linear qkv, proj, ff1, ff2;
    Tensor rel_bias;  // [heads, (2w-1)^2]
    bool shifted = false;
  };
  struct StageBlocks {
    nn::Conv2d stda_conv;
    std::vector<AttnBlock> attn;
    std::vector<nn::Conv2d> dil;
    nn::Conv2d local_out;
  };

  Tensor attn_forward(const AttnBlock& blk, const Tensor& x) const;
  const StageBlocks& stage(int i) const {
    return blocks_[cfg_.share_stage_weights ? 0 : static_cast<size_t>(i)];
  }

  NetConfig cfg_;
  nn::ParamRegistry reg_;
  nn::Conv2d off1_, off2_, tgt_, fuse_;
  Tensor align_w_, align_b_;
  nn::Linear gate_;
  std::vector<StageBlocks> blocks_;
  nn::Conv2d qe_full_, qe_half_, qe_fuse_, qe_out_;
  nn::Linear qe_fc1_full_, qe_fc2_full_, qe_fc1_half_, qe_fc2_half_;
};

// Single-frame enhancement with a frozen DRL model. The frame window must
// hold exactly 2r+1 equally sized frames; non-divisible sizes are
// reflect-padded internally and cropped back.
std::pair<codec::Image, StageTrace> enhance_frame(
    const std::vector<codec::Image>& frames, const drl::DrlModel& drl_model,
    const QecvModel& net, std::optional<int> override_level = {});

// Enhances every frame of a clip; the temporal window clamps at clip ends.
std::pair<codec::Clip, std::vector<StageTrace>> enhance_clip(
    const codec::Clip& degraded, const drl::DrlModel& drl_model,
    const QecvModel& net, std::optional<int> override_level = {});

// StageTrace JSON-lines serialization (one record per line).
std::string trace_to_jsonl(const StageTrace& t);
StageTrace trace_from_jsonl(const std::string& line);

}  // namespace vqe::net
