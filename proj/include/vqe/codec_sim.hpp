#pragma once
// Block-DCT quantization codec standing in for QP-controlled compression,
// plus labeled contrastive patch batches sampled from degraded clips.

#include "vqe/clip.hpp"

namespace vqe::codec {

struct CodecConfig {
  int block_size = 8;
  std::vector<int> qp_levels{22, 27, 32, 37, 42};

  int class_count() const { return static_cast<int>(qp_levels.size()); }
  void validate() const;
};

// HEVC-style quantization step, 2^((qp-4)/6); valid for qp in [4, 51].
double qp_to_qstep(int qp);

// Index of the nearest level; exact ties resolve to the higher index.
int nearest_level(int qp, const std::vector<int>& levels);

// Per block: orthonormal DCT, divide by step, round, multiply, inverse DCT,
// clip to [0,255]. Frame dims must be multiples of cfg.block_size.
Image degrade_frame(const Image& frame, int qp, const CodecConfig& cfg);

// Applies degrade_frame to every frame; frames whose dims are not multiples
// of the block size are reflect-padded first and cropped back afterwards.
// The result carries qp and the nearest-level class label.
Clip degrade_clip(const Clip& clip, int qp, const CodecConfig& cfg);

struct PatchBatch {
  int pairs = 0;  // N; the batch holds 2N patches
  int patch = 0;
  std::vector<Image> patches;  // [p0a, p0b, p1a, p1b, ...]
  std::vector<int> labels;     // degradation class per patch
  std::vector<int> positive;   // positive[i] = index of i's positive partner
};

// Samples N distinct (clip, frame) sources and crops two patches from each at
// independent positions. Deterministic in `seed`.
PatchBatch make_patch_batch(const std::vector<Clip>& clips, int n_frames,
                            int patch, uint64_t seed);

}  // namespace vqe::codec
