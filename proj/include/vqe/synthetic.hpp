#pragma once
// Seeded synthetic test-content generator: textured moving scenes whose
// appearance changes measurably under block-DCT quantization.

#include "vqe/clip.hpp"

namespace vqe::codec {

Clip make_synthetic_clip(int width, int height, int frames, uint64_t seed);

}  // namespace vqe::codec
