#include "vqe/codec_sim.hpp"

#include <algorithm>
#include <cmath>

namespace vqe::codec {

void CodecConfig::validate() const {
  if (block_size < 2) throw ConfigError("codec block_size must be >= 2");
  if (qp_levels.empty()) throw ConfigError("codec qp_levels empty");
  for (size_t i = 0; i + 1 < qp_levels.size(); ++i)
    if (qp_levels[i] >= qp_levels[i + 1])
      throw ConfigError("codec qp_levels must be strictly increasing");
  for (int q : qp_levels) qp_to_qstep(q);  // range check
}

double qp_to_qstep(int qp) {
  if (qp < 4 || qp > 51)
    throw ValidationError("qp " + std::to_string(qp) + " outside [4, 51]");
  return std::exp2((qp - 4) / 6.0);
}

int nearest_level(int qp, const std::vector<int>& levels) {
  if (levels.empty()) throw ConfigError("nearest_level: empty level list");
  int best = 0;
  int best_dist = std::abs(qp - levels[0]);
  for (size_t i = 1; i < levels.size(); ++i) {
    int d = std::abs(qp - levels[i]);
    if (d <= best_dist) {  // ties resolve upward
      best_dist = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace {

// Orthonormal DCT-II basis, row u = alpha(u) * cos((2x+1) u pi / (2 bs)).
std::vector<double> dct_basis(int bs) {
  const double pi = 3.14159265358979323846;
  std::vector<double> m(static_cast<size_t>(bs) * bs);
  for (int u = 0; u < bs; ++u) {
    double a = u == 0 ? std::sqrt(1.0 / bs) : std::sqrt(2.0 / bs);
    for (int x = 0; x < bs; ++x)
      m[static_cast<size_t>(u) * bs + x] = a * std::cos((2 * x + 1) * u * pi / (2.0 * bs));
  }
  return m;
}

// c = m * b * m^T for bs x bs blocks.
void block_dct(const std::vector<double>& m, const double* b, double* c, int bs,
               std::vector<double>& tmp) {
  for (int u = 0; u < bs; ++u)
    for (int x = 0; x < bs; ++x) {
      double s = 0.0;
      for (int y = 0; y < bs; ++y) s += m[static_cast<size_t>(u) * bs + y] * b[y * bs + x];
      tmp[static_cast<size_t>(u) * bs + x] = s;
    }
  for (int u = 0; u < bs; ++u)
    for (int v = 0; v < bs; ++v) {
      double s = 0.0;
      for (int x = 0; x < bs; ++x) s += tmp[static_cast<size_t>(u) * bs + x] * m[static_cast<size_t>(v) * bs + x];
      c[u * bs + v] = s;
    }
}

// b = m^T * c * m
void block_idct(const std::vector<double>& m, const double* c, double* b,
                int bs, std::vector<double>& tmp) {
  for (int y = 0; y < bs; ++y)
    for (int v = 0; v < bs; ++v) {
      double s = 0.0;
      for (int u = 0; u < bs; ++u) s += m[static_cast<size_t>(u) * bs + y] * c[u * bs + v];
      tmp[static_cast<size_t>(y) * bs + v] = s;
    }
  for (int y = 0; y < bs; ++y)
    for (int x = 0; x < bs; ++x) {
      double s = 0.0;
      for (int v = 0; v < bs; ++v) s += tmp[static_cast<size_t>(y) * bs + v] * m[static_cast<size_t>(v) * bs + x];
      b[y * bs + x] = s;
    }
}

}  // namespace

Image degrade_frame(const Image& frame, int qp, const CodecConfig& cfg) {
  int bs = cfg.block_size;
  if (frame.w % bs != 0 || frame.h % bs != 0)
    throw ShapeError("degrade_frame: " + std::to_string(frame.w) + "x" +
                     std::to_string(frame.h) + " not a multiple of block size " +
                     std::to_string(bs));
  double qstep = qp_to_qstep(qp);
  std::vector<double> m = dct_basis(bs);
  std::vector<double> blk(static_cast<size_t>(bs) * bs);
  std::vector<double> coef(static_cast<size_t>(bs) * bs);
  std::vector<double> tmp(static_cast<size_t>(bs) * bs);
  Image out(frame.w, frame.h);
  for (int by = 0; by < frame.h; by += bs)
    for (int bx = 0; bx < frame.w; bx += bs) {
      for (int y = 0; y < bs; ++y)
        for (int x = 0; x < bs; ++x) blk[static_cast<size_t>(y) * bs + x] = frame.at(by + y, bx + x);
      block_dct(m, blk.data(), coef.data(), bs, tmp);
      for (double& c : coef) c = std::round(c / qstep) * qstep;
      block_idct(m, coef.data(), blk.data(), bs, tmp);
      for (int y = 0; y < bs; ++y)
        for (int x = 0; x < bs; ++x)
          out.at(by + y, bx + x) =
              std::min(255.0, std::max(0.0, blk[static_cast<size_t>(y) * bs + x]));
    }
  return out;
}

Clip degrade_clip(const Clip& clip, int qp, const CodecConfig& cfg) {
  clip.validate();
  Clip out;
  out.width = clip.width;
  out.height = clip.height;
  out.qp = qp;
  out.label = nearest_level(qp, cfg.qp_levels);
  for (const Image& f : clip.frames) {
    Image padded = reflect_pad_to_multiple(f, cfg.block_size);
    Image deg = degrade_frame(padded, qp, cfg);
    if (deg.w != f.w || deg.h != f.h) {
      Image crop(f.w, f.h);
      for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) crop.at(y, x) = deg.at(y, x);
      out.frames.push_back(std::move(crop));
    } else {
      out.frames.push_back(std::move(deg));
    }
  }
  return out;
}

PatchBatch make_patch_batch(const std::vector<Clip>& clips, int n_frames,
                            int patch, uint64_t seed) {
  if (n_frames < 2)
    throw ConfigError("make_patch_batch: need at least 2 source frames");
  if (patch < 1) throw ConfigError("make_patch_batch: bad patch size");
  std::vector<std::pair<int, int>> sources;  // (clip, frame)
  for (size_t ci = 0; ci < clips.size(); ++ci) {
    const Clip& c = clips[ci];
    if (c.width < patch || c.height < patch)
      throw ConfigError("make_patch_batch: clip " + std::to_string(ci) + " is " +
                        std::to_string(c.width) + "x" + std::to_string(c.height) +
                        ", smaller than patch " + std::to_string(patch));
    if (!c.label && !c.qp)
      throw ConfigError("make_patch_batch: clip " + std::to_string(ci) +
                        " has neither label nor qp");
    for (int fi = 0; fi < c.frame_count(); ++fi)
      sources.emplace_back(static_cast<int>(ci), fi);
  }
  if (static_cast<int>(sources.size()) < n_frames)
    throw ConfigError("make_patch_batch: only " + std::to_string(sources.size()) +
                      " frames available for N=" + std::to_string(n_frames));
  Rng rng(seed);
  // partial Fisher-Yates: first n_frames entries become the sample
  for (int i = 0; i < n_frames; ++i) {
    int j = rng.uniform_int(i, static_cast<int>(sources.size()) - 1);
    std::swap(sources[static_cast<size_t>(i)], sources[static_cast<size_t>(j)]);
  }
  PatchBatch batch;
  batch.pairs = n_frames;
  batch.patch = patch;
  for (int i = 0; i < n_frames; ++i) {
    const Clip& c = clips[static_cast<size_t>(sources[static_cast<size_t>(i)].first)];
    const Image& f = c.frames[static_cast<size_t>(sources[static_cast<size_t>(i)].second)];
    int label = c.label ? *c.label : *c.qp;
    for (int p = 0; p < 2; ++p) {
      int y0 = rng.uniform_int(0, f.h - patch);
      int x0 = rng.uniform_int(0, f.w - patch);
      Image crop(patch, patch);
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) crop.at(y, x) = f.at(y0 + y, x0 + x);
      batch.patches.push_back(std::move(crop));
      batch.labels.push_back(label);
    }
    batch.positive.push_back(2 * i + 1);
    batch.positive.push_back(2 * i);
  }
  return batch;
}

}  // namespace vqe::codec
