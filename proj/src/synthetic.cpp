#include "vqe/synthetic.hpp"

#include <cmath>

namespace vqe::codec {

namespace {

struct Rect {
  double x0, y0, x1, y1, value;
};

struct Wave {
  double fx, fy, phase, amp;
};

}  // namespace

Clip make_synthetic_clip(int width, int height, int frames, uint64_t seed) {
  if (width <= 0 || height <= 0 || frames <= 0)
    throw ValidationError("make_synthetic_clip: non-positive dimensions");
  Rng rng(seed);

  double base = rng.uniform(60.0, 180.0);
  double gx = rng.uniform(-0.6, 0.6), gy = rng.uniform(-0.6, 0.6);

  int n_rects = rng.uniform_int(3, 7);
  std::vector<Rect> rects;
  for (int i = 0; i < n_rects; ++i) {
    double w = rng.uniform(0.1, 0.5) * width;
    double h = rng.uniform(0.1, 0.5) * height;
    double x0 = rng.uniform(-0.2 * width, 1.0 * width);
    double y0 = rng.uniform(-0.2 * height, 1.0 * height);
    rects.push_back({x0, y0, x0 + w, y0 + h, rng.uniform(-70.0, 70.0)});
  }

  std::vector<Wave> waves;
  for (int i = 0; i < 2; ++i)
    waves.push_back({rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9),
                     rng.uniform(0.0, 6.28), rng.uniform(8.0, 26.0)});

  double vx = rng.uniform(-2.0, 2.0), vy = rng.uniform(-2.0, 2.0);
  double noise_sigma = rng.uniform(4.0, 12.0);

  Clip clip;
  clip.width = width;
  clip.height = height;
  for (int t = 0; t < frames; ++t) {
    Image img(width, height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double u = x + vx * t, v = y + vy * t;
        double p = base + gx * u + gy * v;
        for (const Rect& r : rects)
          if (u >= r.x0 && u < r.x1 && v >= r.y0 && v < r.y1) p += r.value;
        for (const Wave& w : waves)
          p += w.amp * std::sin(w.fx * u + w.fy * v + w.phase);
        p += noise_sigma * rng.normal();
        img.at(y, x) = std::min(255.0, std::max(0.0, std::round(p)));
      }
    clip.frames.push_back(std::move(img));
  }
  return clip;
}

}  // namespace vqe::codec
