#pragma once
// Luma clips, planar YUV 4:2:0 file I/O and the dataset manifest format.

#include <optional>
#include <string>
#include <vector>

#include "vqe/tensor.hpp"

namespace vqe::codec {

struct Image {
  int w = 0, h = 0;
  std::vector<double> v;  // row-major, values in [0, 255]

  Image() = default;
  Image(int width, int height, double fill = 0.0)
      : w(width), h(height), v(static_cast<size_t>(width) * height, fill) {}

  double& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

struct Clip {
  std::vector<Image> frames;
  int width = 0, height = 0;
  std::optional<int> qp;
  std::optional<int> label;

  int frame_count() const { return static_cast<int>(frames.size()); }
  void validate() const;  // uniform dims, values in range
};

// Reads the luma plane of an 8-bit planar 4:2:0 file; chroma is skipped.
Clip load_yuv(const std::string& path, int width, int height, int frame_count);

// Writes 8-bit planar 4:2:0 with mid-gray chroma; luma is rounded+clamped.
void write_yuv(const Clip& clip, const std::string& path);

struct ManifestEntry {
  std::string raw_path;
  int width = 0, height = 0, frames = 0;
  std::optional<int> qp;
  std::optional<std::string> source_path;  // original of a degraded file
};

std::vector<ManifestEntry> load_manifest(const std::string& path);
void save_manifest(const std::vector<ManifestEntry>& entries,
                   const std::string& path);

Clip load_clip(const ManifestEntry& e, const std::string& base_dir = "");

// Reflect-pads the bottom/right edges until both dims divide `multiple`.
Image reflect_pad_to_multiple(const Image& img, int multiple);

// Conversions between images and [N,1,H,W] tensors; `scale` multiplies pixel
// values on the way in and divides on the way out.
Tensor image_to_tensor(const Image& img, double scale = 1.0);
Tensor images_to_tensor(const std::vector<Image>& imgs, double scale = 1.0);
Image tensor_to_image(const Tensor& t, double scale = 1.0);

}  // namespace vqe::codec
