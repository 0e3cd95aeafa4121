#include "vqe/clip.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace vqe::codec {

void Clip::validate() const {
  for (const Image& f : frames) {
    if (f.w != width || f.h != height)
      throw ShapeError("clip frame size " + std::to_string(f.w) + "x" +
                       std::to_string(f.h) + " differs from clip " +
                       std::to_string(width) + "x" + std::to_string(height));
    for (double p : f.v)
      if (!(p >= 0.0 && p <= 255.0))
        throw ValidationError("clip pixel out of [0,255]: " + std::to_string(p));
  }
}

namespace {

int64_t frame_bytes(int w, int h) {
  int64_t luma = static_cast<int64_t>(w) * h;
  int64_t chroma = 2ll * ((w + 1) / 2) * ((h + 1) / 2);
  return luma + chroma;
}

}  // namespace

Clip load_yuv(const std::string& path, int width, int height, int frame_count) {
  if (width <= 0 || height <= 0 || frame_count <= 0)
    throw ValidationError("load_yuv: non-positive dimensions");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_yuv: cannot open " + path);
  in.seekg(0, std::ios::end);
  int64_t size = in.tellg();
  in.seekg(0, std::ios::beg);
  int64_t fb = frame_bytes(width, height);
  int64_t needed = fb * frame_count;
  if (size < needed)
    throw IoError("load_yuv: " + path + " holds " + std::to_string(size) +
                  " bytes, expected at least " + std::to_string(needed) +
                  " for " + std::to_string(frame_count) + " frames of " +
                  std::to_string(width) + "x" + std::to_string(height));
  Clip clip;
  clip.width = width;
  clip.height = height;
  std::vector<unsigned char> buf(static_cast<size_t>(width) * height);
  int64_t chroma = fb - static_cast<int64_t>(width) * height;
  for (int f = 0; f < frame_count; ++f) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IoError("load_yuv: short read in " + path);
    Image img(width, height);
    for (size_t i = 0; i < buf.size(); ++i) img.v[i] = static_cast<double>(buf[i]);
    clip.frames.push_back(std::move(img));
    in.seekg(chroma, std::ios::cur);
  }
  return clip;
}

void write_yuv(const Clip& clip, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_yuv: cannot open " + path);
  int w = clip.width, h = clip.height;
  std::vector<unsigned char> luma(static_cast<size_t>(w) * h);
  std::vector<unsigned char> chroma(
      static_cast<size_t>(2) * ((w + 1) / 2) * ((h + 1) / 2), 128);
  for (const Image& f : clip.frames) {
    if (f.w != w || f.h != h)
      throw ShapeError("write_yuv: frame size mismatch");
    for (size_t i = 0; i < luma.size(); ++i) {
      double p = std::round(f.v[i]);
      luma[i] = static_cast<unsigned char>(std::min(255.0, std::max(0.0, p)));
    }
    out.write(reinterpret_cast<const char*>(luma.data()),
              static_cast<std::streamsize>(luma.size()));
    out.write(reinterpret_cast<const char*>(chroma.data()),
              static_cast<std::streamsize>(chroma.size()));
  }
  if (!out) throw IoError("write_yuv: short write to " + path);
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_manifest: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_manifest: invalid JSON in " + path + ": " + e.what());
  }
  if (!j.contains("clips") || !j["clips"].is_array())
    throw IoError("load_manifest: " + path + " lacks a \"clips\" array");
  std::vector<ManifestEntry> out;
  for (const auto& c : j["clips"]) {
    ManifestEntry e;
    e.raw_path = c.at("raw_path").get<std::string>();
    e.width = c.at("width").get<int>();
    e.height = c.at("height").get<int>();
    e.frames = c.at("frames").get<int>();
    if (c.contains("qp") && !c["qp"].is_null()) e.qp = c["qp"].get<int>();
    if (c.contains("source_path") && !c["source_path"].is_null())
      e.source_path = c["source_path"].get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

void save_manifest(const std::vector<ManifestEntry>& entries,
                   const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json c{{"raw_path", e.raw_path},
                     {"width", e.width},
                     {"height", e.height},
                     {"frames", e.frames}};
    if (e.qp) c["qp"] = *e.qp;
    if (e.source_path) c["source_path"] = *e.source_path;
    arr.push_back(std::move(c));
  }
  std::ofstream out(path);
  if (!out) throw IoError("save_manifest: cannot open " + path);
  out << nlohmann::json{{"clips", arr}}.dump(2) << "\n";
}

Clip load_clip(const ManifestEntry& e, const std::string& base_dir) {
  std::filesystem::path p(e.raw_path);
  if (p.is_relative() && !base_dir.empty())
    p = std::filesystem::path(base_dir) / p;
  Clip c = load_yuv(p.string(), e.width, e.height, e.frames);
  c.qp = e.qp;
  return c;
}

namespace {

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

}  // namespace

Image reflect_pad_to_multiple(const Image& img, int multiple) {
  int ph = (multiple - img.h % multiple) % multiple;
  int pw = (multiple - img.w % multiple) % multiple;
  if (ph == 0 && pw == 0) return img;
  Image out(img.w + pw, img.h + ph);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.at(y, x) = img.at(reflect_index(y, img.h), reflect_index(x, img.w));
  return out;
}

Tensor image_to_tensor(const Image& img, double scale) {
  Tensor t = Tensor::zeros({1, 1, img.h, img.w});
  for (size_t i = 0; i < img.v.size(); ++i) t.data()[i] = img.v[i] * scale;
  return t;
}

Tensor images_to_tensor(const std::vector<Image>& imgs, double scale) {
  if (imgs.empty()) throw ValidationError("images_to_tensor: empty batch");
  int h = imgs[0].h, w = imgs[0].w;
  Tensor t = Tensor::zeros({static_cast<int>(imgs.size()), 1, h, w});
  int64_t hw = static_cast<int64_t>(h) * w;
  for (size_t n = 0; n < imgs.size(); ++n) {
    if (imgs[n].h != h || imgs[n].w != w)
      throw ShapeError("images_to_tensor: mixed sizes in batch");
    for (int64_t i = 0; i < hw; ++i)
      t.data()[static_cast<int64_t>(n) * hw + i] = imgs[n].v[static_cast<size_t>(i)] * scale;
  }
  return t;
}

Image tensor_to_image(const Tensor& t, double scale) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1)
    throw ShapeError("tensor_to_image: expected [1,1,H,W], got " +
                     shape_str(t.shape()));
  Image img(t.dim(3), t.dim(2));
  for (size_t i = 0; i < img.v.size(); ++i) img.v[i] = t.data()[i] / scale;
  return img;
}

}  // namespace vqe::codec
