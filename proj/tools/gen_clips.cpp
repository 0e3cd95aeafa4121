// Writes seeded synthetic raw clips plus a manifest, as demo input for the
// simulate -> pretrain-drl -> train -> enhance -> eval pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "vqe/synthetic.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"synthetic raw clip generator"};
  std::string out = "data";
  int count = 4, width = 64, height = 64, frames = 5;
  uint64_t seed = 1;
  app.add_option("--out", out, "output directory");
  app.add_option("--count", count, "number of clips");
  app.add_option("--width", width, "frame width");
  app.add_option("--height", height, "frame height");
  app.add_option("--frames", frames, "frames per clip");
  app.add_option("--seed", seed, "rng seed");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out);
    std::vector<vqe::codec::ManifestEntry> entries;
    for (int i = 0; i < count; ++i) {
      vqe::codec::Clip clip = vqe::codec::make_synthetic_clip(
          width, height, frames, seed + static_cast<uint64_t>(i));
      std::string name = "clip" + std::to_string(i) + ".yuv";
      vqe::codec::write_yuv(clip, (fs::path(out) / name).string());
      vqe::codec::ManifestEntry e;
      e.raw_path = name;
      e.width = width;
      e.height = height;
      e.frames = frames;
      entries.push_back(std::move(e));
    }
    vqe::codec::save_manifest(entries, (fs::path(out) / "manifest.json").string());
    std::cout << "wrote " << count << " clips to " << out << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
