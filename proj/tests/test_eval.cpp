#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "oracles.hpp"
#include "vqe/eval.hpp"
#include "vqe/synthetic.hpp"

using namespace vqe;
using namespace vqe::eval;
using vqe::testing::mse_ref;

namespace {

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::temp_directory_path() / "vqe_eval_test";
  std::filesystem::create_directories(p);
  return p;
}

// direct windowed-formula reference, independent double loops
double ssim_ref(const codec::Image& a, const codec::Image& b) {
  const int win = 11;
  const double sigma = 1.5;
  const double c1 = 6.5025, c2 = 58.5225;  // (0.01*255)^2, (0.03*255)^2
  std::vector<double> k(win * win);
  double ks = 0.0;
  for (int y = 0; y < win; ++y)
    for (int x = 0; x < win; ++x) {
      double d2 = (y - 5) * (y - 5) + (x - 5) * (x - 5);
      k[static_cast<size_t>(y * win + x)] = std::exp(-d2 / (2 * sigma * sigma));
      ks += k[static_cast<size_t>(y * win + x)];
    }
  for (auto& v : k) v /= ks;
  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + win <= a.h; ++y0)
    for (int x0 = 0; x0 + win <= a.w; ++x0) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
          double w = k[static_cast<size_t>(y * win + x)];
          mx += w * a.at(y0 + y, x0 + x);
          my += w * b.at(y0 + y, x0 + x);
          sxx += w * a.at(y0 + y, x0 + x) * a.at(y0 + y, x0 + x);
          syy += w * b.at(y0 + y, x0 + x) * b.at(y0 + y, x0 + x);
          sxy += w * a.at(y0 + y, x0 + x) * b.at(y0 + y, x0 + x);
        }
      double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST_CASE("psnr values, oracle, symmetry") {
  codec::Image a = codec::make_synthetic_clip(24, 24, 1, 1).frames[0];
  CHECK(psnr(a, a) == 100.0);

  codec::Image b = a;
  for (auto& v : b.v) v = std::min(255.0, v + 1.0);
  // unit difference at every pixel only where the add did not clip
  bool clipped = false;
  for (size_t i = 0; i < a.v.size(); ++i) clipped = clipped || (b.v[i] == a.v[i]);
  if (!clipped)
    CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(255.0 * 255.0)).epsilon(1e-9));

  codec::Image c = codec::make_synthetic_clip(24, 24, 1, 2).frames[0];
  double ref = 10.0 * std::log10(255.0 * 255.0 / mse_ref(a.v, c.v));
  CHECK(std::fabs(psnr(a, c) - ref) < 1e-9);
  CHECK(psnr(a, c) == psnr(c, a));

  codec::Image small(8, 8, 0.0);
  CHECK_THROWS_AS(psnr(a, small), ShapeError);
}

TEST_CASE("psnr decreases as noise grows") {
  codec::Image base = codec::make_synthetic_clip(32, 32, 1, 3).frames[0];
  double prev = 1e9;
  Rng rng(4);
  for (double amp : {1.0, 4.0, 16.0}) {
    codec::Image noisy = base;
    for (auto& v : noisy.v)
      v = std::min(255.0, std::max(0.0, v + amp * rng.normal()));
    double p = psnr(base, noisy);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("ssim values and oracle") {
  codec::Image a = codec::make_synthetic_clip(16, 16, 1, 5).frames[0];
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  codec::Image inv(16, 16);
  for (size_t i = 0; i < a.v.size(); ++i) inv.v[i] = 255.0 - a.v[i];
  CHECK(ssim(a, inv) < 1.0);

  codec::Image b = codec::make_synthetic_clip(16, 16, 1, 6).frames[0];
  CHECK(std::fabs(ssim(a, b) - ssim_ref(a, b)) < 1e-6);
  CHECK(ssim(a, b) == ssim(b, a));

  codec::Image tiny(8, 8, 1.0);
  CHECK_THROWS_AS(ssim(tiny, tiny), ShapeError);
}

TEST_CASE("delta_metrics: zero deltas, cap arithmetic, errors") {
  codec::CodecConfig ccfg;
  codec::Clip raw = codec::make_synthetic_clip(24, 24, 3, 7);
  codec::Clip degraded = codec::degrade_clip(raw, 37, ccfg);

  MetricsReport same = delta_metrics(raw, degraded, degraded);
  CHECK(same.mean_dpsnr == 0.0);
  CHECK(same.mean_dssim == 0.0);

  MetricsReport perfect = delta_metrics(raw, degraded, raw);
  for (int i = 0; i < 3; ++i)
    CHECK(perfect.dpsnr(i) ==
          doctest::Approx(100.0 - perfect.psnr_degraded[static_cast<size_t>(i)]).epsilon(1e-12));

  codec::Clip shorter = degraded;
  shorter.frames.pop_back();
  CHECK_THROWS_AS(delta_metrics(raw, degraded, shorter), ValidationError);
}

TEST_CASE("metrics report serializes to json and csv") {
  codec::Clip raw = codec::make_synthetic_clip(24, 24, 2, 8);
  codec::Clip degraded = codec::degrade_clip(raw, 42, codec::CodecConfig{});
  MetricsReport r = delta_metrics(raw, degraded, raw);

  auto parsed = nlohmann::json::parse(r.to_json());
  CHECK(parsed["psnr_degraded"].size() == 2);
  CHECK(parsed["mean_dpsnr"].get<double>() > 0.0);

  auto path = (tmp_dir() / "report.csv").string();
  r.write_csv(path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header ==
        "frame,psnr_degraded,psnr_enhanced,dpsnr,ssim_degraded,ssim_enhanced,dssim");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("profile_stages groups by qp and checks monotonicity") {
  std::vector<net::StageTrace> traces;
  auto make_trace = [](int level, double unit, std::optional<int> qp) {
    net::StageTrace t;
    t.level = level;
    t.executed_stages = level + 1;
    t.per_stage_cost.assign(static_cast<size_t>(level + 1), unit);
    t.wall_time = 0.01 * (level + 1);
    t.qp = qp;
    return t;
  };

  // all at level zero
  traces = {make_trace(0, 5.0, 22), make_trace(0, 5.0, 22)};
  ProfileReport flat = profile_stages(traces);
  REQUIRE(flat.groups.size() == 1);
  CHECK(flat.groups[0].mean_stages == 1.0);
  CHECK(flat.groups[0].count == 2);

  // ascending levels across the qp ladder
  traces.clear();
  std::vector<int> qps{22, 27, 32, 37, 42};
  for (int l = 0; l < 5; ++l) traces.push_back(make_trace(l, 5.0, qps[static_cast<size_t>(l)]));
  traces.push_back(make_trace(2, 5.0, {}));  // unknown qp tail group
  ProfileReport r = profile_stages(traces);
  REQUIRE(r.groups.size() == 6);
  for (size_t i = 0; i + 2 < r.groups.size(); ++i)
    CHECK(r.groups[i].mean_cost < r.groups[i + 1].mean_cost);
  CHECK(r.groups.back().qp == -1);
  CHECK(r.cost_monotone_with_qp);
  CHECK(r.cost_affine_in_stages);

  auto parsed = nlohmann::json::parse(r.to_json());
  CHECK(parsed["groups"].size() == 6);

  // a deliberately inverted ladder flips the flag
  traces = {make_trace(4, 5.0, 22), make_trace(0, 5.0, 42)};
  CHECK_FALSE(profile_stages(traces).cost_monotone_with_qp);

  CHECK_THROWS_AS(profile_stages({}), ValidationError);
}

TEST_CASE("embedding metrics: separable, chance-level and errors") {
  // constant per class, distinct across classes
  std::vector<std::vector<double>> emb;
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) {
      std::vector<double> e(8, 0.1);
      e[static_cast<size_t>(c)] = 5.0 + c;
      emb.push_back(e);
      labels.push_back(c);
    }
  EmbeddingReport sep = embedding_metrics(emb, labels, 3);
  CHECK(sep.nn_accuracy == 1.0);
  CHECK(sep.silhouette > 0.9);
  CHECK(sep.per_class_min == 4);

  // random embeddings sit at chance accuracy for 5 balanced classes
  Rng rng(9);
  emb.clear();
  labels.clear();
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < 100; ++i) {
      std::vector<double> e(16);
      for (auto& v : e) v = rng.normal();
      emb.push_back(e);
      labels.push_back(c);
    }
  EmbeddingReport chance = embedding_metrics(emb, labels, 5);
  CHECK(chance.nn_accuracy > 0.11);
  CHECK(chance.nn_accuracy < 0.29);
  CHECK(std::fabs(chance.silhouette) < 0.05);

  CHECK_THROWS_AS(embedding_metrics({{1.0}, {2.0}}, {0, 1}, 2), ValidationError);
  CHECK_THROWS_AS(embedding_metrics({{1.0}, {0.0}, {1.0}, {2.0}}, {0, 0, 1, 1}, 2),
                  ValidationError);  // zero-norm row
  CHECK_THROWS_AS(embedding_metrics({{1.0}, {1.0}}, {0, 7}, 2), ValidationError);
}

TEST_CASE("embedding_report runs the encoder and exports csv") {
  drl::DrlConfig cfg;
  cfg.stage_channels = {4, 4, 8, 16};
  cfg.residual_blocks_per_stage = 1;
  cfg.working_channels = 8;
  cfg.mlp_hidden = 6;
  cfg.class_count = 3;
  drl::DrlModel model(cfg, 10);

  codec::CodecConfig ccfg;
  ccfg.qp_levels = {22, 32, 42};
  std::vector<codec::Image> patches;
  std::vector<int> labels;
  for (int level = 0; level < 3; ++level) {
    codec::Clip raw = codec::make_synthetic_clip(32, 32, 2, 700 + static_cast<uint64_t>(level));
    codec::Clip deg = codec::degrade_clip(raw, ccfg.qp_levels[static_cast<size_t>(level)], ccfg);
    for (const auto& f : deg.frames) {
      patches.push_back(f);
      labels.push_back(level);
    }
  }
  auto csv = (tmp_dir() / "emb.csv").string();
  EmbeddingReport r = embedding_report(model, patches, labels, csv);
  CHECK(r.classifier_accuracy >= 0.0);
  CHECK(r.classifier_accuracy <= 1.0);
  CHECK(r.per_class_min == 2);

  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("label,e0,", 0) == 0);
  int cols = 1;
  for (char ch : header)
    if (ch == ',') ++cols;
  CHECK(cols == 1 + cfg.fv_dim());
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 6);
}
