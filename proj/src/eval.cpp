#include "vqe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

namespace vqe::eval {

double psnr(const codec::Image& a, const codec::Image& b, double peak) {
  if (a.w != b.w || a.h != b.h)
    throw ShapeError("psnr: size mismatch " + std::to_string(a.w) + "x" +
                     std::to_string(a.h) + " vs " + std::to_string(b.w) + "x" +
                     std::to_string(b.h));
  double mse = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    double d = a.v[i] - b.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.v.size());
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

const std::vector<double>& ssim_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> v(kSsimWindow * kSsimWindow);
    double sum = 0.0;
    int c = kSsimWindow / 2;
    for (int y = 0; y < kSsimWindow; ++y)
      for (int x = 0; x < kSsimWindow; ++x) {
        double d2 = (y - c) * (y - c) + (x - c) * (x - c);
        v[static_cast<size_t>(y) * kSsimWindow + x] =
            std::exp(-d2 / (2.0 * kSsimSigma * kSsimSigma));
        sum += v[static_cast<size_t>(y) * kSsimWindow + x];
      }
    for (auto& e : v) e /= sum;
    return v;
  }();
  return k;
}

}  // namespace

double ssim(const codec::Image& a, const codec::Image& b) {
  if (a.w != b.w || a.h != b.h) throw ShapeError("ssim: size mismatch");
  if (a.w < kSsimWindow || a.h < kSsimWindow)
    throw ShapeError("ssim: frames smaller than the 11x11 window");
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  const auto& k = ssim_kernel();
  double total = 0.0;
  int64_t count = 0;
  for (int y0 = 0; y0 + kSsimWindow <= a.h; ++y0)
    for (int x0 = 0; x0 + kSsimWindow <= a.w; ++x0) {
      double mx = 0, my = 0;
      for (int y = 0; y < kSsimWindow; ++y)
        for (int x = 0; x < kSsimWindow; ++x) {
          double w = k[static_cast<size_t>(y) * kSsimWindow + x];
          mx += w * a.at(y0 + y, x0 + x);
          my += w * b.at(y0 + y, x0 + x);
        }
      double vx = 0, vy = 0, cov = 0;
      for (int y = 0; y < kSsimWindow; ++y)
        for (int x = 0; x < kSsimWindow; ++x) {
          double w = k[static_cast<size_t>(y) * kSsimWindow + x];
          double dx = a.at(y0 + y, x0 + x) - mx;
          double dy = b.at(y0 + y, x0 + x) - my;
          vx += w * dx * dx;
          vy += w * dy * dy;
          cov += w * (dx * dy);  // grouped so ssim(a,b) == ssim(b,a) exactly
        }
      total += (2 * mx * my + c1) * (2 * cov + c2) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

MetricsReport delta_metrics(const codec::Clip& raw, const codec::Clip& degraded,
                            const codec::Clip& enhanced) {
  if (raw.frame_count() != degraded.frame_count() ||
      raw.frame_count() != enhanced.frame_count())
    throw ValidationError("delta_metrics: clip length mismatch");
  MetricsReport r;
  int n = raw.frame_count();
  for (int i = 0; i < n; ++i) {
    const auto& fr = raw.frames[static_cast<size_t>(i)];
    r.psnr_degraded.push_back(psnr(degraded.frames[static_cast<size_t>(i)], fr));
    r.psnr_enhanced.push_back(psnr(enhanced.frames[static_cast<size_t>(i)], fr));
    r.ssim_degraded.push_back(ssim(degraded.frames[static_cast<size_t>(i)], fr));
    r.ssim_enhanced.push_back(ssim(enhanced.frames[static_cast<size_t>(i)], fr));
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  r.mean_psnr_degraded = mean(r.psnr_degraded);
  r.mean_psnr_enhanced = mean(r.psnr_enhanced);
  r.mean_ssim_degraded = mean(r.ssim_degraded);
  r.mean_ssim_enhanced = mean(r.ssim_enhanced);
  r.mean_dpsnr = r.mean_psnr_enhanced - r.mean_psnr_degraded;
  r.mean_dssim = r.mean_ssim_enhanced - r.mean_ssim_degraded;
  return r;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j{{"psnr_degraded", psnr_degraded},
                   {"psnr_enhanced", psnr_enhanced},
                   {"ssim_degraded", ssim_degraded},
                   {"ssim_enhanced", ssim_enhanced},
                   {"mean_psnr_degraded", mean_psnr_degraded},
                   {"mean_psnr_enhanced", mean_psnr_enhanced},
                   {"mean_ssim_degraded", mean_ssim_degraded},
                   {"mean_ssim_enhanced", mean_ssim_enhanced},
                   {"mean_dpsnr", mean_dpsnr},
                   {"mean_dssim", mean_dssim},
                   {"total_wall_time", total_wall_time}};
  if (!executed_stages.empty()) j["executed_stages"] = executed_stages;
  return j.dump(2);
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("MetricsReport: cannot open " + path);
  out << "frame,psnr_degraded,psnr_enhanced,dpsnr,ssim_degraded,ssim_enhanced,dssim\n";
  for (size_t i = 0; i < psnr_degraded.size(); ++i)
    out << i << "," << psnr_degraded[i] << "," << psnr_enhanced[i] << ","
        << psnr_enhanced[i] - psnr_degraded[i] << "," << ssim_degraded[i] << ","
        << ssim_enhanced[i] << "," << ssim_enhanced[i] - ssim_degraded[i] << "\n";
}

ProfileReport profile_stages(const std::vector<net::StageTrace>& traces) {
  if (traces.empty()) throw ValidationError("profile_stages: no traces");
  std::map<int, std::vector<const net::StageTrace*>> grouped;
  ProfileReport report;
  for (const auto& t : traces) {
    grouped[t.qp.value_or(-1)].push_back(&t);
    if (!t.per_stage_cost.empty()) {
      double unit = t.per_stage_cost[0];
      double total = 0.0;
      for (double c : t.per_stage_cost) total += c;
      if (std::fabs(total - unit * t.executed_stages) > 1e-6 * std::max(1.0, total))
        report.cost_affine_in_stages = false;
    }
  }
  std::vector<int> keys;
  for (const auto& [qp, v] : grouped)
    if (qp >= 0) keys.push_back(qp);
  std::sort(keys.begin(), keys.end());
  if (grouped.count(-1)) keys.push_back(-1);

  double prev_cost = -1.0;
  for (int qp : keys) {
    const auto& v = grouped[qp];
    QpProfile p;
    p.qp = qp;
    p.count = static_cast<int>(v.size());
    for (const auto* t : v) {
      p.mean_stages += t->executed_stages;
      double total = 0.0;
      for (double c : t->per_stage_cost) total += c;
      p.mean_cost += total;
      p.mean_wall_time += t->wall_time;
    }
    p.mean_stages /= p.count;
    p.mean_cost /= p.count;
    p.mean_wall_time /= p.count;
    if (qp >= 0) {
      if (prev_cost >= 0.0 && p.mean_cost < prev_cost)
        report.cost_monotone_with_qp = false;
      prev_cost = p.mean_cost;
    }
    report.groups.push_back(p);
  }
  return report;
}

std::string ProfileReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& g : groups)
    arr.push_back({{"qp", g.qp},
                   {"count", g.count},
                   {"mean_stages", g.mean_stages},
                   {"mean_cost", g.mean_cost},
                   {"mean_wall_time", g.mean_wall_time}});
  return nlohmann::json{{"groups", arr},
                        {"cost_monotone_with_qp", cost_monotone_with_qp},
                        {"cost_affine_in_stages", cost_affine_in_stages}}
      .dump(2);
}

namespace {

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw ValidationError("embedding metrics: zero-norm embedding");
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

EmbeddingReport embedding_metrics(const std::vector<std::vector<double>>& emb,
                                  const std::vector<int>& labels,
                                  int class_count) {
  if (emb.size() != labels.size() || emb.empty())
    throw ValidationError("embedding_metrics: embeddings/labels mismatch");
  std::vector<int> counts(static_cast<size_t>(class_count), 0);
  for (int l : labels) {
    if (l < 0 || l >= class_count)
      throw ValidationError("embedding_metrics: label out of range");
    counts[static_cast<size_t>(l)]++;
  }
  int per_class_min = *std::min_element(counts.begin(), counts.end());
  if (per_class_min < 2)
    throw ValidationError("embedding_metrics: every class needs >= 2 samples");

  size_t n = emb.size();
  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j)
      dist[i][j] = dist[j][i] = cosine_distance(emb[i], emb[j]);

  // leave-one-out cosine nearest neighbor
  int nn_hits = 0;
  for (size_t i = 0; i < n; ++i) {
    size_t best = n;
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best == n || dist[i][j] < dist[i][best]) best = j;
    }
    if (labels[best] == labels[i]) ++nn_hits;
  }

  // mean silhouette over all samples
  double sil = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double a_sum = 0.0;
    int a_cnt = 0;
    std::vector<double> b_sum(static_cast<size_t>(class_count), 0.0);
    std::vector<int> b_cnt(static_cast<size_t>(class_count), 0);
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        a_sum += dist[i][j];
        ++a_cnt;
      } else {
        b_sum[static_cast<size_t>(labels[j])] += dist[i][j];
        b_cnt[static_cast<size_t>(labels[j])]++;
      }
    }
    double a = a_cnt > 0 ? a_sum / a_cnt : 0.0;
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < class_count; ++c)
      if (b_cnt[static_cast<size_t>(c)] > 0)
        b = std::min(b, b_sum[static_cast<size_t>(c)] / b_cnt[static_cast<size_t>(c)]);
    double denom = std::max(a, b);
    sil += denom > 0.0 ? (b - a) / denom : 0.0;
  }

  EmbeddingReport r;
  r.nn_accuracy = static_cast<double>(nn_hits) / static_cast<double>(n);
  r.silhouette = sil / static_cast<double>(n);
  r.per_class_min = per_class_min;
  return r;
}

EmbeddingReport embedding_report(const drl::DrlModel& model,
                                 const std::vector<codec::Image>& patches,
                                 const std::vector<int>& labels,
                                 const std::string& csv_path) {
  if (patches.size() != labels.size() || patches.empty())
    throw ValidationError("embedding_report: patches/labels mismatch");
  NoGrad ng;
  int fv_dim = model.config().fv_dim();
  std::vector<std::vector<double>> emb;
  int correct = 0;
  for (size_t i = 0; i < patches.size(); ++i) {
    auto [fv, logits] = model.forward_patches({patches[i]});
    emb.emplace_back(fv.data(), fv.data() + fv_dim);
    if (drl::DrlModel::argmax_level(logits) == labels[i]) ++correct;
  }
  EmbeddingReport r = embedding_metrics(emb, labels, model.config().class_count);
  r.classifier_accuracy = static_cast<double>(correct) / static_cast<double>(patches.size());

  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw IoError("embedding_report: cannot open " + csv_path);
    out << "label";
    for (int d = 0; d < fv_dim; ++d) out << ",e" << d;
    out << "\n";
    for (size_t i = 0; i < emb.size(); ++i) {
      out << labels[i];
      for (double v : emb[i]) out << "," << v;
      out << "\n";
    }
  }
  return r;
}

}  // namespace vqe::eval
