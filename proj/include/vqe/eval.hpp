#pragma once
// Quality metrics, stage profiling and representation-quality reporting.

#include <string>

#include "vqe/drl.hpp"
#include "vqe/qecv_net.hpp"

namespace vqe::eval {

// 10*log10(peak^2 / MSE), capped at 100 dB for identical inputs.
double psnr(const codec::Image& a, const codec::Image& b, double peak = 255.0);

// Gaussian-windowed (11x11, sigma 1.5) structural similarity over valid
// positions, constants from peak 255.
double ssim(const codec::Image& a, const codec::Image& b);

struct MetricsReport {
  std::vector<double> psnr_degraded, psnr_enhanced;
  std::vector<double> ssim_degraded, ssim_enhanced;
  double mean_psnr_degraded = 0, mean_psnr_enhanced = 0;
  double mean_ssim_degraded = 0, mean_ssim_enhanced = 0;
  double mean_dpsnr = 0, mean_dssim = 0;
  double total_wall_time = 0;           // filled by callers that timed a run
  std::vector<int> executed_stages;     // per frame, when traces are known

  double dpsnr(int frame) const {
    return psnr_enhanced[static_cast<size_t>(frame)] - psnr_degraded[static_cast<size_t>(frame)];
  }
  std::string to_json() const;
  void write_csv(const std::string& path) const;  // per-frame quality curves
};

MetricsReport delta_metrics(const codec::Clip& raw, const codec::Clip& degraded,
                            const codec::Clip& enhanced);

struct QpProfile {
  int qp = -1;  // -1 groups traces with unknown qp
  int count = 0;
  double mean_stages = 0;
  double mean_cost = 0;
  double mean_wall_time = 0;
};

struct ProfileReport {
  std::vector<QpProfile> groups;        // ascending qp, unknown last
  bool cost_monotone_with_qp = true;    // mean cost non-decreasing over groups
  bool cost_affine_in_stages = true;    // cost == stages * unit cost per trace
  std::string to_json() const;
};

ProfileReport profile_stages(const std::vector<net::StageTrace>& traces);

struct EmbeddingReport {
  double classifier_accuracy = 0;  // argmax of the classification head
  double nn_accuracy = 0;          // leave-one-out cosine 1-NN
  double silhouette = 0;           // mean silhouette, cosine distance
  int per_class_min = 0;
};

// Metric core over precomputed embeddings (classifier accuracy excluded).
EmbeddingReport embedding_metrics(const std::vector<std::vector<double>>& emb,
                                  const std::vector<int>& labels,
                                  int class_count);

// Runs the encoder over labeled patches, optionally exports the embeddings
// as CSV (label column followed by the vector), and computes all metrics.
EmbeddingReport embedding_report(const drl::DrlModel& model,
                                 const std::vector<codec::Image>& patches,
                                 const std::vector<int>& labels,
                                 const std::string& csv_path = "");

}  // namespace vqe::eval
