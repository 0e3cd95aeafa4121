#pragma once
// Versioned binary checkpoint container: config echo with hash, named
// parameter blobs, optional optimizer state, and a whole-file checksum.

#include <string>

#include "vqe/drl.hpp"
#include "vqe/qecv_net.hpp"

namespace vqe::train {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kKindDrl[] = "drl";
inline constexpr char kKindQecv[] = "qecv";

void save_checkpoint(const nn::ParamRegistry& reg, const nn::Adam* opt,
                     const std::string& kind, const std::string& config_json,
                     const std::string& meta_json, const std::string& path);

struct LoadedCheckpoint {
  std::string kind, config_json, meta_json;
  std::vector<std::pair<std::string, std::vector<double>>> params;
  bool has_opt = false;
  int64_t opt_step = 0;
  std::vector<std::vector<double>> opt_m, opt_v;
};

// Parses and verifies container integrity (magic, version, config hash,
// file checksum); does not interpret the config.
LoadedCheckpoint read_checkpoint(const std::string& path);

// Copies parameter values (and optimizer state when present) into a live
// registry; names and value counts must match exactly.
void load_into(const LoadedCheckpoint& ck, nn::ParamRegistry& reg,
               nn::Adam* opt);

void save_drl_checkpoint(const drl::DrlModel& model, const nn::Adam* opt,
                         const std::string& meta_json, const std::string& path);
drl::DrlModel load_drl_checkpoint(const std::string& path,
                                  nn::Adam* opt = nullptr);

void save_net_checkpoint(const net::QecvModel& model, const nn::Adam* opt,
                         const std::string& meta_json, const std::string& path);
net::QecvModel load_net_checkpoint(const std::string& path,
                                   nn::Adam* opt = nullptr);

}  // namespace vqe::train
