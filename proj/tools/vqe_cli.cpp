// Command-line front end: simulate, pretrain-drl, train, enhance, eval,
// profile. Every run resolves a flat key=value config (flags take
// precedence), echoes it into the run directory and writes all outputs
// there. Exit codes: 0 success, 1 runtime failure, 2 invalid config key,
// 3 failed --assert threshold.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "vqe/checkpoint.hpp"
#include "vqe/eval.hpp"
#include "vqe/synthetic.hpp"
#include "vqe/training.hpp"

namespace fs = std::filesystem;
using namespace vqe;

namespace {

constexpr int kExitError = 1;
constexpr int kExitBadKey = 2;
constexpr int kExitAssert = 3;

struct BadKey : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AssertFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using KeyMap = std::map<std::string, std::string>;

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

// Applies `path` (key = value lines, # comments) over `cfg`; keys must
// already exist in cfg, which doubles as the documented key set.
void apply_config_file(KeyMap& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw BadKey("config line " + std::to_string(lineno) + " is not key=value: " + t);
    std::string key = trim(t.substr(0, eq));
    if (!cfg.count(key)) throw BadKey("unknown config key: " + key);
    cfg[key] = trim(t.substr(eq + 1));
  }
}

int to_int(const KeyMap& cfg, const std::string& key) {
  try {
    return std::stoi(cfg.at(key));
  } catch (const std::exception&) {
    throw BadKey("config key " + key + " is not an integer: " + cfg.at(key));
  }
}

double to_double(const KeyMap& cfg, const std::string& key) {
  try {
    return std::stod(cfg.at(key));
  } catch (const std::exception&) {
    throw BadKey("config key " + key + " is not a number: " + cfg.at(key));
  }
}

uint64_t to_u64(const KeyMap& cfg, const std::string& key) {
  try {
    return std::stoull(cfg.at(key));
  } catch (const std::exception&) {
    throw BadKey("config key " + key + " is not an integer: " + cfg.at(key));
  }
}

bool to_bool(const KeyMap& cfg, const std::string& key) {
  const std::string& v = cfg.at(key);
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw BadKey("config key " + key + " is not a boolean: " + v);
}

std::vector<int> to_int_list(const KeyMap& cfg, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(cfg.at(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw BadKey("config key " + key + " holds a bad integer: " + item);
    }
  }
  if (out.empty()) throw BadKey("config key " + key + " is empty");
  return out;
}

fs::path make_run_dir(const KeyMap& cfg) {
  if (cfg.at("out").empty()) throw BadKey("config key out must be set");
  fs::path dir(cfg.at("out"));
  fs::create_directories(dir);
  return dir;
}

void write_config_echo(const KeyMap& cfg, const fs::path& dir) {
  std::ofstream out(dir / "config_echo.txt");
  for (const auto& [k, v] : cfg) out << k << " = " << v << "\n";
}

std::string manifest_dir(const std::string& manifest_path) {
  return fs::path(manifest_path).parent_path().string();
}

codec::CodecConfig codec_config_from(const KeyMap& cfg) {
  codec::CodecConfig ccfg;
  ccfg.block_size = to_int(cfg, "block_size");
  ccfg.qp_levels = to_int_list(cfg, "qp_levels");
  ccfg.validate();
  return ccfg;
}

// ------------------------------------------------------------------ commands

int cmd_simulate(const KeyMap& cfg) {
  fs::path dir = make_run_dir(cfg);
  write_config_echo(cfg, dir);
  codec::CodecConfig ccfg = codec_config_from(cfg);
  std::vector<int> qp_list = to_int_list(cfg, "qp_list");
  auto entries = codec::load_manifest(cfg.at("manifest"));
  std::string base = manifest_dir(cfg.at("manifest"));

  std::vector<codec::ManifestEntry> out_entries;
  for (const auto& e : entries) {
    codec::Clip raw = codec::load_clip(e, base);
    std::string stem = fs::path(e.raw_path).stem().string();
    for (int qp : qp_list) {
      codec::Clip deg = codec::degrade_clip(raw, qp, ccfg);
      std::string name = stem + "_qp" + std::to_string(qp) + ".yuv";
      codec::write_yuv(deg, (dir / name).string());
      codec::ManifestEntry oe;
      oe.raw_path = name;
      oe.width = e.width;
      oe.height = e.height;
      oe.frames = e.frames;
      oe.qp = qp;
      oe.source_path = fs::absolute(fs::path(base) / e.raw_path).string();
      out_entries.push_back(std::move(oe));
    }
  }
  codec::save_manifest(out_entries, (dir / "manifest.json").string());
  std::cout << "simulate: wrote " << out_entries.size() << " degraded clips to "
            << dir.string() << "\n";
  return 0;
}

int cmd_pretrain_drl(const KeyMap& cfg) {
  fs::path dir = make_run_dir(cfg);
  write_config_echo(cfg, dir);
  codec::CodecConfig ccfg = codec_config_from(cfg);

  auto entries = codec::load_manifest(cfg.at("manifest"));
  std::string base = manifest_dir(cfg.at("manifest"));
  std::vector<codec::Clip> clips;
  for (const auto& e : entries) {
    if (!e.qp) continue;  // unlabeled clips cannot join pretraining
    codec::Clip c = codec::load_clip(e, base);
    c.label = codec::nearest_level(*e.qp, ccfg.qp_levels);
    clips.push_back(std::move(c));
  }

  drl::DrlConfig dcfg;
  dcfg.stage_channels = to_int_list(cfg, "stage_channels");
  dcfg.residual_blocks_per_stage = to_int(cfg, "residual_blocks");
  dcfg.class_count = static_cast<int>(ccfg.qp_levels.size());
  dcfg.tau = to_double(cfg, "tau");
  dcfg.lambda_nce = to_double(cfg, "lambda");
  dcfg.working_channels = to_int(cfg, "working_channels");
  dcfg.mlp_hidden = to_int(cfg, "mlp_hidden");

  drl::DrlTrainConfig tc;
  tc.lr = to_double(cfg, "lr");
  tc.epochs = to_int(cfg, "epochs");
  tc.pairs_per_batch = to_int(cfg, "pairs");
  tc.patch = to_int(cfg, "patch");
  tc.steps_per_epoch = to_int(cfg, "steps_per_epoch");
  tc.seed = to_u64(cfg, "seed");

  drl::DrlModel model(dcfg, tc.seed);
  auto curve = drl::pretrain_drl(model, clips, tc);
  train::write_loss_curve_csv(curve, (dir / "loss_curve.csv").string());

  nlohmann::json meta{{"clips", clips.size()}, {"epochs", tc.epochs}, {"seed", tc.seed}};
  train::save_drl_checkpoint(model, nullptr, meta.dump(), (dir / "drl.ckpt").string());
  std::cout << "pretrain-drl: " << curve.size() << " steps, final loss "
            << (curve.empty() ? 0.0 : curve.back().loss) << ", checkpoint "
            << (dir / "drl.ckpt").string() << "\n";
  return 0;
}

int cmd_train(const KeyMap& cfg) {
  fs::path dir = make_run_dir(cfg);
  write_config_echo(cfg, dir);

  drl::DrlModel drl_model = train::load_drl_checkpoint(cfg.at("drl_ckpt"));

  auto entries = codec::load_manifest(cfg.at("manifest"));
  std::string base = manifest_dir(cfg.at("manifest"));
  std::vector<train::PairedClip> dataset;
  for (const auto& e : entries) {
    if (!e.source_path)
      throw ValidationError("train: manifest entry " + e.raw_path +
                            " lacks source_path (raw original)");
    train::PairedClip pc;
    pc.degraded = codec::load_clip(e, base);
    pc.raw = codec::load_yuv(*e.source_path, e.width, e.height, e.frames);
    dataset.push_back(std::move(pc));
  }

  net::NetConfig ncfg;
  ncfg.radius = to_int(cfg, "radius");
  ncfg.feat_channels = to_int(cfg, "feat_channels");
  ncfg.max_stages = drl_model.config().class_count;
  ncfg.window = to_int(cfg, "window");
  ncfg.heads = to_int(cfg, "heads");
  ncfg.attn_depth = to_int(cfg, "attn_depth");
  ncfg.fv_dim = drl_model.config().fv_dim();
  ncfg.ff_expand = to_int(cfg, "ff_expand");
  ncfg.qe_reduction = to_int(cfg, "qe_reduction");
  ncfg.share_stage_weights = to_bool(cfg, "share_stage_weights");

  train::TrainConfig tc;
  tc.lr = to_double(cfg, "lr");
  tc.batch = to_int(cfg, "batch");
  tc.patch = to_int(cfg, "patch");
  tc.epsilon = to_double(cfg, "epsilon");
  tc.epochs = to_int(cfg, "epochs");
  tc.seed = to_u64(cfg, "seed");
  tc.augment = to_bool(cfg, "augment");
  tc.steps_per_epoch = to_int(cfg, "steps_per_epoch");

  net::QecvModel model(ncfg, tc.seed);
  auto curve = train::train_blind(model, drl_model, dataset, tc);
  train::write_loss_curve_csv(curve, (dir / "loss_curve.csv").string());

  nlohmann::json meta{{"clips", dataset.size()},
                      {"epochs", tc.epochs},
                      {"seed", tc.seed},
                      {"drl_ckpt", cfg.at("drl_ckpt")}};
  train::save_net_checkpoint(model, nullptr, meta.dump(), (dir / "net.ckpt").string());
  std::cout << "train: " << curve.size() << " steps, final loss "
            << (curve.empty() ? 0.0 : curve.back().loss) << ", checkpoint "
            << (dir / "net.ckpt").string() << "\n";
  return 0;
}

int cmd_enhance(const KeyMap& cfg) {
  fs::path dir = make_run_dir(cfg);
  write_config_echo(cfg, dir);

  drl::DrlModel drl_model = train::load_drl_checkpoint(cfg.at("drl_ckpt"));
  net::QecvModel model = train::load_net_checkpoint(cfg.at("net_ckpt"));

  std::optional<int> override_level;
  if (!cfg.at("override_level").empty() && cfg.at("override_level") != "-1")
    override_level = to_int(cfg, "override_level");

  auto entries = codec::load_manifest(cfg.at("manifest"));
  std::string base = manifest_dir(cfg.at("manifest"));

  std::ofstream traces_out(dir / "traces.jsonl");
  std::vector<codec::ManifestEntry> out_entries;
  for (const auto& e : entries) {
    codec::Clip clip = codec::load_clip(e, base);
    auto [enhanced, traces] = net::enhance_clip(clip, drl_model, model, override_level);
    std::string name = fs::path(e.raw_path).stem().string() + "_enhanced.yuv";
    codec::write_yuv(enhanced, (dir / name).string());
    for (const auto& t : traces) {
      nlohmann::json rec = nlohmann::json::parse(net::trace_to_jsonl(t));
      rec["clip"] = e.raw_path;
      traces_out << rec.dump() << "\n";
    }
    codec::ManifestEntry oe;
    oe.raw_path = name;
    oe.width = e.width;
    oe.height = e.height;
    oe.frames = e.frames;
    oe.qp = e.qp;
    oe.source_path = fs::absolute(fs::path(base) / e.raw_path).string();
    out_entries.push_back(std::move(oe));
  }
  codec::save_manifest(out_entries, (dir / "manifest.json").string());
  std::cout << "enhance: wrote " << out_entries.size() << " clips and traces to "
            << dir.string() << "\n";
  return 0;
}

int cmd_eval(const KeyMap& cfg, bool assert_mode) {
  fs::path dir = make_run_dir(cfg);
  write_config_echo(cfg, dir);

  auto degraded_entries = codec::load_manifest(cfg.at("degraded_manifest"));
  std::string degraded_base = manifest_dir(cfg.at("degraded_manifest"));
  std::map<std::string, const codec::ManifestEntry*> degraded_by_path;
  for (const auto& e : degraded_entries)
    degraded_by_path[fs::absolute(fs::path(degraded_base) / e.raw_path).string()] = &e;

  auto enhanced_entries = codec::load_manifest(cfg.at("enhanced_manifest"));
  std::string enhanced_base = manifest_dir(cfg.at("enhanced_manifest"));

  double min_dpsnr = to_double(cfg, "min_dpsnr");
  nlohmann::json clips = nlohmann::json::array();
  bool all_pass = true;
  double worst = 1e9;
  for (const auto& e : enhanced_entries) {
    if (!e.source_path)
      throw ValidationError("eval: enhanced entry " + e.raw_path + " lacks source_path");
    auto it = degraded_by_path.find(*e.source_path);
    if (it == degraded_by_path.end())
      throw ValidationError("eval: no degraded manifest entry for " + *e.source_path);
    const codec::ManifestEntry& de = *it->second;
    if (!de.source_path)
      throw ValidationError("eval: degraded entry " + de.raw_path + " lacks source_path");

    codec::Clip enhanced = codec::load_clip(e, enhanced_base);
    codec::Clip degraded = codec::load_yuv(*e.source_path, e.width, e.height, e.frames);
    codec::Clip raw = codec::load_yuv(*de.source_path, e.width, e.height, e.frames);
    eval::MetricsReport r = eval::delta_metrics(raw, degraded, enhanced);

    std::string stem = fs::path(e.raw_path).stem().string();
    r.write_csv((dir / (stem + "_frames.csv")).string());
    nlohmann::json cj = nlohmann::json::parse(r.to_json());
    cj["clip"] = e.raw_path;
    if (e.qp) cj["qp"] = *e.qp;
    clips.push_back(cj);
    worst = std::min(worst, r.mean_dpsnr);
    if (r.mean_dpsnr < min_dpsnr) all_pass = false;
    std::cout << "eval: " << e.raw_path << " dPSNR " << r.mean_dpsnr << " dB, dSSIM "
              << r.mean_dssim << "\n";
  }
  std::ofstream((dir / "metrics.json")) << nlohmann::json{{"clips", clips}}.dump(2) << "\n";
  if (assert_mode && !all_pass)
    throw AssertFailed("eval: worst mean dPSNR " + std::to_string(worst) +
                       " dB below threshold " + std::to_string(min_dpsnr));
  return 0;
}

int cmd_profile(const KeyMap& cfg) {
  fs::path dir = make_run_dir(cfg);
  write_config_echo(cfg, dir);
  std::vector<net::StageTrace> traces;
  std::stringstream ss(cfg.at("traces"));
  std::string path;
  while (std::getline(ss, path, ',')) {
    path = trim(path);
    if (path.empty()) continue;
    std::ifstream in(path);
    if (!in) throw IoError("profile: cannot open " + path);
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      traces.push_back(net::trace_from_jsonl(line));
    }
  }
  eval::ProfileReport report = eval::profile_stages(traces);
  std::ofstream((dir / "profile.json")) << report.to_json() << "\n";
  for (const auto& g : report.groups)
    std::cout << "profile: qp " << (g.qp < 0 ? std::string("unknown") : std::to_string(g.qp))
              << " frames " << g.count << " mean stages " << g.mean_stages
              << " mean MACs " << g.mean_cost << " mean wall " << g.mean_wall_time
              << " s\n";
  std::cout << "profile: cost monotone with qp: "
            << (report.cost_monotone_with_qp ? "yes" : "no") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blind compressed-video quality enhancement pipeline"};
  app.require_subcommand(1);

  struct Common {
    std::string config, out, seed, override_level;
    bool assert_mode = false;
    double min_dpsnr = -1e9;
    bool min_dpsnr_set = false;
  } common;

  auto add_common = [&](CLI::App* sub, bool with_override, bool with_assert) {
    sub->add_option("--config", common.config, "key=value config file");
    sub->add_option("--seed", common.seed, "rng seed (overrides config)");
    sub->add_option("--out", common.out, "run directory (overrides config)");
    if (with_override)
      sub->add_option("--override-level", common.override_level,
                      "force the termination level (ablation)");
    if (with_assert) {
      sub->add_flag("--assert", common.assert_mode,
                    "exit 3 when a metric threshold fails");
      sub->add_option("--min-dpsnr", common.min_dpsnr,
                      "per-clip mean dPSNR threshold for --assert")
          ->each([&](const std::string&) { common.min_dpsnr_set = true; });
    }
  };

  CLI::App* simulate = app.add_subcommand("simulate", "degrade raw clips at each qp");
  CLI::App* pretrain = app.add_subcommand("pretrain-drl", "pretrain the degradation encoder");
  CLI::App* train_cmd = app.add_subcommand("train", "train the enhancement network");
  CLI::App* enhance = app.add_subcommand("enhance", "enhance degraded clips");
  CLI::App* eval_cmd = app.add_subcommand("eval", "quality metrics against raw originals");
  CLI::App* profile = app.add_subcommand("profile", "aggregate stage traces by qp");
  for (CLI::App* sub : {simulate, pretrain, train_cmd, enhance, eval_cmd, profile})
    add_common(sub, sub == enhance, sub == eval_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    KeyMap cfg;
    auto finish = [&](KeyMap& c) {
      if (!common.seed.empty()) c["seed"] = common.seed;
      if (!common.out.empty()) c["out"] = common.out;
      if (!common.config.empty()) {
        KeyMap file_target = c;
        apply_config_file(file_target, common.config);
        // flags take precedence over file values
        if (!common.seed.empty()) file_target["seed"] = common.seed;
        if (!common.out.empty()) file_target["out"] = common.out;
        c = file_target;
      }
    };

    if (app.got_subcommand(simulate)) {
      cfg = {{"manifest", ""}, {"qp_list", "22,27,32,37,42"},
             {"qp_levels", "22,27,32,37,42"}, {"block_size", "8"},
             {"seed", "0"}, {"out", ""}};
      finish(cfg);
      return cmd_simulate(cfg);
    }
    if (app.got_subcommand(pretrain)) {
      cfg = {{"manifest", ""},
             {"qp_levels", "22,27,32,37,42"},
             {"block_size", "8"},
             {"stage_channels", "64,64,128,256"},
             {"residual_blocks", "2"},
             {"working_channels", "64"},
             {"mlp_hidden", "128"},
             {"tau", "0.07"},
             {"lambda", "1.0"},
             {"lr", "1e-4"},
             {"epochs", "1"},
             {"pairs", "4"},
             {"patch", "32"},
             {"steps_per_epoch", "0"},
             {"seed", "0"},
             {"out", ""}};
      finish(cfg);
      return cmd_pretrain_drl(cfg);
    }
    if (app.got_subcommand(train_cmd)) {
      cfg = {{"manifest", ""},    {"drl_ckpt", ""},    {"radius", "1"},
             {"feat_channels", "64"}, {"window", "4"},  {"heads", "4"},
             {"attn_depth", "2"}, {"ff_expand", "2"},  {"qe_reduction", "4"},
             {"share_stage_weights", "0"}, {"lr", "1e-4"}, {"batch", "4"},
             {"patch", "48"},     {"epsilon", "1e-6"}, {"epochs", "1"},
             {"augment", "1"},    {"steps_per_epoch", "0"}, {"seed", "0"},
             {"out", ""}};
      finish(cfg);
      return cmd_train(cfg);
    }
    if (app.got_subcommand(enhance)) {
      cfg = {{"manifest", ""}, {"drl_ckpt", ""}, {"net_ckpt", ""},
             {"override_level", ""}, {"seed", "0"}, {"out", ""}};
      finish(cfg);
      if (!common.override_level.empty()) cfg["override_level"] = common.override_level;
      return cmd_enhance(cfg);
    }
    if (app.got_subcommand(eval_cmd)) {
      cfg = {{"degraded_manifest", ""}, {"enhanced_manifest", ""},
             {"min_dpsnr", "0.0"}, {"seed", "0"}, {"out", ""}};
      finish(cfg);
      if (common.min_dpsnr_set) cfg["min_dpsnr"] = std::to_string(common.min_dpsnr);
      return cmd_eval(cfg, common.assert_mode);
    }
    if (app.got_subcommand(profile)) {
      cfg = {{"traces", ""}, {"seed", "0"}, {"out", ""}};
      finish(cfg);
      return cmd_profile(cfg);
    }
    std::cerr << "no subcommand\n";
    return kExitError;
  } catch (const BadKey& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadKey;
  } catch (const AssertFailed& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAssert;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
