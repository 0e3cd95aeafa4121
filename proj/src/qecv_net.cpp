#include "vqe/qecv_net.hpp"

#include <chrono>
#include <cmath>

#include <json.hpp>

namespace vqe::net {

void NetConfig::validate() const {
  if (radius < 0) throw ConfigError("net: negative radius");
  if (feat_channels <= 0) throw ConfigError("net: bad feat_channels");
  if (max_stages < 1) throw ConfigError("net: need at least one stage");
  if (window < 2 || window % 2 != 0)
    throw ConfigError("net: window must be even and >= 2");
  if (heads < 1 || feat_channels % heads != 0)
    throw ConfigError("net: heads must divide feat_channels");
  if (attn_depth < 1) throw ConfigError("net: attn_depth must be >= 1");
  if (dilations != std::vector<int>{1, 2, 4})
    throw ConfigError("net: dilation set must be {1,2,4}");
  if (deform_points != 9)
    throw ConfigError("net: alignment supports 9 sampling points");
  if (fv_dim <= 0) throw ConfigError("net: bad fv_dim");
  if (ff_expand < 1) throw ConfigError("net: bad ff_expand");
  if (qe_reduction < 1 || feat_channels % qe_reduction != 0)
    throw ConfigError("net: qe_reduction must divide feat_channels");
}

std::string NetConfig::to_json() const {
  nlohmann::json j{{"radius", radius},
                   {"feat_channels", feat_channels},
                   {"max_stages", max_stages},
                   {"window", window},
                   {"heads", heads},
                   {"attn_depth", attn_depth},
                   {"dilations", dilations},
                   {"deform_points", deform_points},
                   {"fv_dim", fv_dim},
                   {"ff_expand", ff_expand},
                   {"qe_reduction", qe_reduction},
                   {"share_stage_weights", share_stage_weights}};
  return j.dump();
}

NetConfig NetConfig::from_json(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  NetConfig c;
  c.radius = j.at("radius").get<int>();
  c.feat_channels = j.at("feat_channels").get<int>();
  c.max_stages = j.at("max_stages").get<int>();
  c.window = j.at("window").get<int>();
  c.heads = j.at("heads").get<int>();
  c.attn_depth = j.at("attn_depth").get<int>();
  c.dilations = j.at("dilations").get<std::vector<int>>();
  c.deform_points = j.at("deform_points").get<int>();
  c.fv_dim = j.at("fv_dim").get<int>();
  c.ff_expand = j.at("ff_expand").get<int>();
  c.qe_reduction = j.at("qe_reduction").get<int>();
  c.share_stage_weights = j.at("share_stage_weights").get<bool>();
  c.validate();
  return c;
}

void check_compat(const drl::DrlConfig& dcfg, const NetConfig& ncfg) {
  if (dcfg.working_channels != ncfg.feat_channels)
    throw CompatError("degradation tensor channels " +
                      std::to_string(dcfg.working_channels) +
                      " do not match network channels " +
                      std::to_string(ncfg.feat_channels));
  if (dcfg.fv_dim() != ncfg.fv_dim)
    throw CompatError("degradation vector length " +
                      std::to_string(dcfg.fv_dim()) + " does not match " +
                      std::to_string(ncfg.fv_dim));
  if (dcfg.class_count != ncfg.max_stages)
    throw CompatError("class count " + std::to_string(dcfg.class_count) +
                      " does not match stage count " +
                      std::to_string(ncfg.max_stages));
}

// --------------------------------------------------------------- cost model

namespace {

double attn_block_macs(const NetConfig& cfg, int h, int w, bool shifted) {
  double c = cfg.feat_channels;
  int win = cfg.window;
  int s = shifted ? win / 2 : 0;
  int nh = (h + s + win - 1) / win;
  int nw = (w + s + win - 1) / win;
  double tok = static_cast<double>(nh) * nw * win * win;
  double qkv = tok * c * 3.0 * c;
  double attn = 2.0 * static_cast<double>(nh) * nw *
                std::pow(static_cast<double>(win), 4.0) * c;
  double proj = tok * c * c;
  double ff = 2.0 * tok * c * cfg.ff_expand * c;
  return qkv + attn + proj + ff;
}

}  // namespace

double CostModel::stage_macs(const NetConfig& cfg, int h, int w) {
  double c = cfg.feat_channels;
  double hw = static_cast<double>(h) * w;
  double stda = 9.0 * c * c * hw;
  double local = 9.0 * c * c * hw * (static_cast<double>(cfg.dilations.size()) + 1.0);
  double attn = 0.0;
  for (int d = 0; d < cfg.attn_depth; ++d)
    attn += attn_block_macs(cfg, h, w, d % 2 == 1);
  return stda + attn + local;
}

double CostModel::coarse_align_macs(const NetConfig& cfg, int h, int w) {
  double c = cfg.feat_channels;
  double hw = static_cast<double>(h) * w;
  double f = cfg.frames();
  double off = 9.0 * f * c * hw + 9.0 * c * (f * 18.0) * hw;
  double sample = f * 9.0 * hw * 5.0;
  double gemm = c * f * 9.0 * hw;
  double tgt = 9.0 * c * hw;
  double fuse = 9.0 * 2.0 * c * c * hw;
  return off + sample + gemm + tgt + fuse;
}

double CostModel::qe_macs(const NetConfig& cfg, int h, int w) {
  double c = cfg.feat_channels;
  double hw = static_cast<double>(h) * w;
  double full = 9.0 * c * c * hw;
  double half = 9.0 * c * c * hw / 4.0;
  double gates = 2.0 * (2.0 * c * (c / cfg.qe_reduction));
  double fuse = 9.0 * 2.0 * c * c * hw;
  double out = 9.0 * c * hw;
  return full + half + gates + fuse + out;
}

// -------------------------------------------------------------------- model

QecvModel::QecvModel(const NetConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::mix(seed, 0x51454356));
  int c = cfg_.feat_channels;
  int f = cfg_.frames();
  int k = cfg_.deform_points;

  off1_ = nn::Conv2d(reg_, "ca.off1", f, c, 3, 1, 1, 1, rng);
  off2_ = nn::Conv2d(reg_, "ca.off2", c, f * k * 2, 3, 1, 1, 1, rng, true);
  align_w_ = reg_.add("ca.align.w", nn::init_uniform({c, f, k}, f * k, rng));
  align_b_ = reg_.add("ca.align.b", Tensor::zeros({c}));
  tgt_ = nn::Conv2d(reg_, "ca.tgt", 1, c, 3, 1, 1, 1, rng);
  fuse_ = nn::Conv2d(reg_, "ca.fuse", 2 * c, c, 3, 1, 1, 1, rng);

  gate_ = nn::Linear(reg_, "gate.fc", cfg_.fv_dim, c, rng);

  int stage_count = cfg_.share_stage_weights ? 1 : cfg_.max_stages;
  int d_bias = (2 * cfg_.window - 1) * (2 * cfg_.window - 1);
  for (int s = 0; s < stage_count; ++s) {
    std::string base = "stage" + std::to_string(s);
    StageBlocks blk;
    blk.stda_conv = nn::Conv2d(reg_, base + ".stda", c, c, 3, 1, 1, 1, rng);
    for (int a = 0; a < cfg_.attn_depth; ++a) {
      std::string ab = base + ".attn" + std::to_string(a);
      AttnBlock at;
      at.ln1 = nn::LayerNorm(reg_, ab + ".ln1", c);
      at.qkv = nn::Linear(reg_, ab + ".qkv", c, 3 * c, rng);
      at.proj = nn::Linear(reg_, ab + ".proj", c, c, rng);
      at.ln2 = nn::LayerNorm(reg_, ab + ".ln2", c);
      at.ff1 = nn::Linear(reg_, ab + ".ff1", c, cfg_.ff_expand * c, rng);
      at.ff2 = nn::Linear(reg_, ab + ".ff2", cfg_.ff_expand * c, c, rng);
      at.rel_bias = reg_.add(ab + ".bias", Tensor::zeros({cfg_.heads, d_bias}));
      at.shifted = a % 2 == 1;
      blk.attn.push_back(std::move(at));
    }
    for (int d : cfg_.dilations)
      blk.dil.push_back(nn::Conv2d(reg_, base + ".local.d" + std::to_string(d),
                                   c, c, 3, 1, d, d, rng));
    blk.local_out = nn::Conv2d(reg_, base + ".local.out", c, c, 3, 1, 1, 1, rng);
    blocks_.push_back(std::move(blk));
  }

  qe_full_ = nn::Conv2d(reg_, "qe.full", c, c, 3, 1, 1, 1, rng);
  qe_fc1_full_ = nn::Linear(reg_, "qe.ca_full.fc1", c, c / cfg_.qe_reduction, rng);
  qe_fc2_full_ = nn::Linear(reg_, "qe.ca_full.fc2", c / cfg_.qe_reduction, c, rng);
  qe_half_ = nn::Conv2d(reg_, "qe.half", c, c, 3, 1, 1, 1, rng);
  qe_fc1_half_ = nn::Linear(reg_, "qe.ca_half.fc1", c, c / cfg_.qe_reduction, rng);
  qe_fc2_half_ = nn::Linear(reg_, "qe.ca_half.fc2", c / cfg_.qe_reduction, c, rng);
  qe_fuse_ = nn::Conv2d(reg_, "qe.fuse", 2 * c, c, 3, 1, 1, 1, rng);
  qe_out_ = nn::Conv2d(reg_, "qe.out", c, 1, 3, 1, 1, 1, rng, true);
}

Tensor QecvModel::project_gate(const Tensor& fv) const {
  if (fv.rank() != 2 || fv.dim(1) != cfg_.fv_dim)
    throw ShapeError("project_gate: expected [N," + std::to_string(cfg_.fv_dim) +
                     "], got " + shape_str(fv.shape()));
  return sigmoid(gate_.forward(fv));
}

Tensor QecvModel::coarse_align(const Tensor& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != cfg_.frames())
    throw ShapeError("coarse_align: expected [N," +
                     std::to_string(cfg_.frames()) + ",H,W], got " +
                     shape_str(frames.shape()));
  if (frames.dim(2) % 4 != 0 || frames.dim(3) % 4 != 0)
    throw ShapeError("coarse_align: dims must be divisible by 4");
  Tensor offsets = off2_.forward(relu(off1_.forward(frames)));
  Tensor aligned = deform_align(frames, offsets, align_w_, align_b_);
  Tensor target = narrow(frames, 1, cfg_.radius, 1);
  Tensor tfeat = tgt_.forward(target);
  return fuse_.forward(relu(concat({aligned, tfeat}, 1)));
}

Tensor QecvModel::stda(int stage_idx, const Tensor& f_prev, const Tensor& f_r,
                       const Tensor& gate) const {
  if (f_prev.shape() != f_r.shape())
    throw ShapeError("stda: feature/degradation shape mismatch " +
                     shape_str(f_prev.shape()) + " vs " + shape_str(f_r.shape()));
  const StageBlocks& blk = stage(stage_idx);
  Tensor mixed = add(blk.stda_conv.forward(f_prev), f_r);
  return add(f_prev, scale_channels(mixed, gate));
}

Tensor QecvModel::attn_forward(const AttnBlock& blk, const Tensor& x) const {
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int win = cfg_.window;
  int s = blk.shifted ? win / 2 : 0;
  int pad_b = (win - (h + s) % win) % win;
  int pad_r = (win - (w + s) % win) % win;
  int hp = h + s + pad_b, wp = w + s + pad_r;
  int nh = hp / win, nw = wp / win;
  int t = win * win;
  int b = n * nh * nw;
  int hd = c / cfg_.heads;

  Tensor xp = s + pad_b + pad_r > 0 ? pad2d(x, s, pad_b, s, pad_r) : x;
  Tensor tokens = reshape(
      permute(reshape(xp, {n, c, nh, win, nw, win}), {0, 2, 4, 3, 5, 1}),
      {b, t, c});

  // additive key mask: 0 inside the original frame, -1e30 in padding
  Tensor mask = Tensor::zeros({b, t, t});
  {
    std::vector<double> win_mask(static_cast<size_t>(t));
    for (int wy = 0; wy < nh; ++wy)
      for (int wx = 0; wx < nw; ++wx) {
        bool any_invalid = false;
        for (int ty = 0; ty < win; ++ty)
          for (int tx = 0; tx < win; ++tx) {
            int gy = wy * win + ty - s, gx = wx * win + tx - s;
            bool valid = gy >= 0 && gy < h && gx >= 0 && gx < w;
            win_mask[static_cast<size_t>(ty * win + tx)] = valid ? 0.0 : -1e30;
            any_invalid = any_invalid || !valid;
          }
        if (!any_invalid) continue;
        for (int ni = 0; ni < n; ++ni) {
          double* dst = mask.data() +
                        (static_cast<int64_t>((ni * nh + wy) * nw + wx)) * t * t;
          for (int tq = 0; tq < t; ++tq)
            for (int tk = 0; tk < t; ++tk) dst[tq * t + tk] = win_mask[static_cast<size_t>(tk)];
        }
      }
  }

  // relative-position index into the (2w-1)^2 bias table
  std::vector<int> rel_idx(static_cast<size_t>(t) * t);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j) {
      int dy = i / win - j / win + win - 1;
      int dx = i % win - j % win + win - 1;
      rel_idx[static_cast<size_t>(i) * t + j] = dy * (2 * win - 1) + dx;
    }

  Tensor hnorm = blk.ln1.forward(tokens);
  Tensor qkv_out = blk.qkv.forward(hnorm);
  Tensor q = narrow(qkv_out, 2, 0, c);
  Tensor k = narrow(qkv_out, 2, c, c);
  Tensor v = narrow(qkv_out, 2, 2 * c, c);
  auto to_heads = [&](const Tensor& z) {
    return reshape(permute(reshape(z, {b, t, cfg_.heads, hd}), {0, 2, 1, 3}),
                   {b * cfg_.heads, t, hd});
  };
  Tensor qh = to_heads(q);
  Tensor kt = reshape(permute(reshape(k, {b, t, cfg_.heads, hd}), {0, 2, 3, 1}),
                      {b * cfg_.heads, hd, t});
  Tensor vh = to_heads(v);

  Tensor scores = reshape(mul_scalar(bmm(qh, kt), 1.0 / std::sqrt(static_cast<double>(hd))),
                          {b, cfg_.heads, t, t});
  Tensor bias = reshape(index_select_lastdim(blk.rel_bias, rel_idx),
                        {cfg_.heads, t, t});
  scores = add_mask_bts(add_bias_bht(scores, bias), mask);
  Tensor attn = reshape(softmax_lastdim(scores), {b * cfg_.heads, t, t});
  Tensor av = bmm(attn, vh);
  Tensor merged = reshape(permute(reshape(av, {b, cfg_.heads, t, hd}), {0, 2, 1, 3}),
                          {b, t, c});
  Tensor out = add(tokens, blk.proj.forward(merged));
  out = add(out, blk.ff2.forward(gelu(blk.ff1.forward(blk.ln2.forward(out)))));

  Tensor y = reshape(permute(reshape(out, {n, nh, nw, win, win, c}),
                             {0, 5, 1, 3, 2, 4}),
                     {n, c, hp, wp});
  return crop2d(y, s, s, h, w);
}

Tensor QecvModel::dglf_global(int stage_idx, const Tensor& f_a) const {
  if (f_a.dim(2) % cfg_.window != 0 || f_a.dim(3) % cfg_.window != 0)
    throw ShapeError("dglf_global: dims must be divisible by the window");
  Tensor h = f_a;
  for (const AttnBlock& blk : stage(stage_idx).attn) h = attn_forward(blk, h);
  return h;
}

Tensor QecvModel::dglf_local(int stage_idx, const Tensor& f_a) const {
  const StageBlocks& blk = stage(stage_idx);
  Tensor s = blk.dil[0].forward(f_a);
  for (size_t i = 1; i < blk.dil.size(); ++i)
    s = add(s, blk.dil[i].forward(f_a));
  return add(f_a, blk.local_out.forward(relu(s)));
}

Tensor QecvModel::dglf(int stage_idx, const Tensor& f_a) const {
  return add(dglf_global(stage_idx, f_a), dglf_local(stage_idx, f_a));
}

std::pair<Tensor, StageTrace> QecvModel::htar(const Tensor& f0, const Tensor& f_r,
                                              const Tensor& gate, int level) const {
  if (level < 0 || level >= cfg_.max_stages)
    throw ValidationError("htar: level " + std::to_string(level) +
                          " outside [0," + std::to_string(cfg_.max_stages - 1) +
                          "]");
  StageTrace trace;
  trace.level = level;
  trace.executed_stages = level + 1;
  double per_stage = CostModel::stage_macs(cfg_, f0.dim(2), f0.dim(3));
  Tensor h = f0;
  for (int i = 0; i <= level; ++i) {
    h = dglf(i, stda(i, h, f_r, gate));
    trace.per_stage_cost.push_back(per_stage);
  }
  return {h, trace};
}

Tensor QecvModel::run_all_stages(const Tensor& f0, const Tensor& f_r,
                                 const Tensor& gate) const {
  Tensor h = f0;
  for (int i = 0; i < cfg_.max_stages; ++i) h = dglf(i, stda(i, h, f_r, gate));
  return h;
}

Tensor QecvModel::quality_enhance(const Tensor& f_final, const Tensor& x01) const {
  if (f_final.dim(2) != x01.dim(2) || f_final.dim(3) != x01.dim(3))
    throw ShapeError("quality_enhance: feature/frame size mismatch");
  if (f_final.dim(2) % 2 != 0 || f_final.dim(3) % 2 != 0)
    throw ShapeError("quality_enhance: dims must be even");
  int h = f_final.dim(2), w = f_final.dim(3);

  Tensor h1 = relu(qe_full_.forward(f_final));
  Tensor g1 = sigmoid(qe_fc2_full_.forward(relu(qe_fc1_full_.forward(global_avg_pool(h1)))));
  h1 = scale_channels(h1, g1);

  Tensor h2 = relu(qe_half_.forward(avg_pool2d(f_final, 2)));
  Tensor g2 = sigmoid(qe_fc2_half_.forward(relu(qe_fc1_half_.forward(global_avg_pool(h2)))));
  h2 = bilinear_upsample(scale_channels(h2, g2), h, w);

  Tensor m = relu(qe_fuse_.forward(concat({h1, h2}, 1)));
  Tensor residual = qe_out_.forward(m);
  return clamp(add(x01, residual), 0.0, 1.0);
}

QecvModel::ForwardOut QecvModel::forward01(const Tensor& frames01,
                                           const drl::DegradationRep& rep,
                                           int level) const {
  Tensor x01 = narrow(frames01, 1, cfg_.radius, 1);
  Tensor f0 = coarse_align(frames01);
  Tensor gate = project_gate(rep.f_v);
  auto [feat, trace] = htar(f0, rep.f_r, gate, level);
  Tensor enhanced = quality_enhance(feat, x01);
  return {enhanced, trace};
}

// ----------------------------------------------------------------- pipeline

std::pair<codec::Image, StageTrace> enhance_frame(
    const std::vector<codec::Image>& frames, const drl::DrlModel& drl_model,
    const QecvModel& net, std::optional<int> override_level) {
  const NetConfig& cfg = net.config();
  check_compat(drl_model.config(), cfg);
  if (static_cast<int>(frames.size()) != cfg.frames())
    throw ShapeError("enhance_frame: expected " + std::to_string(cfg.frames()) +
                     " frames, got " + std::to_string(frames.size()));
  int h = frames[0].h, w = frames[0].w;
  for (const auto& f : frames)
    if (f.h != h || f.w != w)
      throw ShapeError("enhance_frame: frames differ in size");

  auto t0 = std::chrono::steady_clock::now();
  NoGrad ng;

  int mult = drl_model.config().total_downsample();
  codec::Image target_p = codec::reflect_pad_to_multiple(frames[static_cast<size_t>(cfg.radius)], mult);
  int hp = target_p.h, wp = target_p.w;

  drl::DegradationRep rep = drl_model.forward(target_p);
  int level = override_level ? *override_level : rep.level;

  Tensor stack = Tensor::zeros({1, cfg.frames(), hp, wp});
  for (int i = 0; i < cfg.frames(); ++i) {
    codec::Image p = codec::reflect_pad_to_multiple(frames[static_cast<size_t>(i)], mult);
    for (int64_t j = 0; j < static_cast<int64_t>(hp) * wp; ++j)
      stack.data()[static_cast<int64_t>(i) * hp * wp + j] = p.v[static_cast<size_t>(j)] / 255.0;
  }

  QecvModel::ForwardOut out = net.forward01(stack, rep, level);
  Tensor cropped = crop2d(out.enhanced01, 0, 0, h, w);
  codec::Image enhanced = codec::tensor_to_image(cropped, 1.0 / 255.0);

  out.trace.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(enhanced), std::move(out.trace)};
}

std::pair<codec::Clip, std::vector<StageTrace>> enhance_clip(
    const codec::Clip& degraded, const drl::DrlModel& drl_model,
    const QecvModel& net, std::optional<int> override_level) {
  int r = net.config().radius;
  int n = degraded.frame_count();
  if (n == 0) throw ValidationError("enhance_clip: empty clip");
  codec::Clip out;
  out.width = degraded.width;
  out.height = degraded.height;
  out.qp = degraded.qp;
  out.label = degraded.label;
  std::vector<StageTrace> traces;
  for (int t = 0; t < n; ++t) {
    std::vector<codec::Image> window;
    for (int d = -r; d <= r; ++d) {
      int idx = std::min(n - 1, std::max(0, t + d));
      window.push_back(degraded.frames[static_cast<size_t>(idx)]);
    }
    auto [img, trace] = enhance_frame(window, drl_model, net, override_level);
    trace.frame_index = t;
    trace.qp = degraded.qp;
    out.frames.push_back(std::move(img));
    traces.push_back(std::move(trace));
  }
  return {std::move(out), std::move(traces)};
}

std::string trace_to_jsonl(const StageTrace& t) {
  nlohmann::json j{{"level", t.level},
                   {"executed_stages", t.executed_stages},
                   {"per_stage_cost", t.per_stage_cost},
                   {"wall_time", t.wall_time},
                   {"frame_index", t.frame_index}};
  if (t.qp) j["qp"] = *t.qp;
  return j.dump();
}

StageTrace trace_from_jsonl(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  StageTrace t;
  t.level = j.at("level").get<int>();
  t.executed_stages = j.at("executed_stages").get<int>();
  t.per_stage_cost = j.at("per_stage_cost").get<std::vector<double>>();
  t.wall_time = j.at("wall_time").get<double>();
  t.frame_index = j.value("frame_index", 0);
  if (j.contains("qp") && !j["qp"].is_null()) t.qp = j["qp"].get<int>();
  return t;
}

}  // namespace vqe::net
