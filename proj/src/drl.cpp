#include "vqe/drl.hpp"

#include <cmath>

#include <json.hpp>

namespace vqe::drl {

void DrlConfig::validate() const {
  if (stage_channels.size() != 4)
    throw ConfigError("drl: expected 4 encoder stages");
  for (int c : stage_channels)
    if (c <= 0) throw ConfigError("drl: non-positive stage channel count");
  if (residual_blocks_per_stage < 0)
    throw ConfigError("drl: negative residual block count");
  if (class_count < 2) throw ConfigError("drl: class_count must be >= 2");
  if (tau <= 0.0) throw ConfigError("drl: tau must be positive");
  if (working_channels <= 0 || mlp_hidden <= 0)
    throw ConfigError("drl: bad head dimensions");
}

std::string DrlConfig::to_json() const {
  nlohmann::json j{{"stage_channels", stage_channels},
                   {"residual_blocks_per_stage", residual_blocks_per_stage},
                   {"class_count", class_count},
                   {"tau", tau},
                   {"lambda_nce", lambda_nce},
                   {"working_channels", working_channels},
                   {"mlp_hidden", mlp_hidden}};
  return j.dump();
}

DrlConfig DrlConfig::from_json(const std::string& s) {
  nlohmann::json j = nlohmann::json::parse(s);
  DrlConfig c;
  c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  c.residual_blocks_per_stage = j.at("residual_blocks_per_stage").get<int>();
  c.class_count = j.at("class_count").get<int>();
  c.tau = j.at("tau").get<double>();
  c.lambda_nce = j.at("lambda_nce").get<double>();
  c.working_channels = j.at("working_channels").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.validate();
  return c;
}

DrlModel::DrlModel(const DrlConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::mix(seed, 0x44524c));
  int in_ch = 1;
  for (size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
    int ch = cfg_.stage_channels[i];
    std::string base = "enc.s" + std::to_string(i);
    Stage st;
    st.entry = nn::Conv2d(reg_, base + ".entry", in_ch, ch, 3, 1, 1, 1, rng);
    for (int b = 0; b < cfg_.residual_blocks_per_stage; ++b) {
      std::string bb = base + ".blk" + std::to_string(b);
      // second conv zero-initialized: blocks start as the identity, keeping
      // feature scale stable through the deep stack
      st.blocks.emplace_back(nn::Conv2d(reg_, bb + ".c1", ch, ch, 3, 1, 1, 1, rng),
                             nn::Conv2d(reg_, bb + ".c2", ch, ch, 3, 1, 1, 1, rng,
                                        true));
    }
    st.down = nn::Conv2d(reg_, base + ".down", ch, ch, 3, 2, 1, 1, rng);
    stages_.push_back(std::move(st));
    in_ch = ch;
  }
  int wc = cfg_.working_channels;
  proj1_ = nn::Conv2d(reg_, "fr.proj1", cfg_.stage_channels[1], wc, 1, 1, 0, 1,
                      rng, false, false);
  proj2_ = nn::Conv2d(reg_, "fr.proj2", cfg_.stage_channels[2], wc, 1, 1, 0, 1,
                      rng, false, false);
  proj3_ = nn::Conv2d(reg_, "fr.proj3", cfg_.stage_channels[3], wc, 1, 1, 0, 1,
                      rng, false, false);
  fr_out_ = nn::Conv2d(reg_, "fr.out", wc, wc, 3, 1, 1, 1, rng);
  fc1_ = nn::Linear(reg_, "cls.fc1", cfg_.fv_dim(), cfg_.mlp_hidden, rng);
  fc2_ = nn::Linear(reg_, "cls.fc2", cfg_.mlp_hidden, cfg_.class_count, rng);
}

EncoderFeatures DrlModel::encode(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 1)
    throw ShapeError("drl encode: expected [N,1,H,W], got " + shape_str(x.shape()));
  int ds = cfg_.total_downsample();
  if (x.dim(2) % ds != 0 || x.dim(3) % ds != 0)
    throw ShapeError("drl encode: " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " not divisible by " +
                     std::to_string(ds));
  EncoderFeatures out;
  Tensor h = x;
  Tensor* feats[4] = {&out.f0, &out.f1, &out.f2, &out.f3};
  for (size_t i = 0; i < stages_.size(); ++i) {
    const Stage& st = stages_[i];
    h = relu(st.entry.forward(h));
    for (const auto& [c1, c2] : st.blocks)
      h = add(h, c2.forward(relu(c1.forward(h))));
    h = relu(st.down.forward(h));
    *feats[i] = h;
  }
  return out;
}

Tensor DrlModel::degradation_tensor(const Tensor& f1, const Tensor& f2,
                                    const Tensor& f3, int th, int tw) const {
  Tensor p1 = bilinear_upsample(proj1_.forward(f1), th, tw);
  Tensor p2 = bilinear_upsample(proj2_.forward(f2), th, tw);
  Tensor p3 = bilinear_upsample(proj3_.forward(f3), th, tw);
  return fr_out_.forward(add(add(p1, p2), p3));
}

Tensor DrlModel::degradation_vector(const Tensor& f3) {
  return global_avg_pool(f3);
}

Tensor DrlModel::classify(const Tensor& fv) const {
  return fc2_.forward(relu(fc1_.forward(fv)));
}

int DrlModel::argmax_level(const Tensor& logits, int row) {
  int c = logits.dim(logits.rank() - 1);
  const double* p = logits.data() + static_cast<int64_t>(row) * c;
  int best = 0;
  for (int j = 1; j < c; ++j)
    if (p[j] > p[best]) best = j;  // ties keep the lower index
  return best;
}

DegradationRep DrlModel::forward(const codec::Image& frame) const {
  Tensor x = codec::image_to_tensor(frame, 1.0 / 255.0);
  EncoderFeatures f = encode(x);
  DegradationRep rep;
  rep.f_r = degradation_tensor(f.f1, f.f2, f.f3, frame.h, frame.w);
  rep.f_v = degradation_vector(f.f3);
  rep.logits = classify(rep.f_v);
  rep.level = argmax_level(rep.logits);
  return rep;
}

std::pair<Tensor, Tensor> DrlModel::forward_patches(
    const std::vector<codec::Image>& patches) const {
  Tensor x = codec::images_to_tensor(patches, 1.0 / 255.0);
  EncoderFeatures f = encode(x);
  Tensor fv = degradation_vector(f.f3);
  Tensor logits = classify(fv);
  return {fv, logits};
}

Tensor cross_entropy_loss(const Tensor& logits, const Tensor& onehot) {
  if (logits.rank() != 2 || onehot.shape() != logits.shape())
    throw ShapeError("cross_entropy_loss: expected matching [R,C] inputs");
  int r = logits.dim(0), c = logits.dim(1);
  for (int i = 0; i < r; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < c; ++j) {
      double v = onehot.data()[static_cast<int64_t>(i) * c + j];
      if (v != 0.0 && v != 1.0)
        throw ValidationError("cross_entropy_loss: labels must be one-hot");
      row_sum += v;
    }
    if (row_sum != 1.0)
      throw ValidationError("cross_entropy_loss: label row " + std::to_string(i) +
                            " sums to " + std::to_string(row_sum));
  }
  Tensor lp = log_softmax_lastdim(logits);
  return mul_scalar(sum_all(mul(lp, onehot)), -1.0 / r);
}

Tensor info_nce_loss(const Tensor& vectors, const std::vector<int>& positive,
                     double tau) {
  if (vectors.rank() != 2) throw ShapeError("info_nce_loss: expected [R,D]");
  int r = vectors.dim(0);
  if (r < 4) throw ValidationError("info_nce_loss: need at least 4 samples");
  if (static_cast<int>(positive.size()) != r)
    throw ValidationError("info_nce_loss: positive map size mismatch");
  for (int i = 0; i < r; ++i) {
    int p = positive[static_cast<size_t>(i)];
    if (p < 0 || p >= r || p == i)
      throw ValidationError("info_nce_loss: invalid positive index for sample " +
                            std::to_string(i));
  }
  if (tau <= 0.0) throw ValidationError("info_nce_loss: tau must be positive");
  Tensor z = row_l2_normalize(vectors);
  Tensor sim = mul_scalar(matmul(z, transpose(z)), 1.0 / tau);
  Tensor mask = Tensor::zeros({r, r});
  for (int i = 0; i < r; ++i) mask.data()[static_cast<int64_t>(i) * r + i] = -1e30;
  Tensor lsm = log_softmax_lastdim(add(sim, mask));
  Tensor pos = gather_rows(lsm, positive);
  return mul_scalar(sum_all(pos), -1.0 / r);
}

Tensor drl_total_loss(const Tensor& ce, const Tensor& nce, double lambda) {
  if (!std::isfinite(ce.item()) || !std::isfinite(nce.item()))
    throw ValidationError("drl_total_loss: non-finite loss input");
  return add(ce, mul_scalar(nce, lambda));
}

std::vector<LossPoint> pretrain_drl(DrlModel& model,
                                    const std::vector<codec::Clip>& clips,
                                    const DrlTrainConfig& tc) {
  if (clips.empty()) throw ConfigError("pretrain_drl: empty dataset");
  int total_frames = 0;
  for (const auto& c : clips) {
    total_frames += c.frame_count();
    int label = c.label ? *c.label : -1;
    if (label < 0 || label >= model.config().class_count)
      throw ConfigError("pretrain_drl: clip without a valid class label");
  }
  int steps = tc.steps_per_epoch > 0
                  ? tc.steps_per_epoch
                  : std::max(1, total_frames / std::max(1, tc.pairs_per_batch));
  int c = model.config().class_count;
  double tau = model.config().tau;
  double lambda = model.config().lambda_nce;

  nn::Adam opt;
  opt.lr = tc.lr;
  opt.init(model.params());

  std::vector<LossPoint> curve;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int step = 0; step < steps; ++step) {
      uint64_t bseed = Rng::mix(tc.seed, (static_cast<uint64_t>(epoch) << 32) |
                                             static_cast<uint64_t>(step));
      codec::PatchBatch batch =
          make_patch_batch(clips, tc.pairs_per_batch, tc.patch, bseed);
      auto [fv, logits] = model.forward_patches(batch.patches);
      Tensor onehot = Tensor::zeros({2 * batch.pairs, c});
      for (int i = 0; i < 2 * batch.pairs; ++i)
        onehot.data()[static_cast<int64_t>(i) * c + batch.labels[static_cast<size_t>(i)]] = 1.0;
      Tensor ce = cross_entropy_loss(logits, onehot);
      Tensor nce = info_nce_loss(fv, batch.positive, tau);
      Tensor total = drl_total_loss(ce, nce, lambda);
      model.params().zero_grad();
      total.backward();
      opt.step(model.params());
      curve.push_back({epoch, step, total.item()});
    }
  }
  return curve;
}

}  // namespace vqe::drl
