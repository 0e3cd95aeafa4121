#include "vqe/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace vqe::train {

namespace {

constexpr char kMagic[8] = {'V', 'Q', 'E', 'C', 'K', 'P', 'T', '\0'};

void put_u32(std::string& s, uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& s, uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::string& s, const std::string& v) {
  put_u64(s, v.size());
  s.append(v);
}
void put_doubles(std::string& s, const double* d, size_t n) {
  s.append(reinterpret_cast<const char*>(d), n * sizeof(double));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size())
      throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    uint64_t n = u64();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  std::vector<double> doubles(uint64_t n) {
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), buf.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    return v;
  }
};

}  // namespace

void save_checkpoint(const nn::ParamRegistry& reg, const nn::Adam* opt,
                     const std::string& kind, const std::string& config_json,
                     const std::string& meta_json, const std::string& path) {
  std::string body;
  body.append(kMagic, 8);
  put_u32(body, kCheckpointVersion);
  put_str(body, kind);
  put_str(body, config_json);
  put_u64(body, fnv1a(config_json.data(), config_json.size()));
  put_str(body, meta_json);
  put_u32(body, static_cast<uint32_t>(reg.entries().size()));
  for (const auto& [name, t] : reg.entries()) {
    put_str(body, name);
    put_u32(body, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(body, static_cast<uint32_t>(t.dim(i)));
    put_u64(body, static_cast<uint64_t>(t.numel()));
    put_doubles(body, t.data(), static_cast<size_t>(t.numel()));
  }
  if (opt && opt->m.size() == reg.entries().size()) {
    body.push_back(1);
    put_u64(body, static_cast<uint64_t>(opt->step_count));
    for (size_t p = 0; p < reg.entries().size(); ++p) {
      put_doubles(body, opt->m[p].data(), opt->m[p].size());
      put_doubles(body, opt->v[p].data(), opt->v[p].size());
    }
  } else {
    body.push_back(0);
  }
  uint64_t checksum = fnv1a(body.data(), body.size());
  put_u64(body, checksum);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("save_checkpoint: short write to " + path);
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string buf = ss.str();
  if (buf.size() < 8 + 4 + 8) throw CheckpointError("checkpoint too small: " + path);

  uint64_t stored_sum;
  std::memcpy(&stored_sum, buf.data() + buf.size() - 8, 8);
  if (fnv1a(buf.data(), buf.size() - 8) != stored_sum)
    throw CheckpointError("checkpoint checksum mismatch: " + path);

  Reader r{buf};
  r.need(8);
  if (std::memcmp(buf.data(), kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  r.pos = 8;
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) +
                          " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  LoadedCheckpoint ck;
  ck.kind = r.str();
  ck.config_json = r.str();
  uint64_t cfg_hash = r.u64();
  if (fnv1a(ck.config_json.data(), ck.config_json.size()) != cfg_hash)
    throw CheckpointError("checkpoint config hash mismatch: " + path);
  ck.meta_json = r.str();
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    uint32_t rank = r.u32();
    int64_t expect = 1;
    for (uint32_t d = 0; d < rank; ++d) expect *= r.u32();
    uint64_t n = r.u64();
    if (static_cast<int64_t>(n) != expect)
      throw CheckpointError("checkpoint parameter " + name + " is inconsistent");
    ck.params.emplace_back(std::move(name), r.doubles(n));
  }
  r.need(1);
  ck.has_opt = buf[r.pos++] != 0;
  if (ck.has_opt) {
    ck.opt_step = static_cast<int64_t>(r.u64());
    for (uint32_t i = 0; i < count; ++i) {
      uint64_t n = ck.params[i].second.size();
      ck.opt_m.push_back(r.doubles(n));
      ck.opt_v.push_back(r.doubles(n));
    }
  }
  return ck;
}

void load_into(const LoadedCheckpoint& ck, nn::ParamRegistry& reg,
               nn::Adam* opt) {
  if (ck.params.size() != reg.entries().size())
    throw CheckpointError("checkpoint holds " + std::to_string(ck.params.size()) +
                          " parameters, model expects " +
                          std::to_string(reg.entries().size()));
  for (size_t i = 0; i < ck.params.size(); ++i) {
    const auto& [name, values] = ck.params[i];
    const auto& [expect_name, t] = reg.entries()[i];
    if (name != expect_name)
      throw CheckpointError("checkpoint parameter order mismatch: " + name +
                            " vs " + expect_name);
    Tensor dst = t;
    if (static_cast<int64_t>(values.size()) != dst.numel())
      throw CheckpointError("checkpoint parameter " + name + " size mismatch");
    std::copy(values.begin(), values.end(), dst.values().begin());
  }
  if (opt) {
    if (!ck.has_opt)
      throw CheckpointError("checkpoint has no optimizer state");
    opt->init(reg);
    opt->step_count = ck.opt_step;
    opt->m = ck.opt_m;
    opt->v = ck.opt_v;
  }
}

void save_drl_checkpoint(const drl::DrlModel& model, const nn::Adam* opt,
                         const std::string& meta_json, const std::string& path) {
  save_checkpoint(model.params(), opt, kKindDrl, model.config().to_json(),
                  meta_json, path);
}

drl::DrlModel load_drl_checkpoint(const std::string& path, nn::Adam* opt) {
  LoadedCheckpoint ck = read_checkpoint(path);
  if (ck.kind != kKindDrl)
    throw CheckpointError("checkpoint " + path + " holds a '" + ck.kind +
                          "' model, expected '" + kKindDrl + "'");
  drl::DrlModel model(drl::DrlConfig::from_json(ck.config_json), 0);
  load_into(ck, model.params(), opt);
  return model;
}

void save_net_checkpoint(const net::QecvModel& model, const nn::Adam* opt,
                         const std::string& meta_json, const std::string& path) {
  save_checkpoint(model.params(), opt, kKindQecv, model.config().to_json(),
                  meta_json, path);
}

net::QecvModel load_net_checkpoint(const std::string& path, nn::Adam* opt) {
  LoadedCheckpoint ck = read_checkpoint(path);
  if (ck.kind != kKindQecv)
    throw CheckpointError("checkpoint " + path + " holds a '" + ck.kind +
                          "' model, expected '" + kKindQecv + "'");
  net::QecvModel model(net::NetConfig::from_json(ck.config_json), 0);
  load_into(ck, model.params(), opt);
  return model;
}

}  // namespace vqe::train
