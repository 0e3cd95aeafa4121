#include "vqe/nn.hpp"

#include <cmath>

namespace vqe::nn {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  if (index_.count(name))
    throw ConfigError("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].second;
}

int64_t ParamRegistry::total_values() const {
  int64_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

uint64_t ParamRegistry::value_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : entries_) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
  }
  return h;
}

void ParamRegistry::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

Tensor init_uniform(const Shape& s, int fan_in, Rng& rng) {
  // Kaiming-style bound keeps activation variance through deep ReLU stacks.
  double bound = std::sqrt(6.0 / static_cast<double>(std::max(1, fan_in)));
  Tensor t = Tensor::zeros(s);
  for (auto& x : t.values()) x = rng.uniform(-bound, bound);
  return t;
}

namespace {

Tensor init_bias(int n, int fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  Tensor t = Tensor::zeros({n});
  for (auto& x : t.values()) x = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int cin, int cout,
               int k, int stride_, int pad_, int dilation_, Rng& rng,
               bool zero_init, bool with_bias)
    : stride(stride_), pad(pad_), dilation(dilation_) {
  int fan_in = cin * k * k;
  w = reg.add(name + ".w", zero_init ? Tensor::zeros({cout, cin, k, k})
                                     : init_uniform({cout, cin, k, k}, fan_in, rng));
  if (with_bias)
    b = reg.add(name + ".b",
                zero_init ? Tensor::zeros({cout}) : init_bias(cout, fan_in, rng));
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in, int out,
               Rng& rng, bool zero_init) {
  w = reg.add(name + ".w", zero_init ? Tensor::zeros({in, out})
                                     : init_uniform({in, out}, in, rng));
  b = reg.add(name + ".b",
              zero_init ? Tensor::zeros({out}) : init_bias(out, in, rng));
}

Tensor Linear::forward(const Tensor& x) const {
  int in = w.dim(0), out = w.dim(1);
  if (x.dim(x.rank() - 1) != in)
    throw ShapeError("linear: input features " + shape_str(x.shape()) +
                     " do not match weight " + shape_str(w.shape()));
  Shape os = x.shape();
  os.back() = out;
  int64_t rows = x.numel() / in;
  Tensor flat = reshape(x, {static_cast<int>(rows), in});
  Tensor y = add_row_bias(matmul(flat, w), b);
  return reshape(y, os);
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, int dim) {
  gain = reg.add(name + ".g", Tensor::full({dim}, 1.0));
  bias = reg.add(name + ".b", Tensor::zeros({dim}));
}

void Adam::init(const ParamRegistry& reg) {
  m.clear();
  v.clear();
  for (const auto& [name, t] : reg.entries()) {
    m.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
  step_count = 0;
}

void Adam::step(ParamRegistry& reg) {
  if (m.size() != reg.entries().size()) init(reg);
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (size_t p = 0; p < reg.entries().size(); ++p) {
    Tensor t = reg.entries()[p].second;
    const std::vector<double>& g = t.grad();
    double* val = t.data();
    std::vector<double>& mp = m[p];
    std::vector<double>& vp = v[p];
    for (size_t i = 0; i < g.size(); ++i) {
      mp[i] = beta1 * mp[i] + (1.0 - beta1) * g[i];
      vp[i] = beta2 * vp[i] + (1.0 - beta2) * g[i] * g[i];
      double mhat = mp[i] / bc1;
      double vhat = vp[i] / bc2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace vqe::nn
