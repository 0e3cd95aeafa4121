#pragma once
// Layer building blocks, parameter bookkeeping and the optimizer shared by
// the degradation encoder and the enhancement network.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vqe/ops.hpp"

namespace vqe::nn {

// Ordered named parameter list. Modules register tensors here; the optimizer
// and checkpoints address parameters by name and rely on registration order
// being deterministic.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  Tensor find(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  int64_t total_values() const;
  // FNV-1a over the raw parameter bytes in registration order.
  uint64_t value_hash() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, size_t> index_;
};

Tensor init_uniform(const Shape& s, int fan_in, Rng& rng);

struct Conv2d {
  Tensor w, b;  // b stays undefined for bias-free convolutions
  int stride = 1, pad = 1, dilation = 1;

  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, int cin, int cout, int k,
         int stride, int pad, int dilation, Rng& rng, bool zero_init = false,
         bool with_bias = true);

  Tensor forward(const Tensor& x) const {
    return conv2d(x, w, b, stride, pad, dilation);
  }
};

struct Linear {
  Tensor w, b;  // w stored [in, out]

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng,
         bool zero_init = false);

  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, int dim);

  Tensor forward(const Tensor& x) const {
    return layer_norm(x, gain, bias);
  }
};

struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  // first/second moment per parameter, in registry order
  std::vector<std::vector<double>> m, v;

  void init(const ParamRegistry& reg);
  void step(ParamRegistry& reg);
};

}  // namespace vqe::nn
