#pragma once
// Double-precision tensors with reverse-mode differentiation.
//
// Tensors are value-semantic handles onto shared nodes. Operations defined in
// ops.hpp record a backward function on the result node when grad mode is on
// and at least one input requires gradients. Tensor::backward() runs the tape
// from a scalar root. Everything is single-threaded and deterministic.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace vqe {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct CheckpointError : Error {
  using Error::Error;
};
struct CompatError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by ensure_grad()
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<double> v,
                          bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  int rank() const { return static_cast<int>(node()->shape.size()); }
  int dim(int i) const { return node()->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node()->numel(); }

  double* data() { return node()->value.data(); }
  const double* data() const { return node()->value.data(); }
  std::vector<double>& values() { return node()->value; }
  const std::vector<double>& values() const { return node()->value; }

  double item() const;

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool b) { node()->requires_grad = b; }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Runs reverse-mode accumulation from this scalar.
  void backward() const;

  // Value copy detached from any graph.
  Tensor detach() const;

  NodePtr node() const {
    if (!n_) throw ValidationError("use of undefined tensor");
    return n_;
  }

 private:
  NodePtr n_;
};

bool grad_enabled();

// RAII guard disabling tape recording in its scope.
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

// Seeded RNG with portable derived draws (mt19937_64 bit stream only; the
// distributions are implemented here so results do not depend on the
// standard library's implementation-defined distributions).
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw ValidationError("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  double normal();

  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over raw bytes; used for parameter and config hashing.
uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace vqe
