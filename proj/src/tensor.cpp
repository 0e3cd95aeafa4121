#include "vqe/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vqe {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value.assign(static_cast<size_t>(shape_numel(s)), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  Tensor t = zeros(s, requires_grad);
  for (auto& x : t.values()) x = v;
  return t;
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> v,
                         bool requires_grad) {
  if (static_cast<int64_t>(v.size()) != shape_numel(s))
    throw ShapeError("from_data: " + std::to_string(v.size()) +
                     " values for shape " + shape_str(s));
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return node()->value[0];
}

const std::vector<double>& Tensor::grad() const {
  node()->ensure_grad();
  return node()->grad;
}

void Tensor::zero_grad() {
  node()->grad.assign(node()->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node()->shape;
  n->value = node()->value;
  n->requires_grad = false;
  return Tensor(std::move(n));
}

namespace {

void topo_visit(const NodePtr& n, std::unordered_set<TensorNode*>& seen,
                std::vector<NodePtr>& order) {
  if (!n->requires_grad || seen.count(n.get())) return;
  seen.insert(n.get());
  for (const auto& p : n->parents) topo_visit(p, seen, order);
  order.push_back(n);
}

}  // namespace

void Tensor::backward() const {
  if (numel() != 1)
    throw ShapeError("backward() requires a scalar root, got " +
                     shape_str(shape()));
  if (!node()->requires_grad)
    throw ValidationError("backward() on a tensor that requires no grad");
  std::unordered_set<TensorNode*> seen;
  std::vector<NodePtr> order;
  topo_visit(node(), seen, order);
  node()->ensure_grad();
  node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode& n = **it;
    if (n.backward_fn) n.backward_fn(n);
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1, u2;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

uint64_t Rng::mix(uint64_t a, uint64_t b) {
  // splitmix64 finalizer over the combined words
  uint64_t x = a + 0x9e3779b97f4a7c15ull * (b + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

uint64_t fnv1a(const void* data, size_t len, uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vqe
