#pragma once

// Dense tensors with reverse-mode autodiff. Covers exactly the op set the
// model needs: matmul, elementwise arithmetic, tanh, row softmax, RMS norm,
// embedding lookup, row/column concatenation, slicing, row/full means,
// rotary positions, fused multi-head attention and log-prob gathering.
//
// Reduction order is fixed (each output element accumulates its terms in
// index order) so repeated runs are bit-identical. float is the training
// precision; double is used for finite-difference verification.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dempt/common.hpp"

namespace dempt {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    DEMPT_CHECK(d >= 0, "negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

// Thread-local switch: with grads disabled, ops produce plain leaves and no
// graph is recorded (used for inference and scoring).
namespace detail {
inline thread_local bool grad_enabled = true;
}

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode() { return detail::grad_enabled; }

// Visibility mask for attention: rows = queries, cols = keys.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> visible;  // rows*cols, 1 = attend

  bool at(int r, int c) const { return visible[static_cast<size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { visible[static_cast<size_t>(r) * cols + c] = v ? 1 : 0; }
  static Mask all_visible(int rows, int cols) {
    Mask m;
    m.rows = rows;
    m.cols = cols;
    m.visible.assign(static_cast<size_t>(rows) * cols, 1);
    return m;
  }
};

namespace detail {

// Deterministic vectorizable exp/tanh for the 32-bit path (~1e-7 relative
// accuracy); the 64-bit verification path stays on the libm versions.
inline float fast_exp(float x) {
  if (x < -87.0f) return 0.0f;
  if (x > 88.0f) return std::numeric_limits<float>::infinity();
  float k = std::nearbyint(x * 1.442695041f);
  float r = x - k * 0.6931471824645996f;     // ln2 hi
  r -= k * -1.904654323148236e-09f;          // ln2 lo
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  union {
    uint32_t i;
    float f;
  } s;
  s.i = static_cast<uint32_t>(static_cast<int32_t>(k) + 127) << 23;
  return p * s.f;
}
inline double fast_exp(double x) { return std::exp(x); }

inline float fast_tanh(float x) {
  float ax = std::abs(x);
  if (ax >= 9.0f) return x < 0 ? -1.0f : 1.0f;
  float e = fast_exp(2.0f * ax);
  float t = (e - 1.0f) / (e + 1.0f);
  return x < 0 ? -t : t;
}
inline double fast_tanh(double x) { return std::tanh(x); }

// Cached rotary trig tables per head width; values identical to computing
// cos/sin(pos * base^(-2i/dh)) in double on the fly.
template <class T>
struct RopeTable {
  int half = 0;
  std::vector<T> cs, sn;  // [pos][half]
};

template <class T>
const RopeTable<T>& rope_table(int dh, int max_pos, double base = 10000.0) {
  thread_local std::vector<RopeTable<T>> tables;  // indexed by dh
  if (static_cast<int>(tables.size()) <= dh) tables.resize(static_cast<size_t>(dh) + 1);
  RopeTable<T>& t = tables[static_cast<size_t>(dh)];
  t.half = dh / 2;
  int have = t.half ? static_cast<int>(t.cs.size()) / t.half : 0;
  if (have <= max_pos) {
    int want = std::max(max_pos + 1, have * 2 + 64);
    t.cs.resize(static_cast<size_t>(want) * t.half);
    t.sn.resize(static_cast<size_t>(want) * t.half);
    for (int pos = have; pos < want; ++pos) {
      for (int i = 0; i < t.half; ++i) {
        double theta = static_cast<double>(pos) * std::pow(base, -2.0 * i / dh);
        t.cs[static_cast<size_t>(pos) * t.half + i] = static_cast<T>(std::cos(theta));
        t.sn[static_cast<size_t>(pos) * t.half + i] = static_cast<T>(std::sin(theta));
      }
    }
  }
  return t;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until needed; same length as data once allocated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;  // accumulates this node's grad into parents

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// ---- matmul kernels (row-major) ----
// c[m,n] = a[m,k] * b[k,n]; each c element accumulates p = 0..k-1 in order.
template <class T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate)
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T  (rows of a dotted with rows of b)
template <class T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T acc = T(0);
#pragma omp simd reduction(+ : acc)
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    const T* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      T* crow = c + static_cast<size_t>(p) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void axpy(std::span<T> y, std::span<const T> x, T a) {
  for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

}  // namespace detail

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from(std::move(shape), {});
  }

  static Tensor constant(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    auto node = std::make_shared<detail::Node<T>>();
    int64_t n = shape_numel(shape);
    if (data.empty()) data.assign(static_cast<size_t>(n), T(0));
    DEMPT_CHECK(static_cast<int64_t>(data.size()) == n,
                "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    node->shape = std::move(shape);
    node->data = std::move(data);
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  // Trainable leaf: grad storage allocated up front so untouched parameters
  // report zero gradients rather than none.
  static Tensor param(Shape shape, std::vector<T> data = {}) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  int rows() const {
    DEMPT_CHECK(node_->shape.size() == 2, "rows() on non-2D tensor");
    return node_->shape[0];
  }
  int cols() const {
    DEMPT_CHECK(node_->shape.size() == 2, "cols() on non-2D tensor");
    return node_->shape[1];
  }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  bool is_leaf() const { return !node_->backprop; }

  void zero_grad() {
    if (node_->requires_grad) {
      node_->ensure_grad();
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
  }

  T item() const {
    DEMPT_CHECK(size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  // Leaf copy that shares no graph; keeps requires_grad so gradients can be
  // staged here and later pushed through the producing graph (see backward_seeded).
  Tensor detach_as_param() const {
    Tensor t = param(node_->shape, node_->data);
    return t;
  }

  Tensor detach() const {
    Tensor t = from(node_->shape, node_->data);
    return t;
  }

  // Reverse-mode sweep from a scalar. Each reachable node is visited exactly
  // once; gradients accumulate (+=) so batch members sum naturally.
  void backward(T seed = T(1)) const {
    DEMPT_CHECK(size() == 1, "backward() requires a scalar loss, got " + shape_str(shape()));
    DEMPT_CHECK(node_->backprop || node_->requires_grad,
                "backward() on a detached tensor with no recorded graph");
    node_->ensure_grad();
    node_->grad[0] += seed;
    run_backprop({node_});
  }

  // Push pre-accumulated gradients of the given graph outputs back to their
  // inputs (used to run a shared subgraph's backward once per batch).
  static void backward_seeded(std::span<const Tensor> outputs) {
    std::vector<std::shared_ptr<detail::Node<T>>> roots;
    roots.reserve(outputs.size());
    for (const auto& t : outputs) {
      DEMPT_CHECK(t.defined(), "backward_seeded: undefined tensor");
      if (!t.node_->grad.empty()) roots.push_back(t.node_);
    }
    run_backprop(roots);
  }

  // internal access for ops
  std::shared_ptr<detail::Node<T>>& node() { return node_; }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  static void run_backprop(std::vector<std::shared_ptr<detail::Node<T>>> roots) {
    // iterative post-order DFS, reverse gives topological order
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    struct Item {
      detail::Node<T>* node;
      size_t next_child;
    };
    std::vector<Item> stack;
    for (auto& r : roots) {
      if (seen.count(r.get())) continue;
      stack.push_back({r.get(), 0});
      seen.insert(r.get());
      while (!stack.empty()) {
        Item& top = stack.back();
        if (top.next_child < top.node->parents.size()) {
          detail::Node<T>* child = top.node->parents[top.next_child++].get();
          if (child->requires_grad && !seen.count(child)) {
            seen.insert(child);
            stack.push_back({child, 0});
          }
        } else {
          order.push_back(top.node);
          stack.pop_back();
        }
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
  }

  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

template <class T>
std::shared_ptr<Node<T>> fresh(Shape shape, std::vector<T> data) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

template <class T>
bool wants_graph(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled) return false;
  for (const Tensor<T>* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  DEMPT_CHECK(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.size(); ++i) out[i] += b.data()[i];
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    node->backprop = [ap = a.node(), bp = b.node()](detail::Node<T>& self) {
      for (auto& p : {ap, bp}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  DEMPT_CHECK(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.size(); ++i) out[i] -= b.data()[i];
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    node->backprop = [ap = a.node(), bp = b.node()](detail::Node<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bp->grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  DEMPT_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.size(); ++i) out[i] *= b.data()[i];
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    node->backprop = [ap = a.node(), bp = b.node()](detail::Node<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i] * bp->data[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bp->grad[i] += self.grad[i] * ap->data[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), c](detail::Node<T>& self) {
      ap->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += c * self.grad[i];
    };
  }
  return Tensor<T>::wrap(node);
}

namespace detail {

// Generic elementwise unary op; fwd: x -> y, dfn: (x, y) -> dy/dx.
// Also the hook tests use to inject deliberately wrong gradients.
template <class T, class F, class D>
Tensor<T> unary_op(const Tensor<T>& a, F fwd, D dfn) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  auto node = fresh<T>(a.shape(), std::move(out));
  if (wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), dfn](Node<T>& self) {
      ap->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        ap->grad[i] += self.grad[i] * dfn(ap->data[i], self.data[i]);
    };
  }
  return Tensor<T>::wrap(node);
}

}  // namespace detail

template <class T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return detail::fast_tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  DEMPT_CHECK(a.shape().size() == 2 && b.shape().size() == 2, "matmul: 2D tensors required");
  DEMPT_CHECK(a.cols() == b.rows(),
              "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(static_cast<size_t>(m) * n);
  detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto node = detail::fresh<T>({m, n}, std::move(out));
  if (detail::wants_graph<T>({&a, &b})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node()};
    node->backprop = [ap = a.node(), bp = b.node(), m, k, n](detail::Node<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        detail::mm_nt(self.grad.data(), bp->data.data(), ap->grad.data(), m, n, k, true);
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        detail::mm_tn(ap->data.data(), self.grad.data(), bp->grad.data(), m, k, n);
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// Row-wise softmax with max subtraction; each row sums to 1.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  DEMPT_CHECK(a.shape().size() == 2, "softmax_rows: 2D tensor required");
  int m = a.rows(), n = a.cols();
  std::vector<T> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const T* x = a.data().data() + static_cast<size_t>(i) * n;
    T* y = out.data() + static_cast<size_t>(i) * n;
    T mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (int j = 0; j < n; ++j) {
      y[j] = detail::fast_exp(x[j] - mx);
      sum += y[j];
    }
    T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), m, n](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const T* y = self.data.data() + static_cast<size_t>(i) * n;
        const T* dy = self.grad.data() + static_cast<size_t>(i) * n;
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
        T* dx = ap->grad.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// RMS normalization per row with learnable gain (1 x d).
template <class T>
Tensor<T> rmsnorm_rows(const Tensor<T>& a, const Tensor<T>& gain, T eps = T(1e-5)) {
  DEMPT_CHECK(a.shape().size() == 2 && gain.shape().size() == 2 && gain.rows() == 1,
              "rmsnorm_rows: a must be 2D, gain 1 x d");
  DEMPT_CHECK(gain.cols() == a.cols(), "rmsnorm_rows: gain width mismatch");
  int m = a.rows(), n = a.cols();
  std::vector<T> out(static_cast<size_t>(m) * n);
  std::vector<T> inv(m);
  for (int i = 0; i < m; ++i) {
    const T* x = a.data().data() + static_cast<size_t>(i) * n;
    T ms = T(0);
    for (int j = 0; j < n; ++j) ms += x[j] * x[j];
    ms = ms / static_cast<T>(n);
    inv[i] = T(1) / std::sqrt(ms + eps);
    T* y = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) y[j] = x[j] * inv[i] * gain.data()[j];
  }
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a, &gain})) {
    node->requires_grad = true;
    node->parents = {a.node(), gain.node()};
    node->backprop = [ap = a.node(), gp = gain.node(), inv, m, n](detail::Node<T>& self) {
      for (int i = 0; i < m; ++i) {
        const T* x = ap->data.data() + static_cast<size_t>(i) * n;
        const T* dy = self.grad.data() + static_cast<size_t>(i) * n;
        const T* g = gp->data.data();
        if (ap->requires_grad) {
          ap->ensure_grad();
          T dot = T(0);
          for (int j = 0; j < n; ++j) dot += dy[j] * g[j] * x[j];
          T k = inv[i] * inv[i] * inv[i] * dot / static_cast<T>(n);
          T* dx = ap->grad.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) dx[j] += dy[j] * g[j] * inv[i] - x[j] * k;
        }
        if (gp->requires_grad) {
          gp->ensure_grad();
          T* dg = gp->grad.data();
          for (int j = 0; j < n; ++j) dg[j] += dy[j] * x[j] * inv[i];
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// Gather rows of an embedding table; backward scatters into the table rows.
template <class T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<int>& ids) {
  DEMPT_CHECK(table.shape().size() == 2, "embedding_rows: table must be 2D");
  int v = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < ids.size(); ++i) {
    DEMPT_CHECK(ids[i] >= 0 && ids[i] < v,
                "token id " + std::to_string(ids[i]) + " out of vocabulary (size " + std::to_string(v) + ")");
    std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto node = detail::fresh<T>({static_cast<int>(ids.size()), d}, std::move(out));
  if (detail::wants_graph<T>({&table})) {
    node->requires_grad = true;
    node->parents = {table.node()};
    node->backprop = [tp = table.node(), ids, d](detail::Node<T>& self) {
      tp->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        T* dst = tp->grad.data() + static_cast<size_t>(ids[i]) * d;
        const T* src = self.grad.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  DEMPT_CHECK(!parts.empty(), "concat_rows: no inputs");
  int n = parts[0].cols();
  int rows = 0;
  for (const auto& p : parts) {
    DEMPT_CHECK(p.shape().size() == 2 && p.cols() == n, "concat_rows: column mismatch");
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(rows) * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto node = detail::fresh<T>({rows, n}, std::move(out));
  bool graph = false;
  if (grad_mode())
    for (const auto& p : parts)
      if (p.requires_grad()) graph = true;
  if (graph) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backprop = [](detail::Node<T>& self) {
      size_t off = 0;
      for (auto& p : self.parents) {
        size_t len = p->data.size();
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < len; ++i) p->grad[i] += self.grad[off + i];
        }
        off += len;
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  DEMPT_CHECK(!parts.empty(), "concat_cols: no inputs");
  int m = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    DEMPT_CHECK(p.shape().size() == 2 && p.rows() == m, "concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<T> out(static_cast<size_t>(m) * total);
  int off = 0;
  for (const auto& p : parts) {
    int w = p.cols();
    for (int i = 0; i < m; ++i)
      std::copy_n(p.data().data() + static_cast<size_t>(i) * w, w,
                  out.data() + static_cast<size_t>(i) * total + off);
    off += w;
  }
  auto node = detail::fresh<T>({m, total}, std::move(out));
  bool graph = false;
  if (grad_mode())
    for (const auto& p : parts)
      if (p.requires_grad()) graph = true;
  if (graph) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backprop = [m, total](detail::Node<T>& self) {
      int off2 = 0;
      for (auto& p : self.parents) {
        int w = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int i = 0; i < m; ++i) {
            const T* src = self.grad.data() + static_cast<size_t>(i) * total + off2;
            T* dst = p->grad.data() + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        off2 += w;
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int begin, int end) {
  DEMPT_CHECK(a.shape().size() == 2, "slice_rows: 2D tensor required");
  DEMPT_CHECK(0 <= begin && begin <= end && end <= a.rows(),
              "slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                  std::to_string(a.rows()) + " rows");
  int n = a.cols(), m = end - begin;
  std::vector<T> out(a.data().begin() + static_cast<size_t>(begin) * n,
                     a.data().begin() + static_cast<size_t>(end) * n);
  auto node = detail::fresh<T>({m, n}, std::move(out));
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), begin, n](detail::Node<T>& self) {
      ap->ensure_grad();
      T* dst = ap->grad.data() + static_cast<size_t>(begin) * n;
      for (size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    };
  }
  return Tensor<T>::wrap(node);
}

// Mean over rows -> (1 x d).
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  DEMPT_CHECK(a.shape().size() == 2 && a.rows() >= 1, "mean_rows: non-empty 2D tensor required");
  int m = a.rows(), n = a.cols();
  std::vector<T> out(n, T(0));
  for (int i = 0; i < m; ++i) {
    const T* x = a.data().data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) out[j] += x[j];
  }
  T inv = T(1) / static_cast<T>(m);
  for (auto& v : out) v *= inv;
  auto node = detail::fresh<T>({1, n}, std::move(out));
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), m, n, inv](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int i = 0; i < m; ++i) {
        T* dst = ap->grad.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) dst[j] += self.grad[j] * inv;
      }
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  int64_t n = a.size();
  DEMPT_CHECK(n > 0, "mean_all: empty tensor");
  T sum = T(0);
  for (T v : a.data()) sum += v;
  T inv = T(1) / static_cast<T>(n);
  auto node = detail::fresh<T>({1}, {sum * inv});
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), inv](detail::Node<T>& self) {
      ap->ensure_grad();
      for (auto& g : ap->grad) g += self.grad[0] * inv;
    };
  }
  return Tensor<T>::wrap(node);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T sum = T(0);
  for (T v : a.data()) sum += v;
  auto node = detail::fresh<T>({1}, {sum});
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node()](detail::Node<T>& self) {
      ap->ensure_grad();
      for (auto& g : ap->grad) g += self.grad[0];
    };
  }
  return Tensor<T>::wrap(node);
}

// Repeat a (1 x d) row n times -> (n x d); backward sums over rows.
template <class T>
Tensor<T> broadcast_rows(const Tensor<T>& row, int n) {
  DEMPT_CHECK(row.shape().size() == 2 && row.rows() == 1, "broadcast_rows: (1 x d) input required");
  int d = row.cols();
  std::vector<T> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) std::copy_n(row.data().data(), d, out.data() + static_cast<size_t>(i) * d);
  auto node = detail::fresh<T>({n, d}, std::move(out));
  if (detail::wants_graph<T>({&row})) {
    node->requires_grad = true;
    node->parents = {row.node()};
    node->backprop = [rp = row.node(), n, d](detail::Node<T>& self) {
      rp->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const T* src = self.grad.data() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) rp->grad[j] += src[j];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// Add a (1 x d) row to every row of a (leading-dimension broadcast).
template <class T>
Tensor<T> add_row_broadcast(const Tensor<T>& a, const Tensor<T>& row) {
  DEMPT_CHECK(a.shape().size() == 2 && row.shape().size() == 2 && row.rows() == 1 && row.cols() == a.cols(),
              "add_row_broadcast: expected (m x d) + (1 x d)");
  int m = a.rows(), n = a.cols();
  std::vector<T> out(a.data().begin(), a.data().end());
  for (int i = 0; i < m; ++i) {
    T* y = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) y[j] += row.data()[j];
  }
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a, &row})) {
    node->requires_grad = true;
    node->parents = {a.node(), row.node()};
    node->backprop = [ap = a.node(), rp = row.node(), m, n](detail::Node<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
      }
      if (rp->requires_grad) {
        rp->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const T* src = self.grad.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) rp->grad[j] += src[j];
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// Rotary positions: row r gets absolute position first_pos + r. Applied per
// head to the (i, i + dh/2) dimension pairs; prompt rows never pass through
// here, so they stay position-free.
template <class T>
Tensor<T> rope_rows(const Tensor<T>& a, int first_pos, int heads) {
  DEMPT_CHECK(a.shape().size() == 2, "rope_rows: 2D tensor required");
  int m = a.rows(), d = a.cols();
  DEMPT_CHECK(d % heads == 0, "rope_rows: head count must divide width");
  int dh = d / heads;
  DEMPT_CHECK(dh % 2 == 0, "rope_rows: head width must be even");
  int half = dh / 2;
  const auto& table = detail::rope_table<T>(dh, first_pos + m);
  std::vector<T> out(a.data().begin(), a.data().end());
  for (int r = 0; r < m; ++r) {
    const T* c = table.cs.data() + static_cast<size_t>(first_pos + r) * half;
    const T* s = table.sn.data() + static_cast<size_t>(first_pos + r) * half;
    for (int h = 0; h < heads; ++h) {
      T* y = out.data() + static_cast<size_t>(r) * d + h * dh;
      for (int i = 0; i < half; ++i) {
        T x0 = y[i], x1 = y[i + half];
        y[i] = x0 * c[i] - x1 * s[i];
        y[i + half] = x0 * s[i] + x1 * c[i];
      }
    }
  }
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a})) {
    node->requires_grad = true;
    node->parents = {a.node()};
    node->backprop = [ap = a.node(), first_pos, m, d, dh, half, heads](detail::Node<T>& self) {
      ap->ensure_grad();
      const auto& table = detail::rope_table<T>(dh, first_pos + m);
      for (int r = 0; r < m; ++r) {
        const T* c = table.cs.data() + static_cast<size_t>(first_pos + r) * half;
        const T* s = table.sn.data() + static_cast<size_t>(first_pos + r) * half;
        for (int h = 0; h < heads; ++h) {
          const T* dy = self.grad.data() + static_cast<size_t>(r) * d + h * dh;
          T* dx = ap->grad.data() + static_cast<size_t>(r) * d + h * dh;
          for (int i = 0; i < half; ++i) {
            dx[i] += dy[i] * c[i] + dy[i + half] * s[i];
            dx[i + half] += -dy[i] * s[i] + dy[i + half] * c[i];
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// Fused scaled-dot-product multi-head attention over an already concatenated
// key/value sequence. q: (m x d), k/v: (n x d), mask: m x n. Masked positions
// get zero weight. Output is the per-head context, heads re-interleaved,
// before the output projection. Optionally exposes the attention weights
// (m x heads x n) for tests.
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Mask& mask,
                              int heads, std::vector<T>* weights_out = nullptr) {
  DEMPT_CHECK(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2,
              "attention: 2D tensors required");
  int m = q.rows(), d = q.cols(), n = k.rows();
  DEMPT_CHECK(k.cols() == d && v.cols() == d, "attention: width mismatch across q/k/v");
  DEMPT_CHECK(k.rows() == v.rows(), "attention: key/value sequence lengths differ");
  DEMPT_CHECK(mask.rows == m && mask.cols == n,
              "attention: mask is " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                  ", expected " + std::to_string(m) + "x" + std::to_string(n));
  DEMPT_CHECK(d % heads == 0, "attention: head count must divide width");
  int dh = d / heads;
  T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<T> attn(static_cast<size_t>(m) * heads * n, T(0));
  std::vector<T> out(static_cast<size_t>(m) * d, T(0));
  for (int h = 0; h < heads; ++h) {
    int off = h * dh;
    for (int i = 0; i < m; ++i) {
      const T* qi = q.data().data() + static_cast<size_t>(i) * d + off;
      T* arow = attn.data() + (static_cast<size_t>(i) * heads + h) * n;
      T mx = std::numeric_limits<T>::lowest();
      bool any = false;
      for (int j = 0; j < n; ++j) {
        if (!mask.at(i, j)) continue;
        const T* kj = k.data().data() + static_cast<size_t>(j) * d + off;
        T acc = T(0);
#pragma omp simd reduction(+ : acc)
        for (int t = 0; t < dh; ++t) acc += qi[t] * kj[t];
        arow[j] = acc * scl;
        mx = std::max(mx, arow[j]);
        any = true;
      }
      DEMPT_CHECK(any, "attention: query row " + std::to_string(i) + " has no visible keys");
      T sum = T(0);
      for (int j = 0; j < n; ++j) {
        if (!mask.at(i, j)) {
          arow[j] = T(0);
          continue;
        }
        arow[j] = detail::fast_exp(arow[j] - mx);
        sum += arow[j];
      }
      T inv = T(1) / sum;
      T* yo = out.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < n; ++j) {
        if (arow[j] == T(0)) continue;
        arow[j] *= inv;
        const T* vj = v.data().data() + static_cast<size_t>(j) * d + off;
#pragma omp simd
        for (int t = 0; t < dh; ++t) yo[t] += arow[j] * vj[t];
      }
    }
  }
  if (weights_out) *weights_out = attn;

  auto node = detail::fresh<T>({m, d}, std::move(out));
  if (detail::wants_graph<T>({&q, &k, &v})) {
    node->requires_grad = true;
    node->parents = {q.node(), k.node(), v.node()};
    node->backprop = [qp = q.node(), kp = k.node(), vp = v.node(), attn, m, n, d, dh, heads,
                      scl](detail::Node<T>& self) {
      bool dq = qp->requires_grad, dk = kp->requires_grad, dv = vp->requires_grad;
      if (dq) qp->ensure_grad();
      if (dk) kp->ensure_grad();
      if (dv) vp->ensure_grad();
      std::vector<T> ds(n);  // d scores for one (head, query)
      for (int h = 0; h < heads; ++h) {
        int off = h * dh;
        for (int i = 0; i < m; ++i) {
          const T* arow = attn.data() + (static_cast<size_t>(i) * heads + h) * n;
          const T* dyo = self.grad.data() + static_cast<size_t>(i) * d + off;
          // da_j = dy . v_j ; ds_j = a_j (da_j - sum_j' a_j' da_j')
          T dot = T(0);
          for (int j = 0; j < n; ++j) {
            if (arow[j] == T(0)) {
              ds[j] = T(0);
              continue;
            }
            const T* vj = vp->data.data() + static_cast<size_t>(j) * d + off;
            T da = T(0);
#pragma omp simd reduction(+ : da)
            for (int t = 0; t < dh; ++t) da += dyo[t] * vj[t];
            ds[j] = da;
            dot += arow[j] * da;
            if (dv) {
              T* dvj = vp->grad.data() + static_cast<size_t>(j) * d + off;
#pragma omp simd
              for (int t = 0; t < dh; ++t) dvj[t] += arow[j] * dyo[t];
            }
          }
          const T* qi = qp->data.data() + static_cast<size_t>(i) * d + off;
          T* dqi = dq ? qp->grad.data() + static_cast<size_t>(i) * d + off : nullptr;
          for (int j = 0; j < n; ++j) {
            if (arow[j] == T(0)) continue;
            T dsj = arow[j] * (ds[j] - dot) * scl;
            const T* kj = kp->data.data() + static_cast<size_t>(j) * d + off;
            if (dq) {
#pragma omp simd
              for (int t = 0; t < dh; ++t) dqi[t] += dsj * kj[t];
            }
            if (dk) {
              T* dkj = kp->grad.data() + static_cast<size_t>(j) * d + off;
#pragma omp simd
              for (int t = 0; t < dh; ++t) dkj[t] += dsj * qi[t];
            }
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// log(probs[i, ids[i]]) per row, floored (32-bit runs can underflow to 0).
// Rows in the floored regime propagate no gradient.
template <class T>
Tensor<T> log_gather(const Tensor<T>& probs, const std::vector<int>& ids, T floor = T(-50)) {
  DEMPT_CHECK(probs.shape().size() == 2, "log_gather: 2D tensor required");
  DEMPT_CHECK(static_cast<int>(ids.size()) == probs.rows(), "log_gather: one id per row required");
  int n = probs.cols();
  std::vector<T> out(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    DEMPT_CHECK(ids[i] >= 0 && ids[i] < n, "log_gather: id out of range");
    T p = probs.data()[i * n + ids[i]];
    T lp = std::log(p);
    out[i] = std::max(lp, floor);
  }
  auto node = detail::fresh<T>({static_cast<int>(ids.size()), 1}, std::move(out));
  if (detail::wants_graph<T>({&probs})) {
    node->requires_grad = true;
    node->parents = {probs.node()};
    node->backprop = [pp = probs.node(), ids, n, floor](detail::Node<T>& self) {
      pp->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        if (self.data[i] <= floor) continue;
        T p = pp->data[i * n + ids[i]];
        pp->grad[i * n + ids[i]] += self.grad[i] / p;
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// out = l1*a + l2*b + (1 - l1 - l2)*c. With l1 == l2 == 0 the result is
// bit-identical to c.
template <class T>
Tensor<T> mix3(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c, T l1, T l2) {
  DEMPT_CHECK(a.shape() == b.shape() && b.shape() == c.shape(), "mix3: shape mismatch");
  T l3 = T(1) - l1 - l2;
  std::vector<T> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = l1 * a.data()[i] + l2 * b.data()[i] + l3 * c.data()[i];
  auto node = detail::fresh<T>(a.shape(), std::move(out));
  if (detail::wants_graph<T>({&a, &b, &c})) {
    node->requires_grad = true;
    node->parents = {a.node(), b.node(), c.node()};
    node->backprop = [ap = a.node(), bp = b.node(), cp = c.node(), l1, l2, l3](detail::Node<T>& self) {
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += l1 * self.grad[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) bp->grad[i] += l2 * self.grad[i];
      }
      if (cp->requires_grad) {
        cp->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) cp->grad[i] += l3 * self.grad[i];
      }
    };
  }
  return Tensor<T>::wrap(node);
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

// Max over all parameter elements of |g_analytic - g_fd| / max(|g_a|, |g_fd|, 1e-12),
// with central differences at the given step. The closure is evaluated twice
// up front; if the two results differ bitwise it is rejected as
// non-deterministic. Meant to run in 64-bit.
template <class T>
double grad_check(const std::function<Tensor<T>()>& loss_fn, std::span<Tensor<T>> params, T eps = T(1e-5)) {
  Tensor<T> l0 = loss_fn();
  Tensor<T> l1 = loss_fn();
  DEMPT_CHECK(l0.size() == 1, "grad_check: closure must produce a scalar");
  DEMPT_CHECK(l0.item() == l1.item(), "grad_check: non-deterministic closure (two evaluations differ)");

  for (auto& p : params) p.zero_grad();
  l1.backward();
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].mutable_data();
    for (size_t i = 0; i < vals.size(); ++i) {
      T orig = vals[i];
      vals[i] = orig + eps;
      T fp = loss_fn().item();
      vals[i] = orig - eps;
      T fm = loss_fn().item();
      vals[i] = orig;
      double fd = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(eps));
      double ga = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::abs(ga), std::abs(fd), 1e-12});
      worst = std::max(worst, std::abs(ga - fd) / denom);
    }
  }
  return worst;
}

}  // namespace dempt
