#pragma once

// Dense tensor with reverse-mode autodiff and the numeric kernels used by the
// decoder/encoder models. All element storage is routed through a per-thread
// instrumentation ledger (FLOPs, allocations, live/peak bytes, gradient bytes
// by zone) so training and benchmarking can assert cost claims exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dki {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << ")";
  return os.str();
}

// Attribution zones for counters. Decoder-zone gradient bytes are the
// artifact's headline memory claim: they must stay 0 during encoder
// pretraining.
enum class Zone : uint8_t { General = 0, Decoder = 1, Encoder = 2 };
constexpr int kNumZones = 3;

struct OpCounters {
  // Scalar multiply-adds count as 2 FLOPs; normalizations/softmax counted by
  // elementwise op counts (see flops:: helpers).
  int64_t flops = 0;
  int64_t flops_by_zone[kNumZones] = {0, 0, 0};
  int64_t allocations = 0;       // tensor element buffers allocated
  int64_t grad_allocations = 0;  // gradient buffers allocated
  int64_t live_bytes = 0;        // currently-alive element storage
  int64_t peak_live_bytes = 0;
  int64_t grad_bytes = 0;  // cumulative gradient-slot bytes allocated
  int64_t grad_bytes_by_zone[kNumZones] = {0, 0, 0};
  int64_t live_grad_bytes = 0;
  int64_t peak_grad_bytes = 0;
  // Grad-graph nodes created per decoder layer (index = layer), used to show
  // whether a training step builds an activation graph through the decoder.
  std::vector<int64_t> graph_nodes_by_layer;
  int64_t graph_nodes = 0;
  // Sequence lengths seen by the attention kernel, tagged by zone. Lets tests
  // assert the decoder context length never grows with |K| in injected mode.
  std::vector<std::pair<Zone, int64_t>> attn_seq_lens;

  void reset() { *this = OpCounters(); }

  void on_alloc(int64_t bytes, bool is_grad, Zone z) {
    allocations += 1;
    live_bytes += bytes;
    peak_live_bytes = std::max(peak_live_bytes, live_bytes);
    if (is_grad) {
      grad_allocations += 1;
      grad_bytes += bytes;
      grad_bytes_by_zone[static_cast<int>(z)] += bytes;
      live_grad_bytes += bytes;
      peak_grad_bytes = std::max(peak_grad_bytes, live_grad_bytes);
    }
  }
  void on_free(int64_t bytes, bool is_grad) {
    live_bytes -= bytes;
    if (is_grad) live_grad_bytes -= bytes;
  }
  void on_flops(int64_t n, Zone z) {
    flops += n;
    flops_by_zone[static_cast<int>(z)] += n;
  }
  void on_graph_node(int layer) {
    graph_nodes += 1;
    if (layer >= 0) {
      if (graph_nodes_by_layer.size() <= static_cast<size_t>(layer))
        graph_nodes_by_layer.resize(layer + 1, 0);
      graph_nodes_by_layer[layer] += 1;
    }
  }
};

namespace detail {
OpCounters*& active_counters_slot();
Zone& active_zone_slot();
int& active_layer_slot();
bool& grad_enabled_slot();
}  // namespace detail

inline OpCounters* active_counters() { return detail::active_counters_slot(); }
inline Zone active_zone() { return detail::active_zone_slot(); }
inline int active_layer() { return detail::active_layer_slot(); }
inline bool grad_enabled() { return detail::grad_enabled_slot(); }

// Routes all ledger events to `c` for the lifetime of the scope (per-thread).
class CounterScope {
 public:
  explicit CounterScope(OpCounters& c) : prev_(detail::active_counters_slot()) {
    detail::active_counters_slot() = &c;
  }
  ~CounterScope() { detail::active_counters_slot() = prev_; }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  OpCounters* prev_;
};

class ZoneScope {
 public:
  explicit ZoneScope(Zone z) : prev_(detail::active_zone_slot()) {
    detail::active_zone_slot() = z;
  }
  ~ZoneScope() { detail::active_zone_slot() = prev_; }
  ZoneScope(const ZoneScope&) = delete;
  ZoneScope& operator=(const ZoneScope&) = delete;

 private:
  Zone prev_;
};

class LayerScope {
 public:
  explicit LayerScope(int layer) : prev_(detail::active_layer_slot()) {
    detail::active_layer_slot() = layer;
  }
  ~LayerScope() { detail::active_layer_slot() = prev_; }

 private:
  int prev_;
};

// Disables graph construction: op outputs get requires_grad = false.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::grad_enabled_slot()) {
    detail::grad_enabled_slot() = false;
  }
  ~NoGradScope() { detail::grad_enabled_slot() = prev_; }

 private:
  bool prev_;
};

namespace detail {

// Element storage with ledger hooks. Grad buffers are tagged so no-grad
// purity and per-zone gradient-byte claims are assertable.
template <typename T>
class Storage {
 public:
  Storage(int64_t n, bool is_grad, Zone zone)
      : data_(static_cast<size_t>(n), T(0)), is_grad_(is_grad) {
    if (OpCounters* c = active_counters_slot())
      c->on_alloc(n * static_cast<int64_t>(sizeof(T)), is_grad, zone);
  }
  ~Storage() {
    if (OpCounters* c = active_counters_slot())
      c->on_free(static_cast<int64_t>(data_.size() * sizeof(T)), is_grad_);
  }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

 private:
  std::vector<T> data_;
  bool is_grad_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  Storage<T> value;
  std::unique_ptr<Storage<T>> grad;  // allocated lazily, only if requires_grad
  bool requires_grad = false;
  bool graph_freed = false;
  Zone zone = Zone::General;
  std::string name;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  TensorNode(Shape s, bool rg)
      : shape(std::move(s)),
        value(shape_numel(shape), /*is_grad=*/false, active_zone_slot()),
        requires_grad(rg),
        zone(active_zone_slot()) {}

  void ensure_grad() {
    if (!requires_grad)
      throw std::logic_error("gradient requested for a non-grad tensor" +
                             (name.empty() ? "" : " '" + name + "'"));
    if (!grad)
      grad = std::make_unique<Storage<T>>(shape_numel(shape), /*is_grad=*/true,
                                          zone);
  }
};

}  // namespace detail

template <typename T>
class TensorT {
 public:
  using Node = detail::TensorNode<T>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return TensorT(std::make_shared<Node>(std::move(shape), requires_grad));
  }
  static TensorT full(Shape shape, T v, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill_n(t.data(), t.numel(), v);
    return t;
  }
  static TensorT from(Shape shape, const std::vector<T>& values,
                      bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw std::invalid_argument("tensor init: " +
                                  std::to_string(values.size()) +
                                  " values for shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return shape_numel(n_->shape); }
  int64_t dim(int i) const { return n_->shape[i]; }
  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("item(): tensor has " +
                                  std::to_string(numel()) + " elements");
    return data()[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return n_->grad != nullptr; }
  T* grad_data() {
    n_->ensure_grad();
    return n_->grad->data();
  }
  const T* grad_data_or_null() const {
    return n_->grad ? n_->grad->data() : nullptr;
  }
  void zero_grad() {
    if (n_->grad) std::fill_n(n_->grad->data(), numel(), T(0));
  }
  void drop_grad() { n_->grad.reset(); }

  const std::string& name() const { return n_->name; }
  TensorT& set_name(std::string name) {
    n_->name = std::move(name);
    return *this;
  }
  // Flipping requires_grad is only meaningful for leaf parameters (used when
  // freezing/unfreezing a model). A non-grad tensor holds no gradient slot.
  TensorT& set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    if (!rg) n_->grad.reset();
    return *this;
  }

  // Runs reverse-mode accumulation from this scalar, then releases the graph.
  void backward();

  std::shared_ptr<Node> node() const { return n_; }
  bool same_node(const TensorT& o) const { return n_ == o.n_; }

  explicit TensorT(std::shared_ptr<Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;
using Mask = std::vector<uint8_t>;
using TokenIds = std::vector<int32_t>;

inline int64_t mask_count(const Mask& m) {
  int64_t n = 0;
  for (uint8_t b : m) n += (b != 0);
  return n;
}

// Analytic per-kernel FLOP counts; kernels increment the ledger with exactly
// these values so composite costs are the sum of constituent counts.
namespace flops {
inline int64_t matmul(int64_t m, int64_t k, int64_t n) { return 2 * m * k * n; }
inline int64_t add(int64_t n) { return n; }
inline int64_t mul(int64_t n) { return n; }
inline int64_t scale(int64_t n) { return n; }
inline int64_t silu(int64_t n) { return 4 * n; }
inline int64_t rmsnorm(int64_t rows, int64_t d) { return rows * (4 * d + 3); }
inline int64_t rope(int64_t rows, int64_t d) { return 3 * rows * d; }
inline int64_t attention(int64_t t, int64_t d, int64_t heads, bool causal) {
  int64_t dh = d / heads;
  int64_t pairs = causal ? t * (t + 1) / 2 : t * t;
  return heads * pairs * (4 * dh + 4);
}
inline int64_t masked_mse(int64_t valid_elems) { return 3 * valid_elems; }
inline int64_t masked_ce(int64_t rows, int64_t vocab) {
  return rows * (4 * vocab + 5);
}
inline int64_t sum(int64_t n) { return n; }
}  // namespace flops

namespace detail {

inline void count_flops(int64_t n) {
  if (OpCounters* c = active_counters_slot()) c->on_flops(n, active_zone_slot());
}

template <typename T>
std::shared_ptr<TensorNode<T>> make_op_node(Shape shape,
                                            bool any_input_grad) {
  bool rg = any_input_grad && grad_enabled_slot();
  auto n = std::make_shared<TensorNode<T>>(std::move(shape), rg);
  if (rg) {
    if (OpCounters* c = active_counters_slot())
      c->on_graph_node(active_layer_slot());
  }
  return n;
}

[[noreturn]] inline void shape_fail(const std::string& op,
                                    const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

}  // namespace detail

namespace ops {

// ---- matmul: (m x k) . (k x n) -> (m x n) ----
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    detail::shape_fail("matmul", "lhs " + shape_str(sa) +
                                     " incompatible with rhs " + shape_str(sb));
  int64_t m = sa[0], k = sa[1], n = sb[1];
  auto out = detail::make_op_node<T>({m, n}, a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = out->value.data();
  for (int64_t i = 0; i < m; ++i) {
    T* ci = pc + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T aip = pa[i * k + p];
      const T* bp = pb + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  detail::count_flops(flops::matmul(m, k, n));
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.get();
    out->parents = {an, bn};
    out->backward_fn = [an, bn, on, m, k, n]() {
      const T* g = on->grad->data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* da = an->grad->data();
        const T* pb2 = bn->value.data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            T acc = 0;
            const T* gi = g + i * n;
            const T* bp = pb2 + p * n;
            for (int64_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
            da[i * k + p] += acc;
          }
        detail::count_flops(flops::matmul(m, n, k));
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad->data();
        const T* pa2 = an->value.data();
        for (int64_t i = 0; i < m; ++i) {
          const T* gi = g + i * n;
          for (int64_t p = 0; p < k; ++p) {
            T aip = pa2[i * k + p];
            T* dbp = db + p * n;
            for (int64_t j = 0; j < n; ++j) dbp[j] += aip * gi[j];
          }
        }
        detail::count_flops(flops::matmul(k, m, n));
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- matmul_nt: (m x k) . (n x k)^T -> (m x n) ----
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    detail::shape_fail("matmul_nt", "lhs " + shape_str(sa) +
                                        " incompatible with rhs^T " +
                                        shape_str(sb));
  int64_t m = sa[0], k = sa[1], n = sb[0];
  auto out = detail::make_op_node<T>({m, n}, a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = out->value.data();
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = pa + i * k;
    T* ci = pc + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* bj = pb + j * k;
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
  detail::count_flops(flops::matmul(m, k, n));
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.get();
    out->parents = {an, bn};
    out->backward_fn = [an, bn, on, m, k, n]() {
      const T* g = on->grad->data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* da = an->grad->data();
        const T* pb2 = bn->value.data();
        for (int64_t i = 0; i < m; ++i) {
          const T* gi = g + i * n;
          T* dai = da + i * k;
          for (int64_t j = 0; j < n; ++j) {
            T gij = gi[j];
            const T* bj = pb2 + j * k;
            for (int64_t p = 0; p < k; ++p) dai[p] += gij * bj[p];
          }
        }
        detail::count_flops(flops::matmul(m, n, k));
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad->data();
        const T* pa2 = an->value.data();
        for (int64_t j = 0; j < n; ++j) {
          T* dbj = db + j * k;
          for (int64_t i = 0; i < m; ++i) {
            T gij = g[i * n + j];
            const T* ai = pa2 + i * k;
            for (int64_t p = 0; p < k; ++p) dbj[p] += gij * ai[p];
          }
        }
        detail::count_flops(flops::matmul(n, m, k));
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- elementwise add / mul / scale ----
template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("add", "shape mismatch " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  int64_t n = a.numel();
  auto out = detail::make_op_node<T>(a.shape(), a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = out->value.data();
  for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] + pb[i];
  detail::count_flops(flops::add(n));
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.get();
    out->parents = {an, bn};
    out->backward_fn = [an, bn, on, n]() {
      const T* g = on->grad->data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* da = an->grad->data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad->data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    };
  }
  return TensorT<T>(std::move(out));
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("mul", "shape mismatch " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  int64_t n = a.numel();
  auto out = detail::make_op_node<T>(a.shape(), a.requires_grad() || b.requires_grad());
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = out->value.data();
  for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] * pb[i];
  detail::count_flops(flops::mul(n));
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    auto on = out.get();
    out->parents = {an, bn};
    out->backward_fn = [an, bn, on, n]() {
      const T* g = on->grad->data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* da = an->grad->data();
        const T* pb2 = bn->value.data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * pb2[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* db = bn->grad->data();
        const T* pa2 = an->value.data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * pa2[i];
      }
    };
  }
  return TensorT<T>(std::move(out));
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  int64_t n = a.numel();
  auto out = detail::make_op_node<T>(a.shape(), a.requires_grad());
  const T* pa = a.data();
  T* pc = out->value.data();
  for (int64_t i = 0; i < n; ++i) pc[i] = pa[i] * c;
  detail::count_flops(flops::scale(n));
  if (out->requires_grad) {
    auto an = a.node();
    auto on = out.get();
    out->parents = {an};
    out->backward_fn = [an, on, n, c]() {
      const T* g = on->grad->data();
      an->ensure_grad();
      T* da = an->grad->data();
      for (int64_t i = 0; i < n; ++i) da[i] += g[i] * c;
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- silu: x * sigmoid(x) ----
template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
  int64_t n = a.numel();
  auto out = detail::make_op_node<T>(a.shape(), a.requires_grad());
  const T* pa = a.data();
  T* pc = out->value.data();
  for (int64_t i = 0; i < n; ++i) {
    T s = T(1) / (T(1) + std::exp(-pa[i]));
    pc[i] = pa[i] * s;
  }
  detail::count_flops(flops::silu(n));
  if (out->requires_grad) {
    auto an = a.node();
    auto on = out.get();
    out->parents = {an};
    out->backward_fn = [an, on, n]() {
      const T* g = on->grad->data();
      an->ensure_grad();
      T* da = an->grad->data();
      const T* pa2 = an->value.data();
      for (int64_t i = 0; i < n; ++i) {
        T s = T(1) / (T(1) + std::exp(-pa2[i]));
        da[i] += g[i] * s * (T(1) + pa2[i] * (T(1) - s));
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- RMS normalization with learned scale: y[i,j] = x[i,j]*r_i*w[j] ----
template <typename T>
TensorT<T> rmsnorm(const TensorT<T>& x, const TensorT<T>& w,
                   T eps = T(1e-5)) {
  const Shape& sx = x.shape();
  if (sx.size() != 2 || w.shape().size() != 1 || w.shape()[0] != sx[1])
    detail::shape_fail("rmsnorm", "input " + shape_str(sx) + " weight " +
                                      shape_str(w.shape()));
  int64_t rows = sx[0], d = sx[1];
  auto out = detail::make_op_node<T>(sx, x.requires_grad() || w.requires_grad());
  const T* px = x.data();
  const T* pw = w.data();
  T* py = out->value.data();
  std::vector<T> rinv(rows);
  for (int64_t i = 0; i < rows; ++i) {
    const T* xi = px + i * d;
    T ss = 0;
    for (int64_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    T r = T(1) / std::sqrt(ss / T(d) + eps);
    rinv[i] = r;
    T* yi = py + i * d;
    for (int64_t j = 0; j < d; ++j) yi[j] = xi[j] * r * pw[j];
  }
  detail::count_flops(flops::rmsnorm(rows, d));
  if (out->requires_grad) {
    auto xn = x.node();
    auto wn = w.node();
    auto on = out.get();
    out->parents = {xn, wn};
    out->backward_fn = [xn, wn, on, rows, d, rinv = std::move(rinv)]() {
      const T* g = on->grad->data();
      const T* px2 = xn->value.data();
      const T* pw2 = wn->value.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* dx = xn->grad->data();
        for (int64_t i = 0; i < rows; ++i) {
          const T* gi = g + i * d;
          const T* xi = px2 + i * d;
          T r = rinv[i];
          T dot = 0;  // sum_j g_ij * w_j * x_ij
          for (int64_t j = 0; j < d; ++j) dot += gi[j] * pw2[j] * xi[j];
          T coef = r * r * r * dot / T(d);
          T* dxi = dx + i * d;
          for (int64_t j = 0; j < d; ++j)
            dxi[j] += r * gi[j] * pw2[j] - coef * xi[j];
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        T* dw = wn->grad->data();
        for (int64_t i = 0; i < rows; ++i) {
          const T* gi = g + i * d;
          const T* xi = px2 + i * d;
          T r = rinv[i];
          for (int64_t j = 0; j < d; ++j) dw[j] += gi[j] * xi[j] * r;
        }
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- rotary position application over per-head channel pairs ----
// x is (T x d) laid out as H heads of dh channels; pair (2c, 2c+1) of each
// head at sequence position p is rotated by p * base^(-2c/dh).
template <typename T>
TensorT<T> rope(const TensorT<T>& x, int64_t n_heads, T base,
                int64_t pos_offset = 0) {
  const Shape& sx = x.shape();
  if (sx.size() != 2 || sx[1] % n_heads != 0 || (sx[1] / n_heads) % 2 != 0)
    detail::shape_fail("rope", "input " + shape_str(sx) + " with " +
                                   std::to_string(n_heads) + " heads");
  int64_t rows = sx[0], d = sx[1], dh = d / n_heads;
  auto out = detail::make_op_node<T>(sx, x.requires_grad());
  const T* px = x.data();
  T* py = out->value.data();
  auto apply = [rows, d, dh, n_heads, base, pos_offset](const T* src, T* dst,
                                                        bool inverse) {
    for (int64_t p = 0; p < rows; ++p) {
      for (int64_t h = 0; h < n_heads; ++h) {
        const T* s = src + p * d + h * dh;
        T* o = dst + p * d + h * dh;
        for (int64_t c = 0; c < dh / 2; ++c) {
          T theta = T(pos_offset + p) *
                    std::pow(base, -T(2 * c) / T(dh));
          T cs = std::cos(theta), sn = std::sin(theta);
          if (inverse) sn = -sn;
          T a = s[2 * c], b = s[2 * c + 1];
          o[2 * c] += a * cs - b * sn;
          o[2 * c + 1] += a * sn + b * cs;
        }
      }
    }
  };
  apply(px, py, false);
  detail::count_flops(flops::rope(rows, d));
  if (out->requires_grad) {
    auto xn = x.node();
    auto on = out.get();
    out->parents = {xn};
    out->backward_fn = [xn, on, apply]() {
      xn->ensure_grad();
      apply(on->grad->data(), xn->grad->data(), true);
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- multi-head self-attention (optionally causal) ----
// q, k, v: (T x d); returns (T x d). Softmax over key positions <= query
// position when causal.
template <typename T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k,
                     const TensorT<T>& v, int64_t n_heads, bool causal) {
  const Shape& sq = q.shape();
  if (sq.size() != 2 || k.shape() != sq || v.shape() != sq)
    detail::shape_fail("attention",
                       "q " + shape_str(sq) + " k " + shape_str(k.shape()) +
                           " v " + shape_str(v.shape()) + " must match");
  if (sq[1] % n_heads != 0)
    detail::shape_fail("attention", "d " + std::to_string(sq[1]) +
                                        " not divisible by heads " +
                                        std::to_string(n_heads));
  int64_t t = sq[0], d = sq[1], dh = d / n_heads;
  T inv_sqrt = T(1) / std::sqrt(T(dh));
  bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  auto out = detail::make_op_node<T>(sq, rg);
  if (OpCounters* c = active_counters())
    c->attn_seq_lens.emplace_back(active_zone(), t);

  // probs stored per head for backward: row i has (i+1) entries when causal.
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<size_t>(n_heads * t * t), T(0));
  const T* pq = q.data();
  const T* pk = k.data();
  const T* pv = v.data();
  T* po = out->value.data();
  for (int64_t h = 0; h < n_heads; ++h) {
    T* ph = probs->data() + h * t * t;
    for (int64_t i = 0; i < t; ++i) {
      int64_t jmax = causal ? i + 1 : t;
      const T* qi = pq + i * d + h * dh;
      T* prow = ph + i * t;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < jmax; ++j) {
        const T* kj = pk + j * d + h * dh;
        T acc = 0;
        for (int64_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        prow[j] = acc * inv_sqrt;
        mx = std::max(mx, prow[j]);
      }
      T denom = 0;
      for (int64_t j = 0; j < jmax; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        denom += prow[j];
      }
      T* oi = po + i * d + h * dh;
      for (int64_t j = 0; j < jmax; ++j) {
        prow[j] /= denom;
        const T* vj = pv + j * d + h * dh;
        T w = prow[j];
        for (int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }
  detail::count_flops(flops::attention(t, d, n_heads, causal));
  if (out->requires_grad) {
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    auto on = out.get();
    out->parents = {qn, kn, vn};
    out->backward_fn = [qn, kn, vn, on, probs, t, d, dh, n_heads, causal,
                        inv_sqrt]() {
      const T* g = on->grad->data();
      const T* pq2 = qn->value.data();
      const T* pk2 = kn->value.data();
      const T* pv2 = vn->value.data();
      T* dq = nullptr;
      T* dk = nullptr;
      T* dv = nullptr;
      if (qn->requires_grad) { qn->ensure_grad(); dq = qn->grad->data(); }
      if (kn->requires_grad) { kn->ensure_grad(); dk = kn->grad->data(); }
      if (vn->requires_grad) { vn->ensure_grad(); dv = vn->grad->data(); }
      std::vector<T> dprow(static_cast<size_t>(t));
      for (int64_t h = 0; h < n_heads; ++h) {
        const T* ph = probs->data() + h * t * t;
        for (int64_t i = 0; i < t; ++i) {
          int64_t jmax = causal ? i + 1 : t;
          const T* gi = g + i * d + h * dh;
          const T* prow = ph + i * t;
          // dP = dO . V^T ; dV += P^T . dO
          T dot = 0;
          for (int64_t j = 0; j < jmax; ++j) {
            const T* vj = pv2 + j * d + h * dh;
            T acc = 0;
            for (int64_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
            dprow[j] = acc;
            dot += acc * prow[j];
            if (dv) {
              T* dvj = dv + j * d + h * dh;
              T w = prow[j];
              for (int64_t c = 0; c < dh; ++c) dvj[c] += w * gi[c];
            }
          }
          // dS = P (dP - sum(dP*P)); dQ += dS.K/sqrt(dh); dK += dS^T.Q/sqrt
          for (int64_t j = 0; j < jmax; ++j) {
            T ds = prow[j] * (dprow[j] - dot) * inv_sqrt;
            if (dq) {
              T* dqi = dq + i * d + h * dh;
              const T* kj = pk2 + j * d + h * dh;
              for (int64_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
            }
            if (dk) {
              T* dkj = dk + j * d + h * dh;
              const T* qi = pq2 + i * d + h * dh;
              for (int64_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- embedding lookup: table (V x d), ids (T) -> (T x d) ----
template <typename T>
TensorT<T> embedding(const TensorT<T>& table, const TokenIds& ids) {
  const Shape& st = table.shape();
  if (st.size() != 2) detail::shape_fail("embedding", "table " + shape_str(st));
  int64_t vocab = st[0], d = st[1];
  for (int32_t id : ids)
    if (id < 0 || id >= vocab)
      detail::shape_fail("embedding", "token id " + std::to_string(id) +
                                          " outside vocab " +
                                          std::to_string(vocab));
  int64_t t = static_cast<int64_t>(ids.size());
  auto out = detail::make_op_node<T>({t, d}, table.requires_grad());
  const T* pt = table.data();
  T* po = out->value.data();
  for (int64_t i = 0; i < t; ++i)
    std::memcpy(po + i * d, pt + ids[i] * d, sizeof(T) * d);
  if (out->requires_grad) {
    auto tn = table.node();
    auto on = out.get();
    out->parents = {tn};
    out->backward_fn = [tn, on, ids, d, t]() {
      tn->ensure_grad();
      T* dt = tn->grad->data();
      const T* g = on->grad->data();
      for (int64_t i = 0; i < t; ++i) {
        T* row = dt + ids[i] * d;
        const T* gi = g + i * d;
        for (int64_t j = 0; j < d; ++j) row[j] += gi[j];
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- row_slice: rows [start, start+len) of a (T x d) tensor ----
template <typename T>
TensorT<T> row_slice(const TensorT<T>& x, int64_t start, int64_t len) {
  const Shape& sx = x.shape();
  if (sx.size() != 2 || start < 0 || len < 0 || start + len > sx[0])
    detail::shape_fail("row_slice", "rows [" + std::to_string(start) + ", " +
                                        std::to_string(start + len) +
                                        ") of " + shape_str(sx));
  int64_t d = sx[1];
  auto out = detail::make_op_node<T>({len, d}, x.requires_grad());
  std::memcpy(out->value.data(), x.data() + start * d,
              sizeof(T) * static_cast<size_t>(len * d));
  if (out->requires_grad) {
    auto xn = x.node();
    auto on = out.get();
    out->parents = {xn};
    out->backward_fn = [xn, on, start, len, d]() {
      xn->ensure_grad();
      T* dx = xn->grad->data();
      const T* g = on->grad->data();
      for (int64_t i = 0; i < len * d; ++i) dx[start * d + i] += g[i];
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- sum of all elements -> scalar (1) ----
template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  int64_t n = x.numel();
  auto out = detail::make_op_node<T>({1}, x.requires_grad());
  const T* px = x.data();
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  out->value.data()[0] = acc;
  detail::count_flops(flops::sum(n));
  if (out->requires_grad) {
    auto xn = x.node();
    auto on = out.get();
    out->parents = {xn};
    out->backward_fn = [xn, on, n]() {
      xn->ensure_grad();
      T* dx = xn->grad->data();
      T g = on->grad->data()[0];
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- masked MSE: mean squared error over valid rows (mask over rows) ----
// Loss = sum_{i: mask[i]} |pred_i - target_i|^2 / (n_valid * d).
template <typename T>
TensorT<T> masked_mse(const TensorT<T>& pred, const TensorT<T>& target,
                      const Mask& mask) {
  const Shape& sp = pred.shape();
  if (sp.size() != 2 || target.shape() != sp)
    detail::shape_fail("masked_mse", "pred " + shape_str(sp) + " target " +
                                         shape_str(target.shape()));
  if (static_cast<int64_t>(mask.size()) != sp[0])
    detail::shape_fail("masked_mse",
                       "mask length " + std::to_string(mask.size()) +
                           " vs rows " + std::to_string(sp[0]));
  int64_t rows = sp[0], d = sp[1];
  int64_t valid = mask_count(mask);
  if (valid == 0)
    throw std::invalid_argument("masked_mse: empty loss support (mask has no valid positions)");
  auto out = detail::make_op_node<T>({1}, pred.requires_grad() || target.requires_grad());
  const T* pp = pred.data();
  const T* pt = target.data();
  T denom = T(1) / (T(valid) * T(d));
  T acc = 0;
  for (int64_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    const T* pi = pp + i * d;
    const T* ti = pt + i * d;
    for (int64_t j = 0; j < d; ++j) {
      T e = pi[j] - ti[j];
      acc += e * e;
    }
  }
  out->value.data()[0] = acc * denom;
  detail::count_flops(flops::masked_mse(valid * d));
  if (out->requires_grad) {
    auto pn = pred.node();
    auto tn = target.node();
    auto on = out.get();
    out->parents = {pn, tn};
    out->backward_fn = [pn, tn, on, mask, rows, d, denom]() {
      T g = on->grad->data()[0];
      const T* pp2 = pn->value.data();
      const T* pt2 = tn->value.data();
      T c = T(2) * denom * g;
      if (pn->requires_grad) {
        pn->ensure_grad();
        T* dp = pn->grad->data();
        for (int64_t i = 0; i < rows; ++i) {
          if (!mask[i]) continue;
          for (int64_t j = 0; j < d; ++j)
            dp[i * d + j] += c * (pp2[i * d + j] - pt2[i * d + j]);
        }
      }
      if (tn->requires_grad) {
        tn->ensure_grad();
        T* dt = tn->grad->data();
        for (int64_t i = 0; i < rows; ++i) {
          if (!mask[i]) continue;
          for (int64_t j = 0; j < d; ++j)
            dt[i * d + j] -= c * (pp2[i * d + j] - pt2[i * d + j]);
        }
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// ---- masked token cross-entropy ----
// logits (N x V); targets (N); mask (N) marks scored rows. Loss is the mean
// over scored rows of -log softmax(logits_i)[targets_i].
template <typename T>
TensorT<T> masked_cross_entropy(const TensorT<T>& logits,
                                const TokenIds& targets, const Mask& mask) {
  const Shape& sl = logits.shape();
  if (sl.size() != 2)
    detail::shape_fail("masked_cross_entropy", "logits " + shape_str(sl));
  int64_t rows = sl[0], vocab = sl[1];
  if (static_cast<int64_t>(targets.size()) != rows ||
      static_cast<int64_t>(mask.size()) != rows)
    detail::shape_fail("masked_cross_entropy",
                       "targets " + std::to_string(targets.size()) + " mask " +
                           std::to_string(mask.size()) + " vs rows " +
                           std::to_string(rows));
  int64_t valid = mask_count(mask);
  if (valid == 0)
    throw std::invalid_argument(
        "masked_cross_entropy: empty loss support (mask has no valid positions)");
  for (int64_t i = 0; i < rows; ++i)
    if (mask[i] && (targets[i] < 0 || targets[i] >= vocab))
      detail::shape_fail("masked_cross_entropy",
                         "target id " + std::to_string(targets[i]) +
                             " outside vocab " + std::to_string(vocab));
  auto out = detail::make_op_node<T>({1}, logits.requires_grad());
  const T* pl = logits.data();
  T acc = 0;
  for (int64_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    const T* li = pl + i * vocab;
    T mx = li[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, li[j]);
    T denom = 0;
    for (int64_t j = 0; j < vocab; ++j) denom += std::exp(li[j] - mx);
    acc += (mx + std::log(denom)) - li[targets[i]];
  }
  out->value.data()[0] = acc / T(valid);
  detail::count_flops(flops::masked_ce(valid, vocab));
  if (out->requires_grad) {
    auto ln = logits.node();
    auto on = out.get();
    out->parents = {ln};
    out->backward_fn = [ln, on, targets, mask, rows, vocab, valid]() {
      ln->ensure_grad();
      T* dl = ln->grad->data();
      const T* pl2 = ln->value.data();
      T g = on->grad->data()[0] / T(valid);
      for (int64_t i = 0; i < rows; ++i) {
        if (!mask[i]) continue;
        const T* li = pl2 + i * vocab;
        T mx = li[0];
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, li[j]);
        T denom = 0;
        for (int64_t j = 0; j < vocab; ++j) denom += std::exp(li[j] - mx);
        T* dli = dl + i * vocab;
        for (int64_t j = 0; j < vocab; ++j)
          dli[j] += g * (std::exp(li[j] - mx) / denom);
        dli[targets[i]] -= g;
      }
    };
  }
  return TensorT<T>(std::move(out));
}

// Mean of a list of scalar losses (used for batch reduction).
template <typename T>
TensorT<T> mean_of(const std::vector<TensorT<T>>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("mean_of: empty list");
  TensorT<T> acc = scalars[0];
  for (size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
  return scale(acc, T(1) / T(scalars.size()));
}

}  // namespace ops

template <typename T>
void TensorT<T>::backward() {
  if (!n_) throw std::logic_error("backward: undefined tensor");
  if (numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                shape_str(shape()));
  if (n_->graph_freed)
    throw std::logic_error("backward: graph already freed by a previous backward");
  if (!n_->requires_grad)
    throw std::invalid_argument(
        "backward: loss does not require grad (no parameter on its path)");

  // Topological order via iterative DFS over parents.
  std::vector<Node*> topo;
  {
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_set<Node*> seen;
    auto mark = [&seen](Node* n) { return seen.insert(n).second; };
    if (mark(n_.get())) stack.emplace_back(n_.get(), 0);
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (p->requires_grad && mark(p)) stack.emplace_back(p, 0);
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
  }

  n_->ensure_grad();
  n_->grad->data()[0] = T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn) node->backward_fn();
  }
  // Release the graph: parameters keep their grads, intermediate structure
  // is dropped and the loss cannot be backpropagated again.
  for (Node* node : topo) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->graph_freed = true;
    }
  }
}

// ---- Adam with decoupled weight decay ----

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamStateT {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;
  int64_t step = 0;
};

using AdamState = AdamStateT<float>;

// Applies one Adam update to every parameter, then zeroes gradients.
template <typename T>
void adam_step(std::vector<TensorT<T>>& params, AdamStateT<T>& state,
               const AdamConfig& cfg) {
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(static_cast<size_t>(params[i].numel()), T(0));
      state.slots[i].v.assign(static_cast<size_t>(params[i].numel()), T(0));
    }
  }
  if (state.slots.size() != params.size())
    throw std::invalid_argument("adam_step: state has " +
                                std::to_string(state.slots.size()) +
                                " slots for " + std::to_string(params.size()) +
                                " params");
  for (auto& p : params)
    if (!p.has_grad())
      throw std::runtime_error("adam_step: missing gradient for parameter '" +
                               (p.name().empty() ? "<unnamed>" : p.name()) +
                               "'");
  state.step += 1;
  T bc1 = T(1) - std::pow(T(cfg.beta1), T(state.step));
  T bc2 = T(1) - std::pow(T(cfg.beta2), T(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    TensorT<T>& p = params[i];
    T* w = p.data();
    T* g = p.grad_data();
    T* m = state.slots[i].m.data();
    T* v = state.slots[i].v.data();
    int64_t n = p.numel();
    T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    T lr = T(cfg.lr), eps = T(cfg.eps), wd = T(cfg.weight_decay);
    for (int64_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      T mhat = m[j] / bc1;
      T vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[j]);
    }
    p.zero_grad();
  }
}

}  // namespace dki
