#include "apt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace apt {

void log_warn(const std::string& message) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[apt] warning: " << message << "\n";
}

int worker_threads() {
  static int cached = [] {
    int hw = int(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("APT_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
  }();
  return cached;
}

const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }
size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }

Dtype parse_dtype(const std::string& name) {
  if (name == "f32") return Dtype::f32;
  if (name == "f64") return Dtype::f64;
  fail(ErrorKind::config, "unknown precision '" + name + "' (expected f32 or f64)");
}

namespace {

thread_local GradTape* t_tape = nullptr;
thread_local GradStore* t_sink = nullptr;

bool recording() { return t_tape != nullptr; }

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

#define APT_DISPATCH(DT, ...)                                      \
  do {                                                             \
    switch (DT) {                                                  \
      case Dtype::f32: {                                           \
        using scalar_t = float;                                    \
        __VA_ARGS__;                                               \
      } break;                                                     \
      case Dtype::f64: {                                           \
        using scalar_t = double;                                   \
        __VA_ARGS__;                                               \
      } break;                                                     \
    }                                                              \
  } while (0)

Tensor make_tensor(std::vector<int64_t> shape, Dtype dt) {
  return Tensor::zeros(std::move(shape), dt);
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    fail(ErrorKind::data, std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                              " vs " + dtype_name(b.dtype()) + "); precision is never mixed");
}

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* op) {
  APT_DISPATCH(t.dtype(), {
    for (scalar_t v : t.data<scalar_t>())
      if (!std::isfinite(double(v)))
        fail(ErrorKind::numeric, std::string(op) + ": non-finite value in output");
  });
}
#else
void debug_check_finite(const Tensor&, const char*) {}
#endif

void attach_to_graph(Tensor& out) {
  out.node()->on_graph = true;
  out.node()->tape = t_tape;
}

// All backward closures run with recording disabled so they may reuse the
// forward ops without re-recording.
template <class Fn>
void record_op(Tensor& out, bool any_needs_grad, Fn&& fn) {
  if (!recording() || !any_needs_grad) return;
  attach_to_graph(out);
  t_tape->record(std::forward<Fn>(fn));
}

void add_in_place(Tensor& dst, const Tensor& src) {
  APT_DISPATCH(dst.dtype(), {
    auto d = dst.data<scalar_t>();
    auto s = src.data<scalar_t>();
    for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

Tensor colsum(const Tensor& x) {
  const int64_t n = x.extent(0), d = x.extent(1);
  Tensor out = make_tensor({d}, x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xs = x.data<scalar_t>();
    auto os = out.data<scalar_t>();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) os[j] += xs[i * d + j];
  });
  return out;
}

enum class MatKind { nn, nt, tn };

template <class T>
void matmul_kernel(MatKind kind, const T* a, const T* b, T* out, int64_t m, int64_t k,
                   int64_t n) {
  // Accumulation order is fixed (ascending k) and each output row depends only
  // on its own input row for nn/nt, which keeps chunked evaluation bit-equal
  // to monolithic evaluation.
  switch (kind) {
    case MatKind::nn:
      for (int64_t i = 0; i < m; ++i) {
        T* __restrict orow = out + i * n;
        const T* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          const T av = arow[kk];
          const T* __restrict brow = b + kk * n;
          for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
      break;
    case MatKind::nt:
      for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* orow = out + i * n;
        for (int64_t j = 0; j < n; ++j) {
          const T* brow = b + j * k;
          T acc = 0;
          for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
          orow[j] = acc;
        }
      }
      break;
    case MatKind::tn:
      for (int64_t kk = 0; kk < k; ++kk) {
        const T* arow = a + kk * m;
        const T* brow = b + kk * n;
        for (int64_t i = 0; i < m; ++i) {
          const T av = arow[i];
          T* __restrict orow = out + i * n;
          for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
      break;
  }
}

Tensor matmul_impl(MatKind kind, const Tensor& a, const Tensor& b, const char* name) {
  check_same_dtype(a, b, name);
  if (a.rank() != 2 || b.rank() != 2)
    fail(ErrorKind::data, std::string(name) + ": expected rank-2 operands, got " +
                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m, k, n, bk;
  switch (kind) {
    case MatKind::nn: m = a.extent(0); k = a.extent(1); bk = b.extent(0); n = b.extent(1); break;
    case MatKind::nt: m = a.extent(0); k = a.extent(1); bk = b.extent(1); n = b.extent(0); break;
    case MatKind::tn: m = a.extent(1); k = a.extent(0); bk = b.extent(0); n = b.extent(1); break;
    default: m = k = n = bk = 0;
  }
  if (k != bk)
    fail(ErrorKind::data, std::string(name) + ": inner dimensions differ, " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = make_tensor({m, n}, a.dtype());
  APT_DISPATCH(a.dtype(), {
    matmul_kernel<scalar_t>(kind, a.data<scalar_t>().data(), b.data<scalar_t>().data(),
                            out.data<scalar_t>().data(), m, k, n);
  });
  debug_check_finite(out, name);
  return out;
}

}  // namespace

// --------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dt) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->dtype = dt;
  int64_t n = node->numel();
  if (n < 0) fail(ErrorKind::data, "tensor shape with negative extent");
  node->buffer.assign(size_t(n) * dtype_size(dt), std::byte{0});
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dt) {
  Tensor t = zeros(std::move(shape), dt);
  APT_DISPATCH(dt, {
    for (auto& v : t.data<scalar_t>()) v = scalar_t(value);
  });
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::span<const double> values, Dtype dt) {
  Tensor t = zeros(std::move(shape), dt);
  if (int64_t(values.size()) != t.numel())
    fail(ErrorKind::data, "tensor literal size " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(t.shape()));
  APT_DISPATCH(dt, {
    auto d = t.data<scalar_t>();
    for (size_t i = 0; i < values.size(); ++i) d[i] = scalar_t(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double std, Dtype dt) {
  Tensor t = zeros(std::move(shape), dt);
  APT_DISPATCH(dt, {
    for (auto& v : t.data<scalar_t>()) v = scalar_t(rng.normal() * std);
  });
  return t;
}

double Tensor::item(int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel())
    fail(ErrorKind::data, "tensor index " + std::to_string(flat_index) + " out of range");
  double out = 0;
  APT_DISPATCH(dtype(), { out = double(data<scalar_t>()[size_t(flat_index)]); });
  return out;
}

void Tensor::set_item(int64_t flat_index, double value) {
  if (flat_index < 0 || flat_index >= numel())
    fail(ErrorKind::data, "tensor index " + std::to_string(flat_index) + " out of range");
  APT_DISPATCH(dtype(), { data<scalar_t>()[size_t(flat_index)] = scalar_t(value); });
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  APT_DISPATCH(dtype(), {
    auto d = data<scalar_t>();
    for (size_t i = 0; i < out.size(); ++i) out[i] = double(d[i]);
  });
  return out;
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

void Tensor::zero_grad() { node_->grad = Tensor(); }

void Tensor::accumulate_grad(const Tensor& g) {
  if (!node_->grad.defined()) {
    node_->grad = g.clone();
    return;
  }
  add_in_place(node_->grad, g);
}

Tensor Tensor::clone() const {
  Tensor t = zeros(shape(), dtype());
  std::memcpy(t.node_->buffer.data(), node_->buffer.data(), node_->buffer.size());
  return t;
}

Tensor Tensor::detach() const { return clone(); }

Tensor Tensor::astype(Dtype dt) const {
  if (dt == dtype()) return clone();
  Tensor t = zeros(shape(), dt);
  auto vals = to_vector();
  APT_DISPATCH(dt, {
    auto d = t.data<scalar_t>();
    for (size_t i = 0; i < vals.size(); ++i) d[i] = scalar_t(vals[i]);
  });
  return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  Tensor t = clone();
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  if (n != numel())
    fail(ErrorKind::data, "reshape " + shape_str(this->shape()) + " -> " + shape_str(shape) +
                              " changes element count");
  t.node_->shape = std::move(shape);
  return t;
}

// --------------------------------------------------------------------------
// Tape machinery

GradTape* active_tape() { return t_tape; }

TapeScope::TapeScope(GradTape& tape) : previous_(t_tape) { t_tape = &tape; }
TapeScope::~TapeScope() { t_tape = previous_; }

NoGradScope::NoGradScope() : previous_(t_tape) { t_tape = nullptr; }
NoGradScope::~NoGradScope() { t_tape = previous_; }

void GradStore::add(detail::TensorNode* leaf, const Tensor& g) {
  for (auto& [node, grad] : grads_) {
    if (node == leaf) {
      add_in_place(grad, g);
      return;
    }
  }
  grads_.emplace_back(leaf, g.clone());
}

const Tensor* GradStore::find(const detail::TensorNode* leaf) const {
  for (const auto& [node, grad] : grads_)
    if (node == leaf) return &grad;
  return nullptr;
}

void accumulate_into(const Tensor& target, const Tensor& g) {
  auto* node = target.node();
  if (t_sink != nullptr && !node->on_graph) {
    t_sink->add(node, g);
    return;
  }
  if (!node->grad.defined()) {
    node->grad = g.clone();
    return;
  }
  add_in_place(node->grad, g);
}

void GradTape::backward(const Tensor& loss, GradStore* sink) {
  if (!loss.defined() || loss.numel() != 1)
    fail(ErrorKind::data,
         "backward: loss must be a scalar, got shape " +
             (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  if (entries_.empty() || loss.node()->tape != this)
    fail(ErrorKind::data, "backward: loss is not connected to this tape (empty tape)");
  NoGradScope no_grad;
  struct SinkGuard {
    GradStore* previous;
    ~SinkGuard() { t_sink = previous; }
  } guard{t_sink};
  t_sink = sink;
  loss.node()->grad = Tensor::full({1}, 1.0, loss.dtype());
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// --------------------------------------------------------------------------
// Elementwise and broadcast ops

namespace {

template <class FwdKernel, class BwdBuilder>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* name, FwdKernel fwd,
                         BwdBuilder bwd) {
  check_same_dtype(a, b, name);
  if (a.shape() != b.shape())
    fail(ErrorKind::data, std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
  Tensor out = make_tensor(a.shape(), a.dtype());
  fwd(out);
  debug_check_finite(out, name);
  record_op(out, a.needs_grad() || b.needs_grad(), bwd(out));
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "add",
      [&](Tensor& out) {
        APT_DISPATCH(a.dtype(), {
          auto ad = a.data<scalar_t>(); auto bd = b.data<scalar_t>(); auto od = out.data<scalar_t>();
          for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
        });
      },
      [&](Tensor& out) {
        return [a, b, out]() {
          Tensor g = out.grad();
          if (!g.defined()) return;
          if (a.needs_grad()) accumulate_into(a, g);
          if (b.needs_grad()) accumulate_into(b, g);
        };
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "sub",
      [&](Tensor& out) {
        APT_DISPATCH(a.dtype(), {
          auto ad = a.data<scalar_t>(); auto bd = b.data<scalar_t>(); auto od = out.data<scalar_t>();
          for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
        });
      },
      [&](Tensor& out) {
        return [a, b, out]() {
          Tensor g = out.grad();
          if (!g.defined()) return;
          if (a.needs_grad()) accumulate_into(a, g);
          if (b.needs_grad()) accumulate_into(b, scale(g, -1.0));
        };
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "mul",
      [&](Tensor& out) {
        APT_DISPATCH(a.dtype(), {
          auto ad = a.data<scalar_t>(); auto bd = b.data<scalar_t>(); auto od = out.data<scalar_t>();
          for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
        });
      },
      [&](Tensor& out) {
        return [a, b, out]() {
          Tensor g = out.grad();
          if (!g.defined()) return;
          if (a.needs_grad()) accumulate_into(a, mul(g, b));
          if (b.needs_grad()) accumulate_into(b, mul(g, a));
        };
      });
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_tensor(a.shape(), a.dtype());
  APT_DISPATCH(a.dtype(), {
    auto ad = a.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (size_t i = 0; i < od.size(); ++i) od[i] = scalar_t(double(ad[i]) * c);
  });
  debug_check_finite(out, "scale");
  record_op(out, a.needs_grad(), [a, out, c]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    accumulate_into(a, scale(g, c));
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = make_tensor(a.shape(), a.dtype());
  APT_DISPATCH(a.dtype(), {
    auto ad = a.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (size_t i = 0; i < od.size(); ++i) od[i] = scalar_t(double(ad[i]) + c);
  });
  debug_check_finite(out, "add_scalar");
  record_op(out, a.needs_grad(), [a, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    accumulate_into(a, g);
  });
  return out;
}

namespace {

// v may be [d] or [1,d]; gradients are produced in v's own shape.
void check_rowvec(const Tensor& x, const Tensor& v, const char* name) {
  check_same_dtype(x, v, name);
  if (x.rank() != 2 || v.numel() != x.extent(1))
    fail(ErrorKind::data, std::string(name) + ": expected [n,d] with a d-vector, got " +
                              shape_str(x.shape()) + " and " + shape_str(v.shape()));
}

Tensor colsum_shaped(const Tensor& g, const std::vector<int64_t>& shape) {
  Tensor cs = colsum(g);
  return cs.reshaped(shape);
}

}  // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "add_rowvec");
  const int64_t n = x.extent(0), d = x.extent(1);
  Tensor out = make_tensor(x.shape(), x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto vd = v.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) od[i * d + j] = xd[i * d + j] + vd[j];
  });
  debug_check_finite(out, "add_rowvec");
  record_op(out, x.needs_grad() || v.needs_grad(), [x, v, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    if (x.needs_grad()) accumulate_into(x, g);
    if (v.needs_grad()) accumulate_into(v, colsum_shaped(g, v.shape()));
  });
  return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "mul_rowvec");
  const int64_t n = x.extent(0), d = x.extent(1);
  Tensor out = make_tensor(x.shape(), x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto vd = v.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) od[i * d + j] = xd[i * d + j] * vd[j];
  });
  debug_check_finite(out, "mul_rowvec");
  record_op(out, x.needs_grad() || v.needs_grad(), [x, v, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    if (x.needs_grad()) accumulate_into(x, mul_rowvec(g, v));
    if (v.needs_grad()) accumulate_into(v, colsum_shaped(mul(g, x), v.shape()));
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (size_t i = 0; i < od.size(); ++i) {
      double v = double(xd[i]);
      od[i] = scalar_t(v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                              : std::exp(v) / (1.0 + std::exp(v)));
    }
  });
  debug_check_finite(out, "sigmoid");
  record_op(out, x.needs_grad(), [x, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = make_tensor(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto yd = out.data<scalar_t>(); auto gd = g.data<scalar_t>(); auto dd = dx.data<scalar_t>();
      for (size_t i = 0; i < dd.size(); ++i) dd[i] = gd[i] * yd[i] * (scalar_t(1) - yd[i]);
    });
    accumulate_into(x, dx);
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  Tensor out = make_tensor(x.shape(), x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (size_t i = 0; i < od.size(); ++i) {
      double v = double(xd[i]);
      od[i] = scalar_t(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
  });
  debug_check_finite(out, "gelu");
  record_op(out, x.needs_grad(), [x, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = make_tensor(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto xd = x.data<scalar_t>(); auto gd = g.data<scalar_t>(); auto dd = dx.data<scalar_t>();
      for (size_t i = 0; i < dd.size(); ++i) {
        double v = double(xd[i]);
        double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        dd[i] = scalar_t(double(gd[i]) * (cdf + v * pdf));
      }
    });
    accumulate_into(x, dx);
  });
  return out;
}

namespace {

// outer/axis/inner decomposition for reductions along one axis
struct AxisSpec {
  int64_t outer = 1, axis = 1, inner = 1;
};

AxisSpec axis_spec(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    fail(ErrorKind::data, "axis " + std::to_string(axis) + " out of range for shape " +
                              shape_str(x.shape()));
  AxisSpec s;
  for (int i = 0; i < axis; ++i) s.outer *= x.extent(i);
  s.axis = x.extent(axis);
  for (int64_t i = axis + 1; i < x.rank(); ++i) s.inner *= x.extent(int(i));
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  AxisSpec s = axis_spec(x, axis);
  Tensor out = make_tensor(x.shape(), x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t o = 0; o < s.outer; ++o)
      for (int64_t in = 0; in < s.inner; ++in) {
        const int64_t base = o * s.axis * s.inner + in;
        double maxv = -HUGE_VAL;
        for (int64_t a = 0; a < s.axis; ++a)
          maxv = std::max(maxv, double(xd[base + a * s.inner]));
        double total = 0;
        for (int64_t a = 0; a < s.axis; ++a) {
          double e = std::exp(double(xd[base + a * s.inner]) - maxv);
          od[base + a * s.inner] = scalar_t(e);
          total += e;
        }
        const double inv = 1.0 / total;
        for (int64_t a = 0; a < s.axis; ++a)
          od[base + a * s.inner] = scalar_t(double(od[base + a * s.inner]) * inv);
      }
  });
  debug_check_finite(out, "softmax");
  record_op(out, x.needs_grad(), [x, out, s]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = make_tensor(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto yd = out.data<scalar_t>(); auto gd = g.data<scalar_t>(); auto dd = dx.data<scalar_t>();
      for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t in = 0; in < s.inner; ++in) {
          const int64_t base = o * s.axis * s.inner + in;
          double dot = 0;
          for (int64_t a = 0; a < s.axis; ++a) {
            const int64_t idx = base + a * s.inner;
            dot += double(gd[idx]) * double(yd[idx]);
          }
          for (int64_t a = 0; a < s.axis; ++a) {
            const int64_t idx = base + a * s.inner;
            dd[idx] = scalar_t(double(yd[idx]) * (double(gd[idx]) - dot));
          }
        }
    });
    accumulate_into(x, dx);
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) fail(ErrorKind::data, "layer_norm: rank-0 input");
  const int64_t d = x.extent(int(x.rank() - 1));
  if (d < 2)
    fail(ErrorKind::data, "layer_norm: normalized dimension must be >= 2, got " +
                              std::to_string(d) + " (degenerate normalization)");
  if (eps <= 0) fail(ErrorKind::data, "layer_norm: eps must be positive");
  check_same_dtype(x, gamma, "layer_norm");
  check_same_dtype(x, beta, "layer_norm");
  if (gamma.numel() != d || beta.numel() != d)
    fail(ErrorKind::data, "layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  const int64_t rows = x.numel() / d;
  Tensor out = make_tensor(x.shape(), x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto gd = gamma.data<scalar_t>();
    auto bd = beta.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t r = 0; r < rows; ++r) {
      const scalar_t* row = xd.data() + r * d;
      double mean = 0;
      for (int64_t j = 0; j < d; ++j) mean += double(row[j]);
      mean /= double(d);
      double var = 0;
      for (int64_t j = 0; j < d; ++j) {
        double c = double(row[j]) - mean;
        var += c * c;
      }
      var /= double(d);
      const double inv_std = 1.0 / std::sqrt(var + eps);
      for (int64_t j = 0; j < d; ++j) {
        double xhat = (double(row[j]) - mean) * inv_std;
        od[r * d + j] = scalar_t(xhat * double(gd[j]) + double(bd[j]));
      }
    }
  });
  debug_check_finite(out, "layer_norm");
  record_op(out, x.needs_grad() || gamma.needs_grad() || beta.needs_grad(),
            [x, gamma, beta, out, eps, d, rows]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = make_tensor(x.shape(), x.dtype());
    Tensor dgamma = make_tensor(gamma.shape(), x.dtype());
    Tensor dbeta = make_tensor(beta.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto xd = x.data<scalar_t>(); auto gmd = gamma.data<scalar_t>();
      auto gd = g.data<scalar_t>(); auto dxd = dx.data<scalar_t>();
      auto dgd = dgamma.data<scalar_t>(); auto dbd = dbeta.data<scalar_t>();
      for (int64_t r = 0; r < rows; ++r) {
        const scalar_t* row = xd.data() + r * d;
        const scalar_t* grow = gd.data() + r * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += double(row[j]);
        mean /= double(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
          double c = double(row[j]) - mean;
          var += c * c;
        }
        var /= double(d);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        double mean_gg = 0, mean_ggx = 0;
        for (int64_t j = 0; j < d; ++j) {
          double xhat = (double(row[j]) - mean) * inv_std;
          double gg = double(grow[j]) * double(gmd[j]);
          mean_gg += gg;
          mean_ggx += gg * xhat;
          dgd[j] += scalar_t(double(grow[j]) * xhat);
          dbd[j] += scalar_t(double(grow[j]));
        }
        mean_gg /= double(d);
        mean_ggx /= double(d);
        for (int64_t j = 0; j < d; ++j) {
          double xhat = (double(row[j]) - mean) * inv_std;
          double gg = double(grow[j]) * double(gmd[j]);
          dxd[r * d + j] = scalar_t((gg - mean_gg - xhat * mean_ggx) * inv_std);
        }
      }
    });
    if (x.needs_grad()) accumulate_into(x, dx);
    if (gamma.needs_grad()) accumulate_into(gamma, dgamma);
    if (beta.needs_grad()) accumulate_into(beta, dbeta);
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_tensor({1}, x.dtype());
  APT_DISPATCH(x.dtype(), {
    double acc = 0;
    for (scalar_t v : x.data<scalar_t>()) acc += double(v);
    out.data<scalar_t>()[0] = scalar_t(acc);
  });
  debug_check_finite(out, "sum");
  record_op(out, x.needs_grad(), [x, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    accumulate_into(x, Tensor::full(x.shape(), g.item(), x.dtype()));
  });
  return out;
}

Tensor rows_lp_norm(const Tensor& x, double p) {
  if (x.rank() != 2)
    fail(ErrorKind::data, "rows_lp_norm: expected [n,d], got " + shape_str(x.shape()));
  if (p < 1.0) fail(ErrorKind::data, "rows_lp_norm: p must be >= 1");
  const int64_t n = x.extent(0), d = x.extent(1);
  Tensor out = make_tensor({n}, x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t i = 0; i < n; ++i) {
      const scalar_t* row = xd.data() + i * d;
      double acc = 0;
      if (p == 1.0) {
        for (int64_t j = 0; j < d; ++j) acc += std::abs(double(row[j]));
      } else if (p == 2.0) {
        for (int64_t j = 0; j < d; ++j) acc += double(row[j]) * double(row[j]);
        acc = std::sqrt(acc);
      } else {
        for (int64_t j = 0; j < d; ++j) acc += std::pow(std::abs(double(row[j])), p);
        acc = std::pow(acc, 1.0 / p);
      }
      od[i] = scalar_t(acc);
    }
  });
  debug_check_finite(out, "rows_lp_norm");
  record_op(out, x.needs_grad(), [x, out, p, n, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = make_tensor(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
      auto gd = g.data<scalar_t>(); auto dd = dx.data<scalar_t>();
      for (int64_t i = 0; i < n; ++i) {
        const double norm = double(od[i]);
        const double gi = double(gd[i]);
        for (int64_t j = 0; j < d; ++j) {
          double v = double(xd[i * d + j]);
          double deriv;
          if (p == 1.0) {
            deriv = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
          } else if (norm == 0.0) {
            deriv = 0.0;  // subgradient at the origin
          } else if (p == 2.0) {
            deriv = v / norm;
          } else {
            double sgn = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
            deriv = sgn * std::pow(std::abs(v) / norm, p - 1.0);
          }
          dd[i * d + j] = scalar_t(gi * deriv);
        }
      }
    });
    accumulate_into(x, dx);
  });
  return out;
}

ScatterMeanResult scatter_mean(const Tensor& values, std::span<const int64_t> groups,
                               int64_t n_groups) {
  if (values.rank() != 2)
    fail(ErrorKind::data, "scatter_mean: expected [E,d] values, got " + shape_str(values.shape()));
  const int64_t e = values.extent(0), d = values.extent(1);
  if (int64_t(groups.size()) != e)
    fail(ErrorKind::data, "scatter_mean: " + std::to_string(groups.size()) +
                              " group indices for " + std::to_string(e) + " rows");
  std::vector<int64_t> counts(size_t(n_groups), 0);
  for (int64_t idx : groups) {
    if (idx < 0 || idx >= n_groups)
      fail(ErrorKind::data, "scatter_mean: group index " + std::to_string(idx) +
                                " out of range [0," + std::to_string(n_groups) + ")");
    ++counts[size_t(idx)];
  }
  ScatterMeanResult result;
  result.means = make_tensor({n_groups, d}, values.dtype());
  result.empty.resize(size_t(n_groups));
  for (int64_t gidx = 0; gidx < n_groups; ++gidx)
    result.empty[size_t(gidx)] = counts[size_t(gidx)] == 0 ? 1 : 0;
  std::vector<int64_t> groups_copy(groups.begin(), groups.end());
  APT_DISPATCH(values.dtype(), {
    auto vd = values.data<scalar_t>(); auto md = result.means.data<scalar_t>();
    for (int64_t row = 0; row < e; ++row) {
      const int64_t gidx = groups_copy[size_t(row)];
      for (int64_t j = 0; j < d; ++j) md[gidx * d + j] += vd[row * d + j];
    }
    for (int64_t gidx = 0; gidx < n_groups; ++gidx) {
      if (counts[size_t(gidx)] == 0) continue;
      const scalar_t inv = scalar_t(1.0 / double(counts[size_t(gidx)]));
      for (int64_t j = 0; j < d; ++j) md[gidx * d + j] *= inv;
    }
  });
  debug_check_finite(result.means, "scatter_mean");
  Tensor out = result.means;
  record_op(out, values.needs_grad(),
            [values, out, groups_copy = std::move(groups_copy), counts, e, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dv = make_tensor(values.shape(), values.dtype());
    APT_DISPATCH(values.dtype(), {
      auto gd = g.data<scalar_t>(); auto dd = dv.data<scalar_t>();
      for (int64_t row = 0; row < e; ++row) {
        const int64_t gidx = groups_copy[size_t(row)];
        const scalar_t inv = scalar_t(1.0 / double(counts[size_t(gidx)]));
        for (int64_t j = 0; j < d; ++j) dd[row * d + j] = gd[gidx * d + j] * inv;
      }
    });
    accumulate_into(values, dv);
  });
  result.means = out;
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const int64_t> indices) {
  if (x.rank() != 2)
    fail(ErrorKind::data, "gather_rows: expected [n,d], got " + shape_str(x.shape()));
  const int64_t n = x.extent(0), d = x.extent(1);
  const int64_t m = int64_t(indices.size());
  for (int64_t idx : indices)
    if (idx < 0 || idx >= n)
      fail(ErrorKind::data, "gather_rows: index " + std::to_string(idx) + " out of range [0," +
                                std::to_string(n) + ")");
  Tensor out = make_tensor({m, d}, x.dtype());
  std::vector<int64_t> idx_copy(indices.begin(), indices.end());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t i = 0; i < m; ++i)
      std::memcpy(od.data() + i * d, xd.data() + idx_copy[size_t(i)] * d,
                  size_t(d) * sizeof(scalar_t));
  });
  record_op(out, x.needs_grad(), [x, out, idx_copy = std::move(idx_copy), m, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = make_tensor(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto gd = g.data<scalar_t>(); auto dd = dx.data<scalar_t>();
      for (int64_t i = 0; i < m; ++i) {
        const int64_t row = idx_copy[size_t(i)];
        for (int64_t j = 0; j < d; ++j) dd[row * d + j] += gd[i * d + j];
      }
    });
    accumulate_into(x, dx);
  });
  return out;
}

Tensor index_weighted_sum(const Tensor& table, const std::vector<int64_t>& indices,
                          const std::vector<double>& weights, int64_t n_out, int64_t k) {
  if (table.rank() != 2)
    fail(ErrorKind::data, "index_weighted_sum: expected [rows,d] table, got " +
                              shape_str(table.shape()));
  const int64_t rows = table.extent(0), d = table.extent(1);
  if (int64_t(indices.size()) != n_out * k || int64_t(weights.size()) != n_out * k)
    fail(ErrorKind::data, "index_weighted_sum: index/weight size mismatch");
  for (int64_t idx : indices)
    if (idx < 0 || idx >= rows)
      fail(ErrorKind::data, "index_weighted_sum: table row " + std::to_string(idx) +
                                " out of range [0," + std::to_string(rows) + ")");
  Tensor out = make_tensor({n_out, d}, table.dtype());
  APT_DISPATCH(table.dtype(), {
    auto td = table.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t i = 0; i < n_out; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        const scalar_t w = scalar_t(weights[size_t(i * k + kk)]);
        const scalar_t* trow = td.data() + indices[size_t(i * k + kk)] * d;
        scalar_t* orow = od.data() + i * d;
        for (int64_t j = 0; j < d; ++j) orow[j] += w * trow[j];
      }
  });
  debug_check_finite(out, "index_weighted_sum");
  record_op(out, table.needs_grad(), [table, out, indices, weights, n_out, k, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dt = make_tensor(table.shape(), table.dtype());
    APT_DISPATCH(table.dtype(), {
      auto gd = g.data<scalar_t>(); auto dd = dt.data<scalar_t>();
      for (int64_t i = 0; i < n_out; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          const scalar_t w = scalar_t(weights[size_t(i * k + kk)]);
          scalar_t* trow = dd.data() + indices[size_t(i * k + kk)] * d;
          const scalar_t* grow = gd.data() + i * d;
          for (int64_t j = 0; j < d; ++j) trow[j] += w * grow[j];
        }
    });
    accumulate_into(table, dt);
  });
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::data, "concat_cols: no inputs");
  const int64_t n = parts[0].extent(0);
  int64_t total = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(0) != n)
      fail(ErrorKind::data, "concat_cols: row counts differ");
    check_same_dtype(parts[0], p, "concat_cols");
    total += p.extent(1);
    needs = needs || p.needs_grad();
  }
  Tensor out = make_tensor({n, total}, parts[0].dtype());
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    const int64_t d = p.extent(1);
    APT_DISPATCH(out.dtype(), {
      auto pd = p.data<scalar_t>(); auto od = out.data<scalar_t>();
      for (int64_t i = 0; i < n; ++i)
        std::memcpy(od.data() + i * total + offset, pd.data() + i * d,
                    size_t(d) * sizeof(scalar_t));
    });
    offset += d;
  }
  std::vector<Tensor> captured(parts.begin(), parts.end());
  record_op(out, needs, [captured = std::move(captured), out, n, total]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    int64_t offset = 0;
    for (const Tensor& p : captured) {
      const int64_t d = p.extent(1);
      if (p.needs_grad()) {
        Tensor dp = Tensor::zeros(p.shape(), p.dtype());
        APT_DISPATCH(p.dtype(), {
          auto gd = g.data<scalar_t>(); auto dd = dp.data<scalar_t>();
          for (int64_t i = 0; i < n; ++i)
            std::memcpy(dd.data() + i * d, gd.data() + i * total + offset,
                        size_t(d) * sizeof(scalar_t));
        });
        accumulate_into(p, dp);
      }
      offset += d;
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t len) {
  if (x.rank() != 2)
    fail(ErrorKind::data, "slice_cols: expected [n,d], got " + shape_str(x.shape()));
  const int64_t n = x.extent(0), d = x.extent(1);
  if (start < 0 || len < 0 || start + len > d)
    fail(ErrorKind::data, "slice_cols: range [" + std::to_string(start) + "," +
                              std::to_string(start + len) + ") outside width " +
                              std::to_string(d));
  Tensor out = make_tensor({n, len}, x.dtype());
  APT_DISPATCH(x.dtype(), {
    auto xd = x.data<scalar_t>(); auto od = out.data<scalar_t>();
    for (int64_t i = 0; i < n; ++i)
      std::memcpy(od.data() + i * len, xd.data() + i * d + start,
                  size_t(len) * sizeof(scalar_t));
  });
  record_op(out, x.needs_grad(), [x, out, start, len, n, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = Tensor::zeros(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      auto gd = g.data<scalar_t>(); auto dd = dx.data<scalar_t>();
      for (int64_t i = 0; i < n; ++i)
        std::memcpy(dd.data() + i * d + start, gd.data() + i * len,
                    size_t(len) * sizeof(scalar_t));
    });
    accumulate_into(x, dx);
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::data, "concat_rows: no inputs");
  const int64_t d = parts[0].extent(1);
  int64_t total = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(1) != d)
      fail(ErrorKind::data, "concat_rows: column counts differ");
    check_same_dtype(parts[0], p, "concat_rows");
    total += p.extent(0);
    needs = needs || p.needs_grad();
  }
  Tensor out = make_tensor({total, d}, parts[0].dtype());
  int64_t row = 0;
  for (const Tensor& p : parts) {
    APT_DISPATCH(out.dtype(), {
      std::memcpy(out.data<scalar_t>().data() + row * d, p.data<scalar_t>().data(),
                  size_t(p.numel()) * sizeof(scalar_t));
    });
    row += p.extent(0);
  }
  std::vector<Tensor> captured(parts.begin(), parts.end());
  record_op(out, needs, [captured = std::move(captured), out, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    int64_t row = 0;
    for (const Tensor& p : captured) {
      if (p.needs_grad()) accumulate_into(p, slice_rows(g, row, p.extent(0)));
      row += p.extent(0);
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
  if (x.rank() != 2)
    fail(ErrorKind::data, "slice_rows: expected [n,d], got " + shape_str(x.shape()));
  const int64_t n = x.extent(0), d = x.extent(1);
  if (start < 0 || len < 0 || start + len > n)
    fail(ErrorKind::data, "slice_rows: range outside row count");
  Tensor out = make_tensor({len, d}, x.dtype());
  APT_DISPATCH(x.dtype(), {
    std::memcpy(out.data<scalar_t>().data(), x.data<scalar_t>().data() + start * d,
                size_t(len * d) * sizeof(scalar_t));
  });
  record_op(out, x.needs_grad(), [x, out, start, len, d]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    Tensor dx = Tensor::zeros(x.shape(), x.dtype());
    APT_DISPATCH(x.dtype(), {
      std::memcpy(dx.data<scalar_t>().data() + start * d, g.data<scalar_t>().data(),
                  size_t(len * d) * sizeof(scalar_t));
    });
    accumulate_into(x, dx);
  });
  return out;
}

Tensor div_scalar_tensors(const Tensor& numer, const Tensor& denom) {
  check_same_dtype(numer, denom, "div_scalar_tensors");
  if (numer.numel() != 1 || denom.numel() != 1)
    fail(ErrorKind::data, "div_scalar_tensors: both operands must be scalars");
  const double b = denom.item();
  if (b == 0.0) fail(ErrorKind::numeric, "div_scalar_tensors: division by zero");
  Tensor out = Tensor::scalar(numer.item() / b, numer.dtype());
  record_op(out, numer.needs_grad() || denom.needs_grad(), [numer, denom, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    const double gv = g.item();
    const double a = numer.item(), b = denom.item();
    if (numer.needs_grad()) accumulate_into(numer, Tensor::scalar(gv / b, numer.dtype()));
    if (denom.needs_grad())
      accumulate_into(denom, Tensor::scalar(-gv * a / (b * b), denom.dtype()));
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out = matmul_impl(MatKind::nn, a, b, "matmul");
  record_op(out, a.needs_grad() || b.needs_grad(), [a, b, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    if (a.needs_grad()) accumulate_into(a, matmul_nt(g, b));
    if (b.needs_grad()) accumulate_into(b, matmul_tn(a, g));
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tensor out = matmul_impl(MatKind::nt, a, b, "matmul_nt");
  record_op(out, a.needs_grad() || b.needs_grad(), [a, b, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    if (a.needs_grad()) accumulate_into(a, matmul(g, b));
    if (b.needs_grad()) accumulate_into(b, matmul_tn(g, a));
  });
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor out = matmul_impl(MatKind::tn, a, b, "matmul_tn");
  record_op(out, a.needs_grad() || b.needs_grad(), [a, b, out]() {
    Tensor g = out.grad();
    if (!g.defined()) return;
    if (a.needs_grad()) accumulate_into(a, matmul_nt(b, g));
    if (b.needs_grad()) accumulate_into(b, matmul(a, g));
  });
  return out;
}

}  // namespace apt
