#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "apt/common.hpp"
#include "apt/rng.hpp"

namespace apt {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(Dtype dt);
size_t dtype_size(Dtype dt);
Dtype parse_dtype(const std::string& name);

class GradTape;

namespace detail {
struct TensorNode;
}

// Dense n-dimensional array participating in reverse-mode differentiation.
// Tensor is a cheap shared handle; the buffer is immutable once it has been
// consumed by an op (value semantics at the op level).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, Dtype dt = Dtype::f64);
  static Tensor full(std::vector<int64_t> shape, double value, Dtype dt = Dtype::f64);
  static Tensor from(std::vector<int64_t> shape, std::span<const double> values,
                     Dtype dt = Dtype::f64);
  static Tensor scalar(double value, Dtype dt = Dtype::f64);
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double std = 1.0,
                      Dtype dt = Dtype::f64);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t rank() const;
  int64_t numel() const;
  int64_t extent(int axis) const;
  Dtype dtype() const;

  // Element access as double regardless of storage precision.
  double item(int64_t flat_index) const;
  double item() const { return item(0); }
  void set_item(int64_t flat_index, double value);
  std::vector<double> to_vector() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  Tensor& set_requires_grad(bool value = true);
  bool requires_grad() const;
  bool needs_grad() const;  // requires_grad or connected to one through the tape
  bool is_leaf() const;

  Tensor grad() const;  // empty Tensor when no gradient has been accumulated
  void zero_grad();
  void accumulate_grad(const Tensor& g);

  Tensor clone() const;
  Tensor detach() const;  // shares the buffer, drops graph connectivity
  Tensor astype(Dtype dt) const;
  Tensor reshaped(std::vector<int64_t> shape) const;  // shares the buffer

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  detail::TensorNode* node() const { return node_.get(); }

 private:
  friend class GradTape;
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {
struct TensorNode {
  std::vector<int64_t> shape;
  Dtype dtype = Dtype::f64;
  std::vector<std::byte> buffer;
  bool requires_grad = false;
  bool on_graph = false;        // produced from a needs-grad input under a tape
  const GradTape* tape = nullptr;
  Tensor grad;  // lazily allocated, same shape/dtype

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
  }
};
}  // namespace detail

// Per-leaf gradient sink used when several workers differentiate concurrently
// against shared parameters; reduced single-threaded in a fixed order.
class GradStore {
 public:
  void add(detail::TensorNode* leaf, const Tensor& g);
  const Tensor* find(const detail::TensorNode* leaf) const;
  void clear() { grads_.clear(); }

 private:
  std::vector<std::pair<detail::TensorNode*, Tensor>> grads_;
};

// Define-by-run tape. One tape per worker thread; rebuilt every forward pass.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  size_t size() const { return entries_.size(); }

  // Reverse replay from a scalar loss. Gradients of intermediate nodes live on
  // the nodes; leaf gradients go to `sink` when given, node->grad otherwise.
  void backward(const Tensor& loss, GradStore* sink = nullptr);

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

 private:
  std::vector<std::function<void()>> entries_;
};

GradTape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* previous_;
};

// Routes leaf gradients during backward; installed internally by GradTape.
void accumulate_into(const Tensor& target, const Tensor& g);

// ---------------------------------------------------------------------------
// Differentiable operations. All ops validate shapes/dtypes and, in debug
// builds, check outputs for NaN/Inf.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a x b^T, [m,k] x [n,k]
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T x b, [k,m] x [k,n]

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // [n,d] + [d]
Tensor mul_rowvec(const Tensor& x, const Tensor& v);  // [n,d] * [d]

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor sum(const Tensor& x);                    // scalar
Tensor rows_lp_norm(const Tensor& x, double p); // [n,d] -> [n]

struct ScatterMeanResult {
  Tensor means;                  // [n_groups, d]; zero rows for empty groups
  std::vector<uint8_t> empty;    // 1 where a group received no rows
};
ScatterMeanResult scatter_mean(const Tensor& values, std::span<const int64_t> groups,
                               int64_t n_groups);

Tensor gather_rows(const Tensor& x, std::span<const int64_t> indices);

// out[i] = sum_k weights[i,k] * table[indices[i,k]]; differentiable wrt table.
Tensor index_weighted_sum(const Tensor& table, const std::vector<int64_t>& indices,
                          const std::vector<double>& weights, int64_t n_out, int64_t k);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t len);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);

Tensor div_scalar_tensors(const Tensor& numer, const Tensor& denom);  // [1]/[1]

}  // namespace apt

#include "apt/tensor_inl.hpp"
