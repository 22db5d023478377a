#pragma once

// Inline members of Tensor that need the complete TensorNode.

namespace apt {

inline const std::vector<int64_t>& Tensor::shape() const { return node_->shape; }
inline int64_t Tensor::rank() const { return int64_t(node_->shape.size()); }
inline int64_t Tensor::numel() const { return node_->numel(); }
inline int64_t Tensor::extent(int axis) const { return node_->shape.at(size_t(axis)); }
inline Dtype Tensor::dtype() const { return node_->dtype; }
inline bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
inline bool Tensor::needs_grad() const {
  return node_ && (node_->requires_grad || node_->on_graph);
}
inline bool Tensor::is_leaf() const { return node_ && !node_->on_graph; }
inline Tensor Tensor::grad() const { return node_->grad; }

template <class T>
std::span<T> Tensor::data() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return {reinterpret_cast<T*>(node_->buffer.data()), size_t(numel())};
}

template <class T>
std::span<const T> Tensor::data() const {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return {reinterpret_cast<const T*>(node_->buffer.data()), size_t(numel())};
}

}  // namespace apt
