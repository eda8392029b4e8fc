#pragma once

// Dense float32 tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a cheap handle onto shared storage. Operations on tensors that
// require gradients record a node holding their inputs; backward() sorts the
// reachable nodes topologically and runs each node's pullback exactly once.
// Reductions always run sequentially in index order, so results are
// bit-reproducible for identical inputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "deed/errors.hpp"

namespace deed {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct TensorImpl;
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs' grads.
  std::function<void(TensorImpl& out)> pullback;
};
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until first accumulation
  std::shared_ptr<Node> grad_fn;

  void accumulate(std::span<const float> g);
  std::span<float> grad_buffer();
};
}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<float> values, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  // 2-D views: a vector [d] is treated as one row.
  std::size_t rows() const;
  std::size_t cols() const;
  bool empty() const { return numel() == 0; }

  std::span<const float> data() const;
  // Writable storage. Only for parameter updates and loaders; never mutate a
  // tensor that is already part of a recorded graph.
  std::span<float> mutable_data();
  float at(std::size_t r, std::size_t c) const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  // Same storage, no history.
  Tensor detach() const;
  // Independent storage copy, no history, same requires_grad flag.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend Tensor make_result(Shape, std::vector<float>, std::vector<Tensor>,
                            std::function<void(detail::TensorImpl&)>);
  friend class ComputeGraph;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Grad recording is on by default, per thread.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// The nodes reachable from a scalar loss in topological order (inputs before
// outputs). backward() walks them in reverse.
class ComputeGraph {
 public:
  static ComputeGraph trace(const Tensor& loss);

  std::size_t size() const { return order_.size(); }
  // Runs every pullback once. Returns the number of nodes visited.
  std::size_t backward();

 private:
  std::shared_ptr<detail::TensorImpl> root_;
  std::vector<std::shared_ptr<detail::TensorImpl>> order_;
};

// Populates .grad of every requires_grad leaf reachable from `loss`.
void backward(const Tensor& loss);

// ---- operations ----------------------------------------------------------
// Matrices are row-major [rows x cols]; a 1-D tensor [d] acts as [1 x d]
// where noted.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);  // -> scalar
Tensor mean(const Tensor& a);  // -> scalar

// Row-wise softmax over the last dimension.
Tensor softmax(const Tensor& v);
// Row-wise y = scale * x / sqrt(mean(x^2) + eps).
inline constexpr float kRmsEps = 1e-6F;
Tensor rms_norm(const Tensor& x, const Tensor& scale);

// Negative log-softmax at `target` of a single logit vector [V].
Tensor cross_entropy(const Tensor& logits, int target);
// Mean over rows of cross_entropy(logits[t], targets[t]), skipping rows whose
// target equals `ignore_id`. Throws ValidationError if every row is ignored.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets, int ignore_id);

// Rows `ids` of `table` [V x d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Multi-head scaled dot-product attention. q [r x d], k/v [s x d].
// When causal_offset >= 0, query row t may attend to key columns
// 0..causal_offset + t only.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::ptrdiff_t causal_offset);

// Index of the max entry of row `row`; ties go to the lower index.
int argmax_row(const Tensor& logits, std::size_t row);

}  // namespace deed
