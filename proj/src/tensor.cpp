#include "deed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace deed {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::span<float> TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0F);
  return grad;
}

void TensorImpl::accumulate(std::span<const float> g) {
  auto buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using detail::TensorImpl;

void check_numel(const Shape& shape, std::size_t n) {
  if (shape_numel(shape) != n) {
    throw ShapeError("tensor data length " + std::to_string(n) + " does not match shape " +
                     shape_str(shape));
  }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<float> transpose(const float* a, std::size_t rows, std::size_t cols) {
  std::vector<float> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) { impl_->shape = {0}; }

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  check_numel(shape, data.size());
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0F, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows, bool requires_grad) {
  std::vector<float> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != cols) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), cols}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<float> values, bool requires_grad) {
  return Tensor({values.size()}, std::vector<float>(values), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
  const auto& s = impl_->shape;
  if (s.size() <= 1) return 1;
  return shape_numel(s) / s.back();
}

std::size_t Tensor::cols() const {
  const auto& s = impl_->shape;
  return s.empty() ? 1 : s.back();
}

std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw IndexError("tensor index out of range");
  return impl_->data[r * cols() + c];
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const float> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl&)> pullback) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.impl_->requires_grad;
    if (any) {
      auto node = std::make_shared<detail::Node>();
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.impl_);
      node->pullback = std::move(pullback);
      impl->requires_grad = true;
      impl->grad_fn = std::move(node);
    }
  }
  return Tensor(std::move(impl));
}

// ---- graph -------------------------------------------------------------------

ComputeGraph ComputeGraph::trace(const Tensor& loss) {
  if (loss.numel() != 1) throw GraphError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw GraphError("backward on a tensor that is not connected to any parameter");
  ComputeGraph g;
  g.root_ = loss.impl_;
  if (!loss.impl_->grad_fn) return g;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::unordered_set<const TensorImpl*> seen{loss.impl_.get()};
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack{{loss.impl_, 0}};
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& inputs = impl->grad_fn->inputs;
    if (next < inputs.size()) {
      const auto& child = inputs[next++];
      if (child->grad_fn && seen.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    g.order_.push_back(std::move(impl));
    stack.pop_back();
  }
  return g;
}

std::size_t ComputeGraph::backward() {
  for (auto& impl : order_) impl->grad.clear();
  root_->grad_buffer()[0] += 1.0F;
  std::size_t visited = 0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorImpl& out = **it;
    ++visited;
    if (out.grad.empty()) continue;
    out.grad_fn->pullback(out);
  }
  return visited;
}

void backward(const Tensor& loss) { ComputeGraph::trace(loss).backward(); }

// ---- ops -------------------------------------------------------------------

namespace {
// Accumulate `g` into input `idx` of the node if that input wants a gradient.
void feed(TensorImpl& out, std::size_t idx, std::span<const float> g) {
  auto& in = *out.grad_fn->inputs[idx];
  if (in.requires_grad) in.accumulate(g);
}
TensorImpl& input(TensorImpl& out, std::size_t idx) { return *out.grad_fn->inputs[idx]; }
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.dim() != 2) throw ShapeError("matmul rhs must be 2-D, got " + shape_str(b.shape()));
  const std::size_t k = a.cols();
  if (a.dim() == 0 || k != b.shape()[0]) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t n = b.shape()[1];
  std::vector<float> out(m * n, 0.0F);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  Shape shape = a.dim() == 1 ? Shape{n} : Shape{m, n};
  return make_result(std::move(shape), std::move(out), {a, b}, [m, k, n](TensorImpl& o) {
    auto& ai = input(o, 0);
    auto& bi = input(o, 1);
    if (ai.requires_grad) {
      auto bt = transpose(bi.data.data(), k, n);
      std::vector<float> ga(m * k, 0.0F);
      gemm_acc(o.grad.data(), bt.data(), ga.data(), m, n, k);
      ai.accumulate(ga);
    }
    if (bi.requires_grad) {
      auto at = transpose(ai.data.data(), m, k);
      std::vector<float> gb(k * n, 0.0F);
      gemm_acc(at.data(), o.grad.data(), gb.data(), k, m, n);
      bi.accumulate(gb);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    feed(o, 0, o.grad);
    feed(o, 1, o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("sub shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    feed(o, 0, o.grad);
    std::vector<float> neg(o.grad.size());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -o.grad[i];
    feed(o, 1, neg);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) throw ShapeError("mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& o) {
    const auto& av = input(o, 0).data;
    const auto& bv = input(o, 1).data;
    std::vector<float> g(o.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * bv[i];
    feed(o, 0, g);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * av[i];
    feed(o, 1, g);
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result(a.shape(), std::move(out), {a}, [s](TensorImpl& o) {
    std::vector<float> g(o.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * s;
    feed(o, 0, g);
  });
}

Tensor relu(const Tensor& a) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0F ? a.data()[i] : 0.0F;
  return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& o) {
    const auto& av = input(o, 0).data;
    std::vector<float> g(o.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = av[i] > 0.0F ? o.grad[i] : 0.0F;
    feed(o, 0, g);
  });
}

Tensor sum(const Tensor& a) {
  float acc = 0.0F;
  for (float v : a.data()) acc += v;
  return make_result({}, {acc}, {a}, [](TensorImpl& o) {
    std::vector<float> g(input(o, 0).data.size(), o.grad[0]);
    feed(o, 0, g);
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0F / static_cast<float>(a.numel()));
}

Tensor softmax(const Tensor& v) {
  if (v.numel() == 0) throw ShapeError("softmax of empty tensor");
  const std::size_t rows = v.rows();
  const std::size_t cols = v.cols();
  std::vector<float> out(v.numel());
  const float* x = v.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = out.data() + r * cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(xr[c])) throw NumericError("softmax input contains NaN");
      mx = std::max(mx, xr[c]);
    }
    float total = 0.0F;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
  }
  return make_result(v.shape(), std::move(out), {v}, [rows, cols](TensorImpl& o) {
    std::vector<float> g(o.data.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = o.data.data() + r * cols;
      const float* dy = o.grad.data() + r * cols;
      float dot = 0.0F;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] = y[c] * (dy[c] - dot);
    }
    feed(o, 0, g);
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& scale_vec) {
  const std::size_t d = x.cols();
  if (scale_vec.numel() != d || d == 0) {
    throw ShapeError("rms_norm scale " + shape_str(scale_vec.shape()) + " does not match input " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel());
  std::vector<float> inv(rows);
  const float* xv = x.data().data();
  const float* sv = scale_vec.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xv + r * d;
    float ms = 0.0F;
    for (std::size_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
    ms /= static_cast<float>(d);
    inv[r] = 1.0F / std::sqrt(ms + kRmsEps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = sv[c] * xr[c] * inv[r];
  }
  return make_result(x.shape(), std::move(out), {x, scale_vec},
                     [rows, d, inv = std::move(inv)](TensorImpl& o) {
                       const auto& xi = input(o, 0);
                       const auto& si = input(o, 1);
                       const float* xv = xi.data.data();
                       const float* sv = si.data.data();
                       const float* g = o.grad.data();
                       if (xi.requires_grad) {
                         std::vector<float> gx(rows * d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           const float* xr = xv + r * d;
                           const float* gr = g + r * d;
                           float dot = 0.0F;
                           for (std::size_t c = 0; c < d; ++c) dot += gr[c] * sv[c] * xr[c];
                           const float k = inv[r] * inv[r] * inv[r] * dot / static_cast<float>(d);
                           for (std::size_t c = 0; c < d; ++c) gx[r * d + c] = inv[r] * gr[c] * sv[c] - k * xr[c];
                         }
                         feed(o, 0, gx);
                       }
                       if (si.requires_grad) {
                         std::vector<float> gs(d, 0.0F);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < d; ++c) gs[c] += g[r * d + c] * xv[r * d + c] * inv[r];
                         feed(o, 1, gs);
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, int target) {
  if (logits.rows() != 1) throw ShapeError("cross_entropy expects a single logit vector");
  if (target < 0 || static_cast<std::size_t>(target) >= logits.cols())
    throw IndexError("cross_entropy target " + std::to_string(target) + " outside vocabulary of " +
                     std::to_string(logits.cols()));
  const int ids[1] = {target};
  return cross_entropy_rows(logits, ids, -1);
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets, int ignore_id) {
  const std::size_t rows = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != rows) throw ShapeError("cross_entropy target count does not match logit rows");
  std::vector<float> probs(logits.numel());
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t counted = 0;
  float total = 0.0F;
  const float* x = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == ignore_id) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v) {
      throw IndexError("cross_entropy target " + std::to_string(tgt[r]) + " outside vocabulary of " +
                       std::to_string(v));
    }
    const float* xr = x + r * v;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < v; ++c) mx = std::max(mx, xr[c]);
    float z = 0.0F;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(xr[c] - mx);
    const float lse = mx + std::log(z);
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] = std::exp(xr[c] - lse);
    total += lse - xr[tgt[r]];
    ++counted;
  }
  if (counted == 0) throw ValidationError("cross_entropy: every target position is padding");
  const float inv_count = 1.0F / static_cast<float>(counted);
  return make_result({}, {total * inv_count}, {logits},
                     [rows, v, inv_count, ignore_id, probs = std::move(probs), tgt = std::move(tgt)](TensorImpl& o) {
                       std::vector<float> g(rows * v, 0.0F);
                       const float go = o.grad[0] * inv_count;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] == ignore_id) continue;
                         for (std::size_t c = 0; c < v; ++c) g[r * v + c] = go * probs[r * v + c];
                         g[r * v + static_cast<std::size_t>(tgt[r])] -= go;
                       }
                       feed(o, 0, g);
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.dim() != 2) throw ShapeError("embedding table must be 2-D");
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  std::vector<float> out(ids.size() * d);
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(idx[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[i]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const std::size_t n = idx.size();
  return make_result({n, d}, std::move(out), {table}, [d, idx = std::move(idx)](TensorImpl& o) {
    auto& t = input(o, 0);
    if (!t.requires_grad) return;
    auto g = t.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[static_cast<std::size_t>(idx[i]) * d + c] += o.grad[i * d + c];
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.numel() == 0) return b;
  if (b.numel() == 0) return a;
  if (a.cols() != b.cols()) throw ShapeError("concat_rows column mismatch");
  const std::size_t d = a.cols();
  const std::size_t ra = a.rows();
  const std::size_t rb = b.rows();
  std::vector<float> out;
  out.reserve((ra + rb) * d);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return make_result({ra + rb, d}, std::move(out), {a, b}, [ra, d](TensorImpl& o) {
    std::span<const float> g(o.grad);
    feed(o, 0, g.subspan(0, ra * d));
    feed(o, 1, g.subspan(ra * d));
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t d = a.cols();
  if (begin > end || end > a.rows()) throw IndexError("slice_rows range out of bounds");
  std::vector<float> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                         a.data().begin() + static_cast<std::ptrdiff_t>(end * d));
  return make_result({end - begin, d}, std::move(out), {a}, [begin, d](TensorImpl& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * d + i] += o.grad[i];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::ptrdiff_t causal_offset) {
  const std::size_t r = q.rows();
  const std::size_t s = k.rows();
  const std::size_t d = q.cols();
  if (q.dim() != 2 || k.dim() != 2 || v.dim() != 2) throw ShapeError("attention expects 2-D q/k/v");
  if (k.cols() != d || v.cols() != d || v.rows() != s) throw ShapeError("attention q/k/v shapes disagree");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention width not divisible by head count");
  if (causal_offset >= 0 && static_cast<std::size_t>(causal_offset) + r > s) {
    throw ShapeError("causal attention needs keys for every query position");
  }
  const std::size_t dh = d / heads;
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(dh));
  // probs[h][t][u]
  std::vector<float> probs(heads * r * s, 0.0F);
  std::vector<float> out(r * d, 0.0F);
  const float* qv = q.data().data();
  const float* kv = k.data().data();
  const float* vv = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < r; ++t) {
      const std::size_t limit =
          causal_offset >= 0 ? static_cast<std::size_t>(causal_offset) + t + 1 : s;
      float* p = probs.data() + (h * r + t) * s;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t u = 0; u < limit; ++u) {
        float dot = 0.0F;
        for (std::size_t c = 0; c < dh; ++c) dot += qv[t * d + off + c] * kv[u * d + off + c];
        p[u] = dot * inv_sqrt;
        mx = std::max(mx, p[u]);
      }
      float z = 0.0F;
      for (std::size_t u = 0; u < limit; ++u) {
        p[u] = std::exp(p[u] - mx);
        z += p[u];
      }
      for (std::size_t u = 0; u < limit; ++u) p[u] /= z;
      float* o = out.data() + t * d + off;
      for (std::size_t u = 0; u < limit; ++u) {
        const float w = p[u];
        for (std::size_t c = 0; c < dh; ++c) o[c] += w * vv[u * d + off + c];
      }
    }
  }
  return make_result({r, d}, std::move(out), {q, k, v},
                     [r, s, d, heads, dh, inv_sqrt, causal_offset, probs = std::move(probs)](TensorImpl& o) {
                       auto& qi = input(o, 0);
                       auto& ki = input(o, 1);
                       auto& vi = input(o, 2);
                       std::vector<float> gq(r * d, 0.0F);
                       std::vector<float> gk(s * d, 0.0F);
                       std::vector<float> gv(s * d, 0.0F);
                       std::vector<float> dp(s);
                       const float* g = o.grad.data();
                       for (std::size_t h = 0; h < heads; ++h) {
                         const std::size_t off = h * dh;
                         for (std::size_t t = 0; t < r; ++t) {
                           const std::size_t limit =
                               causal_offset >= 0 ? static_cast<std::size_t>(causal_offset) + t + 1 : s;
                           const float* p = probs.data() + (h * r + t) * s;
                           float dot = 0.0F;
                           for (std::size_t u = 0; u < limit; ++u) {
                             float acc = 0.0F;
                             for (std::size_t c = 0; c < dh; ++c) {
                               acc += g[t * d + off + c] * vi.data[u * d + off + c];
                               gv[u * d + off + c] += p[u] * g[t * d + off + c];
                             }
                             dp[u] = acc;
                             dot += acc * p[u];
                           }
                           for (std::size_t u = 0; u < limit; ++u) {
                             const float ds = p[u] * (dp[u] - dot) * inv_sqrt;
                             for (std::size_t c = 0; c < dh; ++c) {
                               gq[t * d + off + c] += ds * ki.data[u * d + off + c];
                               gk[u * d + off + c] += ds * qi.data[t * d + off + c];
                             }
                           }
                         }
                       }
                       feed(o, 0, gq);
                       feed(o, 1, gk);
                       feed(o, 2, gv);
                     });
}

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  if (row >= logits.rows()) throw IndexError("argmax row out of range");
  const float* x = logits.data().data() + row * v;
  std::size_t best = 0;
  for (std::size_t c = 1; c < v; ++c)
    if (x[c] > x[best]) best = c;
  return static_cast<int>(best);
}

}  // namespace deed
