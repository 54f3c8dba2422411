#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "dcama/tensor.hpp"
#include "dcama/tensor_ops.hpp"

namespace dcama {

// Dynamically recorded computation graph with reverse-mode differentiation.
// Nodes are appended in evaluation order, so parents always precede children
// and a single descending-id sweep visits every node exactly once in reverse
// topological order. A Graph instance belongs to one worker.
template <class T>
class Graph {
 public:
  using Id = int;

  Id leaf(BasicTensor<T> v, bool requires_grad = false) {
    ensure_finite(v, "leaf");
    return push(std::move(v), {}, requires_grad, PullFn{});
  }
  Id constant(BasicTensor<T> v) { return leaf(std::move(v), false); }

  const BasicTensor<T>& value(Id id) const { return nodes_[check(id)].value; }

  // Gradient of the last backward() loss w.r.t. node `id`.
  const BasicTensor<T>& grad(Id id) const {
    const Node& n = nodes_[check(id)];
    if (!n.requires_grad) throw Error("grad() on a node that does not require gradients");
    if (!ran_backward_) throw Error("grad() before backward()");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- differentiable ops ----

  Id matmul(Id a, Id b) {
    BasicTensor<T> v = dcama::matmul(value(a), value(b));
    return push(std::move(v), {a, b}, any_grad({a, b}),
                [a, b](Graph& g, const BasicTensor<T>& gy) {
                  if (g.needs(a)) g.accumulate(a, dcama::matmul_nt(gy, g.value(b)));
                  if (g.needs(b)) g.accumulate(b, dcama::matmul_tn(g.value(a), gy));
                });
  }

  Id matmul_nt(Id a, Id b) {
    BasicTensor<T> v = dcama::matmul_nt(value(a), value(b));
    return push(std::move(v), {a, b}, any_grad({a, b}),
                [a, b](Graph& g, const BasicTensor<T>& gy) {
                  if (g.needs(a)) g.accumulate(a, dcama::matmul(gy, g.value(b)));
                  if (g.needs(b)) g.accumulate(b, dcama::matmul_tn(gy, g.value(a)));
                });
  }

  // matmul computed with double accumulators (backward uses the exact
  // adjoints, which are plain matmuls)
  Id matmul_stable(Id a, Id b) {
    BasicTensor<T> v = dcama::matmul_acc64(value(a), value(b));
    return push(std::move(v), {a, b}, any_grad({a, b}),
                [a, b](Graph& g, const BasicTensor<T>& gy) {
                  if (g.needs(a)) g.accumulate(a, dcama::matmul_nt(gy, g.value(b)));
                  if (g.needs(b)) g.accumulate(b, dcama::matmul_tn(g.value(a), gy));
                });
  }

  Id softmax_rows(Id x) {
    BasicTensor<T> v = dcama::softmax_rows(value(x));
    return push(std::move(v), {x}, any_grad({x}),
                [x](Graph& g, const BasicTensor<T>& gy, Id self) {
                  g.accumulate(x, softmax_rows_backward(g.value(self), gy));
                });
  }

  Id relu(Id x) {
    BasicTensor<T> v = dcama::relu(value(x));
    return push(std::move(v), {x}, any_grad({x}),
                [x](Graph& g, const BasicTensor<T>& gy) {
                  const BasicTensor<T>& in = g.value(x);
                  BasicTensor<T> gx(in.shape());
                  for (std::int64_t i = 0; i < in.numel(); ++i)
                    gx[i] = in[i] > T(0) ? gy[i] : T(0);  // subgradient 0 at 0
                  g.accumulate(x, std::move(gx));
                });
  }

  Id add(Id a, Id b) {
    BasicTensor<T> v = dcama::add(value(a), value(b));
    return push(std::move(v), {a, b}, any_grad({a, b}),
                [a, b](Graph& g, const BasicTensor<T>& gy) {
                  if (g.needs(a)) g.accumulate(a, gy);
                  if (g.needs(b)) g.accumulate(b, gy);
                });
  }

  Id mul(Id a, Id b) {
    BasicTensor<T> v = dcama::mul(value(a), value(b));
    return push(std::move(v), {a, b}, any_grad({a, b}),
                [a, b](Graph& g, const BasicTensor<T>& gy) {
                  if (g.needs(a)) g.accumulate(a, dcama::mul(gy, g.value(b)));
                  if (g.needs(b)) g.accumulate(b, dcama::mul(gy, g.value(a)));
                });
  }

  Id scale(Id a, T s) {
    BasicTensor<T> v = dcama::scale(value(a), s);
    return push(std::move(v), {a}, any_grad({a}),
                [a, s](Graph& g, const BasicTensor<T>& gy) {
                  g.accumulate(a, dcama::scale(gy, s));
                });
  }

  Id add_rowvec(Id x, Id bias) {
    BasicTensor<T> v = dcama::add_rowvec(value(x), value(bias));
    return push(std::move(v), {x, bias}, any_grad({x, bias}),
                [x, bias](Graph& g, const BasicTensor<T>& gy) {
                  if (g.needs(x)) g.accumulate(x, gy);
                  if (g.needs(bias)) {
                    const int m = gy.dim(0), n = gy.dim(1);
                    BasicTensor<T> gb({n});
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j) gb[j] += gy.at(i, j);
                    g.accumulate(bias, std::move(gb));
                  }
                });
  }

  Id conv2d(Id x, Id w, Id b, int stride, int pad) {
    BasicTensor<T> v = dcama::conv2d(value(x), value(w), value(b), stride, pad);
    return push(std::move(v), {x, w, b}, any_grad({x, w, b}),
                [x, w, b, stride, pad](Graph& g, const BasicTensor<T>& gy) {
                  auto grads = conv2d_backward(g.value(x), g.value(w), gy, stride, pad);
                  if (g.needs(x)) g.accumulate(x, std::move(grads.gx));
                  if (g.needs(w)) g.accumulate(w, std::move(grads.gw));
                  if (g.needs(b)) g.accumulate(b, std::move(grads.gb));
                });
  }

  Id bilinear_resize(Id x, int oh, int ow) {
    const int in_h = value(x).dim(0), in_w = value(x).dim(1);
    BasicTensor<T> v = dcama::bilinear_resize(value(x), oh, ow);
    return push(std::move(v), {x}, any_grad({x}),
                [x, in_h, in_w](Graph& g, const BasicTensor<T>& gy) {
                  g.accumulate(x, bilinear_resize_backward(gy, in_h, in_w));
                });
  }

  Id concat_channels(std::span<const Id> xs) {
    std::vector<BasicTensor<T>> vals;
    vals.reserve(xs.size());
    for (Id id : xs) vals.push_back(value(id));
    BasicTensor<T> v = dcama::concat_channels(std::span<const BasicTensor<T>>(vals));
    std::vector<Id> parents(xs.begin(), xs.end());
    return push(std::move(v), parents, any_grad(parents),
                [parents](Graph& g, const BasicTensor<T>& gy) {
                  int off = 0;
                  for (Id p : parents) {
                    const int c = g.value(p).dim(g.value(p).rank() - 1);
                    if (g.needs(p)) g.accumulate(p, dcama::slice_channels(gy, off, c));
                    off += c;
                  }
                });
  }
  Id concat_channels(std::initializer_list<Id> xs) {
    std::vector<Id> v(xs);
    return concat_channels(std::span<const Id>(v));
  }

  Id slice_channels(Id x, int begin, int count) {
    BasicTensor<T> v = dcama::slice_channels(value(x), begin, count);
    return push(std::move(v), {x}, any_grad({x}),
                [x, begin, count](Graph& g, const BasicTensor<T>& gy) {
                  const BasicTensor<T>& in = g.value(x);
                  BasicTensor<T> gx(in.shape());
                  const int c = in.dim(in.rank() - 1);
                  const std::int64_t rows = in.numel() / c;
                  for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < count; ++j) gx[r * c + begin + j] = gy[r * count + j];
                  g.accumulate(x, std::move(gx));
                });
  }

  Id reshape(Id x, Shape s) {
    BasicTensor<T> v = value(x).reshaped(s);
    Shape orig = value(x).shape();
    return push(std::move(v), {x}, any_grad({x}),
                [x, orig](Graph& g, const BasicTensor<T>& gy) {
                  g.accumulate(x, gy.reshaped(orig));
                });
  }

  Id max_over_set(std::span<const Id> xs) {
    std::vector<BasicTensor<T>> vals;
    vals.reserve(xs.size());
    for (Id id : xs) vals.push_back(value(id));
    BasicTensor<T> v = dcama::max_over_set(std::span<const BasicTensor<T>>(vals));
    std::vector<Id> parents(xs.begin(), xs.end());
    return push(std::move(v), parents, any_grad(parents),
                [parents](Graph& g, const BasicTensor<T>& gy, Id self) {
                  // subgradient: route to the first input attaining the max
                  const BasicTensor<T>& out = g.value(self);
                  for (std::int64_t i = 0; i < out.numel(); ++i) {
                    for (Id p : parents) {
                      if (g.value(p)[i] == out[i]) {
                        if (g.needs(p)) g.grad_buf(p)[i] += gy[i];
                        break;
                      }
                    }
                  }
                });
  }

  Id sum(Id x) {
    BasicTensor<T> v = sum_to_scalar(value(x));
    return push(std::move(v), {x}, any_grad({x}),
                [x](Graph& g, const BasicTensor<T>& gy) {
                  g.accumulate(x, BasicTensor<T>::full(g.value(x).shape(), gy[0]));
                });
  }

  // Mean binary cross-entropy between probabilities p and 0/1 targets y,
  // with p clamped to [eps, 1-eps]. The clamp is flat, so gradients vanish
  // outside the open interval.
  Id bce_mean(Id p, Id y, T eps = static_cast<T>(1e-7)) {
    const BasicTensor<T>& pv = value(p);
    const BasicTensor<T>& yv = value(y);
    if (!pv.same_shape(yv))
      throw DimensionError("bce_mean shape mismatch " + shape_str(pv.shape()) + " vs " +
                           shape_str(yv.shape()));
    if (needs(y)) throw Error("bce_mean: targets must not require gradients");
    const std::int64_t n = pv.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double pc = std::clamp(static_cast<double>(pv[i]), static_cast<double>(eps),
                                   1.0 - static_cast<double>(eps));
      const double yi = static_cast<double>(yv[i]);
      acc -= yi * std::log(pc) + (1.0 - yi) * std::log(1.0 - pc);
    }
    BasicTensor<T> v = BasicTensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    ensure_finite(v, "bce_mean");
    return push(std::move(v), {p, y}, any_grad({p, y}),
                [p, y, eps, n](Graph& g, const BasicTensor<T>& gy) {
                  if (!g.needs(p)) return;
                  const BasicTensor<T>& pv = g.value(p);
                  const BasicTensor<T>& yv = g.value(y);
                  BasicTensor<T> gp(pv.shape());
                  const double gscale = static_cast<double>(gy[0]) / static_cast<double>(n);
                  for (std::int64_t i = 0; i < n; ++i) {
                    const double pi = static_cast<double>(pv[i]);
                    if (pi <= static_cast<double>(eps) || pi >= 1.0 - static_cast<double>(eps)) {
                      gp[i] = T(0);
                      continue;
                    }
                    const double yi = static_cast<double>(yv[i]);
                    gp[i] = static_cast<T>(gscale * (pi - yi) / (pi * (1.0 - pi)));
                  }
                  g.accumulate(p, std::move(gp));
                });
  }

  // ---- backward ----

  // Populates gradients of `loss` w.r.t. every requires_grad node. Leaves
  // that do not reach the loss end up with zero gradients.
  void backward(Id loss) {
    const Node& ln = nodes_[check(loss)];
    if (ln.value.numel() != 1) throw DimensionError("backward: loss must be scalar");
    if (ran_backward_) throw Error("backward() may run only once per graph");
    ran_backward_ = true;
    for (Node& n : nodes_)
      if (n.requires_grad && n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    if (!nodes_[static_cast<std::size_t>(loss)].requires_grad) return;  // no trainable leaves
    nodes_[static_cast<std::size_t>(loss)].grad = BasicTensor<T>::scalar(T(1));
    std::vector<char> live(nodes_.size(), 0);
    live[static_cast<std::size_t>(loss)] = 1;
    for (Id id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!live[static_cast<std::size_t>(id)] || !n.requires_grad) continue;
      for (Id p : n.parents) live[static_cast<std::size_t>(p)] = 1;
      if (n.pull) n.pull(*this, n.grad, id);
    }
  }

  bool needs(Id id) const { return nodes_[check(id)].requires_grad; }

  BasicTensor<T>& grad_buf(Id id) {
    Node& n = nodes_[static_cast<std::size_t>(check(id))];
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(Id id, BasicTensor<T> g) {
    BasicTensor<T>& buf = grad_buf(id);
    if (!buf.same_shape(g)) throw DimensionError("gradient shape mismatch");
    for (std::int64_t i = 0; i < buf.numel(); ++i) buf[i] += g[i];
  }

 private:
  using PullFn = std::function<void(Graph&, const BasicTensor<T>&, Id)>;

  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    std::vector<Id> parents;
    PullFn pull;
    bool requires_grad = false;
  };

  Id check(Id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw Error("invalid graph node id " + std::to_string(id));
    return id;
  }

  bool any_grad(std::span<const Id> ids) const {
    for (Id id : ids)
      if (nodes_[check(id)].requires_grad) return true;
    return false;
  }
  bool any_grad(std::initializer_list<Id> ids) const {
    return any_grad(std::span<const Id>(ids.begin(), ids.size()));
  }

  Id push(BasicTensor<T> v, std::vector<Id> parents, bool requires_grad, PullFn pull) {
    Node n;
    n.value = std::move(v);
    n.parents = std::move(parents);
    n.requires_grad = requires_grad;
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  // adapter so simple ops can ignore the self id
  Id push(BasicTensor<T> v, std::vector<Id> parents, bool requires_grad,
          std::function<void(Graph&, const BasicTensor<T>&)> pull) {
    PullFn fn;
    if (pull)
      fn = [pull = std::move(pull)](Graph& g, const BasicTensor<T>& gy, Id) { pull(g, gy); };
    return push(std::move(v), std::move(parents), requires_grad, std::move(fn));
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

}  // namespace dcama
