#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvdet/tensor.hpp"

namespace mvdet {

// Minimal reverse-mode tape. Each Var wraps a value tensor, an optional
// gradient accumulator and a backward closure that scatters the node's
// gradient into its parents. Graphs are rebuilt per evaluation and
// discarded after backward().

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // same shape as value, allocated on demand
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // may be empty (leaf)

  Tensor& ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor(value.shape());
    return grad;
  }
  void zero_grad() {
    if (grad.same_shape(value)) grad.fill(0.0);
  }
};

inline Var make_leaf(Tensor value, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

inline Var constant(Tensor value) { return make_leaf(std::move(value), false); }

/// Extension point: build an interior node from parents + backward closure.
inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

/// Cut the tape: same value, no history.
inline Var detach(const Var& x) { return constant(x->value); }

inline void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // Iterative DFS postorder; reverse gives a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->requires_grad) {
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = n.parents[k];
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < n.grad.numel(); ++i) p->grad[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        n.parents[0]->grad[i] += n.grad[i];
    if (n.parents[1]->requires_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        n.parents[1]->grad[i] -= n.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        n.parents[0]->grad[i] += n.grad[i] * bv[i];
    if (n.parents[1]->requires_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        n.parents[1]->grad[i] += n.grad[i] * av[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v *= s;
  return make_node(std::move(out), {a}, [s](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      n.parents[0]->grad[i] += n.grad[i] * s;
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v += c;
  return make_node(std::move(out), {a}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      n.parents[0]->grad[i] += n.grad[i];
  });
}

template <typename F, typename DF>
inline Var unary_elementwise(const Var& a, F f, DF df) {
  Tensor out = a->value;
  for (auto& v : out.vec()) v = f(v);
  return make_node(std::move(out), {a}, [df](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      n.parents[0]->grad[i] += n.grad[i] * df(n.parents[0]->value[i], n.value[i]);
  });
}

inline Var vexp(const Var& a) {
  return unary_elementwise(a, [](double x) { return std::exp(x); },
                           [](double, double y) { return y; });
}
inline Var vlog(const Var& a) {
  return unary_elementwise(a, [](double x) { return std::log(x); },
                           [](double x, double) { return 1.0 / x; });
}
inline Var vtanh(const Var& a) {
  return unary_elementwise(a, [](double x) { return std::tanh(x); },
                           [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(const Var& a) {
  return unary_elementwise(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                           [](double, double y) { return y * (1.0 - y); });
}
inline Var relu(const Var& a) {
  return unary_elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Var powc(const Var& a, double p) {
  return unary_elementwise(a, [p](double x) { return std::pow(x, p); },
                           [p](double x, double) { return p * std::pow(x, p - 1.0); });
}
/// Clamp with pass-through gradient strictly inside [lo, hi].
inline Var clamp(const Var& a, double lo, double hi) {
  return unary_elementwise(
      a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Var vsum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.vec()) s += v;
  return make_node(Tensor::scalar(s), {a}, [](Node& n) {
    const double g = n.grad[0];
    for (auto& v : n.parents[0]->grad.vec()) v += g;
  });
}

inline Var vmean(const Var& a) {
  return scale(vsum(a), 1.0 / static_cast<double>(a->value.numel()));
}

/// Sum of |x - target|; target is a constant.
inline Var l1_to(const Var& a, const Tensor& target) {
  if (!a->value.same_shape(target))
    throw std::invalid_argument("l1_to: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i)
    s += std::abs(a->value[i] - target[i]);
  Tensor t = target;
  return make_node(Tensor::scalar(s), {a}, [t = std::move(t)](Node& n) {
    const double g = n.grad[0];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double d = n.parents[0]->value[i] - t[i];
      n.parents[0]->grad[i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    }
  });
}

/// Elementwise multiply by a scalar node ([1]).
inline Var smul(const Var& a, const Var& s) {
  if (s->value.numel() != 1) throw std::invalid_argument("smul: s must be scalar");
  Tensor out = a->value;
  const double sv = s->value[0];
  for (auto& v : out.vec()) v *= sv;
  return make_node(std::move(out), {a, s}, [](Node& n) {
    const double sv = n.parents[1]->value[0];
    if (n.parents[0]->requires_grad)
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        n.parents[0]->grad[i] += n.grad[i] * sv;
    if (n.parents[1]->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        acc += n.grad[i] * n.parents[0]->value[i];
      n.parents[1]->grad[0] += acc;
    }
  });
}

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a->value.reshaped(shape);
  return make_node(std::move(out), {a}, [](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      n.parents[0]->grad[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes");
  const int m = A.dim(0), k = A.dim(1), n2 = B.dim(1);
  Tensor out({m, n2});
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const double av = A.at2(i, l);
      if (av == 0.0) continue;
      for (int j = 0; j < n2; ++j) out.at2(i, j) += av * B.at2(l, j);
    }
  return make_node(std::move(out), {a, b}, [m, k, n2](Node& n) {
    const Tensor& A = n.parents[0]->value;
    const Tensor& B = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& gA = n.parents[0]->grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) {
          const double g = n.grad.at2(i, j);
          if (g == 0.0) continue;
          for (int l = 0; l < k; ++l) gA.at2(i, l) += g * B.at2(l, j);
        }
    }
    if (n.parents[1]->requires_grad) {
      Tensor& gB = n.parents[1]->grad;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n2; ++j) {
          const double g = n.grad.at2(i, j);
          if (g == 0.0) continue;
          for (int l = 0; l < k; ++l) gB.at2(l, j) += g * A.at2(i, l);
        }
    }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& A = a->value;
  if (A.ndim() != 2) throw std::invalid_argument("transpose: rank-2 only");
  const int m = A.dim(0), n2 = A.dim(1);
  Tensor out({n2, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j) out.at2(j, i) = A.at2(i, j);
  return make_node(std::move(out), {a}, [m, n2](Node& n) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n2; ++j)
        n.parents[0]->grad.at2(i, j) += n.grad.at2(j, i);
  });
}

/// y = W x + b for a vector x [in]; W [out,in], optional b [out].
inline Var linear_vec(const Var& W, const Var& b, const Var& x) {
  const Tensor& Wv = W->value;
  if (Wv.ndim() != 2 || x->value.ndim() != 1 || Wv.dim(1) != x->value.dim(0))
    throw std::invalid_argument("linear_vec: incompatible shapes");
  const int out_dim = Wv.dim(0), in_dim = Wv.dim(1);
  Tensor out({out_dim});
  for (int o = 0; o < out_dim; ++o) {
    double s = b ? b->value[static_cast<std::size_t>(o)] : 0.0;
    for (int i = 0; i < in_dim; ++i) s += Wv.at2(o, i) * x->value[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = s;
  }
  std::vector<Var> parents = b ? std::vector<Var>{W, x, b} : std::vector<Var>{W, x};
  return make_node(std::move(out), std::move(parents),
                   [out_dim, in_dim, has_b = (b != nullptr)](Node& n) {
    const Tensor& Wv = n.parents[0]->value;
    const Tensor& xv = n.parents[1]->value;
    for (int o = 0; o < out_dim; ++o) {
      const double g = n.grad[static_cast<std::size_t>(o)];
      if (g == 0.0) continue;
      if (n.parents[0]->requires_grad)
        for (int i = 0; i < in_dim; ++i)
          n.parents[0]->grad.at2(o, i) += g * xv[static_cast<std::size_t>(i)];
      if (n.parents[1]->requires_grad)
        for (int i = 0; i < in_dim; ++i)
          n.parents[1]->grad[static_cast<std::size_t>(i)] += g * Wv.at2(o, i);
      if (has_b && n.parents[2]->requires_grad)
        n.parents[2]->grad[static_cast<std::size_t>(o)] += g;
    }
  });
}

/// Y = X Wᵀ + b over rows; X [n,in], W [out,in], b [out] optional.
inline Var linear_rows(const Var& x, const Var& W, const Var& b) {
  const Tensor& X = x->value;
  const Tensor& Wv = W->value;
  if (X.ndim() != 2 || Wv.ndim() != 2 || X.dim(1) != Wv.dim(1))
    throw std::invalid_argument("linear_rows: incompatible shapes");
  const int rows = X.dim(0), in_dim = X.dim(1), out_dim = Wv.dim(0);
  Tensor out({rows, out_dim});
  for (int r = 0; r < rows; ++r)
    for (int o = 0; o < out_dim; ++o) {
      double s = b ? b->value[static_cast<std::size_t>(o)] : 0.0;
      for (int i = 0; i < in_dim; ++i) s += X.at2(r, i) * Wv.at2(o, i);
      out.at2(r, o) = s;
    }
  std::vector<Var> parents = b ? std::vector<Var>{x, W, b} : std::vector<Var>{x, W};
  return make_node(std::move(out), std::move(parents),
                   [rows, in_dim, out_dim, has_b = (b != nullptr)](Node& n) {
    const Tensor& X = n.parents[0]->value;
    const Tensor& Wv = n.parents[1]->value;
    for (int r = 0; r < rows; ++r)
      for (int o = 0; o < out_dim; ++o) {
        const double g = n.grad.at2(r, o);
        if (g == 0.0) continue;
        if (n.parents[0]->requires_grad)
          for (int i = 0; i < in_dim; ++i)
            n.parents[0]->grad.at2(r, i) += g * Wv.at2(o, i);
        if (n.parents[1]->requires_grad)
          for (int i = 0; i < in_dim; ++i)
            n.parents[1]->grad.at2(o, i) += g * X.at2(r, i);
        if (has_b && n.parents[2]->requires_grad)
          n.parents[2]->grad[static_cast<std::size_t>(o)] += g;
      }
  });
}

// ---------------------------------------------------------------------------
// Slicing / assembly
// ---------------------------------------------------------------------------

inline Var slice_vec(const Var& a, int off, int len) {
  if (a->value.ndim() != 1 || off < 0 || off + len > a->value.dim(0))
    throw std::invalid_argument("slice_vec: out of range");
  Tensor out({len});
  for (int i = 0; i < len; ++i) out[static_cast<std::size_t>(i)] = a->value[static_cast<std::size_t>(off + i)];
  return make_node(std::move(out), {a}, [off, len](Node& n) {
    for (int i = 0; i < len; ++i)
      n.parents[0]->grad[static_cast<std::size_t>(off + i)] += n.grad[static_cast<std::size_t>(i)];
  });
}

inline Var row(const Var& a, int r) {
  const Tensor& A = a->value;
  if (A.ndim() != 2 || r < 0 || r >= A.dim(0))
    throw std::invalid_argument("row: out of range");
  const int c = A.dim(1);
  Tensor out({c});
  for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] = A.at2(r, j);
  return make_node(std::move(out), {a}, [r, c](Node& n) {
    for (int j = 0; j < c; ++j)
      n.parents[0]->grad.at2(r, j) += n.grad[static_cast<std::size_t>(j)];
  });
}

inline Var slice_cols(const Var& a, int off, int len) {
  const Tensor& A = a->value;
  if (A.ndim() != 2 || off < 0 || off + len > A.dim(1))
    throw std::invalid_argument("slice_cols: out of range");
  const int rows = A.dim(0);
  Tensor out({rows, len});
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j) out.at2(r, j) = A.at2(r, off + j);
  return make_node(std::move(out), {a}, [rows, off, len](Node& n) {
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < len; ++j)
        n.parents[0]->grad.at2(r, off + j) += n.grad.at2(r, j);
  });
}

inline Var concat_vec(const std::vector<Var>& parts) {
  int total = 0;
  for (const auto& p : parts) {
    if (p->value.ndim() != 1) throw std::invalid_argument("concat_vec: rank-1 only");
    total += p->value.dim(0);
  }
  Tensor out({total});
  std::size_t k = 0;
  for (const auto& p : parts)
    for (double v : p->value.vec()) out[k++] = v;
  return make_node(std::move(out), parts, [](Node& n) {
    std::size_t k = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->value.numel(); ++i)
          p->grad[i] += n.grad[k + i];
      k += p->value.numel();
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int cols = parts[0]->value.dim(1);
  int total = 0;
  for (const auto& p : parts) {
    if (p->value.ndim() != 2 || p->value.dim(1) != cols)
      throw std::invalid_argument("concat_rows: incompatible shapes");
    total += p->value.dim(0);
  }
  Tensor out({total, cols});
  std::size_t k = 0;
  for (const auto& p : parts)
    for (double v : p->value.vec()) out[k++] = v;
  return make_node(std::move(out), parts, [](Node& n) {
    std::size_t k = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad)
        for (std::size_t i = 0; i < p->value.numel(); ++i)
          p->grad[i] += n.grad[k + i];
      k += p->value.numel();
    }
  });
}

inline Var stack_rows(const std::vector<Var>& rows_in) {
  if (rows_in.empty()) throw std::invalid_argument("stack_rows: empty");
  const int c = rows_in[0]->value.dim(0);
  for (const auto& r : rows_in)
    if (r->value.ndim() != 1 || r->value.dim(0) != c)
      throw std::invalid_argument("stack_rows: incompatible shapes");
  Tensor out({static_cast<int>(rows_in.size()), c});
  std::size_t k = 0;
  for (const auto& r : rows_in)
    for (double v : r->value.vec()) out[k++] = v;
  return make_node(std::move(out), rows_in, [c](Node& n) {
    for (std::size_t r = 0; r < n.parents.size(); ++r) {
      auto& p = n.parents[r];
      if (!p->requires_grad) continue;
      for (int j = 0; j < c; ++j)
        p->grad[static_cast<std::size_t>(j)] += n.grad[r * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

/// Softmax over the last axis of an arbitrary-rank tensor.
inline Var softmax_last(const Var& a) {
  const Tensor& A = a->value;
  if (!A.all_finite()) throw std::invalid_argument("softmax: non-finite input");
  const int s = A.dim(A.ndim() - 1);
  const std::size_t groups = A.numel() / static_cast<std::size_t>(s);
  Tensor out(A.shape());
  for (std::size_t g = 0; g < groups; ++g) {
    const double* in = A.data() + g * s;
    double* o = out.data() + g * s;
    double mx = in[0];
    for (int i = 1; i < s; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < s; ++i) sum += (o[i] = std::exp(in[i] - mx));
    for (int i = 0; i < s; ++i) o[i] /= sum;
  }
  return make_node(std::move(out), {a}, [s, groups](Node& n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* y = n.value.data() + g * s;
      const double* gy = n.grad.data() + g * s;
      double* gx = n.parents[0]->grad.data() + g * s;
      double dot = 0.0;
      for (int i = 0; i < s; ++i) dot += gy[i] * y[i];
      for (int i = 0; i < s; ++i) gx[i] += y[i] * (gy[i] - dot);
    }
  });
}

/// Layer normalization over the last axis with learnable gamma/beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                      double eps = 1e-5) {
  const Tensor& X = x->value;
  const int c = X.dim(X.ndim() - 1);
  if (gamma->value.dim(0) != c || beta->value.dim(0) != c)
    throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
  const std::size_t groups = X.numel() / static_cast<std::size_t>(c);
  Tensor out(X.shape());
  Tensor inv_std({static_cast<int>(groups)});
  Tensor xhat(X.shape());
  for (std::size_t g = 0; g < groups; ++g) {
    const double* in = X.data() + g * c;
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += in[i];
    mean /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[g] = is;
    for (int i = 0; i < c; ++i) {
      const double xh = (in[i] - mean) * is;
      xhat.data()[g * c + i] = xh;
      out.data()[g * c + i] = gamma->value[static_cast<std::size_t>(i)] * xh +
                              beta->value[static_cast<std::size_t>(i)];
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [c, groups, inv_std = std::move(inv_std),
                    xhat = std::move(xhat)](Node& n) {
    const Var& x = n.parents[0];
    const Var& gamma = n.parents[1];
    const Var& beta = n.parents[2];
    for (std::size_t g = 0; g < groups; ++g) {
      const double* gy = n.grad.data() + g * c;
      const double* xh = xhat.data() + g * c;
      const double is = inv_std[g];
      if (gamma->requires_grad)
        for (int i = 0; i < c; ++i)
          gamma->grad[static_cast<std::size_t>(i)] += gy[i] * xh[i];
      if (beta->requires_grad)
        for (int i = 0; i < c; ++i) beta->grad[static_cast<std::size_t>(i)] += gy[i];
      if (x->requires_grad) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int i = 0; i < c; ++i) {
          const double gyh = gy[i] * gamma->value[static_cast<std::size_t>(i)];
          sum_g += gyh;
          sum_gx += gyh * xh[i];
        }
        for (int i = 0; i < c; ++i) {
          const double gyh = gy[i] * gamma->value[static_cast<std::size_t>(i)];
          x->grad.data()[g * c + i] +=
              is * (gyh - sum_g / c - xh[i] * sum_gx / c);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

/// Bilinear interpolation of a [C,H,W] map at continuous pixel coordinates
/// uv [2] = (u, v) with u along W and v along H. Coordinates outside
/// [0,W-1]x[0,H-1] interpolate against zero padding. Differentiable w.r.t.
/// both the feature map and the coordinates.
inline Var bilinear_sample(const Var& fmap, const Var& uv) {
  const Tensor& F = fmap->value;
  if (F.ndim() != 3 || F.numel() == 0)
    throw std::invalid_argument("bilinear_sample: feature map must be [C,H,W]");
  if (uv->value.numel() != 2 || !uv->value.all_finite())
    throw std::invalid_argument("bilinear_sample: uv must be 2 finite values");
  const int C = F.dim(0), H = F.dim(1), W = F.dim(2);
  const double u = uv->value[0], v = uv->value[1];
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto texel = [&](int c, int y, int x) -> double {
    if (x < 0 || x >= W || y < 0 || y >= H) return 0.0;
    return F.at3(c, y, x);
  };
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    const double t00 = texel(c, y0, x0), t01 = texel(c, y0, x0 + 1);
    const double t10 = texel(c, y0 + 1, x0), t11 = texel(c, y0 + 1, x0 + 1);
    out[static_cast<std::size_t>(c)] =
        (1 - fy) * ((1 - fx) * t00 + fx * t01) + fy * ((1 - fx) * t10 + fx * t11);
  }
  return make_node(std::move(out), {fmap, uv},
                   [C, H, W, x0, y0, fx, fy](Node& n) {
    const Tensor& F = n.parents[0]->value;
    auto texel = [&](int c, int y, int x) -> double {
      if (x < 0 || x >= W || y < 0 || y >= H) return 0.0;
      return F.at3(c, y, x);
    };
    auto scatter = [&](int c, int y, int x, double g) {
      if (x < 0 || x >= W || y < 0 || y >= H) return;
      n.parents[0]->grad.at3(c, y, x) += g;
    };
    double gu = 0.0, gv = 0.0;
    for (int c = 0; c < C; ++c) {
      const double g = n.grad[static_cast<std::size_t>(c)];
      if (g == 0.0) continue;
      if (n.parents[0]->requires_grad) {
        scatter(c, y0, x0, g * (1 - fy) * (1 - fx));
        scatter(c, y0, x0 + 1, g * (1 - fy) * fx);
        scatter(c, y0 + 1, x0, g * fy * (1 - fx));
        scatter(c, y0 + 1, x0 + 1, g * fy * fx);
      }
      const double t00 = texel(c, y0, x0), t01 = texel(c, y0, x0 + 1);
      const double t10 = texel(c, y0 + 1, x0), t11 = texel(c, y0 + 1, x0 + 1);
      gu += g * ((1 - fy) * (t01 - t00) + fy * (t11 - t10));
      gv += g * ((1 - fx) * (t10 - t00) + fx * (t11 - t01));
    }
    if (n.parents[1]->requires_grad) {
      n.parents[1]->grad[0] += gu;
      n.parents[1]->grad[1] += gv;
    }
  });
}

/// 2-d convolution, stride 1, symmetric zero padding. x [Cin,H,W],
/// weight [Cout,Cin,k,k], bias [Cout] optional.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad) {
  const Tensor& X = x->value;
  const Tensor& Wt = weight->value;
  if (X.ndim() != 3 || Wt.ndim() != 4 || Wt.dim(1) != X.dim(0))
    throw std::invalid_argument("conv2d: incompatible shapes");
  const int Cin = X.dim(0), H = X.dim(1), W = X.dim(2);
  const int Cout = Wt.dim(0), k = Wt.dim(2);
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
  Tensor out({Cout, Ho, Wo});
  auto wk = [&](int co, int ci, int dy, int dx) {
    return Wt.vec()[((static_cast<std::size_t>(co) * Cin + ci) * k + dy) * k + dx];
  };
  for (int co = 0; co < Cout; ++co) {
    const double b = bias ? bias->value[static_cast<std::size_t>(co)] : 0.0;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double s = b;
        for (int ci = 0; ci < Cin; ++ci)
          for (int dy = 0; dy < k; ++dy) {
            const int iy = oy + dy - pad;
            if (iy < 0 || iy >= H) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int ix = ox + dx - pad;
              if (ix < 0 || ix >= W) continue;
              s += wk(co, ci, dy, dx) * X.at3(ci, iy, ix);
            }
          }
        out.at3(co, oy, ox) = s;
      }
  }
  std::vector<Var> parents =
      bias ? std::vector<Var>{x, weight, bias} : std::vector<Var>{x, weight};
  return make_node(std::move(out), std::move(parents),
                   [Cin, H, W, Cout, k, Ho, Wo, pad,
                    has_b = (bias != nullptr)](Node& n) {
    const Tensor& X = n.parents[0]->value;
    const Tensor& Wt = n.parents[1]->value;
    auto widx = [&](int co, int ci, int dy, int dx) {
      return ((static_cast<std::size_t>(co) * Cin + ci) * k + dy) * k + dx;
    };
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const double g = n.grad.at3(co, oy, ox);
          if (g == 0.0) continue;
          if (has_b && n.parents[2]->requires_grad)
            n.parents[2]->grad[static_cast<std::size_t>(co)] += g;
          for (int ci = 0; ci < Cin; ++ci)
            for (int dy = 0; dy < k; ++dy) {
              const int iy = oy + dy - pad;
              if (iy < 0 || iy >= H) continue;
              for (int dx = 0; dx < k; ++dx) {
                const int ix = ox + dx - pad;
                if (ix < 0 || ix >= W) continue;
                if (n.parents[1]->requires_grad)
                  n.parents[1]->grad.vec()[widx(co, ci, dy, dx)] +=
                      g * X.at3(ci, iy, ix);
                if (n.parents[0]->requires_grad)
                  n.parents[0]->grad.at3(ci, iy, ix) +=
                      g * Wt.vec()[widx(co, ci, dy, dx)];
              }
            }
        }
  });
}

// ---------------------------------------------------------------------------
// Parameter container
// ---------------------------------------------------------------------------

/// Learnable weight matrix with optional bias.
struct LinearMap {
  Var weight;  // [out, in]
  Var bias;    // [out] or nullptr

  Var apply(const Var& x) const { return linear_vec(weight, bias, x); }
  Var apply_rows(const Var& x) const { return linear_rows(x, weight, bias); }
  int out_dim() const { return weight->value.dim(0); }
  int in_dim() const { return weight->value.dim(1); }
};

}  // namespace mvdet
