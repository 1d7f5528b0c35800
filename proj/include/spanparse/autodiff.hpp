#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape records operations in execution order; backward() replays them in
// exact reverse order. Leaves are either constants, free inputs, or bound to a
// Parameter, in which case backward() accumulates into Parameter::grad.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spanparse/error.hpp"

namespace spanparse::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape))
      throw ShapeMismatch("Tensor", std::to_string(data.size()) + " values",
                          std::to_string(shape_size(shape)) + " for " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  // Last dimension; rank-0 tensors count as one column.
  std::size_t cols() const noexcept { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const noexcept { return cols() ? size() / cols() : 0; }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }

  double item() const {
    if (size() != 1) throw ShapeMismatch("item", shape_str(shape), "a single element");
    return data[0];
  }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

// A trainable (or frozen) named tensor with its accumulated gradient.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape) {}

  void zero_grad() {
    if (grad.shape != value.shape) grad = Tensor(value.shape);
    grad.zero();
  }
};

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
};

class Tape {
 public:
  // Receives the output gradient; propagates into inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor v) { return push(Node{std::move(v), nullptr, nullptr, false, {}, {}}); }

  Var input(Tensor v, bool requires_grad = true) {
    return push(Node{std::move(v), nullptr, nullptr, requires_grad && grad_enabled_, {}, {}});
  }

  // Leaf that reads the parameter value in place; gradients land in p.grad.
  Var param(Parameter& p) {
    const bool rg = grad_enabled_ && p.trainable;
    if (rg && p.grad.shape != p.value.shape) p.zero_grad();
    return push(Node{{}, &p.value, rg ? &p : nullptr, rg, {}, {}});
  }

  Var record(Tensor v, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(v), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(Tensor v, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) rg = rg || nodes_[in.id].requires_grad;
    if (!rg) return constant(std::move(v));
    return push(Node{std::move(v), nullptr, nullptr, true, {}, std::move(fn)});
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer for a node, allocated on first touch.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape != value(id).shape || n.grad.size() != value(id).size())
      n.grad = Tensor(value(id).shape);
    n.has_grad = true;
    return n.grad;
  }

  void accumulate(Var v, const Tensor& g) {
    if (!nodes_[v.id].requires_grad) return;
    Tensor& buf = grad_buffer(v.id);
    for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i];
  }

  // Gradient of the last backward() wrt a node; zeros if it was never reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.has_grad) return n.grad;
    return Tensor(value(v.id).shape);
  }

  // Runs reverse-mode accumulation from a scalar loss. Returns the gradient of
  // every requires-grad leaf, keyed by node id; parameter-bound leaves also
  // add their gradient into Parameter::grad.
  std::map<std::size_t, Tensor> backward(Var loss) {
    if (value(loss.id).size() != 1)
      throw Error("NonScalarLoss", "loss has shape " + shape_str(value(loss.id).shape));
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    if (nodes_[loss.id].requires_grad) grad_buffer(loss.id).data[0] = 1.0;
    for (std::size_t id = nodes_.size(); id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      Tensor g = n.grad;  // copy: backward may grow other buffers
      n.backward(*this, g);
    }
    std::map<std::size_t, Tensor> leaves;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.backward) continue;
      Tensor g = n.has_grad ? n.grad : Tensor(value(id).shape);
      if (n.param) {
        for (std::size_t i = 0; i < g.size(); ++i) n.param->grad.data[i] += g.data[i];
      }
      leaves.emplace(id, std::move(g));
    }
    return leaves;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref;
    Parameter* param;
    bool requires_grad;
    Tensor grad;
    BackwardFn backward;
    bool has_grad = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {

inline void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeMismatch(op, shape_str(t.shape), "rank 2");
}

// b broadcasts over a's leading dims when b's shape equals a's trailing dims.
inline bool broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace detail

// (m x k) . (k x n)
inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2("matmul", A);
  detail::require_rank2("matmul", B);
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  if (B.shape[0] != k)
    throw ShapeMismatch("matmul", shape_str(A.shape) + "x" + shape_str(B.shape),
                        "inner dimensions to agree");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B.data[p * n];
      double* orow = &out.data[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g.data[i * n + j] * B.data[p * n + j];
          ga.data[i * k + p] += s;
        }
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A.data[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb.data[p * n + j] += aip * g.data[i * n + j];
        }
    }
  });
}

namespace detail {

// Elementwise binary op with b broadcast over a's leading dims.
template <typename Fwd, typename DA, typename DB>
Var broadcast_binary(const char* op, Var a, Var b, Fwd fwd, DA da, DB db) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!broadcastable(A.shape, B.shape))
    throw ShapeMismatch(op, shape_str(B.shape), "trailing dims of " + shape_str(A.shape));
  const std::size_t nb = B.size();
  Tensor out(A.shape);
  for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = fwd(A.data[i], B.data[i % nb]);
  return a.tape->record(std::move(out), {a, b}, [a, b, nb, da, db](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a.id);
    const Tensor& B = t.value(b.id);
    if (t.requires_grad(a.id)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * da(A.data[i], B.data[i % nb]);
    }
    if (t.requires_grad(b.id)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % nb] += g.data[i] * db(A.data[i], B.data[i % nb]);
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  return a.tape->record(std::move(out), {a}, [a, c](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(a.id);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (A.data[i] > 0.0) ga.data[i] += g.data[i];
  });
}

// Normalizes each row of the last dimension to zero mean and unit variance.
inline Var layer_norm(Var a, double eps = 1e-5) {
  const Tensor& A = a.value();
  const std::size_t d = A.cols();
  if (d < 1) throw ShapeMismatch("layer_norm", shape_str(A.shape), "last dim >= 1");
  const std::size_t rows = A.rows();
  Tensor out(A.shape);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto x = A.row(r);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] = (x[c] - mean) * inv_std[r];
  }
  Tensor normalized = out;
  return a.tape->record(std::move(out), {a},
                        [a, d, rows, inv_std = std::move(inv_std),
                         y = std::move(normalized)](Tape& t, const Tensor& g) {
                          Tensor& ga = t.grad_buffer(a.id);
                          const double dd = static_cast<double>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double gsum = 0.0, gysum = 0.0;
                            for (std::size_t c = 0; c < d; ++c) {
                              gsum += g.data[r * d + c];
                              gysum += g.data[r * d + c] * y.data[r * d + c];
                            }
                            for (std::size_t c = 0; c < d; ++c)
                              ga.data[r * d + c] += inv_std[r] *
                                  (g.data[r * d + c] - gsum / dd - y.data[r * d + c] * gysum / dd);
                          }
                        });
}

// Softmax over the last dimension.
inline Var softmax(Var a) {
  const Tensor& A = a.value();
  const std::size_t d = A.cols(), rows = A.rows();
  Tensor out(A.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    auto x = A.row(r);
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) z += (out.data[r * d + c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < d; ++c) out.data[r * d + c] /= z;
  }
  Tensor y = out;
  return a.tape->record(std::move(out), {a}, [a, d, rows, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g.data[r * d + c] * y.data[r * d + c];
      for (std::size_t c = 0; c < d; ++c)
        ga.data[r * d + c] += y.data[r * d + c] * (g.data[r * d + c] - dot);
    }
  });
}

// Rows of a (V x d) table selected by ids -> (ids.size() x d).
inline Var embedding_lookup(Var table, std::vector<std::size_t> ids) {
  const Tensor& T = table.value();
  detail::require_rank2("embedding_lookup", T);
  const std::size_t d = T.shape[1];
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= T.shape[0])
      throw ShapeMismatch("embedding_lookup", "id " + std::to_string(ids[i]),
                          "< " + std::to_string(T.shape[0]));
    std::copy_n(&T.data[ids[i] * d], d, &out.data[i * d]);
  }
  return table.tape->record(std::move(out), {table}, [table, d, ids = std::move(ids)](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_buffer(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt.data[ids[i] * d + c] += g.data[i * d + c];
  });
}

// Same as embedding_lookup; reads better when the source is an activation.
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  return embedding_lookup(a, std::move(rows));
}

// Concatenation along the last dimension; leading dims must agree.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat", "0 inputs", ">= 1 input");
  const std::size_t rows = parts[0].value().rows();
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - (parts[0].shape().empty() ? 0 : 1));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - (p.shape().empty() ? 0 : 1));
    if (pl != lead) throw ShapeMismatch("concat", shape_str(p.shape()), "leading dims " + shape_str(lead));
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Shape s = lead;
  s.push_back(total);
  Tensor out(s);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(&P.data[r * widths[k]], widths[k], &out.data[r * total + off]);
    off += widths[k];
  }
  return parts[0].tape->record(std::move(out), std::span<const Var>(parts), [parts, widths, rows, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (t.requires_grad(parts[k].id)) {
        Tensor& gp = t.grad_buffer(parts[k].id);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp.data[r * widths[k] + c] += g.data[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

// Columns [start, start+len) of the last dimension.
inline Var slice(Var a, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  const std::size_t d = A.cols(), rows = A.rows();
  if (start + len > d)
    throw ShapeMismatch("slice", "[" + std::to_string(start) + "," + std::to_string(start + len) + ")",
                        "within last dim " + std::to_string(d));
  Shape s = A.shape;
  s.back() = len;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&A.data[r * d + start], len, &out.data[r * len]);
  return a.tape->record(std::move(out), {a}, [a, start, len, d, rows](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < len; ++c) ga.data[r * d + start + c] += g.data[r * len + c];
  });
}

// Stacks rank-2 inputs with equal column counts along the first dimension.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows", "0 inputs", ">= 1 input");
  const std::size_t d = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    detail::require_rank2("concat_rows", p.value());
    if (p.value().cols() != d)
      throw ShapeMismatch("concat_rows", shape_str(p.shape()), std::to_string(d) + " columns");
    rows += p.value().rows();
  }
  Tensor out({rows, d});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
    off += p.value().size();
  }
  return parts[0].tape->record(std::move(out), std::span<const Var>(parts), [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t sz = t.value(p.id).size();
      if (t.requires_grad(p.id)) {
        Tensor& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < sz; ++i) gp.data[i] += g.data[off + i];
      }
      off += sz;
    }
  });
}

// Selected columns of the last dimension, in the given order.
inline Var select_cols(Var a, std::vector<std::size_t> cols) {
  const Tensor& A = a.value();
  const std::size_t d = A.cols(), rows = A.rows(), w = cols.size();
  for (std::size_t c : cols)
    if (c >= d) throw ShapeMismatch("select_cols", "column " + std::to_string(c), "< " + std::to_string(d));
  Shape s = A.shape;
  s.back() = w;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < w; ++k) out.data[r * w + k] = A.data[r * d + cols[k]];
  return a.tape->record(std::move(out), {a}, [a, d, rows, cols = std::move(cols)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    const std::size_t w = cols.size();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < w; ++k) ga.data[r * d + cols[k]] += g.data[r * w + k];
  });
}

// Multiplies by a caller-supplied mask (entries typically 0 or 1/(1-p)).
inline Var dropout(Var a, const Tensor& mask) {
  if (mask.shape != a.shape()) throw ShapeMismatch("dropout", shape_str(mask.shape), shape_str(a.shape()));
  return mul(a, a.tape->constant(mask));
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_rank2("transpose", A);
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = A.data[i * n + j];
  return a.tape->record(std::move(out), {a}, [a, m, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j * m + i];
  });
}

inline Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.data) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (double& v : ga.data) v += g.data[0];
  });
}

// Scalar sum_k coeffs[k] * a.data[flat[k]], accumulated in index order.
inline Var weighted_pick(Var a, std::vector<std::size_t> flat, std::vector<double> coeffs) {
  const Tensor& A = a.value();
  if (flat.size() != coeffs.size())
    throw ShapeMismatch("weighted_pick", std::to_string(coeffs.size()) + " coefficients",
                        std::to_string(flat.size()));
  double s = 0.0;
  for (std::size_t k = 0; k < flat.size(); ++k) {
    if (flat[k] >= A.size())
      throw ShapeMismatch("weighted_pick", "index " + std::to_string(flat[k]), "< " + std::to_string(A.size()));
    s += coeffs[k] * A.data[flat[k]];
  }
  return a.tape->record(Tensor::scalar(s), {a},
                        [a, flat = std::move(flat), coeffs = std::move(coeffs)](Tape& t, const Tensor& g) {
                          Tensor& ga = t.grad_buffer(a.id);
                          for (std::size_t k = 0; k < flat.size(); ++k) ga.data[flat[k]] += coeffs[k] * g.data[0];
                        });
}

// Adam with bias correction. Moment buffers are keyed by parameter address.
struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
};

class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return step_; }

  // One update over all parameters using their current grad buffers.
  // lr_scale multiplies the configured learning rate (warmup schedules).
  void step(std::span<Parameter* const> params, double lr_scale = 1.0) {
    ++step_;
    double clip = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const Parameter* p : params)
        for (double g : p->grad.data) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
    }
    const double lr = cfg_.lr * lr_scale;
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      if (p->grad.shape != p->value.shape)
        throw ShapeMismatch("adam_step", shape_str(p->grad.shape), shape_str(p->value.shape));
      Moments& st = moments_[p];
      if (st.m.size() != p->value.size()) {
        st.m.assign(p->value.size(), 0.0);
        st.v.assign(p->value.size(), 0.0);
        st.t = 0;
      }
      // Bias correction counts this parameter's own updates, so parameters
      // left out of some steps are not under-corrected.
      ++st.t;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
      for (std::size_t i = 0; i < st.m.size(); ++i) {
        const double g = p->grad.data[i] * clip;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p->value.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };

  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<const Parameter*, Moments> moments_;
};

}  // namespace spanparse::ad
