#pragma once

// Dense double-precision arrays with a reverse-mode tape.
//
// Every op appends one node to the tape. Nodes are stored in execution order,
// so reverse iteration is a reverse topological order of the graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "edfnet/errors.hpp"

namespace edfnet::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Row-major dense array. Ops treat it as rows() x cols(), where cols() is the
/// product of all trailing extents.
class Array {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapMat = Eigen::Map<RowMat>;
  using ConstMapMat = Eigen::Map<const RowMat>;

  Array() = default;
  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill), cols_(trailing(shape_)) {}
  Array(std::size_t rows, std::size_t cols, double fill = 0.0)
      : Array(Shape{rows, cols}, fill) {}
  Array(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::move(values)), cols_(trailing(shape_)) {
    if (data_.size() != count(shape_)) {
      throw ShapeError("array value count " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Array scalar(double v) { return Array(Shape{1, 1}, v); }
  static Array from_rows(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Array(Shape{rows, cols}, std::move(values));
  }
  static Array from_matrix(const Eigen::MatrixXd& m) {
    Array a(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    a.map() = m;
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return cols_; }
  bool same_shape(const Array& o) const { return rows() == o.rows() && cols() == o.cols(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar shape " + shape_str(shape_));
    return data_[0];
  }

  MapMat map() {
    return MapMat(data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }
  ConstMapMat map() const {
    return ConstMapMat(data_.data(), static_cast<Eigen::Index>(rows()),
                       static_cast<Eigen::Index>(cols()));
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Array& a, const Array& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  static std::size_t trailing(const Shape& s) {
    if (s.empty()) return 1;
    return std::accumulate(s.begin() + 1, s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
  std::size_t cols_ = 0;
};

/// Trainable array with a gradient accumulator of identical shape.
struct Parameter {
  std::string name;
  Array value;
  Array grad;

  Parameter() = default;
  Parameter(std::string n, Array v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void reset_grad() { grad = Array(value.shape()); }
};

/// Glorot-style uniform init in ±sqrt(6 / (fan_in + fan_out)).
inline void init_uniform_glorot(Parameter& p, std::size_t fan_in, std::size_t fan_out,
                                std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : p.value.values()) v = u(rng);
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value) { return push(std::move(value), nullptr, false, {}); }

  Var param(Parameter& p) { return push(p.value, &p, true, {}); }

  /// Appends a node computed from `inputs`. The backward closure receives the
  /// node's own id; it reads grad(self) and accumulates into its inputs.
  Var record(Array value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }
  Var record(Array value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : Backward{});
  }

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  const Array& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const Array& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator for an input node, allocated on first use. Returns
  /// nullptr for nodes that do not need gradients.
  Array* accum(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
      n.grad = Array(n.value.shape());
    }
    return &n.grad;
  }
  Array* accum(Var v) { return accum(v.id); }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from `loss`; accumulates into every reachable Parameter.
  /// Returns the number of nodes whose backward closure ran.
  std::size_t backward(Var loss) {
    check_owner(loss);
    if (consumed_) throw Error("tape already consumed by a backward pass");
    if (nodes_[loss.id].value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       shape_str(nodes_[loss.id].value.shape()));
    }
    std::size_t visited = 0;
    if (Array* g = accum(loss.id)) (*g)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      ++visited;
      if (n.param) {
        auto& pg = n.param->grad;
        if (pg.shape() != n.param->value.shape()) pg = Array(n.param->value.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      } else if (n.backward) {
        n.backward(*this, i);
      }
      n.backward = nullptr;
    }
    consumed_ = true;
    return visited;
  }

 private:
  struct Node {
    Array value;
    Array grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Array value, Parameter* p, bool requires_grad, Backward backward) {
    if (consumed_) throw Error("cannot record on a consumed tape");
    nodes_.push_back(Node{std::move(value), Array{}, p, requires_grad, std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Forward ops

namespace detail {

inline void require(bool ok, const std::string& op, const Array& a, const Array& b) {
  if (!ok) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
}

template <typename Fn>
Var unary(Var a, Fn&& f, std::function<double(double x, double y)> dfdx) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  Array y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(std::move(y), {a}, [a, dfdx = std::move(dfdx)](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const Array& x = tp.value(a);
    const Array& y = tp.value(self);
    const Array& gy = tp.grad(self);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += gy[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace detail

/// a (n x k) · b (k x m)
inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const Array& w = t.value(b);
  detail::require(x.cols() == w.rows(), "matmul", x, w);
  Array y(x.rows(), w.cols());
  y.map().noalias() = x.map() * w.map();
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const auto gy = tp.grad(self).map();
    if (Array* ga = tp.accum(a)) ga->map().noalias() += gy * tp.value(b).map().transpose();
    if (Array* gb = tp.accum(b)) gb->map().noalias() += tp.value(a).map().transpose() * gy;
  });
}

/// a (n x k) · b (m x k)ᵀ
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const Array& w = t.value(b);
  detail::require(x.cols() == w.cols(), "matmul_nt", x, w);
  Array y(x.rows(), w.rows());
  y.map().noalias() = x.map() * w.map().transpose();
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const auto gy = tp.grad(self).map();
    if (Array* ga = tp.accum(a)) ga->map().noalias() += gy * tp.value(b).map();
    if (Array* gb = tp.accum(b)) gb->map().noalias() += gy.transpose() * tp.value(a).map();
  });
}

/// Elementwise sum of equal shapes, or row-wise bias when b is 1 x cols.
inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const Array& z = t.value(b);
  const bool bias = !x.same_shape(z) && z.rows() == 1 && z.cols() == x.cols();
  detail::require(x.same_shape(z) || bias, "add", x, z);
  Array y = x;
  if (bias) {
    y.map().rowwise() += z.map().row(0);
  } else {
    y.map() += z.map();
  }
  return t.record(std::move(y), {a, b}, [a, b, bias](Tape& tp, std::size_t self) {
    const auto gy = tp.grad(self).map();
    if (Array* ga = tp.accum(a)) ga->map() += gy;
    if (Array* gb = tp.accum(b)) {
      if (bias) {
        gb->map().row(0) += gy.colwise().sum();
      } else {
        gb->map() += gy;
      }
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const Array& z = t.value(b);
  detail::require(x.same_shape(z), "sub", x, z);
  Array y = x;
  y.map() -= z.map();
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const auto gy = tp.grad(self).map();
    if (Array* ga = tp.accum(a)) ga->map() += gy;
    if (Array* gb = tp.accum(b)) gb->map() -= gy;
  });
}

inline Var scalar_mul(Var a, double s) {
  Tape& t = *a.tape;
  Array y = t.value(a);
  y.map() *= s;
  return t.record(std::move(y), {a}, [a, s](Tape& tp, std::size_t self) {
    if (Array* ga = tp.accum(a)) ga->map() += s * tp.grad(self).map();
  });
}

/// Elementwise product of equal shapes.
inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const Array& z = t.value(b);
  detail::require(x.same_shape(z), "mul", x, z);
  Array y = x;
  y.map().array() *= z.map().array();
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const auto gy = tp.grad(self).map().array();
    if (Array* ga = tp.accum(a)) ga->map().array() += gy * tp.value(b).map().array();
    if (Array* gb = tp.accum(b)) gb->map().array() += gy * tp.value(a).map().array();
  });
}

/// Scales row r of x (n x c) by w(r, 0), w being n x 1.
inline Var scale_rows(Var x, Var w) {
  Tape& t = *x.tape;
  const Array& xv = t.value(x);
  const Array& wv = t.value(w);
  detail::require(wv.rows() == xv.rows() && wv.cols() == 1, "scale_rows", xv, wv);
  Array y = xv;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) *= wv(r, 0);
  }
  return t.record(std::move(y), {x, w}, [x, w](Tape& tp, std::size_t self) {
    const Array& gy = tp.grad(self);
    const Array& xv = tp.value(x);
    const Array& wv = tp.value(w);
    Array* gx = tp.accum(x);
    Array* gw = tp.accum(w);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < xv.cols(); ++c) {
        if (gx) (*gx)(r, c) += gy(r, c) * wv(r, 0);
        acc += gy(r, c) * xv(r, c);
      }
      if (gw) (*gw)(r, 0) += acc;
    }
  });
}

/// Row-wise inner product: n x c, n x c -> n x 1.
inline Var row_dot(Var a, Var b) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const Array& z = t.value(b);
  detail::require(x.same_shape(z), "row_dot", x, z);
  Array y(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) acc += x(r, c) * z(r, c);
    y(r, 0) = acc;
  }
  return t.record(std::move(y), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Array& gy = tp.grad(self);
    const Array& x = tp.value(a);
    const Array& z = tp.value(b);
    Array* ga = tp.accum(a);
    Array* gb = tp.accum(b);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) {
        if (ga) (*ga)(r, c) += gy(r, 0) * z(r, c);
        if (gb) (*gb)(r, c) += gy(r, 0) * x(r, c);
      }
    }
  });
}

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(Var a, double slope = 0.1) {
  return detail::unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? slope : 0.0); });
}

/// Hinge max(0, x); same semantics as relu, kept separate for loss code.
inline Var max_with_zero(Var a) { return relu(a); }

/// sqrt with a zero subgradient at 0.
inline Var sqrt(Var a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Var reciprocal(Var a) {
  return detail::unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

inline Var square(Var a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  Array y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c) m = std::max(m, x(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) z += (y(r, c) = std::exp(x(r, c) - m));
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) /= z;
  }
  return t.record(std::move(y), {a}, [a](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const Array& y = tp.value(self);
    const Array& gy = tp.grad(self);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += gy(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) (*ga)(r, c) += y(r, c) * (gy(r, c) - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row (x − mean) / sqrt(var + 1e-5), biased variance, no affine.
inline Var layer_norm_rows(Var a) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const std::size_t n = x.cols();
  Array y(x.shape());
  std::vector<double> inv_std(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += x(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < n; ++c) y(r, c) = (x(r, c) - mean) * inv_std[r];
  }
  return t.record(std::move(y), {a}, [a, inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const Array& y = tp.value(self);
    const Array& gy = tp.grad(self);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        mg += gy(r, c);
        mgy += gy(r, c) * y(r, c);
      }
      mg /= static_cast<double>(n);
      mgy /= static_cast<double>(n);
      for (std::size_t c = 0; c < n; ++c) {
        (*ga)(r, c) += inv_std[r] * (gy(r, c) - mg - y(r, c) * mgy);
      }
    }
  });
}

/// Stacks arrays with equal column counts vertically.
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts[0].tape;
  const std::size_t cols = t.value(parts[0]).cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require(t.value(p).cols() == cols, "concat_rows", t.value(parts[0]), t.value(p));
    rows += t.value(p).rows();
  }
  Array y(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Array& v = t.value(p);
    std::copy(v.data(), v.data() + v.size(), y.data() + off);
    off += v.size();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [in](Tape& tp, std::size_t self) {
    const Array& gy = tp.grad(self);
    std::size_t off = 0;
    for (const auto& p : in) {
      const std::size_t n = tp.value(p).size();
      if (Array* g = tp.accum(p)) {
        for (std::size_t k = 0; k < n; ++k) (*g)[k] += gy[off + k];
      }
      off += n;
    }
  });
}

/// Joins arrays with equal row counts side by side.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    detail::require(t.value(p).rows() == rows, "concat_cols", t.value(parts[0]), t.value(p));
    cols += t.value(p).cols();
  }
  Array y(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Array& v = t.value(p);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) y(r, off + c) = v(r, c);
    }
    off += v.cols();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [in](Tape& tp, std::size_t self) {
    const Array& gy = tp.grad(self);
    std::size_t off = 0;
    for (const auto& p : in) {
      const std::size_t pc = tp.value(p).cols();
      if (Array* g = tp.accum(p)) {
        for (std::size_t r = 0; r < g->rows(); ++r) {
          for (std::size_t c = 0; c < pc; ++c) (*g)(r, c) += gy(r, off + c);
        }
      }
      off += pc;
    }
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  if (begin + count > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for shape " + shape_str(x.shape()));
  }
  Array y(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) y(r, c) = x(r, begin + c);
  }
  return t.record(std::move(y), {a}, [a, begin, count](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const Array& gy = tp.grad(self);
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      for (std::size_t c = 0; c < count; ++c) (*ga)(r, begin + c) += gy(r, c);
    }
  });
}

inline Var gather_rows(Var a, std::vector<std::size_t> indices) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  const std::size_t c = x.cols();
  Array y(indices.size(), c);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.data() + indices[r] * c, c, y.data() + r * c);
  }
  return t.record(std::move(y), {a}, [a, idx = std::move(indices)](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const Array& gy = tp.grad(self);
    const std::size_t c = gy.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t k = 0; k < c; ++k) (*ga)(idx[r], k) += gy(r, k);
    }
  });
}

/// out(indices[r], :) += a(r, :), out having `out_rows` rows.
inline Var scatter_add_rows(Var a, std::vector<std::size_t> indices, std::size_t out_rows) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  if (indices.size() != x.rows()) throw ShapeError("scatter_add_rows: one index per row required");
  const std::size_t c = x.cols();
  Array y(out_rows, c);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= out_rows) throw ShapeError("scatter_add_rows: index out of range");
    for (std::size_t k = 0; k < c; ++k) y(indices[r], k) += x(r, k);
  }
  return t.record(std::move(y), {a}, [a, idx = std::move(indices)](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const Array& gy = tp.grad(self);
    const std::size_t c = gy.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t k = 0; k < c; ++k) (*ga)(r, k) += gy(idx[r], k);
    }
  });
}

/// Column-wise mean over rows: n x c -> 1 x c.
inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  if (x.rows() == 0) throw ShapeError("mean_rows: no rows");
  Array y(1, x.cols());
  y.map() = x.map().colwise().mean();
  return t.record(std::move(y), {a}, [a](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const double inv = 1.0 / static_cast<double>(ga->rows());
    ga->map().rowwise() += inv * tp.grad(self).map().row(0);
  });
}

/// Per-row sum: n x c -> n x 1.
inline Var sum_cols(Var a) {
  Tape& t = *a.tape;
  const Array& x = t.value(a);
  Array y(x.rows(), 1);
  y.map() = x.map().rowwise().sum();
  return t.record(std::move(y), {a}, [a](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    ga->map().colwise() += tp.grad(self).map().col(0);
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : t.value(a).values()) s += v;
  return t.record(Array::scalar(s), {a}, [a](Tape& tp, std::size_t self) {
    Array* ga = tp.accum(a);
    if (!ga) return;
    const double g = tp.grad(self)[0];
    for (auto& v : ga->values()) v += g;
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.tape->value(a).size());
  return scalar_mul(sum(a), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Gradient verification

struct FdOptions {
  // Check at most this many components (0 = all), chosen by a seeded shuffle.
  std::size_t max_components = 0;
  std::uint64_t seed = 0;
};

/// Max over components of |analytic − central| / max(|analytic|, |central|, 1e-8).
/// `f` must build the scalar loss on the supplied fresh tape.
inline double finite_difference_check(const std::function<Var(Tape&)>& f, Parameter& p, double h,
                                      FdOptions opts = {}) {
  if (!(h > 0.0)) throw Error("finite_difference_check: step must be positive");
  p.reset_grad();
  {
    Tape t;
    t.backward(f(t));
  }
  const Array analytic = p.grad;
  std::vector<std::size_t> comps(p.value.size());
  std::iota(comps.begin(), comps.end(), std::size_t{0});
  if (opts.max_components && comps.size() > opts.max_components) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(comps.begin(), comps.end(), rng);
    comps.resize(opts.max_components);
  }
  auto eval = [&] {
    Tape t;
    return t.value(f(t)).item();
  };
  double worst = 0.0;
  for (auto k : comps) {
    const double saved = p.value[k];
    p.value[k] = saved + h;
    const double fp = eval();
    p.value[k] = saved - h;
    const double fm = eval();
    p.value[k] = saved;
    const double central = (fp - fm) / (2.0 * h);
    const double a = analytic[k];
    const double denom = std::max({std::abs(a), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(a - central) / denom);
  }
  return worst;
}

}  // namespace edfnet::ad
