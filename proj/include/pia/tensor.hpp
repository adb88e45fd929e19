#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pia {

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 cover everything the
// models and attacks need; ops validate the shapes they accept.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) {
      throw std::invalid_argument("tensor: data length does not match shape");
    }
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor row_matrix(std::size_t rows, std::size_t cols, std::vector<double> d) {
    return Tensor({rows, cols}, std::move(d));
  }

  std::size_t ndim() const { return shape.size(); }
  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Copy of row i of a 2-D tensor as a rank-1 tensor.
  Tensor row(std::size_t i) const {
    Tensor out({cols()});
    const double* src = data.data() + i * cols();
    std::copy(src, src + cols(), out.data.begin());
    return out;
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
  }
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_2d(const Tensor& t, const char* who) {
  require(t.ndim() == 2, std::string(who) + ": expected rank-2 tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward kernels. The autograd tape and the plain evaluation path both call
// these, so the two paths are bit-identical by construction.
// ---------------------------------------------------------------------------
namespace ops {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tensor out({a.rows(), b.cols()});
  detail::ECMap ma(a.data.data(), a.rows(), a.cols());
  detail::ECMap mb(b.data.data(), b.rows(), b.cols());
  detail::EMap mo(out.data.data(), out.rows(), out.cols());
  mo.noalias() = ma * mb;
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_2d(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.same_shape(b), "add: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.same_shape(b), "sub: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.data[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (double& v : out.data) v *= c;
  return out;
}

// Softmax along `axis` of a 2-D tensor with subtract-max stabilization.
inline Tensor softmax(const Tensor& a, int axis) {
  detail::require_2d(a, "softmax");
  detail::require(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
  Tensor out(a.shape);
  const std::size_t outer = axis == 1 ? a.rows() : a.cols();
  const std::size_t inner = axis == 1 ? a.cols() : a.rows();
  for (std::size_t i = 0; i < outer; ++i) {
    auto at = [&](std::size_t k) -> double {
      return axis == 1 ? a(i, k) : a(k, i);
    };
    double mx = at(0);
    for (std::size_t k = 1; k < inner; ++k) mx = std::max(mx, at(k));
    double sum = 0.0;
    std::vector<double> e(inner);
    for (std::size_t k = 0; k < inner; ++k) {
      e[k] = std::exp(at(k) - mx);
      sum += e[k];
    }
    for (std::size_t k = 0; k < inner; ++k) {
      const double v = e[k] / sum;
      if (axis == 1) {
        out(i, k) = v;
      } else {
        out(k, i) = v;
      }
    }
  }
  return out;
}

constexpr double kRmsNormEps = 1e-6;

// Row-wise RMS normalization with a learned per-column gain.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain) {
  detail::require_2d(x, "rmsnorm");
  detail::require(gain.ndim() == 1 && gain.shape[0] == x.cols(),
                  "rmsnorm: gain must match column count");
  Tensor out(x.shape);
  const std::size_t h = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < h; ++j) ss += x(i, j) * x(i, j);
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(h) + kRmsNormEps);
    for (std::size_t j = 0; j < h; ++j) out(i, j) = x(i, j) * inv * gain[j];
  }
  return out;
}

// tanh-approximated GELU with fixed constants.
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

inline Tensor gelu(const Tensor& a) {
  Tensor out = a;
  for (double& v : out.data) {
    const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  detail::require_2d(a, "slice_rows");
  detail::require(begin + count <= a.rows(), "slice_rows: range out of bounds");
  Tensor out({count, a.cols()});
  std::copy(a.data.begin() + begin * a.cols(),
            a.data.begin() + (begin + count) * a.cols(), out.data.begin());
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  detail::require_2d(a, "slice_cols");
  detail::require(begin + count <= a.cols(), "slice_cols: range out of bounds");
  Tensor out({a.rows(), count});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, begin + j);
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: nothing to concatenate");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_2d(p, "concat_cols");
    detail::require(p.rows() == parts.front().rows(), "concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out({parts.front().rows(), total});
  for (std::size_t i = 0; i < out.rows(); ++i) {
    std::size_t c = 0;
    for (const Tensor& p : parts) {
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, c++) = p(i, j);
    }
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: nothing to concatenate");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_2d(p, "concat_rows");
    detail::require(p.cols() == parts.front().cols(), "concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out({total, parts.front().cols()});
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + r * out.cols());
    r += p.rows();
  }
  return out;
}

// Gather of table rows: out row i = table row ids[i].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::int32_t>& ids) {
  detail::require_2d(table, "embedding_lookup");
  Tensor out({ids.size(), table.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < table.rows(),
                    "embedding_lookup: id out of range");
    std::copy(table.data.begin() + static_cast<std::size_t>(ids[i]) * table.cols(),
              table.data.begin() + (static_cast<std::size_t>(ids[i]) + 1) * table.cols(),
              out.data.begin() + i * table.cols());
  }
  return out;
}

inline Tensor l2_norm_sq(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return Tensor::scalar(s);
}

inline double squared_distance(const Tensor& a, const Tensor& b) {
  detail::require(a.same_shape(b), "squared_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Reverse-mode autograd tape. Nodes are appended in execution order; backward
// walks them once in reverse. Gradients materialize lazily, so nodes a loss
// does not reach keep an all-zero gradient at no cost.
// ---------------------------------------------------------------------------
struct Var {
  std::size_t index = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, {}); }
  Var leaf(Tensor v) { return push(std::move(v), true, {}); }

  const Tensor& value(Var v) const { return nodes_[v.index].value; }

  // Gradient of the most recent backward() w.r.t. node v (zeros if untouched).
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.index];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  Var add(Var a, Var b) {
    Tensor out = ops::add(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [this, a, b](const Tensor& g) {
                  accumulate(a, g);
                  accumulate(b, g);
                });
  }

  Var sub(Var a, Var b) {
    Tensor out = ops::sub(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [this, a, b](const Tensor& g) {
                  accumulate(a, g);
                  accumulate(b, ops::scale(g, -1.0));
                });
  }

  Var scale(Var a, double c) {
    Tensor out = ops::scale(value(a), c);
    return push(std::move(out), tracked(a), [this, a, c](const Tensor& g) {
      accumulate(a, ops::scale(g, c));
    });
  }

  Var matmul(Var a, Var b) {
    Tensor out = ops::matmul(value(a), value(b));
    return push(std::move(out), tracked(a) || tracked(b),
                [this, a, b](const Tensor& g) {
                  if (tracked(a)) accumulate(a, ops::matmul(g, ops::transpose(value(b))));
                  if (tracked(b)) accumulate(b, ops::matmul(ops::transpose(value(a)), g));
                });
  }

  Var transpose(Var a) {
    Tensor out = ops::transpose(value(a));
    return push(std::move(out), tracked(a), [this, a](const Tensor& g) {
      accumulate(a, ops::transpose(g));
    });
  }

  Var softmax(Var a, int axis) {
    Tensor out = ops::softmax(value(a), axis);
    Var self = push(std::move(out), tracked(a), {});
    nodes_[self.index].pull = [this, a, self, axis](const Tensor& g) {
      // dx = s .* (g - <g, s>) along the softmax axis (Jacobian s_i(d_ij - s_j)).
      const Tensor& s = value(self);
      Tensor dx(s.shape);
      const std::size_t outer = axis == 1 ? s.rows() : s.cols();
      const std::size_t inner = axis == 1 ? s.cols() : s.rows();
      for (std::size_t i = 0; i < outer; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < inner; ++k) {
          const double sv = axis == 1 ? s(i, k) : s(k, i);
          const double gv = axis == 1 ? g(i, k) : g(k, i);
          dot += sv * gv;
        }
        for (std::size_t k = 0; k < inner; ++k) {
          const double sv = axis == 1 ? s(i, k) : s(k, i);
          const double gv = axis == 1 ? g(i, k) : g(k, i);
          const double dv = sv * (gv - dot);
          if (axis == 1) {
            dx(i, k) = dv;
          } else {
            dx(k, i) = dv;
          }
        }
      }
      accumulate(a, dx);
    };
    return self;
  }

  Var rmsnorm(Var x, Var gain) {
    Tensor out = ops::rmsnorm(value(x), value(gain));
    return push(std::move(out), tracked(x) || tracked(gain),
                [this, x, gain](const Tensor& g) {
                  const Tensor& xv = value(x);
                  const Tensor& gv = value(gain);
                  const std::size_t h = xv.cols();
                  Tensor dx(xv.shape);
                  Tensor dgain({h});
                  for (std::size_t i = 0; i < xv.rows(); ++i) {
                    double ss = 0.0;
                    for (std::size_t j = 0; j < h; ++j) ss += xv(i, j) * xv(i, j);
                    const double r2 = ss / static_cast<double>(h) + ops::kRmsNormEps;
                    const double inv = 1.0 / std::sqrt(r2);
                    double dot = 0.0;
                    for (std::size_t j = 0; j < h; ++j) dot += g(i, j) * gv[j] * xv(i, j);
                    const double c = dot * inv * inv * inv / static_cast<double>(h);
                    for (std::size_t j = 0; j < h; ++j) {
                      dx(i, j) = g(i, j) * gv[j] * inv - xv(i, j) * c;
                      dgain[j] += g(i, j) * xv(i, j) * inv;
                    }
                  }
                  if (tracked(x)) accumulate(x, dx);
                  if (tracked(gain)) accumulate(gain, dgain);
                });
  }

  Var gelu(Var a) {
    Tensor out = ops::gelu(value(a));
    return push(std::move(out), tracked(a), [this, a](const Tensor& g) {
      const Tensor& xv = value(a);
      Tensor dx(xv.shape);
      for (std::size_t i = 0; i < xv.numel(); ++i) {
        const double x = xv.data[i];
        const double u = ops::kGeluC0 * (x + ops::kGeluC1 * x * x * x);
        const double t = std::tanh(u);
        const double du = ops::kGeluC0 * (1.0 + 3.0 * ops::kGeluC1 * x * x);
        dx.data[i] = g.data[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      }
      accumulate(a, dx);
    });
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    Tensor out = ops::slice_rows(value(a), begin, count);
    return push(std::move(out), tracked(a), [this, a, begin, count](const Tensor& g) {
      Tensor dx(value(a).shape);
      std::copy(g.data.begin(), g.data.end(), dx.data.begin() + begin * dx.cols());
      accumulate(a, dx);
    });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    Tensor out = ops::slice_cols(value(a), begin, count);
    return push(std::move(out), tracked(a), [this, a, begin, count](const Tensor& g) {
      Tensor dx(value(a).shape);
      for (std::size_t i = 0; i < dx.rows(); ++i) {
        for (std::size_t j = 0; j < count; ++j) dx(i, begin + j) = g(i, j);
      }
      accumulate(a, dx);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    bool track = false;
    for (Var p : parts) {
      vals.push_back(value(p));
      track = track || tracked(p);
    }
    Tensor out = ops::concat_cols(vals);
    return push(std::move(out), track, [this, parts](const Tensor& g) {
      std::size_t c = 0;
      for (Var p : parts) {
        const std::size_t w = value(p).cols();
        accumulate(p, ops::slice_cols(g, c, w));
        c += w;
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    bool track = false;
    for (Var p : parts) {
      vals.push_back(value(p));
      track = track || tracked(p);
    }
    Tensor out = ops::concat_rows(vals);
    return push(std::move(out), track, [this, parts](const Tensor& g) {
      std::size_t r = 0;
      for (Var p : parts) {
        const std::size_t n = value(p).rows();
        accumulate(p, ops::slice_rows(g, r, n));
        r += n;
      }
    });
  }

  Var embedding_lookup(Var table, std::vector<std::int32_t> ids) {
    Tensor out = ops::embedding_lookup(value(table), ids);
    return push(std::move(out), tracked(table),
                [this, table, ids = std::move(ids)](const Tensor& g) {
                  Tensor dt(value(table).shape);
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    for (std::size_t j = 0; j < dt.cols(); ++j) {
                      dt(static_cast<std::size_t>(ids[i]), j) += g(i, j);
                    }
                  }
                  accumulate(table, dt);
                });
  }

  Var l2_norm_sq(Var a) {
    Tensor out = ops::l2_norm_sq(value(a));
    return push(std::move(out), tracked(a), [this, a](const Tensor& g) {
      accumulate(a, ops::scale(value(a), 2.0 * g[0]));
    });
  }

  // Populates gradients of every node the scalar loss reaches.
  void backward(Var loss) {
    const Node& ln = nodes_[loss.index];
    if (ln.value.numel() != 1) {
      throw std::invalid_argument("backward: loss must be scalar");
    }
    nodes_[loss.index].grad = Tensor::scalar(1.0);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.pull && !n.grad.empty()) n.pull(n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    std::function<void(const Tensor&)> pull;
    bool track = false;
  };

  bool tracked(Var v) const { return nodes_[v.index].track; }

  Var push(Tensor value, bool track, std::function<void(const Tensor&)> pull) {
    Node n;
    n.value = std::move(value);
    n.track = track;
    if (track) n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[v.index];
    if (!n.track) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) n.grad.data[i] += g.data[i];
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace pia
