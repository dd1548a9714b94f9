#include "xicl/numgrad.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace xicl::ng {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

CMapMat as_mat(const Node& n, std::size_t r, std::size_t c) {
  return CMapMat(n.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MapMat grad_mat(Node& n, std::size_t r, std::size_t c) {
  return MapMat(n.grad_buffer().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Builds the result node; wires the graph only if some input needs a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> bw) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

bool wants_grad(const Node& n) { return n.requires_grad; }

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    std::ostringstream os;
    os << op << ": expected rank " << r << ", got shape " << shape_str(t.shape());
    throw ContractError(os.str());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

// Iterates the 1-D lanes of a rank<=2 tensor along `axis`.
struct Lanes {
  std::size_t count;
  std::size_t length;
  std::size_t stride;
  std::size_t offset_step;
  std::size_t lane_offset_stride;
};

Lanes lanes_for(const Shape& shape, std::size_t axis, const char* op) {
  if (shape.empty() || shape.size() > 2 || axis >= shape.size()) {
    throw ContractError(std::string(op) + ": unsupported axis " + std::to_string(axis) + " for shape " +
                        shape_str(shape));
  }
  if (shape.size() == 1) return {1, shape[0], 1, 0, 0};
  if (axis == 1) return {shape[0], shape[1], 1, 0, shape[1]};
  return {shape[1], shape[0], shape[1], 0, 1};
}

std::vector<double> log_softmax_values(const std::vector<double>& x, const Lanes& ln) {
  std::vector<double> out(x.size());
  for (std::size_t l = 0; l < ln.count; ++l) {
    const std::size_t base = l * ln.lane_offset_stride;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < ln.length; ++j) mx = std::max(mx, x[base + j * ln.stride]);
    double s = 0.0;
    for (std::size_t j = 0; j < ln.length; ++j) s += std::exp(x[base + j * ln.stride] - mx);
    const double ls = std::log(s);
    for (std::size_t j = 0; j < ln.length; ++j) out[base + j * ln.stride] = (x[base + j * ln.stride] - mx) - ls;
  }
  return out;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

namespace {
Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto e : shape) require(e > 0, "tensor extents must be positive: " + shape_str(shape));
  require(numel(shape) == values.size(),
          "tensor data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  check_finite("leaf", values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}
}  // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return make_leaf(std::move(shape), std::move(values), false);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return make_leaf(std::move(shape), std::move(values), true);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return make_leaf({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return make_leaf({n}, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const {
  require(rank() == 2, "rows() on non-matrix " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  require(rank() == 2, "cols() on non-matrix " + shape_str(shape()));
  return shape()[1];
}

double Tensor::item() const {
  require(size() == 1, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise and shape ops

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result("add", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!wants_grad(*p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result("sub", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!wants_grad(*p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result("mul", a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (wants_grad(pa)) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result("scale", a.shape(), std::move(out), {a.node_ptr()}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
  require_rank(a, 2, "add_rowwise");
  require_rank(bias, 1, "add_rowwise");
  const std::size_t m = a.rows(), n = a.cols();
  require(bias.size() == n, "add_rowwise: bias length mismatch");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.data()[c];
  return make_result("add_rowwise", a.shape(), std::move(out), {a.node_ptr(), bias.node_ptr()},
                     [m, n](Node& self) {
                       if (wants_grad(*self.parents[0])) {
                         auto& g = self.parents[0]->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (wants_grad(*self.parents[1])) {
                         auto& g = self.parents[1]->grad_buffer();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                       }
                     });
}

Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  }
  return make_result("gelu", a.shape(), std::move(out), {a.node_ptr()}, [](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = p.data[i];
      const double u = k * (x + c * x * x * x);
      const double t = std::tanh(u);
      const double du = k * (1.0 + 3.0 * c * x * x);
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                                        shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a.node_ptr()}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  require(begin < end && end <= a.rows(), "slice_rows: bad range");
  const std::size_t n = a.cols();
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_result("slice_rows", {end - begin, n}, std::move(out), {a.node_ptr()}, [begin, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor select_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "select_rows");
  require(!rows.empty(), "select_rows: empty selection");
  const std::size_t n = a.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < a.rows(), "select_rows: row out of range");
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  const std::size_t count = idx.size();
  return make_result("select_rows", {count, n}, std::move(out), {a.node_ptr()},
                     [idx = std::move(idx), n](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += self.grad[i * n + c];
                     });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
  require_rank(a, 1, "gather");
  require(!indices.empty(), "gather: empty index list");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < a.size(), "gather: index out of range");
    out[i] = a.data()[idx[i]];
  }
  const std::size_t count = idx.size();
  return make_result("gather", {count}, std::move(out), {a.node_ptr()}, [idx = std::move(idx)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor index(const Tensor& a, std::size_t i) {
  require(i < a.size(), "index: out of range");
  return make_result("index", {}, {a.data()[i]}, {a.node_ptr()}, [i](Node& self) {
    self.parents[0]->grad_buffer()[i] += self.grad[0];
  });
}

Tensor stack(std::span<const Tensor> scalars) {
  require(!scalars.empty(), "stack: empty input");
  std::vector<double> out;
  std::vector<std::shared_ptr<Node>> parents;
  out.reserve(scalars.size());
  for (const auto& s : scalars) {
    require(s.size() == 1, "stack: inputs must be scalars");
    out.push_back(s.item());
    parents.push_back(s.node_ptr());
  }
  const std::size_t count = out.size();
  return make_result("stack", {count}, std::move(out), std::move(parents), [](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (wants_grad(*self.parents[i])) self.parents[i]->grad_buffer()[0] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("sum", {}, {s}, {a.node_ptr()}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  return make_result("mean", {}, {s * inv}, {a.node_ptr()}, [inv](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ContractError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MapMat(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      as_mat(*a.node(), m, k) * as_mat(*b.node(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a.node_ptr(), b.node_ptr()}, [m, k, n](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    CMapMat dc(self.grad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (wants_grad(pa)) grad_mat(pa, m, k).noalias() += dc * as_mat(pb, k, n).transpose();
    if (wants_grad(pb)) grad_mat(pb, k, n).noalias() += as_mat(pa, m, k).transpose() * dc;
  });
}

// ---------------------------------------------------------------------------
// Probabilities

Tensor softmax(const Tensor& logits, std::size_t axis) {
  const Lanes ln = lanes_for(logits.shape(), axis, "softmax");
  std::vector<double> x(logits.data().begin(), logits.data().end());
  check_finite("softmax input", x);
  std::vector<double> out(x.size());
  for (std::size_t l = 0; l < ln.count; ++l) {
    const std::size_t base = l * ln.lane_offset_stride;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < ln.length; ++j) mx = std::max(mx, x[base + j * ln.stride]);
    double z = 0.0;
    for (std::size_t j = 0; j < ln.length; ++j) {
      const auto i = base + j * ln.stride;
      out[i] = std::exp(x[i] - mx);
      z += out[i];
    }
    for (std::size_t j = 0; j < ln.length; ++j) out[base + j * ln.stride] /= z;
  }
  return make_result("softmax", logits.shape(), std::move(out), {logits.node_ptr()}, [ln](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t l = 0; l < ln.count; ++l) {
      const std::size_t base = l * ln.lane_offset_stride;
      double dot = 0.0;
      for (std::size_t j = 0; j < ln.length; ++j) {
        const auto i = base + j * ln.stride;
        dot += self.grad[i] * self.data[i];
      }
      for (std::size_t j = 0; j < ln.length; ++j) {
        const auto i = base + j * ln.stride;
        g[i] += self.data[i] * (self.grad[i] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& logits, std::size_t axis) {
  const Lanes ln = lanes_for(logits.shape(), axis, "log_softmax");
  std::vector<double> x(logits.data().begin(), logits.data().end());
  check_finite("log_softmax input", x);
  std::vector<double> out = log_softmax_values(x, ln);
  return make_result("log_softmax", logits.shape(), std::move(out), {logits.node_ptr()}, [ln](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t l = 0; l < ln.count; ++l) {
      const std::size_t base = l * ln.lane_offset_stride;
      double gs = 0.0;
      for (std::size_t j = 0; j < ln.length; ++j) gs += self.grad[base + j * ln.stride];
      for (std::size_t j = 0; j < ln.length; ++j) {
        const auto i = base + j * ln.stride;
        g[i] += self.grad[i] - std::exp(self.data[i]) * gs;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  require(gain.size() == n && bias.size() == n, "layer_norm: parameter length mismatch");
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * rstd[r];
      out[r * n + c] = xhat[r * n + c] * gain.data()[c] + bias.data()[c];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (wants_grad(pg) || wants_grad(pb)) {
          auto& gg = pg.grad_buffer();
          auto& gb = pb.grad_buffer();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) {
              gg[c] += self.grad[r * n + c] * xhat[r * n + c];
              gb[c] += self.grad[r * n + c];
            }
        }
        if (wants_grad(px)) {
          auto& gx = px.grad_buffer();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double dxh = self.grad[r * n + c] * pg.data[c];
              s1 += dxh;
              s2 += dxh * xhat[r * n + c];
            }
            for (std::size_t c = 0; c < n; ++c) {
              const double dxh = self.grad[r * n + c] * pg.data[c];
              gx[r * n + c] += rstd[r] * (dxh - inv_n * s1 - xhat[r * n + c] * inv_n * s2);
            }
          }
        }
      });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  require_rank(a, 2, "pick");
  require(rows.size() == cols.size() && !rows.empty(), "pick: index lists must be equal and nonempty");
  const std::size_t n = a.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < a.rows() && cols[i] < n, "pick: index out of range");
    flat[i] = rows[i] * n + cols[i];
    out[i] = a.data()[flat[i]];
  }
  const std::size_t count = out.size();
  return make_result("pick", {count}, std::move(out), {a.node_ptr()}, [flat = std::move(flat)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Model building blocks

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  require(!ids.empty(), "embedding: empty id list");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<int> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * d);
  for (std::size_t t = 0; t < idv.size(); ++t) {
    if (idv[t] < 0 || static_cast<std::size_t>(idv[t]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(idv[t]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idv[t] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  const std::size_t count = idv.size();
  return make_result("embedding", {count, d}, std::move(out), {table.node_ptr()},
                     [idv = std::move(idv), d](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t t = 0; t < idv.size(); ++t)
                         for (std::size_t c = 0; c < d; ++c) g[idv[t] * d + c] += self.grad[t * d + c];
                     });
}

Tensor causal_attention(const Tensor& qkv, std::size_t n_heads, std::span<const std::uint8_t> key_valid) {
  require_rank(qkv, 2, "causal_attention");
  const std::size_t T = qkv.rows();
  require(qkv.cols() % 3 == 0, "causal_attention: qkv width must be 3*d");
  const std::size_t d = qkv.cols() / 3;
  require(n_heads > 0 && d % n_heads == 0, "causal_attention: d not divisible by heads");
  require(key_valid.size() == T, "causal_attention: mask length mismatch");
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(3 * d));
  using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

  std::vector<double> out(T * d, 0.0);
  // probs[h] is T x T, zero where masked
  std::vector<RowMat> probs(n_heads, RowMat::Zero(Ti, Ti));
  const double* base = qkv.data().data();
  Eigen::Map<RowMat, 0, Eigen::OuterStride<>> out_map(out.data(), Ti, static_cast<Eigen::Index>(d),
                                                      Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
  for (std::size_t h = 0; h < n_heads; ++h) {
    StridedC q(base + h * dh, Ti, dhi, stride);
    StridedC k(base + d + h * dh, Ti, dhi, stride);
    StridedC v(base + 2 * d + h * dh, Ti, dhi, stride);
    RowMat s = (q * k.transpose()) * inv_sqrt;
    RowMat& p = probs[h];
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j)
        if (key_valid[j]) mx = std::max(mx, s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      if (mx == -INFINITY) continue;  // no visible key: output row stays zero
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        if (!key_valid[j]) continue;
        const double e = std::exp(s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx);
        p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e;
        z += e;
      }
      p.row(static_cast<Eigen::Index>(i)) /= z;
    }
    out_map.block(0, static_cast<Eigen::Index>(h * dh), Ti, dhi).noalias() = p * v;
  }
  return make_result(
      "causal_attention", {T, d}, std::move(out), {qkv.node_ptr()},
      [T, d, dh, n_heads, inv_sqrt, probs = std::move(probs)](Node& self) {
        auto& px = *self.parents[0];
        const auto Ti = static_cast<Eigen::Index>(T);
        const auto dhi = static_cast<Eigen::Index>(dh);
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(3 * d));
        const double* base = px.data.data();
        double* gbase = px.grad_buffer().data();
        Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> dout(self.grad.data(), Ti, static_cast<Eigen::Index>(d),
                                                               Eigen::OuterStride<>(static_cast<Eigen::Index>(d)));
        for (std::size_t h = 0; h < n_heads; ++h) {
          StridedC q(base + h * dh, Ti, dhi, stride);
          StridedC k(base + d + h * dh, Ti, dhi, stride);
          StridedC v(base + 2 * d + h * dh, Ti, dhi, stride);
          Strided dq(gbase + h * dh, Ti, dhi, stride);
          Strided dk(gbase + d + h * dh, Ti, dhi, stride);
          Strided dv(gbase + 2 * d + h * dh, Ti, dhi, stride);
          const RowMat& p = probs[h];
          RowMat dO = dout.block(0, static_cast<Eigen::Index>(h * dh), Ti, dhi);
          dv.noalias() += p.transpose() * dO;
          RowMat dp = dO * v.transpose();
          // softmax backward row-wise; masked entries have p == 0
          Eigen::VectorXd rowdot = (dp.cwiseProduct(p)).rowwise().sum();
          RowMat ds = p.cwiseProduct(dp.colwise() - rowdot) * inv_sqrt;
          dq.noalias() += ds * k;
          dk.noalias() += ds.transpose() * q;
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  require_same_shape(p_logits, q_logits, "kl_divergence");
  require(p_logits.rank() == 1 || p_logits.rank() == 2, "kl_divergence: expected rank 1 or 2");
  const std::size_t axis = p_logits.rank() - 1;
  const Lanes ln = lanes_for(p_logits.shape(), axis, "kl_divergence");
  std::vector<double> px(p_logits.data().begin(), p_logits.data().end());
  std::vector<double> qx(q_logits.data().begin(), q_logits.data().end());
  check_finite("kl_divergence input", px);
  check_finite("kl_divergence input", qx);
  std::vector<double> lp = log_softmax_values(px, ln);
  std::vector<double> lq = log_softmax_values(qx, ln);
  std::vector<double> row_kl(ln.count, 0.0);
  double total = 0.0;
  for (std::size_t l = 0; l < ln.count; ++l) {
    const std::size_t b = l * ln.lane_offset_stride;
    double s = 0.0;
    for (std::size_t j = 0; j < ln.length; ++j) {
      const auto i = b + j * ln.stride;
      s += std::exp(lp[i]) * (lp[i] - lq[i]);
    }
    row_kl[l] = s;
    total += s;
  }
  const double inv = 1.0 / static_cast<double>(ln.count);
  return make_result("kl_divergence", {}, {total * inv}, {p_logits.node_ptr(), q_logits.node_ptr()},
                     [ln, inv, lp = std::move(lp), lq = std::move(lq), row_kl = std::move(row_kl)](Node& self) {
                       const double go = self.grad[0] * inv;
                       auto& pp = *self.parents[0];
                       auto& pq = *self.parents[1];
                       for (std::size_t l = 0; l < ln.count; ++l) {
                         const std::size_t b = l * ln.lane_offset_stride;
                         for (std::size_t j = 0; j < ln.length; ++j) {
                           const auto i = b + j * ln.stride;
                           const double p = std::exp(lp[i]);
                           if (wants_grad(pp)) pp.grad_buffer()[i] += go * p * ((lp[i] - lq[i]) - row_kl[l]);
                           if (wants_grad(pq)) pq.grad_buffer()[i] += go * (std::exp(lq[i]) - p);
                         }
                       }
                     });
}

Tensor squared_l2(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "squared_l2");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a.data()[i] - b.data()[i];
    s += diff * diff;
  }
  return make_result("squared_l2", {}, {s}, {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < pa.data.size(); ++i) {
      const double gdiff = 2.0 * (pa.data[i] - pb.data[i]) * self.grad[0];
      if (wants_grad(pa)) pa.grad_buffer()[i] += gdiff;
      if (wants_grad(pb)) pb.grad_buffer()[i] -= gdiff;
    }
  });
}

Tensor mean_pool(const Tensor& hidden, const Tensor& mask) {
  require_rank(hidden, 2, "mean_pool");
  const std::size_t T = hidden.rows(), d = hidden.cols();
  require(mask.size() == T, "mean_pool: mask length mismatch");
  std::vector<std::size_t> active;
  for (std::size_t t = 0; t < T; ++t)
    if (mask.data()[t] != 0.0) active.push_back(t);
  require(!active.empty(), "mean_pool: mask has no active position");
  const double inv = 1.0 / static_cast<double>(active.size());
  std::vector<double> out(d, 0.0);
  for (auto t : active)
    for (std::size_t c = 0; c < d; ++c) out[c] += hidden.data()[t * d + c];
  for (auto& v : out) v *= inv;
  return make_result("mean_pool", {d}, std::move(out), {hidden.node_ptr()},
                     [active = std::move(active), d, inv](Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (auto t : active)
                         for (std::size_t c = 0; c < d; ++c) g[t * d + c] += self.grad[c] * inv;
                     });
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine");
  const auto n = static_cast<Eigen::Index>(a.size());
  CMapVec va(a.data().data(), n), vb(b.data().data(), n);
  const double na = va.norm(), nb = vb.norm();
  require(na > 0.0 && nb > 0.0, "cosine: zero-norm input");
  const double c = va.dot(vb) / (na * nb);
  return make_result("cosine", {}, {c}, {a.node_ptr(), b.node_ptr()}, [na, nb, c, n](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    CMapVec va(pa.data.data(), n), vb(pb.data.data(), n);
    const double g = self.grad[0];
    if (wants_grad(pa)) MapVec(pa.grad_buffer().data(), n) += g * (vb / (na * nb) - c * va / (na * na));
    if (wants_grad(pb)) MapVec(pb.grad_buffer().data(), n) += g * (va / (na * nb) - c * vb / (nb * nb));
  });
}

Tensor cosine_scores(const Tensor& query, const Tensor& matrix) {
  require_rank(query, 1, "cosine_scores");
  require_rank(matrix, 2, "cosine_scores");
  require(matrix.cols() == query.size(), "cosine_scores: width mismatch");
  const std::size_t rows = matrix.rows(), d = matrix.cols();
  const auto di = static_cast<Eigen::Index>(d);
  CMapVec q(query.data().data(), di);
  CMapMat m(matrix.data().data(), static_cast<Eigen::Index>(rows), di);
  const double nq = q.norm();
  require(nq > 0.0, "cosine_scores: zero-norm query");
  Eigen::VectorXd norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) require(norms[i] > 0.0, "cosine_scores: zero-norm row");
  Eigen::VectorXd dots = m * q;
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i] = dots[static_cast<Eigen::Index>(i)] / (nq * norms[static_cast<Eigen::Index>(i)]);
  std::vector<double> outc = out;
  return make_result("cosine_scores", {rows}, std::move(out), {query.node_ptr(), matrix.node_ptr()},
                     [rows, di, nq, norms = std::move(norms), outc = std::move(outc)](Node& self) {
                       auto& pq = *self.parents[0];
                       auto& pm = *self.parents[1];
                       CMapVec q(pq.data.data(), di);
                       CMapMat m(pm.data.data(), static_cast<Eigen::Index>(rows), di);
                       if (wants_grad(pq)) {
                         MapVec gq(pq.grad_buffer().data(), di);
                         for (std::size_t i = 0; i < rows; ++i) {
                           const auto ii = static_cast<Eigen::Index>(i);
                           const double g = self.grad[i];
                           if (g == 0.0) continue;
                           gq += g * (m.row(ii).transpose() / (nq * norms[ii]) - outc[i] * q / (nq * nq));
                         }
                       }
                       if (wants_grad(pm)) {
                         MapMat gm(pm.grad_buffer().data(), static_cast<Eigen::Index>(rows), di);
                         for (std::size_t i = 0; i < rows; ++i) {
                           const auto ii = static_cast<Eigen::Index>(i);
                           const double g = self.grad[i];
                           gm.row(ii) += g * (q.transpose() / (nq * norms[ii]) -
                                              outc[i] * m.row(ii) / (norms[ii] * norms[ii]));
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  require(loss.defined(), "backward: undefined tensor");
  require(loss.size() == 1, "backward: root must be scalar, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->is_leaf) {
      n->grad_buffer();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  for (Node* n : order) check_finite("backward", n->grad);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Tensor> params) : params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(const AdamConfig& cfg) {
  for (const auto& p : params_) {
    require(p.has_grad(), "adam_step: parameter has no gradient (run backward first)");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor p = params_[k];
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p;
    t.mutable_grad();
    t.zero_grad();
  }
}

void adam_step(Adam& state, double lr, double beta1, double beta2, double eps) {
  state.step(AdamConfig{lr, beta1, beta2, eps});
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport finite_diff_check(const std::string& name, const std::function<Tensor()>& f,
                                  std::span<Tensor> params, std::size_t probes, double epsilon,
                                  double tolerance, std::uint64_t seed) {
  GradCheckReport report;
  report.op_name = name;
  report.tolerance = tolerance;
  report.probe_count = probes;
  if (probes == 0) return report;

  for (auto& p : params) {
    p.mutable_grad();
    p.zero_grad();
  }
  backward(f());
  std::vector<std::vector<double>> analytic;
  std::size_t total = 0;
  for (auto& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
    total += p.size();
  }
  require(total > 0, "finite_diff_check: no parameters");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_coord(0, total - 1);
  NoGradGuard guard;
  for (std::size_t probe = 0; probe < probes; ++probe) {
    std::size_t flat = pick_coord(rng);
    std::size_t which = 0;
    while (flat >= params[which].size()) flat -= params[which++].size();
    auto w = params[which].mutable_data();
    const double orig = w[flat];
    w[flat] = orig + epsilon;
    const double fp = f().item();
    w[flat] = orig - epsilon;
    const double fm = f().item();
    w[flat] = orig;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double a = analytic[which][flat];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

namespace testing {
Tensor miscaled_gradient(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("miscaled_gradient", a.shape(), std::move(out), {a.node_ptr()}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}
}  // namespace testing

}  // namespace xicl::ng
