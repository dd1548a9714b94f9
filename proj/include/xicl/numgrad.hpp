#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every op returns a fresh Tensor that owns its values. When gradient
// recording is enabled and any input requires a gradient, the result keeps
// references to its inputs and a closure that pushes its gradient back to
// them. backward() walks that graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xicl/errors.hpp"

namespace xicl::ng {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  double item() const;
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;

  void zero_grad();
  void clear_grad() { node_->grad.clear(); }
  // Shares nothing with the graph; same values, no gradient.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise / shape ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_rowwise(const Tensor& a, const Tensor& bias);  // [m x n] + [n]
Tensor gelu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor select_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);  // rank-1
Tensor index(const Tensor& a, std::size_t i);                          // -> scalar
Tensor stack(std::span<const Tensor> scalars);                        // -> [n]

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] @ [k x n]

// ---- normalization / probabilities ----
Tensor softmax(const Tensor& logits, std::size_t axis);
Tensor log_softmax(const Tensor& logits, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// out[i] = a[rows[i], cols[i]]
Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);

// ---- model building blocks ----
Tensor embedding(const Tensor& table, std::span<const int> ids);
// qkv is [T x 3d] laid out as [Q | K | V]; key_valid[t] == 0 masks key t.
Tensor causal_attention(const Tensor& qkv, std::size_t n_heads, std::span<const std::uint8_t> key_valid);

// ---- losses and similarities ----
// Mean over rows (batch positions) of sum_j p_j (log p_j - log q_j), p and q
// given as logits over the last axis.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);
Tensor squared_l2(const Tensor& a, const Tensor& b);
Tensor mean_pool(const Tensor& hidden, const Tensor& mask);
Tensor cosine(const Tensor& a, const Tensor& b);
// cosine(query, matrix[i]) for every row i -> [n]
Tensor cosine_scores(const Tensor& query, const Tensor& matrix);

// Reverse-mode accumulation from a scalar root. Leaf gradients accumulate
// across calls; interior gradients are recomputed each call.
void backward(const Tensor& loss);

// ---- optimizer ----
struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Tensor> params);

  // Applies one bias-corrected update from the current gradients.
  void step(const AdamConfig& cfg);
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

void adam_step(Adam& state, double lr, double beta1, double beta2, double eps);

// ---- gradient checking ----
struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  bool passed = true;
  std::size_t probe_count = 0;
  double tolerance = 0.0;
};

// Compares analytic gradients of f against central differences on `probes`
// coordinates drawn uniformly from all parameter entries.
GradCheckReport finite_diff_check(const std::string& name, const std::function<Tensor()>& f,
                                  std::span<Tensor> params, std::size_t probes, double epsilon,
                                  double tolerance, std::uint64_t seed = 0);

namespace testing {
// Identity in the forward pass; scales the gradient by `factor` on the way
// back. Negative-control fixture for the gradient checker.
Tensor miscaled_gradient(const Tensor& a, double factor);
}  // namespace testing

}  // namespace xicl::ng
