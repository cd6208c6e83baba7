#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "msd/tensor.hpp"

namespace msd::ad {

using NodeId = std::size_t;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  NodeId id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// What a backward rule sees: the node's output and incoming gradient, and
/// for each parent its value plus a gradient buffer (null when the parent
/// does not require a gradient).
class BackwardContext {
 public:
  BackwardContext(const Tensor& out, const Tensor& out_grad, std::vector<const Tensor*> values,
                  std::vector<Tensor*> grads)
      : out_(out), out_grad_(out_grad), values_(std::move(values)), grads_(std::move(grads)) {}

  const Tensor& out() const noexcept { return out_; }
  const Tensor& grad() const noexcept { return out_grad_; }
  const Tensor& input(std::size_t i) const { return *values_[i]; }
  /// Accumulation buffer for parent i, or nullptr if it needs no gradient.
  Tensor* input_grad(std::size_t i) const { return grads_[i]; }

 private:
  const Tensor& out_;
  const Tensor& out_grad_;
  std::vector<const Tensor*> values_;
  std::vector<Tensor*> grads_;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Reverse-mode recording tape.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children. backward() walks the records once in reverse. Gradients of
/// trainable leaves persist across backward() calls and add up, which is the
/// property gradient accumulation relies on.
///
/// The tape also counts the scalars held by gradient-tracked intermediate
/// nodes (leaves and constants excluded); this is the activation-memory proxy.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);

  /// Appends an op result. Raises NumericalError if the value is not finite.
  Var record(Tensor value, std::vector<NodeId> parents, BackwardFn backward);

  void backward(Var loss);

  /// Accumulated gradient of a trainable leaf (zeros if backward never reached it).
  Tensor grad(Var leaf) const;

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::size_t live_tracked_scalars() const noexcept { return live_tracked_; }
  std::size_t peak_tracked_scalars() const noexcept { return peak_tracked_; }

  /// Drops every record and stored gradient.
  void clear();

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> leaf_grads_;  // indexed by node id; empty tensor slot when unused
  std::vector<bool> has_leaf_grad_;
  std::size_t live_tracked_ = 0;
  std::size_t peak_tracked_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// a[m x n] + bias[n] added to every row.
Var add_row_vector(Var a, Var bias);
/// a / s for a scalar node s.
Var div_scalar(Var a, Var s);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a);
Var mean(Var a);
Var concat_rows(std::span<const Var> parts);
/// out[i] = a[i, cols[i]], shape [m].
Var pick(Var a, std::span<const std::size_t> cols);

/// Each row scaled to unit L2 norm. Rows with norm <= 1e-12 raise DegenerateRowError.
Var row_l2_normalize(Var a);
Var softmax_rows(Var logits);
Var log_softmax_rows(Var logits);
/// softmax(logits / tau) row-wise; tau must be a positive scalar node.
Var scaled_softmax_rows(Var logits, Var tau);
Var scaled_log_softmax_rows(Var logits, Var tau);

/// Mean over rows of sum_j p_j (log p_j - log_q_j), with 0 log 0 = 0.
/// p is a constant: no gradient flows to it.
Var kl_divergence(const Tensor& p, Var log_q);

/// Value copy off the tape.
Tensor detach(Var a);

// Constant-path helpers used by the gradient-free branch.
Tensor softmax_rows(const Tensor& logits, double tau);
Tensor log_softmax_rows(const Tensor& logits, double tau);
void validate_distribution_rows(const Tensor& p, double tol = 1e-9);

}  // namespace msd::ad
