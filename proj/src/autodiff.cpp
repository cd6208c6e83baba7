#include "msd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "msd/errors.hpp"

namespace msd::ad {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<NodeId> parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericalError("non-finite value produced by op on shape " + shape_string(value.shape()));
  }
  const bool tracked =
      std::any_of(parents.begin(), parents.end(), [&](NodeId p) { return nodes_[p].requires_grad; });
  if (tracked) {
    live_tracked_ += value.size();
    peak_tracked_ = std::max(peak_tracked_, live_tracked_);
  } else {
    backward = nullptr;
  }
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), tracked, false});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw StateError("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw RankError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Tensor> grads(loss.id() + 1);
  std::vector<bool> present(loss.id() + 1, false);
  grads[loss.id()] = Tensor(loss.shape(), 1.0);
  present[loss.id()] = true;

  for (NodeId id = loss.id() + 1; id-- > 0;) {
    if (!present[id]) continue;
    Node& node = nodes_[id];
    if (node.is_leaf) {
      if (!node.requires_grad) continue;
      if (leaf_grads_.size() <= id) {
        leaf_grads_.resize(id + 1);
        has_leaf_grad_.resize(id + 1, false);
      }
      if (!has_leaf_grad_[id]) {
        leaf_grads_[id] = std::move(grads[id]);
        has_leaf_grad_[id] = true;
      } else {
        Tensor& acc = leaf_grads_[id];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grads[id][i];
      }
      continue;
    }
    if (!node.backward) continue;

    std::vector<const Tensor*> values;
    std::vector<Tensor*> parent_grads;
    values.reserve(node.parents.size());
    parent_grads.reserve(node.parents.size());
    for (NodeId p : node.parents) {
      values.push_back(&nodes_[p].value);
      if (nodes_[p].requires_grad) {
        if (!present[p]) {
          grads[p] = Tensor(nodes_[p].value.shape(), 0.0);
          present[p] = true;
        }
        parent_grads.push_back(&grads[p]);
      } else {
        parent_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext(node.value, grads[id], std::move(values), std::move(parent_grads)));
    grads[id] = Tensor();
    present[id] = false;
  }
}

Tensor Tape::grad(Var leaf) const {
  const NodeId id = leaf.id();
  if (id < has_leaf_grad_.size() && has_leaf_grad_[id]) return leaf_grads_[id];
  return Tensor(nodes_[id].value.shape(), 0.0);
}

void Tape::clear() {
  nodes_.clear();
  leaf_grads_.clear();
  has_leaf_grad_.clear();
  live_tracked_ = 0;
  peak_tracked_ = 0;
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw StateError("operands live on different tapes");
  return a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw RankError(std::string(op) + ": expected matrix, got " + shape_string(a.shape()));
}

void require_scalar(const Tensor& a, const char* op) {
  if (a.size() != 1) throw RankError(std::string(op) + ": expected scalar, got " + shape_string(a.shape()));
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  Tensor out = msd::matmul(a.value(), b.value());
  return tape.record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    if (Tensor* ga = ctx.input_grad(0)) matmul_into(ctx.grad(), msd::transpose(ctx.input(1)), *ga, true);
    if (Tensor* gb = ctx.input_grad(1)) matmul_into(msd::transpose(ctx.input(0)), ctx.grad(), *gb, true);
  });
}

Var transpose(Var a) {
  return a.tape().record(msd::transpose(a.value()), {a.id()}, [](const BackwardContext& ctx) {
    add_into(*ctx.input_grad(0), msd::transpose(ctx.grad()));
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_into(out, b.value());
  return tape.record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = ctx.input_grad(k)) add_into(*g, ctx.grad());
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) add_into(*g, ctx.grad());
    if (Tensor* g = ctx.input_grad(1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= ctx.grad()[i];
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad();
    if (Tensor* ga = ctx.input_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * ctx.input(1)[i];
    if (Tensor* gb = ctx.input_grad(1))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ctx.input(0)[i];
  });
}

Var scale(Var a, double factor) {
  Tensor out = map(a.value(), [factor](double v) { return v * factor; });
  return a.tape().record(std::move(out), {a.id()}, [factor](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * ctx.grad()[i];
  });
}

Var add_row_vector(Var a, Var bias) {
  Tape& tape = same_tape(a, bias);
  require_matrix(a.value(), "add_row_vector");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_row_vector: bias of size " + std::to_string(bias.value().size()) +
                         " for " + std::to_string(n) + " columns");
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.value()[j];
  return tape.record(std::move(out), {a.id(), bias.id()}, [m, n](const BackwardContext& ctx) {
    if (Tensor* ga = ctx.input_grad(0)) add_into(*ga, ctx.grad());
    if (Tensor* gb = ctx.input_grad(1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += ctx.grad()[i * n + j];
  });
}

Var div_scalar(Var a, Var s) {
  Tape& tape = same_tape(a, s);
  require_scalar(s.value(), "div_scalar");
  const double sv = s.value().item();
  if (sv == 0.0) throw NumericalError("div_scalar: division by zero");
  Tensor out = map(a.value(), [sv](double v) { return v / sv; });
  return tape.record(std::move(out), {a.id(), s.id()}, [](const BackwardContext& ctx) {
    const double sv = ctx.input(1).item();
    const Tensor& g = ctx.grad();
    if (Tensor* ga = ctx.input_grad(0))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / sv;
    if (Tensor* gs = ctx.input_grad(1)) {
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * ctx.out()[i];
      (*gs)[0] -= dot / sv;
    }
  });
}

Var tanh(Var a) {
  Tensor out = map(a.value(), [](double v) { return std::tanh(v); });
  return a.tape().record(std::move(out), {a.id()}, [](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = ctx.out()[i];
      g[i] += ctx.grad()[i] * (1.0 - y * y);
    }
  });
}

Var relu(Var a) {
  Tensor out = map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return a.tape().record(std::move(out), {a.id()}, [](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (ctx.input(0)[i] > 0.0) g[i] += ctx.grad()[i];
  });
}

Var exp(Var a) {
  Tensor out = map(a.value(), [](double v) { return std::exp(v); });
  return a.tape().record(std::move(out), {a.id()}, [](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.grad()[i] * ctx.out()[i];
  });
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw NumericalError("log of non-positive value");
  }
  Tensor out = map(a.value(), [](double v) { return std::log(v); });
  return a.tape().record(std::move(out), {a.id()}, [](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.grad()[i] / ctx.input(0)[i];
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape().record(Tensor::scalar(total), {a.id()}, [](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    const double gv = ctx.grad().item();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape().record(Tensor::scalar(total / n), {a.id()}, [n](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    const double gv = ctx.grad().item() / n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  Tape& tape = parts.front().tape();
  std::vector<Tensor> values;
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  Tensor out = msd::concat_rows(values);
  return tape.record(std::move(out), std::move(ids), [count = parts.size()](const BackwardContext& ctx) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t n = ctx.input(k).size();
      if (Tensor* g = ctx.input_grad(k))
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += ctx.grad()[offset + i];
      offset += n;
    }
  });
}

Var pick(Var a, std::span<const std::size_t> cols) {
  require_matrix(a.value(), "pick");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (cols.size() != m) throw DimensionError("pick: need one column index per row");
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n) {
      throw IndexError("pick: column " + std::to_string(idx[i]) + " out of range " + std::to_string(n));
    }
    out[i] = a.value()[i * n + idx[i]];
  }
  return a.tape().record(std::move(out), {a.id()}, [idx = std::move(idx), n](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += ctx.grad()[i];
  });
}

Var row_l2_normalize(Var a) {
  require_matrix(a.value(), "row_l2_normalize");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) sq += out[i * n + j] * out[i * n + j];
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-12)) throw DegenerateRowError("row " + std::to_string(i) + " has near-zero norm");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= norm;
  }
  return a.tape().record(std::move(out), {a.id()}, [m, n](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.out();
    const Tensor& gy = ctx.grad();
    for (std::size_t i = 0; i < m; ++i) {
      double sq = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        sq += x[i * n + j] * x[i * n + j];
        dot += gy[i * n + j] * y[i * n + j];
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (gy[i * n + j] - y[i * n + j] * dot) * inv;
    }
  });
}

Tensor softmax_rows(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax temperature must be positive");
  require_matrix(logits, "softmax_rows");
  const std::size_t m = logits.rows(), n = logits.cols();
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp((row[j] - mx) / tau));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("softmax temperature must be positive");
  require_matrix(logits, "log_softmax_rows");
  const std::size_t m = logits.rows(), n = logits.cols();
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp((row[j] - mx) / tau);
    const double lse = std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mx) / tau - lse;
  }
  return out;
}

Var softmax_rows(Var logits) {
  Tensor out = softmax_rows(logits.value(), 1.0);
  const std::size_t m = out.rows(), n = out.cols();
  return logits.tape().record(std::move(out), {logits.id()}, [m, n](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    const Tensor& y = ctx.out();
    const Tensor& gy = ctx.grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[i * n + j] * (gy[i * n + j] - dot);
    }
  });
}

Var log_softmax_rows(Var logits) {
  Tensor out = log_softmax_rows(logits.value(), 1.0);
  const std::size_t m = out.rows(), n = out.cols();
  return logits.tape().record(std::move(out), {logits.id()}, [m, n](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    const Tensor& y = ctx.out();
    const Tensor& gy = ctx.grad();
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += gy[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[i * n + j] - std::exp(y[i * n + j]) * total;
    }
  });
}

Var scaled_softmax_rows(Var logits, Var tau) {
  require_scalar(tau.value(), "scaled_softmax_rows");
  if (!(tau.value().item() > 0.0)) throw ParameterError("softmax temperature must be positive");
  return softmax_rows(div_scalar(logits, tau));
}

Var scaled_log_softmax_rows(Var logits, Var tau) {
  require_scalar(tau.value(), "scaled_log_softmax_rows");
  if (!(tau.value().item() > 0.0)) throw ParameterError("softmax temperature must be positive");
  return log_softmax_rows(div_scalar(logits, tau));
}

void validate_distribution_rows(const Tensor& p, double tol) {
  require_matrix(p, "distribution");
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double total = 0.0;
    for (double v : p.row(i)) {
      if (!(v >= 0.0)) throw DistributionError("row " + std::to_string(i) + " has a negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > tol) {
      throw DistributionError("row " + std::to_string(i) + " sums to " + std::to_string(total));
    }
  }
}

Var kl_divergence(const Tensor& p, Var log_q) {
  require_same_shape(p, log_q.value(), "kl_divergence");
  validate_distribution_rows(p);
  const std::size_t m = p.rows(), n = p.cols();
  const Tensor& lq = log_q.value();
  double total = 0.0;
  for (std::size_t i = 0; i < m * n; ++i) {
    if (p[i] > 0.0) total += p[i] * (std::log(p[i]) - lq[i]);
  }
  const double rows = static_cast<double>(m);
  return log_q.tape().record(Tensor::scalar(total / rows), {log_q.id()}, [p, rows](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grad(0);
    const double gv = ctx.grad().item() / rows;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gv * p[i];
  });
}

Tensor detach(Var a) { return a.value(); }

}  // namespace msd::ad
