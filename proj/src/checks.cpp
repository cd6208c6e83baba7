#include "msd/checks.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <utility>

#include "msd/autodiff.hpp"
#include "msd/encoder.hpp"
#include "msd/errors.hpp"
#include "msd/gradcheck.hpp"
#include "msd/rfbe.hpp"
#include "msd/rng.hpp"

namespace msd {

namespace {

using Builder = std::function<ad::Var(ad::Tape&, ad::Var)>;
using Instance = std::pair<Tensor, Builder>;
using CaseFn = std::function<Instance(CounterRng&)>;

Tensor uniform(Shape shape, CounterRng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor unit_rows(std::size_t rows, std::size_t cols, CounterRng& rng) {
  Tensor t = uniform({rows, cols}, rng);
  for (std::size_t i = 0; i < rows; ++i) {
    double sq = 0.0;
    for (double v : t.row(i)) sq += v * v;
    for (double& v : t.row(i)) v /= std::sqrt(sq);
  }
  return t;
}

Tensor distribution_rows(std::size_t rows, std::size_t cols, CounterRng& rng) {
  return ad::softmax_rows(uniform({rows, cols}, rng), 1.0);
}

// Reduces any output to a scalar with distinct per-coordinate weights, so
// every output coordinate is exercised.
ad::Var weighted(ad::Tape& tape, ad::Var y) {
  Tensor w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
  return ad::sum(ad::mul(y, tape.constant(std::move(w))));
}

ad::Var scalar(ad::Tape& tape, double v) { return tape.constant(Tensor::scalar(v)); }

// tanh with the derivative written as 1 - y instead of 1 - y^2.
ad::Var sabotaged_tanh(ad::Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  return a.tape().record(std::move(out), {a.id()}, [](const ad::BackwardContext& ctx) {
    if (Tensor* g = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += ctx.grad()[i] * (1.0 - ctx.out()[i]);
    }
  });
}

std::vector<std::pair<std::string, CaseFn>> cases(bool sabotage) {
  std::vector<std::pair<std::string, CaseFn>> c;
  auto unary = [&](std::string name, std::function<ad::Var(ad::Var)> op, double lo = -2.0, double hi = 2.0) {
    c.emplace_back(std::move(name), [op, lo, hi](CounterRng& rng) {
      return Instance{uniform({3, 4}, rng, lo, hi), [op](ad::Tape& t, ad::Var x) { return weighted(t, op(x)); }};
    });
  };

  c.emplace_back("matmul.lhs", [](CounterRng& rng) {
    const Tensor b = uniform({4, 3}, rng);
    return Instance{uniform({2, 4}, rng), [b](ad::Tape& t, ad::Var x) { return weighted(t, ad::matmul(x, t.constant(b))); }};
  });
  c.emplace_back("matmul.rhs", [](CounterRng& rng) {
    const Tensor a = uniform({2, 4}, rng);
    return Instance{uniform({4, 3}, rng), [a](ad::Tape& t, ad::Var x) { return weighted(t, ad::matmul(t.constant(a), x)); }};
  });
  unary("transpose", [](ad::Var x) { return ad::transpose(x); });
  c.emplace_back("add", [](CounterRng& rng) {
    const Tensor o = uniform({3, 4}, rng);
    return Instance{uniform({3, 4}, rng), [o](ad::Tape& t, ad::Var x) { return weighted(t, ad::add(x, t.constant(o))); }};
  });
  c.emplace_back("sub", [](CounterRng& rng) {
    const Tensor o = uniform({3, 4}, rng);
    return Instance{uniform({3, 4}, rng), [o](ad::Tape& t, ad::Var x) { return weighted(t, ad::sub(t.constant(o), x)); }};
  });
  c.emplace_back("mul", [](CounterRng& rng) {
    const Tensor o = uniform({3, 4}, rng);
    return Instance{uniform({3, 4}, rng), [o](ad::Tape& t, ad::Var x) { return weighted(t, ad::mul(x, ad::add(x, t.constant(o)))); }};
  });
  unary("scale", [](ad::Var x) { return ad::scale(x, -1.7); });
  c.emplace_back("add_row_vector.matrix", [](CounterRng& rng) {
    const Tensor b = uniform({4}, rng);
    return Instance{uniform({3, 4}, rng),
                    [b](ad::Tape& t, ad::Var x) { return weighted(t, ad::add_row_vector(x, t.constant(b))); }};
  });
  c.emplace_back("add_row_vector.bias", [](CounterRng& rng) {
    const Tensor a = uniform({3, 4}, rng);
    return Instance{uniform({4}, rng),
                    [a](ad::Tape& t, ad::Var x) { return weighted(t, ad::add_row_vector(t.constant(a), x)); }};
  });
  c.emplace_back("div_scalar.numerator", [](CounterRng& rng) {
    const double s = rng.uniform(0.5, 2.0);
    return Instance{uniform({3, 4}, rng), [s](ad::Tape& t, ad::Var x) { return weighted(t, ad::div_scalar(x, scalar(t, s))); }};
  });
  c.emplace_back("div_scalar.denominator", [](CounterRng& rng) {
    const Tensor a = uniform({3, 4}, rng);
    return Instance{Tensor::scalar(rng.uniform(0.5, 2.0)),
                    [a](ad::Tape& t, ad::Var s) { return weighted(t, ad::div_scalar(t.constant(a), s)); }};
  });
  if (sabotage) {
    unary("tanh", sabotaged_tanh);
  } else {
    unary("tanh", [](ad::Var x) { return ad::tanh(x); });
  }
  c.emplace_back("relu", [](CounterRng& rng) {
    Tensor x = uniform({3, 4}, rng);
    for (double& v : x.data()) v += v >= 0.0 ? 0.05 : -0.05;  // keep clear of the kink
    return Instance{x, [](ad::Tape& t, ad::Var v) { return weighted(t, ad::relu(v)); }};
  });
  unary("exp", [](ad::Var x) { return ad::exp(x); });
  unary("log", [](ad::Var x) { return ad::log(x); }, 0.5, 2.0);
  c.emplace_back("sum", [](CounterRng& rng) {
    return Instance{uniform({3, 4}, rng), [](ad::Tape&, ad::Var x) { return ad::mul(ad::sum(x), ad::sum(x)); }};
  });
  c.emplace_back("mean", [](CounterRng& rng) {
    return Instance{uniform({3, 4}, rng), [](ad::Tape&, ad::Var x) { return ad::mul(ad::mean(x), ad::mean(x)); }};
  });
  c.emplace_back("concat_rows", [](CounterRng& rng) {
    const Tensor o = uniform({2, 4}, rng);
    return Instance{uniform({3, 4}, rng), [o](ad::Tape& t, ad::Var x) {
                      const std::vector<ad::Var> parts{t.constant(o), x, x};
                      return weighted(t, ad::concat_rows(parts));
                    }};
  });
  c.emplace_back("pick", [](CounterRng& rng) {
    std::vector<std::size_t> cols(3);
    for (auto& v : cols) v = rng.below(4);
    return Instance{uniform({3, 4}, rng), [cols](ad::Tape& t, ad::Var x) { return weighted(t, ad::pick(x, cols)); }};
  });
  unary("row_l2_normalize", [](ad::Var x) { return ad::row_l2_normalize(x); });
  unary("softmax_rows", [](ad::Var x) { return ad::softmax_rows(x); });
  unary("log_softmax_rows", [](ad::Var x) { return ad::log_softmax_rows(x); });
  c.emplace_back("scaled_softmax_rows.logits", [](CounterRng& rng) {
    const double tau = rng.uniform(0.2, 2.0);
    return Instance{uniform({3, 4}, rng),
                    [tau](ad::Tape& t, ad::Var x) { return weighted(t, ad::scaled_softmax_rows(x, scalar(t, tau))); }};
  });
  c.emplace_back("scaled_softmax_rows.tau", [](CounterRng& rng) {
    const Tensor z = uniform({3, 4}, rng);
    return Instance{Tensor::scalar(rng.uniform(0.2, 2.0)),
                    [z](ad::Tape& t, ad::Var s) { return weighted(t, ad::scaled_softmax_rows(t.constant(z), s)); }};
  });
  c.emplace_back("scaled_log_softmax_rows.logits", [](CounterRng& rng) {
    const double tau = rng.uniform(0.2, 2.0);
    return Instance{uniform({3, 4}, rng),
                    [tau](ad::Tape& t, ad::Var x) { return weighted(t, ad::scaled_log_softmax_rows(x, scalar(t, tau))); }};
  });
  c.emplace_back("scaled_log_softmax_rows.tau", [](CounterRng& rng) {
    const Tensor z = uniform({3, 4}, rng);
    return Instance{Tensor::scalar(rng.uniform(0.2, 2.0)),
                    [z](ad::Tape& t, ad::Var s) { return weighted(t, ad::scaled_log_softmax_rows(t.constant(z), s)); }};
  });
  c.emplace_back("kl_divergence", [](CounterRng& rng) {
    const Tensor p = distribution_rows(3, 4, rng);
    return Instance{uniform({3, 4}, rng),
                    [p](ad::Tape&, ad::Var x) { return ad::kl_divergence(p, ad::log_softmax_rows(x)); }};
  });
  c.emplace_back("temperature", [](CounterRng& rng) {
    const Tensor z = uniform({2, 3}, rng);
    return Instance{Tensor::scalar(rng.uniform(-2.0, 0.5)), [z](ad::Tape& t, ad::Var lt) {
                      return weighted(t, ad::scaled_log_softmax_rows(t.constant(z), temperature(lt)));
                    }};
  });
  c.emplace_back("encoder.first_layer", [](CounterRng& rng) {
    const std::vector<std::size_t> dims{4, 5, 5};
    const EncoderParams base = init_params(rng(), dims, 3);
    const Tensor x = uniform({3, 4}, rng);
    return Instance{base.layers[0].weight, [base, x](ad::Tape& t, ad::Var w) {
                      BoundEncoder bound = bind(t, base, false);
                      bound.vars[0] = w;
                      return weighted(t, encode(bound, t.constant(x)));
                    }};
  });

  // Composite losses. Query embeddings are normalized inside the graph so
  // the leaf can be any real matrix.
  c.emplace_back("loss.infonce_uni", [](CounterRng& rng) {
    const Tensor keys = unit_rows(6, 4, rng);
    std::vector<std::size_t> pos{rng.below(6), rng.below(6)};
    const double tau = rng.uniform(0.2, 1.0);
    return Instance{uniform({2, 4}, rng), [=](ad::Tape& t, ad::Var x) {
                      return infonce_uni(ad::row_l2_normalize(x), pos, keys, scalar(t, tau));
                    }};
  });
  c.emplace_back("loss.infonce_uni.log_tau", [](CounterRng& rng) {
    const Tensor keys = unit_rows(6, 4, rng);
    const Tensor q = unit_rows(2, 4, rng);
    std::vector<std::size_t> pos{rng.below(6), rng.below(6)};
    return Instance{Tensor::scalar(rng.uniform(-1.5, 0.0)), [=](ad::Tape& t, ad::Var lt) {
                      return infonce_uni(t.constant(q), pos, keys, temperature(lt));
                    }};
  });
  c.emplace_back("loss.uni", [](CounterRng& rng) {
    const Tensor ik = unit_rows(5, 4, rng), tk = unit_rows(5, 4, rng), mix = uniform({4, 4}, rng);
    std::vector<std::size_t> pos{rng.below(5), rng.below(5)};
    return Instance{uniform({2, 4}, rng), [=](ad::Tape& t, ad::Var x) {
                      const auto iq = ad::row_l2_normalize(x);
                      const auto tq = ad::row_l2_normalize(ad::matmul(x, t.constant(mix)));
                      return uni_loss(infonce_uni(iq, pos, ik, scalar(t, 0.3)), infonce_uni(tq, pos, tk, scalar(t, 0.3)));
                    }};
  });
  c.emplace_back("loss.msd", [](CounterRng& rng) {
    const Tensor p1 = distribution_rows(2, 5, rng), p2 = distribution_rows(2, 5, rng);
    const double tau = rng.uniform(0.2, 1.0);
    return Instance{uniform({2, 5}, rng), [=](ad::Tape& t, ad::Var x) {
                      return msd_loss(ad::scaled_log_softmax_rows(x, scalar(t, tau)), p1, p2, 0.3, 0.7);
                    }};
  });
  c.emplace_back("loss.multi", [](CounterRng& rng) {
    const Tensor ik = unit_rows(6, 4, rng), tk = unit_rows(6, 4, rng), mix = uniform({4, 4}, rng);
    const Tensor imq = unit_rows(2, 4, rng), tmq = unit_rows(2, 4, rng);
    std::vector<std::size_t> pos{rng.below(6), rng.below(6)};
    return Instance{uniform({2, 4}, rng), [=](ad::Tape& t, ad::Var x) {
                      const auto iq = ad::row_l2_normalize(x);
                      const auto tq = ad::row_l2_normalize(ad::matmul(x, t.constant(mix)));
                      const TeacherTargets a = msd_targets(tmq, pos, ik, 0.5);
                      const TeacherTargets b = msd_targets(imq, pos, tk, 0.5);
                      const auto t2i = msd_loss(ad::scaled_log_softmax_rows(similarities(tq, ik), scalar(t, 0.5)), a.q2k,
                                                a.k2k, 0.3, 0.7);
                      const auto i2t = msd_loss(ad::scaled_log_softmax_rows(similarities(iq, tk), scalar(t, 0.5)), b.q2k,
                                                b.k2k, 0.3, 0.7);
                      return multi_loss(t2i, i2t);
                    }};
  });
  c.emplace_back("loss.total", [](CounterRng& rng) {
    const Tensor ik = unit_rows(6, 4, rng), tk = unit_rows(6, 4, rng), mix = uniform({4, 4}, rng);
    const Tensor tmq = unit_rows(2, 4, rng);
    std::vector<std::size_t> pos{rng.below(6), rng.below(6)};
    return Instance{uniform({2, 4}, rng), [=](ad::Tape& t, ad::Var x) {
                      const auto iq = ad::row_l2_normalize(x);
                      const auto tq = ad::row_l2_normalize(ad::matmul(x, t.constant(mix)));
                      const auto tau = scalar(t, 0.4);
                      const auto uni = uni_loss(infonce_uni(iq, pos, ik, tau), infonce_uni(tq, pos, tk, tau));
                      const TeacherTargets a = msd_targets(tmq, pos, ik, 0.4);
                      const auto t2i =
                          msd_loss(ad::scaled_log_softmax_rows(similarities(tq, ik), tau), a.q2k, a.k2k, 0.3, 0.7);
                      const auto i2t = onehot_multi_loss(similarities(iq, tk), pos, tau);
                      return total_loss(uni, multi_loss(t2i, i2t), 1.0, 10.0);
                    }};
  });
  c.emplace_back("loss.onehot_multi", [](CounterRng& rng) {
    std::vector<std::size_t> pos{rng.below(5), rng.below(5), rng.below(5)};
    const double tau = rng.uniform(0.2, 1.0);
    return Instance{uniform({3, 5}, rng),
                    [=](ad::Tape& t, ad::Var x) { return onehot_multi_loss(x, pos, scalar(t, tau)); }};
  });
  c.emplace_back("loss.end2end", [](CounterRng& rng) {
    const Tensor txt = unit_rows(3, 4, rng);
    const double tau = rng.uniform(0.2, 1.0);
    return Instance{uniform({3, 4}, rng), [=](ad::Tape& t, ad::Var x) {
                      return end2end_loss(ad::row_l2_normalize(x), t.constant(txt), scalar(t, tau));
                    }};
  });
  return c;
}

double instance_error(const Instance& inst) {
  ad::Tape tape;
  const ad::Var leaf = tape.leaf(inst.first);
  tape.backward(inst.second(tape, leaf));
  const Tensor analytic = tape.grad(leaf);
  const Tensor numeric = finite_diff_grad(
      [&](const Tensor& x) {
        ad::Tape t;
        return inst.second(t, t.constant(x)).value().item();
      },
      inst.first, kGradCheckEps);
  return relative_error(analytic, numeric);
}

}  // namespace

bool GradCheckReport::passed() const {
  for (const auto& e : entries)
    if (!e.passed) return false;
  return !entries.empty();
}

nlohmann::ordered_json GradCheckReport::to_json() const {
  nlohmann::ordered_json ops = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    ops.push_back({{"op", e.op}, {"instances", e.instances}, {"max_rel_error", e.max_rel_error}, {"passed", e.passed}});
  }
  return {{"seed", seed}, {"tolerance", tolerance}, {"sabotage", sabotaged}, {"passed", passed()}, {"ops", ops}};
}

std::string GradCheckReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(34) << "op" << std::right << std::setw(10) << "instances" << std::setw(16)
     << "max rel error" << "  status\n";
  for (const auto& e : entries) {
    os << std::left << std::setw(34) << e.op << std::right << std::setw(10) << e.instances << std::setw(16)
       << std::scientific << std::setprecision(3) << e.max_rel_error << "  " << (e.passed ? "pass" : "FAIL") << '\n';
  }
  return os.str();
}

GradCheckReport run_gradcheck_suite(std::uint64_t seed, std::size_t instances, bool sabotage) {
  if (instances == 0) throw ConfigError("grad-check needs at least one instance per op");
  GradCheckReport report;
  report.seed = seed;
  report.sabotaged = sabotage;
  const auto all = cases(sabotage);
  for (std::size_t k = 0; k < all.size(); ++k) {
    GradCheckEntry entry{all[k].first, instances, 0.0, false};
    CounterRng rng(seed, stream_id({0x67726164, k}));
    for (std::size_t i = 0; i < instances; ++i) {
      entry.max_rel_error = std::max(entry.max_rel_error, instance_error(all[k].second(rng)));
    }
    entry.passed = entry.max_rel_error < report.tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kCheckImageDim = 48;
constexpr std::size_t kCheckTextDim = 40;
constexpr std::size_t kCheckCapacity = 4096;

ModelState check_state(std::uint64_t seed) {
  ModelState s = ModelState::create(seed, kCheckImageDim, kCheckTextDim, ModelDims{}, kCheckCapacity);
  CounterRng rng(seed, stream_id({0x72666265, 1}));
  // Key towers slightly off their query copies, as after some training.
  for (auto& [name, t] : s.momentum())
    for (double& v : t->data()) v += rng.uniform(-0.02, 0.02);
  std::vector<std::uint64_t> ids(kCheckCapacity);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 1'000'000 + i;
  const std::size_t d = s.image.key.embedding_dim();
  s.image_queue.enqueue(unit_rows(kCheckCapacity, d, rng), ids);
  s.text_queue.enqueue(unit_rows(kCheckCapacity, d, rng), ids);
  return s;
}

Views check_batch(std::uint64_t seed, std::size_t n) {
  CounterRng rng(seed, stream_id({0x72666265, 2, n}));
  Views v{uniform({n, kCheckImageDim}, rng), uniform({n, kCheckImageDim}, rng), uniform({n, kCheckTextDim}, rng),
          uniform({n, kCheckTextDim}, rng), std::vector<std::uint64_t>(n)};
  for (std::size_t i = 0; i < n; ++i) v.ids[i] = i;
  return v;
}

double grad_deviation(const Gradients& a, const Gradients& b) {
  double worst = 0.0;
  const auto an = a.named(), bn = b.named();
  for (std::size_t i = 0; i < an.size(); ++i) {
    for (std::size_t j = 0; j < an[i].second->size(); ++j) {
      const double g = (*bn[i].second)[j];
      worst = std::max(worst, std::abs((*an[i].second)[j] - g) / (1.0 + std::abs(g)));
    }
  }
  return worst;
}

}  // namespace

bool RfbeCheckReport::passed() const {
  for (const auto& r : rows)
    if (!r.passed) return false;
  return !rows.empty();
}

nlohmann::ordered_json RfbeCheckReport::to_json() const {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    out.push_back({{"mode", to_string(r.mode)},
                   {"sub_batch", r.sub_batch},
                   {"max_grad_deviation", r.max_grad_deviation},
                   {"loss_deviation", r.loss_deviation},
                   {"rfbe_peak", r.rfbe_peak},
                   {"rfbe_peak_at_double_batch", r.rfbe_peak_double_batch},
                   {"passed", r.passed}});
  }
  return {{"primary_batch", primary_batch},
          {"seed", seed},
          {"grad_tolerance", grad_tolerance},
          {"loss_tolerance", loss_tolerance},
          {"monolithic_peak", monolithic_peak},
          {"passed", passed()},
          {"rows", out}};
}

RfbeCheckReport run_rfbe_check(std::size_t primary_batch, std::span<const std::size_t> sub_batches,
                               std::span<const LossMode> modes, std::uint64_t seed) {
  if (sub_batches.empty() || modes.empty()) throw ConfigError("rfbe-check needs at least one sub-batch size and mode");
  for (std::size_t b : sub_batches) (void)RfbePlan::make(primary_batch, b);
  for (LossMode m : modes) {
    if (m == LossMode::end2end) throw ConfigError("rfbe-check applies to queue-based modes only");
  }
  if (2 * primary_batch > kCheckCapacity) throw ConfigError("rfbe-check primary batch is limited to 2048");

  RfbeCheckReport report;
  report.primary_batch = primary_batch;
  report.seed = seed;
  const ModelState start = check_state(seed);
  const Views batch = check_batch(seed, primary_batch);
  const Views doubled = check_batch(seed, 2 * primary_batch);

  for (LossMode mode : modes) {
    LossConfig cfg;
    cfg.mode = mode;
    ModelState mono_state = start;
    const StepResult mono = run_monolithic_step(batch, mono_state, cfg);
    report.monolithic_peak = std::max(report.monolithic_peak, peak_tracked_activations(mono.ledger));
    for (std::size_t b : sub_batches) {
      RfbeCheckRow row;
      row.mode = mode;
      row.sub_batch = b;
      ModelState s = start;
      const StepResult r = run_rfbe_step(batch, RfbePlan::make(primary_batch, b), s, cfg);
      row.max_grad_deviation = grad_deviation(r.grads, mono.grads);
      row.loss_deviation = std::abs(r.loss.total - mono.loss.total);
      row.rfbe_peak = peak_tracked_activations(r.ledger);
      ModelState s2 = start;
      row.rfbe_peak_double_batch =
          peak_tracked_activations(run_rfbe_step(doubled, RfbePlan::make(2 * primary_batch, b), s2, cfg).ledger);
      row.passed = row.max_grad_deviation <= report.grad_tolerance && row.loss_deviation <= report.loss_tolerance;
      report.rows.push_back(row);
    }
  }
  return report;
}

}  // namespace msd
