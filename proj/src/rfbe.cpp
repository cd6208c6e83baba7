#include "msd/rfbe.hpp"

#include <algorithm>
#include <array>
#include <string>

#include "msd/errors.hpp"

namespace msd {

Views Views::slice(std::size_t begin, std::size_t end) const {
  return Views{slice_rows(image_query, begin, end), slice_rows(image_key, begin, end),
               slice_rows(text_query, begin, end),  slice_rows(text_key, begin, end),
               std::vector<std::uint64_t>(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                          ids.begin() + static_cast<std::ptrdiff_t>(end))};
}

RfbePlan RfbePlan::make(std::size_t primary_batch, std::size_t sub_batch) {
  RfbePlan plan;
  plan.primary_batch = primary_batch;
  plan.sub_batch = sub_batch;
  if (sub_batch == 0 || primary_batch == 0 || primary_batch % sub_batch != 0) {
    throw PlanError("sub-batch size " + std::to_string(sub_batch) + " must divide primary batch " +
                    std::to_string(primary_batch));
  }
  for (std::size_t begin = 0; begin < primary_batch; begin += sub_batch) {
    plan.phase1.emplace_back(begin, begin + sub_batch);
  }
  plan.phase2 = plan.phase1;
  return plan;
}

void RfbePlan::validate() const {
  if (sub_batch == 0 || primary_batch % sub_batch != 0) throw PlanError("sub-batch size must divide primary batch");
  for (const auto* ranges : {&phase1, &phase2}) {
    std::size_t next = 0;
    for (const auto& [b, e] : *ranges) {
      if (b != next || e <= b) throw PlanError("sub-batches must tile the primary batch in order");
      next = e;
    }
    if (next != primary_batch) throw PlanError("sub-batches do not cover the primary batch");
  }
}

void ActivationLedger::observe(const ad::Tape& tape) {
  ++tapes_observed;
  peak = std::max(peak, current + tape.peak_tracked_scalars());
  current += tape.live_tracked_scalars();
}

void ActivationLedger::release(const ad::Tape& tape) { current -= tape.live_tracked_scalars(); }

std::size_t peak_tracked_activations(const ActivationLedger& ledger) {
  if (ledger.tapes_observed == 0) throw StateError("no step has been measured yet");
  return ledger.peak;
}

PhaseOneKeys PhaseOneKeys::slice(std::size_t begin, std::size_t end) const {
  return PhaseOneKeys{slice_rows(image_keys, begin, end), slice_rows(text_keys, begin, end),
                      slice_rows(image_momentum_query, begin, end), slice_rows(text_momentum_query, begin, end)};
}

namespace {

void check_batch(const Views& batch) {
  const std::size_t n = batch.size();
  if (n == 0) throw PlanError("empty batch");
  for (const Tensor* t : {&batch.image_query, &batch.image_key, &batch.text_query, &batch.text_key}) {
    if (t->rank() != 2 || t->rows() != n) throw PlanError("batch views must have one row per sample id");
  }
}

void check_queue_room(const MomentumQueue& q, std::size_t n) {
  if (std::min(q.capacity(), q.fill() + n) < n) {
    throw WarmupError("queue of capacity " + std::to_string(q.capacity()) + " cannot hold a primary batch of " +
                      std::to_string(n));
  }
}

std::vector<std::size_t> rows_of(const QueueSnapshot& snap, const std::vector<std::uint64_t>& ids) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (std::uint64_t id : ids) rows.push_back(snap.row_of(id));
  return rows;
}

struct BoundTemps {
  std::vector<ad::Var> log_tau;
  std::vector<ad::Var> tau;

  BoundTemps(ad::Tape& tape, const Temperatures& temps) {
    for (const auto& p : temps.params) {
      log_tau.push_back(tape.leaf(p.log_tau));
      tau.push_back(temperature(log_tau.back()));
    }
  }
};

void accumulate_temps(const ad::Tape& tape, const BoundTemps& bound, Gradients& grads) {
  for (std::size_t i = 0; i < bound.log_tau.size(); ++i) grads.log_tau[i][0] += tape.grad(bound.log_tau[i])[0];
}

LossBreakdown combine(ad::Tape& tape, ad::Var i2i, ad::Var t2t, ad::Var t2i, ad::Var i2t, const LossConfig& cfg,
                      double weight, bool backprop, ActivationLedger* ledger) {
  const ad::Var uni = uni_loss(i2i, t2t);
  const ad::Var multi = multi_loss(t2i, i2t);
  const ad::Var total = total_loss(uni, multi, cfg.omega_uni, cfg.omega_multi);
  // Observe once the whole graph is recorded, so release() sees the same count.
  const ad::Var scaled = ad::scale(total, weight);
  if (ledger) ledger->observe(tape);
  if (backprop) tape.backward(scaled);
  return LossBreakdown{weight * i2i.value().item(),   weight * t2t.value().item(), weight * t2i.value().item(),
                       weight * i2t.value().item(),   weight * uni.value().item(), weight * multi.value().item(),
                       weight * total.value().item()};
}

void add_into(LossBreakdown& acc, const LossBreakdown& x) {
  acc.i2i += x.i2i;
  acc.t2t += x.t2t;
  acc.t2i += x.t2i;
  acc.i2t += x.i2t;
  acc.uni += x.uni;
  acc.multi += x.multi;
  acc.total += x.total;
}

StepResult end2end_step(const Views& batch, ModelState& state, const LossConfig& cfg) {
  StepResult result{Gradients::zeros_like(state), {}, {}, {}};
  ad::Tape tape;
  const BoundEncoder img = bind(tape, state.image.query, true);
  const BoundEncoder txt = bind(tape, state.text.query, true);
  const BoundTemps temps(tape, state.temps);
  auto tau = [&](LossStream s) { return temps.tau[state.temps.index(s)]; };

  const ad::Var iq = encode(img, tape.constant(batch.image_query));
  const ad::Var ik = encode(img, tape.constant(batch.image_key));
  const ad::Var tq = encode(txt, tape.constant(batch.text_query));
  const ad::Var tk = encode(txt, tape.constant(batch.text_key));

  const ad::Var i2i = end2end_loss(iq, ik, tau(LossStream::i2i));
  const ad::Var t2t = end2end_loss(tq, tk, tau(LossStream::t2t));
  // The two cross-modal directions share one similarity matrix, so they can
  // only use separate temperatures by building it twice.
  const End2EndTerms cross_t2i = end2end_terms(iq, tq, tau(LossStream::t2i));
  const End2EndTerms cross_i2t =
      state.temps.is_shared() ? cross_t2i : end2end_terms(iq, tq, tau(LossStream::i2t));

  result.loss =
      combine(tape, i2i, t2t, cross_t2i.text_to_image, cross_i2t.image_to_text, cfg, 1.0, true, &result.ledger);
  accumulate_grads(tape, img, result.grads.image);
  accumulate_grads(tape, txt, result.grads.text);
  accumulate_temps(tape, temps, result.grads);
  result.ledger.release(tape);
  return result;
}

StepResult queue_step(const Views& batch, const RfbePlan& plan, ModelState& state, const LossConfig& cfg) {
  check_queue_room(state.image_queue, batch.size());
  check_queue_room(state.text_queue, batch.size());

  StepResult result{Gradients::zeros_like(state), {}, {}, compute_phase_one(batch, plan, state)};
  state.image_queue.enqueue(result.keys.image_keys, batch.ids);
  state.text_queue.enqueue(result.keys.text_keys, batch.ids);
  const QueueSnapshot image_snap = state.image_queue.snapshot();
  const QueueSnapshot text_snap = state.text_queue.snapshot();

  const double n = static_cast<double>(batch.size());
  for (const auto& [begin, end] : plan.phase2) {
    const LossBreakdown part =
        contrastive_sub_batch(batch.slice(begin, end), result.keys.slice(begin, end), image_snap, text_snap, state,
                              cfg, static_cast<double>(end - begin) / n, &result.grads, &result.ledger);
    add_into(result.loss, part);
  }
  return result;
}

}  // namespace

PhaseOneKeys compute_phase_one(const Views& batch, const RfbePlan& plan, const ModelState& state) {
  std::array<std::vector<Tensor>, 4> parts;
  for (const auto& [begin, end] : plan.phase1) {
    parts[0].push_back(encode(state.image.key, slice_rows(batch.image_key, begin, end)));
    parts[1].push_back(encode(state.text.key, slice_rows(batch.text_key, begin, end)));
    parts[2].push_back(encode(state.image.key, slice_rows(batch.image_query, begin, end)));
    parts[3].push_back(encode(state.text.key, slice_rows(batch.text_query, begin, end)));
  }
  return PhaseOneKeys{concat_rows(parts[0]), concat_rows(parts[1]), concat_rows(parts[2]), concat_rows(parts[3])};
}

LossBreakdown contrastive_sub_batch(const Views& sub, const PhaseOneKeys& sub_keys, const QueueSnapshot& image_queue,
                                    const QueueSnapshot& text_queue, const ModelState& state, const LossConfig& cfg,
                                    double weight, Gradients* grads, ActivationLedger* ledger) {
  if (cfg.mode == LossMode::end2end) throw PlanError("end2end mode has no queue-based sub-batch loss");
  ad::Tape tape;
  const BoundEncoder img = bind(tape, state.image.query, true);
  const BoundEncoder txt = bind(tape, state.text.query, true);
  const BoundTemps temps(tape, state.temps);
  auto tau = [&](LossStream s) { return temps.tau[state.temps.index(s)]; };

  const std::vector<std::size_t> image_pos = rows_of(image_queue, sub.ids);
  const std::vector<std::size_t> text_pos = rows_of(text_queue, sub.ids);

  const ad::Var iq = encode(img, tape.constant(sub.image_query));
  const ad::Var tq = encode(txt, tape.constant(sub.text_query));

  const ad::Var i2i = infonce_uni(iq, image_pos, image_queue.keys, tau(LossStream::i2i));
  const ad::Var t2t = infonce_uni(tq, text_pos, text_queue.keys, tau(LossStream::t2t));

  // Text queries against image keys, and image queries against text keys.
  const ad::Var t2i_logits = similarities(tq, image_queue.keys);
  const ad::Var i2t_logits = similarities(iq, text_queue.keys);
  ad::Var t2i, i2t;
  if (cfg.mode == LossMode::msd) {
    const double tau_t2i = state.temps.tau(LossStream::t2i);
    const double tau_i2t = state.temps.tau(LossStream::i2t);
    const TeacherTargets t2i_teacher = msd_targets(sub_keys.text_momentum_query, image_pos, image_queue.keys, tau_t2i);
    const TeacherTargets i2t_teacher = msd_targets(sub_keys.image_momentum_query, text_pos, text_queue.keys, tau_i2t);
    t2i = msd_loss(ad::scaled_log_softmax_rows(t2i_logits, tau(LossStream::t2i)), t2i_teacher.q2k, t2i_teacher.k2k,
                   cfg.alpha, cfg.beta);
    i2t = msd_loss(ad::scaled_log_softmax_rows(i2t_logits, tau(LossStream::i2t)), i2t_teacher.q2k, i2t_teacher.k2k,
                   cfg.alpha, cfg.beta);
  } else {
    t2i = onehot_multi_loss(t2i_logits, image_pos, tau(LossStream::t2i));
    i2t = onehot_multi_loss(i2t_logits, text_pos, tau(LossStream::i2t));
  }

  const LossBreakdown out = combine(tape, i2i, t2t, t2i, i2t, cfg, weight, grads != nullptr, ledger);
  if (grads) {
    accumulate_grads(tape, img, grads->image);
    accumulate_grads(tape, txt, grads->text);
    accumulate_temps(tape, temps, *grads);
  }
  if (ledger) ledger->release(tape);
  return out;
}

StepResult run_rfbe_step(const Views& batch, const RfbePlan& plan, ModelState& state, const LossConfig& cfg) {
  cfg.validate();
  plan.validate();
  check_batch(batch);
  if (plan.primary_batch != batch.size()) {
    throw PlanError("plan is for " + std::to_string(plan.primary_batch) + " rows but batch has " +
                    std::to_string(batch.size()));
  }
  if (cfg.mode == LossMode::end2end) {
    if (plan.sub_batch != plan.primary_batch) throw PlanError("end2end mode cannot be split into sub-batches");
    return end2end_step(batch, state, cfg);
  }
  return queue_step(batch, plan, state, cfg);
}

StepResult run_monolithic_step(const Views& batch, ModelState& state, const LossConfig& cfg) {
  cfg.validate();
  check_batch(batch);
  if (cfg.mode == LossMode::end2end) return end2end_step(batch, state, cfg);
  return queue_step(batch, RfbePlan::make(batch.size(), batch.size()), state, cfg);
}

}  // namespace msd
