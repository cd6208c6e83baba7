#include "msd/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "msd/binio.hpp"
#include "msd/errors.hpp"
#include "msd/rng.hpp"

namespace msd {

namespace {

enum Stream : std::uint64_t { kShuffle = 11, kViewCoin = 12, kViewAugment = 13 };

constexpr double kDivergenceFactor = 10.0;
constexpr std::uint32_t kDivergenceEpochs = 3;

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (primary_batch == 0 || sub_batch == 0 || primary_batch % sub_batch != 0) {
    throw ConfigError("sub_batch must divide primary_batch");
  }
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum must be in [0, 1]");
  // Zero is allowed for pure-evaluation runs.
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be non-negative");
  if (queue_capacity < primary_batch) throw ConfigError("queue_capacity must be at least primary_batch");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in [0, 1)");
  if (dims.embedding == 0) throw ConfigError("embedding dim must be positive");
  loss.validate();
  augmentation.validate();
}

std::uint64_t TrainConfig::hash() const {
  nlohmann::ordered_json j = {
      {"epochs", epochs},
      {"primary_batch", primary_batch},
      {"sub_batch", sub_batch},
      {"base_lr", base_lr},
      {"momentum", momentum},
      {"queue_capacity", queue_capacity},
      {"weight_decay", weight_decay},
      {"beta1", beta1},
      {"beta2", beta2},
      {"adam_eps", adam_eps},
      {"alpha", loss.alpha},
      {"beta", loss.beta},
      {"omega_uni", loss.omega_uni},
      {"omega_multi", loss.omega_multi},
      {"mode", to_string(loss.mode)},
      {"seed", seed},
      {"image_hidden", dims.image_hidden},
      {"text_hidden", dims.text_hidden},
      {"embedding", dims.embedding},
      {"shared_temperature", shared_temperature},
      {"test_fraction", test_fraction},
      {"aug_sigma", augmentation.aug_sigma},
      {"mask_prob", augmentation.mask_prob},
      {"aug_scale_min", augmentation.aug_scale_min},
      {"aug_scale_max", augmentation.aug_scale_max},
  };
  return binio::fnv1a(j.dump());
}

std::size_t train_split_size(std::size_t n, double test_fraction) {
  const auto test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  return n - std::min(test, n);
}

TrainState TrainState::fresh(const TrainConfig& cfg, std::size_t image_dim, std::size_t text_dim) {
  TrainState s{ModelState::create(cfg.seed, image_dim, text_dim, cfg.dims, cfg.queue_capacity, cfg.shared_temperature),
               {}, cfg.seed};
  for (const auto& [name, t] : std::as_const(s.model).trainable()) s.moments.push_back(AdamMoments::zeros_like(*t));
  s.config_hash = cfg.hash();
  return s;
}

std::string_view to_string(TrainStatus status) {
  switch (status) {
    case TrainStatus::running:
      return "running";
    case TrainStatus::converged:
      return "converged";
    case TrainStatus::training_failed:
      return "training_failed";
  }
  return "unknown";
}

std::string metrics_line(const char* kind, const StepRecord& r, LossMode mode) {
  nlohmann::ordered_json j = {
      {"kind", kind},          {"step", r.step},          {"epoch", r.epoch},
      {"loss", r.loss.total},  {"loss_i2i", r.loss.i2i},  {"loss_t2t", r.loss.t2t},
      {"loss_t2i", r.loss.t2i}, {"loss_i2t", r.loss.i2t}, {"tau", r.tau},
      {"lr", r.lr},            {"mode", to_string(mode)},
  };
  return j.dump();
}

Views make_views(const PairedDataset& data, std::span<const std::uint64_t> ids, const GenConfig& aug,
                 std::uint64_t seed, std::uint64_t epoch, std::uint64_t step) {
  const std::size_t n = ids.size();
  Views v{Tensor(Shape{n, data.dim_a()}), Tensor(Shape{n, data.dim_a()}), Tensor(Shape{n, data.dim_b()}),
          Tensor(Shape{n, data.dim_b()}), std::vector<std::uint64_t>(ids.begin(), ids.end())};
  auto view_seed = [&](std::uint64_t id, std::uint64_t modality, std::uint64_t branch) {
    return stream_id({seed, kViewAugment, epoch, step, id, modality, branch});
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t id = ids[i];
    const auto xa = data.features_a.row(id);
    const auto xb = data.features_b.row(id);

    CounterRng coin(seed, stream_id({kViewCoin, epoch, step, id}));
    const bool query_gets_original = coin.uniform() < 0.5;
    const std::vector<double> aug_a = augment(xa, view_seed(id, 0, 0), aug);
    const auto& img_q = query_gets_original ? std::vector<double>(xa.begin(), xa.end()) : aug_a;
    const auto& img_k = query_gets_original ? aug_a : std::vector<double>(xa.begin(), xa.end());
    std::copy(img_q.begin(), img_q.end(), v.image_query.row(i).begin());
    std::copy(img_k.begin(), img_k.end(), v.image_key.row(i).begin());

    const std::vector<double> txt_q = augment(xb, view_seed(id, 1, 0), aug);
    const std::vector<double> txt_k = augment(xb, view_seed(id, 1, 1), aug);
    std::copy(txt_q.begin(), txt_q.end(), v.text_query.row(i).begin());
    std::copy(txt_k.begin(), txt_k.end(), v.text_key.row(i).begin());
  }
  return v;
}

Trainer::Trainer(TrainConfig cfg, const PairedDataset& data)
    : Trainer(cfg, data, TrainState::fresh(cfg, data.dim_a(), data.dim_b())) {}

Trainer::Trainer(TrainConfig cfg, const PairedDataset& data, TrainState resumed)
    : cfg_(std::move(cfg)), data_(data), state_(std::move(resumed)) {
  cfg_.validate();
  plan_ = RfbePlan::make(cfg_.primary_batch, cfg_.loss.mode == LossMode::end2end ? cfg_.primary_batch : cfg_.sub_batch);
  train_size_ = train_split_size(data_.size(), cfg_.test_fraction);
  steps_per_epoch_ = train_size_ / cfg_.primary_batch;
  if (steps_per_epoch_ == 0) {
    throw ConfigError("training split of " + std::to_string(train_size_) + " samples is smaller than one batch");
  }
  if (state_.model.image.query.input_dim() != data_.dim_a() || state_.model.text.query.input_dim() != data_.dim_b()) {
    throw DimensionError("model input widths do not match the dataset");
  }
  if (state_.moments.size() != state_.model.trainable().size()) throw StateError("optimizer state does not match model");
  if (state_.epoch >= cfg_.epochs) status_ = TrainStatus::converged;
}

void Trainer::fail(std::string reason) {
  status_ = TrainStatus::training_failed;
  failure_ = std::move(reason);
}

TrainStatus Trainer::run_epoch(std::ostream* metrics) {
  if (status_ != TrainStatus::running) return status_;
  const std::uint64_t epoch = state_.epoch;
  const std::uint64_t total_steps = cfg_.epochs * steps_per_epoch_;

  std::vector<std::uint64_t> order(train_size_);
  std::iota(order.begin(), order.end(), std::uint64_t{0});
  CounterRng shuffle(state_.seed, stream_id({kShuffle, epoch}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

  LossBreakdown epoch_sum;
  StepRecord last;
  for (std::size_t s = 0; s < steps_per_epoch_; ++s) {
    const std::span<const std::uint64_t> ids(order.data() + s * cfg_.primary_batch, cfg_.primary_batch);
    const Views batch = make_views(data_, ids, cfg_.augmentation, state_.seed, epoch, state_.step);
    const double lr = cosine_lr(state_.step, total_steps, cfg_.base_lr);
    const double tau = state_.model.temps.tau(LossStream::i2i);

    StepResult result;
    try {
      result = cfg_.loss.mode == LossMode::end2end ? run_monolithic_step(batch, state_.model, cfg_.loss)
                                                   : run_rfbe_step(batch, plan_, state_.model, cfg_.loss);
    } catch (const NumericalError& e) {
      fail(std::string("non-finite values at step ") + std::to_string(state_.step) + ": " + e.what());
      return status_;
    }
    if (!std::isfinite(result.loss.total)) {
      fail("non-finite loss at step " + std::to_string(state_.step));
      return status_;
    }

    auto params = state_.model.trainable();
    const auto grads = result.grads.named();
    ++state_.optimizer_steps;
    for (std::size_t i = 0; i < params.size(); ++i) {
      // Decay would pull log_tau toward zero (tau toward 1); it is exempt.
      const bool is_temperature = params[i].first.starts_with("log_tau");
      adamw_step(*params[i].second, *grads[i].second, state_.moments[i], lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps,
                 is_temperature ? 0.0 : cfg_.weight_decay, state_.optimizer_steps);
    }
    for (const auto& [name, t] : params) {
      if (!t->all_finite()) {
        fail("parameter " + name + " became non-finite at step " + std::to_string(state_.step));
        return status_;
      }
    }
    if (cfg_.loss.mode != LossMode::end2end) {
      ema_update(state_.model.image, cfg_.momentum);
      ema_update(state_.model.text, cfg_.momentum);
      ++state_.ema_updates;
    }

    if (state_.step == 0 && epoch == 0) state_.initial_loss = result.loss.total;
    last = StepRecord{state_.step, epoch, result.loss, tau, lr};
    history_.push_back(last);
    if (metrics) *metrics << metrics_line("step", last, cfg_.loss.mode) << '\n';
    epoch_sum.i2i += result.loss.i2i;
    epoch_sum.t2t += result.loss.t2t;
    epoch_sum.t2i += result.loss.t2i;
    epoch_sum.i2t += result.loss.i2t;
    epoch_sum.uni += result.loss.uni;
    epoch_sum.multi += result.loss.multi;
    epoch_sum.total += result.loss.total;
    ++state_.step;
  }

  const double n = static_cast<double>(steps_per_epoch_);
  LossBreakdown mean{epoch_sum.i2i / n, epoch_sum.t2t / n, epoch_sum.t2i / n, epoch_sum.i2t / n,
                     epoch_sum.uni / n, epoch_sum.multi / n, epoch_sum.total / n};
  last_epoch_loss_ = mean.total;
  state_.epoch = epoch + 1;
  if (metrics) {
    *metrics << metrics_line("epoch", StepRecord{last.step, epoch, mean, state_.model.temps.tau(LossStream::i2i), last.lr},
                             cfg_.loss.mode)
             << '\n';
  }

  if (mean.total > kDivergenceFactor * state_.initial_loss) {
    if (++state_.epochs_over_threshold >= kDivergenceEpochs) {
      fail("epoch loss exceeded " + std::to_string(kDivergenceFactor) + "x the initial loss for " +
           std::to_string(kDivergenceEpochs) + " consecutive epochs");
      return status_;
    }
  } else {
    state_.epochs_over_threshold = 0;
  }
  if (state_.epoch >= cfg_.epochs) status_ = TrainStatus::converged;
  return status_;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& dataset_path,
                  const std::filesystem::path& out_dir, bool resume) {
  cfg.validate();
  const PairedDataset data = read_dataset(dataset_path);
  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.msdc";
  result.metrics = out_dir / "metrics.jsonl";

  std::optional<Trainer> trainer;
  if (resume && std::filesystem::exists(result.checkpoint)) {
    LoadedCheckpoint loaded = load_checkpoint(result.checkpoint, cfg.hash());
    trainer.emplace(cfg, data, std::move(loaded.state));
  } else {
    trainer.emplace(cfg, data);
  }

  const auto mode = (resume ? std::ios::app : std::ios::trunc) | std::ios::out;
  std::ofstream metrics(result.metrics, mode);
  if (!metrics) throw IoError("cannot open " + result.metrics.string());

  while (trainer->status() == TrainStatus::running) {
    trainer->run_epoch(&metrics);
    metrics.flush();
    if (trainer->status() != TrainStatus::training_failed) save_checkpoint(trainer->state(), result.checkpoint);
  }

  result.status = trainer->status();
  result.failure_reason = trainer->failure_reason();
  result.epochs_completed = trainer->state().epoch;
  result.final_epoch_loss = trainer->last_epoch_loss();

  nlohmann::ordered_json status = {
      {"status", to_string(result.status)},
      {"epochs_completed", result.epochs_completed},
      {"steps", trainer->state().step},
      {"optimizer_steps", trainer->state().optimizer_steps},
      {"ema_updates", trainer->state().ema_updates},
      {"final_epoch_loss", result.final_epoch_loss},
      {"mode", to_string(cfg.loss.mode)},
      {"failure_reason", result.failure_reason},
  };
  std::ofstream(out_dir / "status.json") << status.dump(2) << '\n';
  return result;
}

}  // namespace msd
