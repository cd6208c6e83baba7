#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "msd/errors.hpp"
#include "msd/trainer.hpp"
#include "test_util.hpp"

using namespace msd;
namespace fs = std::filesystem;

namespace {

PairedDataset tiny_data(std::uint64_t seed = 1) {
  GenConfig g;
  g.seed = seed;
  g.n = 200;
  return generate_dataset(g);
}

TrainConfig tiny_config(std::uint64_t seed = 3) {
  TrainConfig c;
  c.epochs = 2;
  c.primary_batch = 16;
  c.sub_batch = 4;
  c.queue_capacity = 64;
  c.dims.image_hidden = {16};
  c.dims.text_hidden = {16};
  c.dims.embedding = 8;
  c.seed = seed;
  return c;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("adamw hand cases") {
  Tensor w = Tensor::scalar(1.0);
  AdamMoments m = AdamMoments::zeros_like(w);
  adamw_step(w, Tensor::scalar(1.0), m, 0.1, 0.9, 0.999, 1e-8, 0.0, 1);
  CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));

  w = Tensor::scalar(1.0);
  m = AdamMoments::zeros_like(w);
  adamw_step(w, Tensor::scalar(1.0), m, 0.1, 0.9, 0.999, 1e-8, 0.01, 1);
  CHECK(w[0] == doctest::Approx(0.899).epsilon(1e-7));

  Tensor still = Tensor::vector({0.3, -2.0});
  AdamMoments sm = AdamMoments::zeros_like(still);
  adamw_step(still, Tensor::vector({0.0, 0.0}), sm, 0.1, 0.9, 0.999, 1e-8, 0.0, 1);
  CHECK(still == Tensor::vector({0.3, -2.0}));

  CHECK_THROWS_AS(adamw_step(w, Tensor::vector({1, 2}), m, 0.1, 0.9, 0.999, 1e-8, 0.0, 2), DimensionError);
  CHECK_THROWS_AS(adamw_step(w, Tensor::scalar(1.0), m, 0.1, 0.9, 0.999, 1e-8, 0.0, 0), ParameterError);
}

TEST_CASE("adamw matches a scalar reference over several steps") {
  double w = 0.7, mm = 0.0, vv = 0.0;
  Tensor wt = Tensor::scalar(w);
  AdamMoments m = AdamMoments::zeros_like(wt);
  for (std::uint64_t t = 1; t <= 5; ++t) {
    const double g = std::sin(static_cast<double>(t));
    mm = 0.9 * mm + 0.1 * g;
    vv = 0.999 * vv + 0.001 * g * g;
    const double mh = mm / (1 - std::pow(0.9, static_cast<double>(t)));
    const double vh = vv / (1 - std::pow(0.999, static_cast<double>(t)));
    w = w - 0.01 * 0.1 * w - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    adamw_step(wt, Tensor::scalar(g), m, 0.01, 0.9, 0.999, 1e-8, 0.1, t);
  }
  CHECK(wt[0] == doctest::Approx(w).epsilon(1e-13));
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-3) == 1e-3);
  CHECK(cosine_lr(100, 100, 1e-3) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 1e-3) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3), ScheduleError);
}

TEST_CASE("train config defaults and validation") {
  const TrainConfig c;
  CHECK(c.epochs == 50);
  CHECK(c.primary_batch == 512);
  CHECK(c.sub_batch == 16);
  CHECK(c.momentum == 0.995);
  CHECK(c.queue_capacity == 4096);
  CHECK(c.weight_decay == 0.01);
  CHECK(c.beta1 == 0.9);
  CHECK(c.beta2 == 0.999);
  CHECK(c.adam_eps == 1e-8);
  CHECK(kPretrainedBaseLr == 1e-6);
  CHECK_NOTHROW(c.validate());
  auto bad = [](auto mutate) {
    TrainConfig t;
    mutate(t);
    CHECK_THROWS_AS(t.validate(), ConfigError);
  };
  bad([](TrainConfig& t) { t.sub_batch = 100; });
  bad([](TrainConfig& t) { t.momentum = 1.5; });
  bad([](TrainConfig& t) { t.base_lr = -1; });
  bad([](TrainConfig& t) { t.queue_capacity = 100; });
  bad([](TrainConfig& t) { t.epochs = 0; });
  CHECK(c.hash() == TrainConfig{}.hash());
  TrainConfig d;
  d.seed = 9;
  CHECK(c.hash() != d.hash());
}

TEST_CASE("view assignment rule") {
  const PairedDataset data = tiny_data();
  std::vector<std::uint64_t> ids(100);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  const GenConfig aug;
  const Views v = make_views(data, ids, aug, 5, 0, 0);
  std::size_t query_original = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto x = data.features_a.row(i);
    const bool q_orig = std::equal(x.begin(), x.end(), v.image_query.row(i).begin());
    const bool k_orig = std::equal(x.begin(), x.end(), v.image_key.row(i).begin());
    CHECK(q_orig != k_orig);
    query_original += q_orig;
    const auto xb = data.features_b.row(i);
    CHECK_FALSE(std::equal(xb.begin(), xb.end(), v.text_query.row(i).begin()));
    CHECK_FALSE(std::equal(xb.begin(), xb.end(), v.text_key.row(i).begin()));
  }
  CHECK(query_original > 30);
  CHECK(query_original < 70);
  const Views again = make_views(data, ids, aug, 5, 0, 0);
  CHECK(again.image_query == v.image_query);
  CHECK(again.text_key == v.text_key);
  CHECK_FALSE(make_views(data, ids, aug, 5, 0, 1).text_key == v.text_key);
}

TEST_CASE("training is deterministic and counts steps") {
  const PairedDataset data = tiny_data();
  Trainer a(tiny_config(), data);
  Trainer b(tiny_config(), data);
  std::ostringstream la, lb;
  while (a.status() == TrainStatus::running) a.run_epoch(&la);
  while (b.status() == TrainStatus::running) b.run_epoch(&lb);
  CHECK(a.status() == TrainStatus::converged);
  CHECK(la.str() == lb.str());
  CHECK(a.state() == b.state());

  const std::uint64_t steps = 2 * a.steps_per_epoch();
  CHECK(a.steps_per_epoch() == 10);  // 160 training rows / 16
  CHECK(a.state().step == steps);
  CHECK(a.state().optimizer_steps == steps);
  CHECK(a.state().ema_updates == steps);
  for (const auto& rec : a.history()) {
    CHECK(rec.tau > 0.0);
    CHECK(std::isfinite(rec.tau));
  }

  // A single sub-batch gives the same counters.
  TrainConfig whole = tiny_config();
  whole.sub_batch = 16;
  Trainer c(whole, data);
  while (c.status() == TrainStatus::running) c.run_epoch();
  CHECK(c.state().optimizer_steps == steps);
  CHECK(c.state().ema_updates == steps);
}

TEST_CASE("zero learning rate freezes parameters and the loss") {
  // Views are made deterministic and one primary batch is the whole training
  // split, so every step sees the same key set in a different order.
  const PairedDataset data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.base_lr = 0.0;
  cfg.primary_batch = 160;
  cfg.sub_batch = 16;
  cfg.queue_capacity = 160;
  cfg.augmentation.aug_sigma = 0.0;
  cfg.augmentation.mask_prob = 0.0;
  cfg.augmentation.aug_scale_min = cfg.augmentation.aug_scale_max = 1.0;
  Trainer t(cfg, data);
  const ModelState start = t.state().model;
  std::vector<double> epoch_loss;
  while (t.status() == TrainStatus::running) {
    t.run_epoch();
    epoch_loss.push_back(t.last_epoch_loss());
    const auto now = t.state().model.trainable();
    const auto then = start.trainable();
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(*now[i].second == *then[i].second);
  }
  REQUIRE(epoch_loss.size() == 3);
  CHECK(std::abs(epoch_loss[1] - epoch_loss[0]) < 1e-10);
  CHECK(std::abs(epoch_loss[2] - epoch_loss[0]) < 1e-10);
}

TEST_CASE("end2end mode leaves queues and momentum alone") {
  const PairedDataset data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.loss.mode = LossMode::end2end;
  Trainer t(cfg, data);
  const ModelState start = t.state().model;
  while (t.status() == TrainStatus::running) t.run_epoch();
  CHECK(t.status() == TrainStatus::converged);
  CHECK(t.state().model.image_queue == start.image_queue);
  CHECK(t.state().model.image.key == start.image.key);
  CHECK(t.state().ema_updates == 0);
  CHECK_FALSE(t.state().model.image.query == start.image.query);
}

TEST_CASE("divergence is recorded as a training failure") {
  const PairedDataset data = tiny_data();
  TrainConfig cfg = tiny_config();
  cfg.epochs = 5;
  cfg.base_lr = 1e3;
  Trainer t(cfg, data);
  while (t.status() == TrainStatus::running) t.run_epoch();
  CHECK(t.status() == TrainStatus::training_failed);
  CHECK_FALSE(t.failure_reason().empty());
}

TEST_CASE("checkpoint round trip and errors") {
  const PairedDataset data = tiny_data();
  Trainer t(tiny_config(), data);
  t.run_epoch();
  const auto dir = msd::testing::scratch_dir("ckpt");
  const fs::path path = dir / "c.msdc";
  save_checkpoint(t.state(), path);
  const LoadedCheckpoint loaded = load_checkpoint(path, tiny_config().hash());
  CHECK(loaded.state == t.state());
  CHECK(loaded.warnings.empty());

  CHECK(load_checkpoint(path, tiny_config(99).hash()).warnings.size() == 1);

  std::string bytes = read_file(path);
  const std::string name = "image.key.proj.bias";
  const auto at = bytes.find(name);
  REQUIRE(at != std::string::npos);
  std::string renamed = bytes;
  renamed[at + name.size() - 1] = 'z';
  std::ofstream(dir / "renamed.msdc", std::ios::binary) << renamed;
  try {
    (void)load_checkpoint(dir / "renamed.msdc");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(name) != std::string::npos);
  }

  std::string magic = bytes;
  magic[0] = 'Z';
  std::ofstream(dir / "magic.msdc", std::ios::binary) << magic;
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.msdc"), FormatError);
  std::string version = bytes;
  version[4] = 7;
  std::ofstream(dir / "version.msdc", std::ios::binary) << version;
  CHECK_THROWS_AS(load_checkpoint(dir / "version.msdc"), FormatError);
  std::ofstream(dir / "short.msdc", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.msdc"), FormatError);
}

TEST_CASE("resume through a checkpoint is bit-identical") {
  const PairedDataset data = tiny_data();
  Trainer straight(tiny_config(), data);
  straight.run_epoch();
  straight.run_epoch();

  Trainer first(tiny_config(), data);
  first.run_epoch();
  const auto dir = msd::testing::scratch_dir("resume");
  save_checkpoint(first.state(), dir / "c.msdc");
  Trainer second(tiny_config(), data, load_checkpoint(dir / "c.msdc").state);
  second.run_epoch();

  CHECK(second.state() == straight.state());
  REQUIRE(second.history().size() == straight.steps_per_epoch());
  for (std::size_t i = 0; i < second.history().size(); ++i) {
    const auto& a = second.history()[i];
    const auto& b = straight.history()[straight.steps_per_epoch() + i];
    CHECK(std::abs(a.loss.total - b.loss.total) <= 1e-12);
  }
}

TEST_CASE("train writes metrics, checkpoint and status") {
  const auto dir = msd::testing::scratch_dir("train_run");
  const PairedDataset data = tiny_data();
  write_dataset(data, dir / "d.msdd");
  const TrainConfig cfg = tiny_config();
  const TrainResult r = train(cfg, dir / "d.msdd", dir / "full");
  CHECK(r.status == TrainStatus::converged);
  CHECK(r.epochs_completed == 2);
  const auto lines = lines_of(r.metrics);
  CHECK(lines.size() == 2 * 10 + 2);
  const auto first = nlohmann::ordered_json::parse(lines.front());
  std::vector<std::string> keys;
  for (const auto& [k, v] : first.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"kind", "step", "epoch", "loss", "loss_i2i", "loss_t2t", "loss_t2i",
                                         "loss_i2t", "tau", "lr", "mode"});
  const auto status = nlohmann::json::parse(read_file(dir / "full" / "status.json"));
  CHECK(status["status"] == "converged");

  // Interrupted after one epoch, then resumed: same files as the straight run.
  Trainer half(cfg, data);
  fs::create_directories(dir / "resumed");
  {
    std::ofstream m(dir / "resumed" / "metrics.jsonl");
    half.run_epoch(&m);
  }
  save_checkpoint(half.state(), dir / "resumed" / "checkpoint.msdc");
  const TrainResult rr = train(cfg, dir / "d.msdd", dir / "resumed", true);
  CHECK(rr.status == TrainStatus::converged);
  CHECK(read_file(rr.metrics) == read_file(r.metrics));
  CHECK(read_file(rr.checkpoint) == read_file(r.checkpoint));
}

TEST_CASE("alpha one beta zero run records its status") {
  const auto dir = msd::testing::scratch_dir("alpha_only");
  write_dataset(tiny_data(), dir / "d.msdd");
  TrainConfig cfg = tiny_config();
  cfg.loss.alpha = 1.0;
  cfg.loss.beta = 0.0;
  const TrainResult r = train(cfg, dir / "d.msdd", dir / "out");
  CHECK(r.status != TrainStatus::running);
  CHECK(fs::exists(dir / "out" / "status.json"));
}
