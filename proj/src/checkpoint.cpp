#include <map>
#include <string>

#include "msd/binio.hpp"
#include "msd/errors.hpp"
#include "msd/trainer.hpp"

namespace msd {

namespace {

constexpr char kMagic[] = "MSDC";
constexpr std::uint32_t kVersion = 1;

void write_tensor(binio::Writer& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.data()) w.f64(v);
}

void write_queue(binio::Writer& w, const MomentumQueue& q) {
  w.u64(q.capacity());
  w.u64(q.dim());
  w.u64(q.head());
  w.u64(q.fill());
  for (double v : q.ring()) w.f64(v);
  for (std::uint64_t id : q.id_ring()) w.u64(id);
}

MomentumQueue read_queue(binio::Reader& r) {
  const std::uint64_t at = r.offset();
  const std::uint64_t capacity = r.u64("queue capacity");
  const std::uint64_t dim = r.u64("queue dim");
  const std::uint64_t head = r.u64("queue head");
  const std::uint64_t fill = r.u64("queue fill");
  if (capacity == 0 || dim == 0 || head >= capacity || fill > capacity || r.remaining() / 8 < capacity * (dim + 1)) {
    throw FormatError("invalid queue block", at);
  }
  std::vector<double> ring(capacity * dim);
  for (double& v : ring) v = r.f64("queue ring");
  std::vector<std::uint64_t> ids(capacity);
  for (std::uint64_t& id : ids) id = r.u64("queue ids");
  return MomentumQueue::restore(capacity, dim, std::move(ring), std::move(ids), head, fill);
}

class TensorTable {
 public:
  explicit TensorTable(std::map<std::string, Tensor> tensors, std::uint64_t offset)
      : tensors_(std::move(tensors)), offset_(offset) {}

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor take(const std::string& name) {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError("checkpoint is missing tensor '" + name + "'", offset_);
    return std::move(it->second);
  }

  EncoderParams encoder(const std::string& prefix) {
    EncoderParams p;
    for (std::size_t i = 0; has(prefix + "layers." + std::to_string(i) + ".weight"); ++i) {
      const std::string base = prefix + "layers." + std::to_string(i) + ".";
      p.layers.push_back(Dense{take(base + "weight"), take(base + "bias")});
    }
    p.proj = Dense{take(prefix + "proj.weight"), take(prefix + "proj.bias")};
    return p;
  }

 private:
  std::map<std::string, Tensor> tensors_;
  std::uint64_t offset_;
};

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kVersion);
  w.u64(state.config_hash);
  w.u64(state.step);

  const auto trainable = state.model.trainable();
  const auto momentum = state.model.momentum();
  w.u32(static_cast<std::uint32_t>(trainable.size() + momentum.size() + 2 * state.moments.size()));
  for (const auto& [name, t] : trainable) write_tensor(w, name, *t);
  for (const auto& [name, t] : momentum) write_tensor(w, name, *t);
  for (std::size_t i = 0; i < state.moments.size(); ++i) {
    write_tensor(w, "adam.m." + trainable[i].first, state.moments[i].m);
    write_tensor(w, "adam.v." + trainable[i].first, state.moments[i].v);
  }

  write_queue(w, state.model.image_queue);
  write_queue(w, state.model.text_queue);

  // Counters that key every random draw, then the optimizer/divergence counters.
  w.u64(state.seed);
  w.u64(state.epoch);
  w.u64(state.step);
  w.u64(state.optimizer_steps);
  w.u64(state.ema_updates);
  w.f64(state.initial_loss);
  w.u32(state.epochs_over_threshold);
  w.save(path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash) {
  binio::Reader r = binio::Reader::load(path);
  if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("not an MSDC checkpoint", 0);
  const std::uint64_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  LoadedCheckpoint out;
  TrainState& s = out.state;
  s.config_hash = r.u64("config hash");
  const std::uint64_t header_step = r.u64("step");
  if (expected_hash && *expected_hash != s.config_hash) {
    out.warnings.push_back("checkpoint config hash differs from the current configuration");
  }

  const std::uint32_t count = r.u32("tensor count");
  std::map<std::string, Tensor> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint64_t at = r.offset();
    const std::string name = r.bytes(r.u16("name length"), "tensor name");
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dims");
    std::uint64_t n = 1;
    for (auto d : shape) {
      if (d == 0) throw FormatError("zero extent in tensor '" + name + "'", at);
      n *= d;
    }
    if (r.remaining() / 8 < n) throw FormatError("truncated payload for tensor '" + name + "'", r.offset());
    std::vector<double> data(n);
    for (double& v : data) v = r.f64("tensor payload");
    tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
  }
  TensorTable table(std::move(tensors), r.offset());

  ModelState& m = s.model;
  m.image.query = table.encoder("image.query.");
  m.text.query = table.encoder("text.query.");
  m.image.key = table.encoder("image.key.");
  m.text.key = table.encoder("text.key.");
  if (table.has("log_tau")) {
    m.temps = Temperatures{{TemperatureParam{table.take("log_tau")}}};
  } else {
    m.temps.params.clear();
    for (const char* stream : {"i2i", "t2t", "t2i", "i2t"}) {
      m.temps.params.push_back(TemperatureParam{table.take(std::string("log_tau.") + stream)});
    }
  }
  for (const auto& [name, t] : std::as_const(m).trainable()) {
    s.moments.push_back(AdamMoments{table.take("adam.m." + name), table.take("adam.v." + name)});
  }

  m.image_queue = read_queue(r);
  m.text_queue = read_queue(r);
  s.seed = r.u64("seed");
  s.epoch = r.u64("epoch");
  s.step = r.u64("step counter");
  s.optimizer_steps = r.u64("optimizer steps");
  s.ema_updates = r.u64("ema updates");
  s.initial_loss = r.f64("initial loss");
  s.epochs_over_threshold = r.u32("divergence counter");
  if (s.step != header_step) throw FormatError("step counter disagrees with header", r.offset());
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint", r.offset());
  return out;
}

}  // namespace msd
