#include "msd/model.hpp"

#include <cmath>

#include "msd/rng.hpp"

namespace msd {

namespace {

constexpr std::array<const char*, 4> kStreamNames{"i2i", "t2t", "t2i", "i2t"};

std::string tau_name(const Temperatures& t, std::size_t i) {
  return t.is_shared() ? std::string("log_tau") : std::string("log_tau.") + kStreamNames[i];
}

template <class T, class Self>
std::vector<std::pair<std::string, T*>> trainable_impl(Self& s) {
  auto out = s.image.query.named("image.query.");
  for (auto& e : s.text.query.named("text.query.")) out.push_back(std::move(e));
  for (std::size_t i = 0; i < s.temps.params.size(); ++i) out.emplace_back(tau_name(s.temps, i), &s.temps.params[i].log_tau);
  return out;
}

template <class T, class Self>
std::vector<std::pair<std::string, T*>> momentum_impl(Self& s) {
  auto out = s.image.key.named("image.key.");
  for (auto& e : s.text.key.named("text.key.")) out.push_back(std::move(e));
  return out;
}

}  // namespace

Temperatures Temperatures::shared(double tau) {
  Temperatures t;
  t.params = {TemperatureParam{Tensor::scalar(std::log(tau))}};
  return t;
}

Temperatures Temperatures::per_stream(double tau) {
  Temperatures t;
  t.params.assign(4, TemperatureParam{Tensor::scalar(std::log(tau))});
  return t;
}

ModelState ModelState::create(std::uint64_t seed, std::size_t image_dim, std::size_t text_dim, const ModelDims& dims,
                              std::size_t queue_capacity, bool shared_temperature) {
  std::vector<std::size_t> image_layers{image_dim};
  image_layers.insert(image_layers.end(), dims.image_hidden.begin(), dims.image_hidden.end());
  std::vector<std::size_t> text_layers{text_dim};
  text_layers.insert(text_layers.end(), dims.text_hidden.begin(), dims.text_hidden.end());
  return ModelState{
      MomentumPair::mirrored(init_params(stream_id({seed, 1}), image_layers, dims.embedding)),
      MomentumPair::mirrored(init_params(stream_id({seed, 2}), text_layers, dims.embedding)),
      shared_temperature ? Temperatures::shared() : Temperatures::per_stream(),
      MomentumQueue(queue_capacity, dims.embedding),
      MomentumQueue(queue_capacity, dims.embedding),
  };
}

std::vector<std::pair<std::string, Tensor*>> ModelState::trainable() { return trainable_impl<Tensor>(*this); }
std::vector<std::pair<std::string, const Tensor*>> ModelState::trainable() const {
  return trainable_impl<const Tensor>(*this);
}
std::vector<std::pair<std::string, Tensor*>> ModelState::momentum() { return momentum_impl<Tensor>(*this); }
std::vector<std::pair<std::string, const Tensor*>> ModelState::momentum() const {
  return momentum_impl<const Tensor>(*this);
}

Gradients Gradients::zeros_like(const ModelState& state) {
  Gradients g{msd::zeros_like(state.image.query), msd::zeros_like(state.text.query), {}};
  for (std::size_t i = 0; i < state.temps.params.size(); ++i) g.log_tau.push_back(Tensor::scalar(0.0));
  return g;
}

std::vector<std::pair<std::string, Tensor*>> Gradients::named() {
  auto out = image.named("image.query.");
  for (auto& e : text.named("text.query.")) out.push_back(std::move(e));
  for (std::size_t i = 0; i < log_tau.size(); ++i) {
    out.emplace_back(log_tau.size() == 1 ? std::string("log_tau") : std::string("log_tau.") + kStreamNames[i],
                     &log_tau[i]);
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Gradients::named() const {
  auto mut = const_cast<Gradients*>(this)->named();
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
  return out;
}

}  // namespace msd
