#include "msd/encoder.hpp"

#include <string>

#include "msd/errors.hpp"
#include "msd/rng.hpp"

namespace msd {

namespace {

Dense init_dense(std::uint64_t seed, std::uint64_t layer, std::size_t d_in, std::size_t d_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  CounterRng rng(seed, stream_id({0x656e63ULL, layer}));
  Tensor w(Shape{d_in, d_out});
  for (double& v : w.data()) v = rng.uniform(-a, a);
  return Dense{std::move(w), Tensor(Shape{d_out}, 0.0)};
}

template <class T, class P>
std::vector<std::pair<std::string, T*>> named_impl(P& p, const std::string& prefix) {
  std::vector<std::pair<std::string, T*>> out;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string base = prefix + "layers." + std::to_string(i) + ".";
    out.emplace_back(base + "weight", &p.layers[i].weight);
    out.emplace_back(base + "bias", &p.layers[i].bias);
  }
  out.emplace_back(prefix + "proj.weight", &p.proj.weight);
  out.emplace_back(prefix + "proj.bias", &p.proj.bias);
  return out;
}

}  // namespace

std::size_t EncoderParams::input_dim() const {
  return layers.empty() ? proj.weight.rows() : layers.front().weight.rows();
}

std::size_t EncoderParams::embedding_dim() const { return proj.weight.cols(); }

std::vector<std::pair<std::string, Tensor*>> EncoderParams::named(const std::string& prefix) {
  return named_impl<Tensor>(*this, prefix);
}

std::vector<std::pair<std::string, const Tensor*>> EncoderParams::named(const std::string& prefix) const {
  return named_impl<const Tensor>(*this, prefix);
}

EncoderParams init_params(std::uint64_t seed, std::span<const std::size_t> dims, std::size_t embedding_dim) {
  if (dims.empty()) throw ConfigError("encoder dims must not be empty");
  if (embedding_dim == 0) throw ConfigError("embedding dim must be positive");
  for (std::size_t d : dims) {
    if (d == 0) throw ConfigError("encoder dims must be positive");
  }
  EncoderParams p;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) p.layers.push_back(init_dense(seed, i, dims[i], dims[i + 1]));
  p.proj = init_dense(seed, dims.size() - 1, dims.back(), embedding_dim);
  return p;
}

EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams z = params;
  for (auto& [name, t] : z.named()) std::fill(t->storage().begin(), t->storage().end(), 0.0);
  return z;
}

BoundEncoder bind(ad::Tape& tape, const EncoderParams& params, bool trainable) {
  BoundEncoder b;
  for (const auto& [name, t] : params.named()) b.vars.push_back(trainable ? tape.leaf(*t) : tape.constant(*t));
  return b;
}

ad::Var encode(const BoundEncoder& encoder, ad::Var inputs) {
  const auto& v = encoder.vars;
  if (inputs.value().rank() != 2) throw RankError("encode: inputs must be a matrix");
  if (inputs.value().cols() != v.front().value().rows()) {
    throw DimensionError("encode: input width " + std::to_string(inputs.value().cols()) +
                         " does not match encoder input " + std::to_string(v.front().value().rows()));
  }
  ad::Var h = inputs;
  const std::size_t hidden = v.size() / 2 - 1;
  for (std::size_t i = 0; i < hidden; ++i) {
    h = ad::tanh(ad::add_row_vector(ad::matmul(h, v[2 * i]), v[2 * i + 1]));
  }
  h = ad::add_row_vector(ad::matmul(h, v[2 * hidden]), v[2 * hidden + 1]);
  return ad::row_l2_normalize(h);
}

Tensor encode(const EncoderParams& params, const Tensor& inputs) {
  ad::Tape tape;
  const BoundEncoder b = bind(tape, params, false);
  return encode(b, tape.constant(inputs)).value();
}

void accumulate_grads(const ad::Tape& tape, const BoundEncoder& encoder, EncoderParams& grads) {
  auto slots = grads.named();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Tensor g = tape.grad(encoder.vars[i]);
    Tensor& dst = *slots[i].second;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
  }
}

ad::Var temperature(ad::Var log_tau) { return ad::exp(log_tau); }

}  // namespace msd
