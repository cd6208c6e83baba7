#include "msd/dataset.hpp"

#include <cmath>
#include <string>

#include "msd/binio.hpp"
#include "msd/errors.hpp"
#include "msd/rng.hpp"

namespace msd {

namespace {

constexpr char kMagic[] = "MSDD";
constexpr std::uint32_t kVersion = 1;

enum Stream : std::uint64_t { kClassMeans = 1, kProjA = 2, kProjB = 3, kSample = 4, kAugment = 5 };

Tensor gaussian_matrix(std::uint64_t seed, Stream stream, std::size_t rows, std::size_t cols, double sd) {
  CounterRng rng(seed, stream_id({stream}));
  Tensor t(Shape{rows, cols});
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

}  // namespace

void GenConfig::validate() const {
  if (n == 0 || d_latent == 0 || d_a == 0 || d_b == 0) throw ConfigError("dataset sizes must be positive");
  if (classes < 2) throw ConfigError("at least 2 classes are required");
  if (!(noise_sigma >= 0.0) || !(aug_sigma >= 0.0)) throw ConfigError("sigmas must be non-negative");
  if (!(mask_prob >= 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must be in [0, 1)");
  if (!(aug_scale_min > 0.0 && aug_scale_min <= aug_scale_max)) throw ConfigError("invalid augmentation scale range");
}

PairedDataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const Tensor means = gaussian_matrix(cfg.seed, kClassMeans, cfg.classes, cfg.d_latent, 1.0);
  const double proj_sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_latent));
  const Tensor proj_a = gaussian_matrix(cfg.seed, kProjA, cfg.d_a, cfg.d_latent, proj_sd);
  const Tensor proj_b = gaussian_matrix(cfg.seed, kProjB, cfg.d_b, cfg.d_latent, proj_sd);
  const double latent_sd = std::sqrt(0.5);

  PairedDataset ds;
  ds.seed = cfg.seed;
  ds.classes = static_cast<std::uint32_t>(cfg.classes);
  ds.features_a = Tensor(Shape{cfg.n, cfg.d_a});
  ds.features_b = Tensor(Shape{cfg.n, cfg.d_b});
  ds.labels.resize(cfg.n);

  std::vector<double> z(cfg.d_latent);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    CounterRng rng(cfg.seed, stream_id({kSample, i}));
    const auto label = static_cast<std::uint32_t>(rng.below(cfg.classes));
    ds.labels[i] = label;
    for (std::size_t k = 0; k < cfg.d_latent; ++k) z[k] = means(label, k) + latent_sd * rng.normal();
    for (std::size_t r = 0; r < cfg.d_a; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cfg.d_latent; ++k) acc += proj_a(r, k) * z[k];
      ds.features_a(i, r) = acc + cfg.noise_sigma * rng.normal();
    }
    for (std::size_t r = 0; r < cfg.d_b; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < cfg.d_latent; ++k) acc += proj_b(r, k) * z[k];
      ds.features_b(i, r) = acc + cfg.noise_sigma * rng.normal();
    }
  }
  return ds;
}

std::vector<double> augment(std::span<const double> x, std::uint64_t seed, const GenConfig& cfg) {
  CounterRng rng(seed, stream_id({kAugment}));
  const double s = rng.uniform(cfg.aug_scale_min, cfg.aug_scale_max);
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double noise = cfg.aug_sigma * rng.normal();
    const bool masked = rng.uniform() < cfg.mask_prob;
    out[j] = masked ? 0.0 : s * (x[j] + noise);
  }
  return out;
}

void write_dataset(const PairedDataset& ds, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kVersion);
  w.u64(ds.size());
  w.u32(static_cast<std::uint32_t>(ds.dim_a()));
  w.u32(static_cast<std::uint32_t>(ds.dim_b()));
  w.u32(ds.classes);
  w.u64(ds.seed);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u64(i);
    for (double v : ds.features_a.row(i)) w.f64(v);
    for (double v : ds.features_b.row(i)) w.f64(v);
    w.u32(ds.labels[i]);
  }
  w.save(path);
}

PairedDataset read_dataset(const std::filesystem::path& path) {
  binio::Reader r = binio::Reader::load(path);
  if (r.bytes(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("not an MSDD dataset file", 0);
  const std::uint64_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);
  }
  const std::uint64_t n = r.u64("sample count");
  const std::uint32_t d_a = r.u32("d_A");
  const std::uint32_t d_b = r.u32("d_B");
  const std::uint32_t classes = r.u32("class count");
  const std::uint64_t seed = r.u64("seed");
  if (n == 0 || d_a == 0 || d_b == 0 || classes < 2) throw FormatError("invalid dataset header", r.offset());
  const std::uint64_t record = 8 + 8ULL * (d_a + d_b) + 4;
  if (r.remaining() / record < n) throw FormatError("truncated dataset: fewer samples than declared", r.offset());

  PairedDataset ds;
  ds.seed = seed;
  ds.classes = classes;
  ds.features_a = Tensor(Shape{n, d_a});
  ds.features_b = Tensor(Shape{n, d_b});
  ds.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t at = r.offset();
    if (r.u64("sample id") != i) throw FormatError("sample ids must be dense and ordered", at);
    for (double& v : ds.features_a.row(i)) v = r.f64("x_A");
    for (double& v : ds.features_b.row(i)) v = r.f64("x_B");
    const std::uint64_t label_at = r.offset();
    ds.labels[i] = r.u32("label");
    if (ds.labels[i] >= classes) throw FormatError("label out of range", label_at);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last sample", r.offset());
  if (!ds.features_a.all_finite() || !ds.features_b.all_finite()) throw FormatError("non-finite feature value", 0);
  return ds;
}

}  // namespace msd
