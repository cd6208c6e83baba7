#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "msd/tensor.hpp"

namespace msd {

struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t n = 2000;
  std::size_t d_latent = 16;
  std::size_t d_a = 48;
  std::size_t d_b = 40;
  std::size_t classes = 5;
  double noise_sigma = 0.3;
  double aug_sigma = 0.2;
  double mask_prob = 0.1;
  double aug_scale_min = 0.9;
  double aug_scale_max = 1.1;

  /// ConfigError on negative sigmas, mask_prob outside [0, 1), fewer than 2
  /// classes, an empty scale range or zero sizes.
  void validate() const;
};

/// N paired feature vectors (modality A, modality B) sharing a latent code,
/// with a class label per pair. Sample ids are the row indices 0..N-1.
struct PairedDataset {
  std::uint64_t seed = 0;
  std::uint32_t classes = 0;
  Tensor features_a;  // [N x d_A]
  Tensor features_b;  // [N x d_B]
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim_a() const { return features_a.cols(); }
  std::size_t dim_b() const { return features_b.cols(); }

  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

/// label ~ U{0..C-1}; z = mu_label + N(0, 0.5 I); x_A = P_A z + N(0, sigma^2 I),
/// x_B = P_B z + N(0, sigma^2 I). Class means and projections are fixed by the seed.
PairedDataset generate_dataset(const GenConfig& cfg);

/// Feature-space view: x' = s * (x + N(0, aug_sigma^2 I)) with s ~ U[scale_min, scale_max],
/// then each coordinate zeroed with probability mask_prob. Pure in (x, seed).
std::vector<double> augment(std::span<const double> x, std::uint64_t seed, const GenConfig& cfg);

/// Little-endian "MSDD" v1 file: header (magic, version u32, N u64, d_A u32,
/// d_B u32, C u32, seed u64), then per sample id u64, x_A f64[d_A], x_B f64[d_B], label u32.
void write_dataset(const PairedDataset& ds, const std::filesystem::path& path);
/// FormatError (with byte offset) on bad magic, version, truncation or trailing bytes.
PairedDataset read_dataset(const std::filesystem::path& path);

inline constexpr std::size_t kDatasetHeaderBytes = 36;

}  // namespace msd
