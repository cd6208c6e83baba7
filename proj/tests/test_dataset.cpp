#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "msd/binio.hpp"
#include "msd/dataset.hpp"
#include "msd/errors.hpp"
#include "test_util.hpp"

using namespace msd;
namespace fs = std::filesystem;

namespace {

GenConfig small(std::uint64_t seed, std::size_t n = 200) {
  GenConfig cfg;
  cfg.seed = seed;
  cfg.n = n;
  return cfg;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("config validation") {
  GenConfig cfg;
  CHECK(cfg.d_latent == 16);
  CHECK(cfg.d_a == 48);
  CHECK(cfg.d_b == 40);
  CHECK(cfg.classes == 5);
  CHECK_NOTHROW(cfg.validate());
  auto bad = [&](auto mutate) {
    GenConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad([](GenConfig& c) { c.noise_sigma = -1; });
  bad([](GenConfig& c) { c.aug_sigma = -0.1; });
  bad([](GenConfig& c) { c.mask_prob = 1.0; });
  bad([](GenConfig& c) { c.mask_prob = -0.1; });
  bad([](GenConfig& c) { c.classes = 1; });
  bad([](GenConfig& c) { c.n = 0; });
}

TEST_CASE("generation is deterministic and well formed") {
  const PairedDataset a = generate_dataset(small(3));
  const PairedDataset b = generate_dataset(small(3));
  CHECK(a == b);
  CHECK_FALSE(a == generate_dataset(small(4)));
  CHECK(a.features_a.shape() == Shape{200, 48});
  CHECK(a.features_b.shape() == Shape{200, 40});
  CHECK(a.size() == 200);
  CHECK(a.features_a.all_finite());
  CHECK(a.features_b.all_finite());
  std::vector<int> seen(5, 0);
  for (auto l : a.labels) {
    REQUIRE(l < 5);
    ++seen[l];
  }
  for (int c : seen) CHECK(c > 0);

  const auto dir = msd::testing::scratch_dir("dataset_det");
  write_dataset(a, dir / "a.msdd");
  write_dataset(b, dir / "b.msdd");
  CHECK(slurp(dir / "a.msdd") == slurp(dir / "b.msdd"));
}

TEST_CASE("true pairs align better than mismatched pairs") {
  const PairedDataset d = generate_dataset(small(5));
  const std::size_t n = d.size(), da = d.dim_a(), db = d.dim_b();
  // Standardize each column, then map A into B's coordinates through the
  // empirical cross-covariance.
  auto standardize = [n](const Tensor& x) {
    Tensor out = x;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t r = 0; r < n; ++r) mean += x(r, c);
      mean /= static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) sq += (x(r, c) - mean) * (x(r, c) - mean);
      const double sd = std::sqrt(sq / static_cast<double>(n));
      for (std::size_t r = 0; r < n; ++r) out(r, c) = (x(r, c) - mean) / sd;
    }
    return out;
  };
  const Tensor a = standardize(d.features_a);
  const Tensor b = standardize(d.features_b);
  Tensor cross(Shape{da, db});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < da; ++i)
      for (std::size_t j = 0; j < db; ++j) cross(i, j) += a(r, i) * b(r, j) / static_cast<double>(n);
  const Tensor projected = matmul(a, cross);

  auto cosine = [&](std::size_t i, std::size_t j) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < db; ++c) {
      dot += projected(i, c) * b(j, c);
      na += projected(i, c) * projected(i, c);
      nb += b(j, c) * b(j, c);
    }
    return dot / std::sqrt(na * nb);
  };
  double matched = 0.0, mismatched = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) matched += cosine(i, j);
      else mismatched += cosine(i, j);
    }
  }
  matched /= static_cast<double>(n);
  mismatched /= static_cast<double>(n * (n - 1));
  CHECK(matched > mismatched);
}

TEST_CASE("raw modality A is linearly informative about the label") {
  // Nearest-class-mean is a linear classifier; fit on one half, score the other.
  const PairedDataset d = generate_dataset(small(6, 2000));
  const std::size_t half = d.size() / 2;
  const std::size_t c = d.classes;
  Tensor means(Shape{c, d.dim_a()});
  std::vector<double> counts(c, 0.0);
  for (std::size_t r = 0; r < half; ++r) {
    counts[d.labels[r]] += 1.0;
    for (std::size_t k = 0; k < d.dim_a(); ++k) means(d.labels[r], k) += d.features_a(r, k);
  }
  for (std::size_t k = 0; k < c; ++k)
    for (double& v : means.row(k)) v /= counts[k];
  std::size_t correct = 0;
  for (std::size_t r = half; r < d.size(); ++r) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d.dim_a(); ++j) dist += std::pow(d.features_a(r, j) - means(k, j), 2);
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    correct += best == d.labels[r];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(d.size() - half);
  CHECK(acc > 1.0 / static_cast<double>(c) + 0.2);
}

TEST_CASE("augment") {
  const std::vector<double> x{0.5, -1.0, 2.0, 0.0, 3.0};
  GenConfig id;
  id.aug_sigma = 0.0;
  id.mask_prob = 0.0;
  id.aug_scale_min = id.aug_scale_max = 1.0;
  CHECK(augment(x, 9, id) == x);

  const GenConfig cfg;
  CHECK(augment(x, 10, cfg) == augment(x, 10, cfg));
  CHECK(augment(x, 10, cfg) != augment(x, 11, cfg));

  // Monte Carlo against the closed-form second moment of x' - x.
  const double p = cfg.mask_prob, s2 = cfg.aug_sigma * cfg.aug_sigma;
  const double var_s = std::pow(cfg.aug_scale_max - cfg.aug_scale_min, 2) / 12.0;
  double expected = 0.0;
  for (double v : x) expected += p * v * v + (1 - p) * (v * v * var_s + s2 * (1 + var_s));
  double total = 0.0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const auto y = augment(x, 1000 + static_cast<std::uint64_t>(k), cfg);
    for (std::size_t j = 0; j < x.size(); ++j) total += (y[j] - x[j]) * (y[j] - x[j]);
  }
  CHECK(std::abs(total / draws - expected) < 0.1 * expected);
}

TEST_CASE("file round trip and size arithmetic") {
  const PairedDataset d = generate_dataset(small(7, 50));
  const auto dir = msd::testing::scratch_dir("dataset_io");
  const fs::path path = dir / "d.msdd";
  write_dataset(d, path);
  CHECK(read_dataset(path) == d);
  // Header fields: magic 4 + version 4 + N 8 + d_A 4 + d_B 4 + C 4 + seed 8.
  const std::size_t header = 4 + 4 + 8 + 4 + 4 + 4 + 8;
  CHECK(header == kDatasetHeaderBytes);
  CHECK(fs::file_size(path) == header + 50 * (8 + 8 * (48 + 40) + 4));
}

TEST_CASE("corrupted files raise format errors with offsets") {
  const PairedDataset d = generate_dataset(small(8, 10));
  const auto dir = msd::testing::scratch_dir("dataset_bad");
  const fs::path path = dir / "d.msdd";
  write_dataset(d, path);
  const std::vector<char> good = slurp(path);

  auto expect_error_at = [&](std::vector<char> bytes, std::uint64_t offset) {
    spit(path, bytes);
    try {
      (void)read_dataset(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == offset);
    }
  };
  std::vector<char> magic = good;
  magic[0] = 'X';
  expect_error_at(magic, 0);
  std::vector<char> version = good;
  version[4] = 2;
  expect_error_at(version, 4);
  std::vector<char> truncated(good.begin(), good.end() - 3);
  spit(path, truncated);
  CHECK_THROWS_AS(read_dataset(path), FormatError);
  std::vector<char> trailing = good;
  trailing.push_back(0);
  spit(path, trailing);
  CHECK_THROWS_AS(read_dataset(path), FormatError);
  CHECK_THROWS_AS(read_dataset(dir / "missing.msdd"), IoError);
}
