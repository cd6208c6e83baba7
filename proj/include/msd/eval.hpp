#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msd/dataset.hpp"
#include "msd/model.hpp"
#include "msd/tensor.hpp"

namespace msd {

/// Fraction of queries whose paired gallery row (same index) ranks within
/// the top k by dot product. Ties rank the lower gallery index first.
double recall_at_k(const Tensor& query_emb, const Tensor& gallery_emb, std::size_t k);

/// Rank-based (Mann-Whitney) AUC with mid-ranks for tied scores. Labels are 0/1.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

struct ZeroShotResult {
  double accuracy = 0.0;
  std::vector<double> per_class_auc;
  double macro_auc = 0.0;
};

/// Predicts argmax_c <img, anchor_c>; AUC per class one-vs-rest on those similarities.
ZeroShotResult zero_shot_classify(const Tensor& img_emb, const Tensor& anchors, std::span<const std::uint32_t> labels);

struct ProbeConfig {
  double fraction = 0.1;
  std::size_t epochs = 500;
  double lr = 0.5;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double macro_auc = 0.0;
  std::vector<double> per_class_auc;
  std::size_t train_samples = 0;
  bool stratified = false;  // true when the plain random draw missed a class
};

/// Softmax-regression head trained by full-batch gradient descent on a random
/// `fraction` of the training embeddings; macro one-vs-rest AUC on the test set.
ProbeResult linear_probe(const Tensor& train_emb, std::span<const std::uint32_t> train_labels, const Tensor& test_emb,
                         std::span<const std::uint32_t> test_labels, std::size_t classes, const ProbeConfig& cfg);

struct EvalOptions {
  std::vector<std::size_t> recall_ks{1, 5, 10};
  double test_fraction = 0.2;
  ProbeConfig probe;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::map<std::size_t, double> recall_at;
  std::vector<double> zero_shot_auc;
  double zero_shot_macro_auc = 0.0;
  double zero_shot_accuracy = 0.0;
  double probe_auc = 0.0;
  std::vector<double> probe_per_class_auc;
  std::size_t probe_train_samples = 0;
  std::size_t test_samples = 0;
  nlohmann::ordered_json config;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
  /// Aligned plain-text table.
  std::string table() const;
};

/// Modality-B features averaged per class over the given rows: the noise-free
/// class prototype in expectation.
Tensor class_mean_features(const PairedDataset& data, std::size_t rows);

/// Image-to-text retrieval, zero-shot and probe metrics on the held-out split.
EvalReport evaluate(const ModelState& model, const PairedDataset& data, const EvalOptions& opts);

}  // namespace msd
