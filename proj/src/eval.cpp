#include "msd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "msd/errors.hpp"
#include "msd/rng.hpp"
#include "msd/trainer.hpp"

namespace msd {

double recall_at_k(const Tensor& query_emb, const Tensor& gallery_emb, std::size_t k) {
  if (query_emb.rank() != 2 || gallery_emb.rank() != 2 || query_emb.shape() != gallery_emb.shape()) {
    throw DimensionError("recall_at_k: query and gallery must be matrices of the same shape");
  }
  const std::size_t n = query_emb.rows();
  if (k < 1 || k > n) throw ParameterError("recall_at_k: k must be in [1, " + std::to_string(n) + "]");
  const Tensor scores = matmul(query_emb, transpose(gallery_emb));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double own = scores(i, i);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double s = scores(i, j);
      if (s > own || (s == own && j < i)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc_roc: one label per score required");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DegenerateLabelsError("auc_roc needs at least one positive and one negative");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

std::vector<double> one_vs_rest_auc(const Tensor& scores, std::span<const std::uint32_t> labels) {
  const std::size_t n = scores.rows(), c = scores.cols();
  std::vector<double> out(c);
  std::vector<double> col(n);
  std::vector<int> bin(n);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = scores(i, k);
      bin[i] = labels[i] == k ? 1 : 0;
    }
    out[k] = auc_roc(col, bin);
  }
  return out;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

ZeroShotResult zero_shot_classify(const Tensor& img_emb, const Tensor& anchors, std::span<const std::uint32_t> labels) {
  if (anchors.rank() != 2 || anchors.rows() < 2) throw ConfigError("zero-shot classification needs at least 2 classes");
  if (img_emb.rank() != 2 || img_emb.cols() != anchors.cols()) throw DimensionError("zero-shot: embedding widths differ");
  if (labels.size() != img_emb.rows()) throw DimensionError("zero-shot: one label per embedding required");
  const Tensor sims = matmul(img_emb, transpose(anchors));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < sims.rows(); ++i) {
    const auto row = sims.row(i);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[i]) ++correct;
  }
  ZeroShotResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(sims.rows());
  r.per_class_auc = one_vs_rest_auc(sims, labels);
  r.macro_auc = mean_of(r.per_class_auc);
  return r;
}

ProbeResult linear_probe(const Tensor& train_emb, std::span<const std::uint32_t> train_labels, const Tensor& test_emb,
                         std::span<const std::uint32_t> test_labels, std::size_t classes, const ProbeConfig& cfg) {
  if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0)) throw ParameterError("probe fraction must be in (0, 1]");
  if (classes < 2) throw ConfigError("linear probe needs at least 2 classes");
  const std::size_t n = train_emb.rows(), d = train_emb.cols();
  if (train_labels.size() != n || test_labels.size() != test_emb.rows() || test_emb.cols() != d) {
    throw DimensionError("linear_probe: inconsistent shapes");
  }

  ProbeResult result;
  CounterRng rng(cfg.seed, stream_id({0x70726f6265ULL}));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(cfg.fraction * static_cast<double>(n))));
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(take, n)));

  std::vector<std::size_t> seen(classes, 0);
  for (std::size_t i : chosen) ++seen[train_labels[i]];
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    // Resample per class so every class present in the training set is represented.
    result.stratified = true;
    chosen.clear();
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i : order)
        if (train_labels[i] == c) members.push_back(i);
      if (members.empty()) throw DegenerateLabelsError("class " + std::to_string(c) + " is absent from the training set");
      const auto k = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(cfg.fraction * static_cast<double>(members.size()))));
      chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(std::min(k, members.size())));
    }
  }
  result.train_samples = chosen.size();

  Tensor w(Shape{d, classes}, 0.0);
  std::vector<double> b(classes, 0.0);
  Tensor gw(Shape{d, classes});
  std::vector<double> gb(classes), p(classes);
  const double m = static_cast<double>(chosen.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::fill(gw.storage().begin(), gw.storage().end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i : chosen) {
      const auto x = train_emb.row(i);
      for (std::size_t c = 0; c < classes; ++c) {
        double z = b[c];
        for (std::size_t k = 0; k < d; ++k) z += x[k] * w(k, c);
        p[c] = z;
      }
      const double mx = *std::max_element(p.begin(), p.end());
      double total = 0.0;
      for (double& v : p) total += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < classes; ++c) {
        const double err = p[c] / total - (train_labels[i] == c ? 1.0 : 0.0);
        gb[c] += err / m;
        for (std::size_t k = 0; k < d; ++k) gw(k, c) += err * x[k] / m;
      }
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.lr * (gw[k] + cfg.weight_decay * w[k]);
    for (std::size_t c = 0; c < classes; ++c) b[c] -= cfg.lr * gb[c];
  }

  Tensor probs(Shape{test_emb.rows(), classes});
  for (std::size_t i = 0; i < test_emb.rows(); ++i) {
    const auto x = test_emb.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      double z = b[c];
      for (std::size_t k = 0; k < d; ++k) z += x[k] * w(k, c);
      p[c] = z;
    }
    const double mx = *std::max_element(p.begin(), p.end());
    double total = 0.0;
    for (double& v : p) total += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < classes; ++c) probs(i, c) = p[c] / total;
  }
  result.per_class_auc = one_vs_rest_auc(probs, test_labels);
  result.macro_auc = mean_of(result.per_class_auc);
  return result;
}

Tensor class_mean_features(const PairedDataset& data, std::size_t rows) {
  Tensor means(Shape{data.classes, data.dim_b()}, 0.0);
  std::vector<std::size_t> counts(data.classes, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto c = data.labels[i];
    ++counts[c];
    for (std::size_t j = 0; j < data.dim_b(); ++j) means(c, j) += data.features_b(i, j);
  }
  for (std::size_t c = 0; c < data.classes; ++c) {
    if (counts[c] == 0) throw DegenerateLabelsError("class " + std::to_string(c) + " has no samples");
    for (std::size_t j = 0; j < data.dim_b(); ++j) means(c, j) /= static_cast<double>(counts[c]);
  }
  return means;
}

EvalReport evaluate(const ModelState& model, const PairedDataset& data, const EvalOptions& opts) {
  const std::size_t n_train = train_split_size(data.size(), opts.test_fraction);
  if (n_train == 0 || n_train >= data.size()) throw ConfigError("evaluation needs non-empty train and test splits");
  const std::size_t n_test = data.size() - n_train;

  const Tensor train_img = encode(model.image.query, slice_rows(data.features_a, 0, n_train));
  const Tensor test_img = encode(model.image.query, slice_rows(data.features_a, n_train, data.size()));
  const Tensor test_txt = encode(model.text.query, slice_rows(data.features_b, n_train, data.size()));
  const std::span<const std::uint32_t> train_labels(data.labels.data(), n_train);
  const std::span<const std::uint32_t> test_labels(data.labels.data() + n_train, n_test);

  EvalReport report;
  report.seed = opts.seed;
  report.test_samples = n_test;
  for (std::size_t k : opts.recall_ks) report.recall_at[k] = recall_at_k(test_img, test_txt, std::min(k, n_test));

  const Tensor anchors = encode(model.text.query, class_mean_features(data, n_train));
  const ZeroShotResult zs = zero_shot_classify(test_img, anchors, test_labels);
  report.zero_shot_accuracy = zs.accuracy;
  report.zero_shot_auc = zs.per_class_auc;
  report.zero_shot_macro_auc = zs.macro_auc;

  ProbeConfig probe_cfg = opts.probe;
  probe_cfg.seed = opts.seed;
  const ProbeResult probe = linear_probe(train_img, train_labels, test_img, test_labels, data.classes, probe_cfg);
  report.probe_auc = probe.macro_auc;
  report.probe_per_class_auc = probe.per_class_auc;
  report.probe_train_samples = probe.train_samples;

  report.config = {
      {"test_fraction", opts.test_fraction},
      {"recall_ks", opts.recall_ks},
      {"probe", {{"fraction", probe_cfg.fraction},
                 {"epochs", probe_cfg.epochs},
                 {"lr", probe_cfg.lr},
                 {"weight_decay", probe_cfg.weight_decay},
                 {"stratified_resample", probe.stratified}}},
  };
  return report;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json recall = nlohmann::ordered_json::object();
  for (const auto& [k, v] : recall_at) recall[std::to_string(k)] = v;
  return {
      {"recall_at", recall},
      {"auc", {{"per_class", zero_shot_auc}, {"macro", zero_shot_macro_auc}}},
      {"zero_shot_accuracy", zero_shot_accuracy},
      {"probe_auc", probe_auc},
      {"probe_per_class_auc", probe_per_class_auc},
      {"probe_train_samples", probe_train_samples},
      {"test_samples", test_samples},
      {"config", config},
      {"seed", seed},
  };
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  auto line = [&](const std::string& name, double v) { os << std::left << std::setw(24) << name << std::right << std::setw(10) << v << '\n'; };
  for (const auto& [k, v] : recall_at) line("R@" + std::to_string(k), v);
  line("zero-shot accuracy", zero_shot_accuracy);
  line("zero-shot macro AUC", zero_shot_macro_auc);
  line("probe macro AUC", probe_auc);
  os << std::left << std::setw(24) << "test samples" << std::right << std::setw(10) << test_samples << '\n';
  os << std::left << std::setw(24) << "seed" << std::right << std::setw(10) << seed << '\n';
  return os.str();
}

}  // namespace msd
