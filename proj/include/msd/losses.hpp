#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "msd/autodiff.hpp"
#include "msd/tensor.hpp"

namespace msd {

enum class LossMode { msd, onehot, end2end };

std::string_view to_string(LossMode mode);
/// ConfigError on unknown names.
LossMode parse_loss_mode(std::string_view name);

struct LossConfig {
  double alpha = 0.3;        // weight of KL(p_q2k || student)
  double beta = 0.7;         // weight of KL(p_k2k || student)
  double omega_uni = 1.0;
  double omega_multi = 10.0;
  LossMode mode = LossMode::msd;

  /// ConfigError unless alpha, beta >= 0 with alpha + beta > 0 and the
  /// omegas are >= 0 and not both zero.
  void validate() const;
};

/// Detached soft targets for one cross-modal direction.
struct TeacherTargets {
  Tensor q2k;  // softmax(momentum query . keys^T / tau)
  Tensor k2k;  // softmax(paired key . keys^T / tau)
};

/// q_emb . keys^T with the keys held constant.
ad::Var similarities(ad::Var q_emb, const Tensor& keys);

/// InfoNCE over precomputed similarities: mean_i -log softmax(sims_i / tau)[pos_i].
/// This is also the one-hot cross-modal baseline.
ad::Var onehot_multi_loss(ad::Var student_logits, std::span<const std::size_t> pos_rows, ad::Var tau);

/// Same-modality InfoNCE of queries against the (constant) queue keys.
ad::Var infonce_uni(ad::Var q_emb, std::span<const std::size_t> pos_rows, const Tensor& keys, ad::Var tau);

ad::Var uni_loss(ad::Var image_loss, ad::Var text_loss);
ad::Var multi_loss(ad::Var t2i_loss, ad::Var i2t_loss);
/// (omega_uni * uni + omega_multi * multi) / (omega_uni + omega_multi).
ad::Var total_loss(ad::Var uni, ad::Var multi, double omega_uni, double omega_multi);

TeacherTargets msd_targets(const Tensor& momentum_query_emb, std::span<const std::size_t> paired_key_rows,
                           const Tensor& keys, double tau);

/// alpha * KL(p_q2k || student) + beta * KL(p_k2k || student), batch-meaned.
ad::Var msd_loss(ad::Var student_log_probs, const Tensor& p_q2k, const Tensor& p_k2k, double alpha, double beta);

struct End2EndTerms {
  ad::Var image_to_text;
  ad::Var text_to_image;
};

/// Directional in-batch InfoNCE terms over the b x b similarity matrix; row i
/// of each side is the positive for row i of the other.
End2EndTerms end2end_terms(ad::Var img_emb, ad::Var txt_emb, ad::Var tau);

/// Symmetric in-batch InfoNCE, (image->text + text->image) / 2.
ad::Var end2end_loss(ad::Var img_emb, ad::Var txt_emb, ad::Var tau);

}  // namespace msd
