#include "msd/losses.hpp"

#include <numeric>
#include <vector>

#include "msd/errors.hpp"

namespace msd {

std::string_view to_string(LossMode mode) {
  switch (mode) {
    case LossMode::msd:
      return "msd";
    case LossMode::onehot:
      return "onehot";
    case LossMode::end2end:
      return "end2end";
  }
  return "unknown";
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "msd") return LossMode::msd;
  if (name == "onehot") return LossMode::onehot;
  if (name == "end2end") return LossMode::end2end;
  throw ConfigError("unknown loss mode '" + std::string(name) + "' (expected msd, onehot or end2end)");
}

void LossConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
  if (!(alpha + beta > 0.0)) throw ConfigError("alpha + beta must be positive");
  if (!(omega_uni >= 0.0) || !(omega_multi >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (!(omega_uni + omega_multi > 0.0)) throw ConfigError("omega_uni and omega_multi cannot both be zero");
}

ad::Var similarities(ad::Var q_emb, const Tensor& keys) {
  if (keys.rank() != 2 || q_emb.value().cols() != keys.cols()) {
    throw DimensionError("similarities: query width " + std::to_string(q_emb.value().cols()) +
                         " vs keys " + shape_string(keys.shape()));
  }
  return ad::matmul(q_emb, q_emb.tape().constant(transpose(keys)));
}

ad::Var onehot_multi_loss(ad::Var student_logits, std::span<const std::size_t> pos_rows, ad::Var tau) {
  const std::size_t k = student_logits.value().cols();
  for (std::size_t p : pos_rows) {
    if (p >= k) throw IndexError("positive row " + std::to_string(p) + " out of range " + std::to_string(k));
  }
  const ad::Var log_probs = ad::scaled_log_softmax_rows(student_logits, tau);
  return ad::scale(ad::mean(ad::pick(log_probs, pos_rows)), -1.0);
}

ad::Var infonce_uni(ad::Var q_emb, std::span<const std::size_t> pos_rows, const Tensor& keys, ad::Var tau) {
  for (std::size_t p : pos_rows) {
    if (p >= keys.rows()) {
      throw IndexError("positive row " + std::to_string(p) + " out of range " + std::to_string(keys.rows()));
    }
  }
  return onehot_multi_loss(similarities(q_emb, keys), pos_rows, tau);
}

ad::Var uni_loss(ad::Var image_loss, ad::Var text_loss) { return ad::scale(ad::add(image_loss, text_loss), 0.5); }

ad::Var multi_loss(ad::Var t2i_loss, ad::Var i2t_loss) { return ad::scale(ad::add(t2i_loss, i2t_loss), 0.5); }

ad::Var total_loss(ad::Var uni, ad::Var multi, double omega_uni, double omega_multi) {
  if (!(omega_uni >= 0.0) || !(omega_multi >= 0.0) || !(omega_uni + omega_multi > 0.0)) {
    throw ConfigError("loss weights must be non-negative and not both zero");
  }
  const double norm = omega_uni + omega_multi;
  return ad::add(ad::scale(uni, omega_uni / norm), ad::scale(multi, omega_multi / norm));
}

TeacherTargets msd_targets(const Tensor& momentum_query_emb, std::span<const std::size_t> paired_key_rows,
                           const Tensor& keys, double tau) {
  if (paired_key_rows.size() != momentum_query_emb.rows()) {
    throw DimensionError("msd_targets: one paired key row per query required");
  }
  const Tensor keys_t = transpose(keys);
  const Tensor paired = gather_rows(keys, paired_key_rows);
  return TeacherTargets{ad::softmax_rows(matmul(momentum_query_emb, keys_t), tau),
                        ad::softmax_rows(matmul(paired, keys_t), tau)};
}

ad::Var msd_loss(ad::Var student_log_probs, const Tensor& p_q2k, const Tensor& p_k2k, double alpha, double beta) {
  const ad::Var q2k = ad::kl_divergence(p_q2k, student_log_probs);
  const ad::Var k2k = ad::kl_divergence(p_k2k, student_log_probs);
  return ad::add(ad::scale(q2k, alpha), ad::scale(k2k, beta));
}

End2EndTerms end2end_terms(ad::Var img_emb, ad::Var txt_emb, ad::Var tau) {
  const std::size_t b = img_emb.value().rows();
  if (b < 2) throw DegenerateBatchError("in-batch contrastive loss needs at least 2 pairs");
  if (txt_emb.value().rows() != b) throw DimensionError("end2end: modalities have different batch sizes");
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  const ad::Var sims = ad::matmul(img_emb, ad::transpose(txt_emb));
  return End2EndTerms{onehot_multi_loss(sims, diag, tau), onehot_multi_loss(ad::transpose(sims), diag, tau)};
}

ad::Var end2end_loss(ad::Var img_emb, ad::Var txt_emb, ad::Var tau) {
  const End2EndTerms t = end2end_terms(img_emb, txt_emb, tau);
  return ad::scale(ad::add(t.image_to_text, t.text_to_image), 0.5);
}

}  // namespace msd
