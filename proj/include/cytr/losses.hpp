#pragma once

// Training objectives over a batch of neutral features, plus the
// batch-norm-neck classifier that feeds the identity loss.
//
// All losses are nonnegative scalars. Reductions are element-means where the
// formulation leaves the granularity open, so the loss weights stay
// resolution-independent.

#include <cmath>
#include <string>
#include <vector>

#include "cytr/param_store.hpp"
#include "cytr/rng.hpp"
#include "cytr/tensor.hpp"

namespace cytr {

namespace ids {
inline constexpr const char* kClassifierWeight = "classifier.weight";
inline constexpr const char* kClassifierBnGamma = "classifier.bn.gamma";
inline constexpr const char* kClassifierBnBeta = "classifier.bn.beta";
}  // namespace ids

/// Batch-norm neck followed by a bias-free linear layer. Batch statistics are
/// used in training; running averages (momentum 0.9) at evaluation.
template <typename S>
class Classifier {
 public:
  Classifier() = default;

  Classifier(ParameterStore<S>& store, std::size_t feature_dim, std::size_t num_classes, Rng& rng)
      : feature_dim_(feature_dim),
        num_classes_(num_classes),
        running_mean_(feature_dim, S(0)),
        running_var_(feature_dim, S(1)) {
    bn_gamma_ = store.get_or_register(ids::kClassifierBnGamma, {1, feature_dim},
                                      [](std::vector<S>& v) { for (auto& x : v) x = S(1); });
    bn_beta_ = store.get_or_register(ids::kClassifierBnBeta, {1, feature_dim}, nullptr);
    weight_ = store.get_or_register(ids::kClassifierWeight, {feature_dim, num_classes},
                                    [&rng](std::vector<S>& v) {
                                      for (auto& x : v) x = static_cast<S>(rng.gaussian(0.0, 0.05));
                                    });
  }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t feature_dim() const { return feature_dim_; }

  /// Logits from batch statistics; updates the running averages.
  TensorPtr<S> logits_train(Tape<S>& tape, const TensorPtr<S>& batch_features) {
    std::vector<S> mean, var;
    auto normed = tape.batchnorm_train(batch_features, bn_gamma_, bn_beta_, kBnEps, &mean, &var);
    for (std::size_t j = 0; j < feature_dim_; ++j) {
      running_mean_[j] = kMomentum * running_mean_[j] + (S(1) - kMomentum) * mean[j];
      running_var_[j] = kMomentum * running_var_[j] + (S(1) - kMomentum) * var[j];
    }
    return tape.matmul(normed, weight_);
  }

  /// Logits from the stored running statistics (deterministic inference).
  TensorPtr<S> logits_eval(Tape<S>& tape, const TensorPtr<S>& batch_features) const {
    std::vector<S> shift(feature_dim_), inv(feature_dim_);
    for (std::size_t j = 0; j < feature_dim_; ++j) {
      shift[j] = running_mean_[j];
      inv[j] = S(1) / std::sqrt(running_var_[j] + kBnEps);
    }
    auto centered = tape.sub_rowvec(batch_features, make_tensor<S>({1, feature_dim_}, shift));
    auto scaled = tape.mul_rowvec(centered, make_tensor<S>({1, feature_dim_}, inv));
    auto normed = tape.add_rowvec(tape.mul_rowvec(scaled, bn_gamma_), bn_beta_);
    return tape.matmul(normed, weight_);
  }

  std::vector<S>& running_mean() { return running_mean_; }
  std::vector<S>& running_var() { return running_var_; }
  const std::vector<S>& running_mean() const { return running_mean_; }
  const std::vector<S>& running_var() const { return running_var_; }

 private:
  static constexpr S kBnEps = S(1e-5);
  static constexpr S kMomentum = S(0.9);
  std::size_t feature_dim_ = 0;
  std::size_t num_classes_ = 0;
  TensorPtr<S> bn_gamma_, bn_beta_, weight_;
  std::vector<S> running_mean_, running_var_;
};

/// Weighting of the objective terms and the metric-loss margin.
template <typename S>
struct LossWeights {
  S lambda_sep = S(0.2);
  S lambda_mmd = S(1.0);
  S lambda_rec = S(0.1);
  S lambda_aln = S(0.1);
  S margin = S(0.5);
};

/// Gaussian bandwidths combined by averaging the kernel evaluations.
template <typename S>
struct KernelBank {
  std::vector<S> sigmas;
};

namespace detail {

// sqrt shift keeping distance derivatives finite where two points coincide.
template <typename S>
inline constexpr S kDistEps = S(1e-14);

}  // namespace detail

/// Mean negative log-likelihood of the true classes under row-softmax logits.
template <typename S>
TensorPtr<S> cross_entropy(Tape<S>& tape, const TensorPtr<S>& logits,
                           const std::vector<std::size_t>& labels) {
  if (logits->cols() < 2) throw ContractError("cross_entropy: need at least two classes");
  auto log_probs = tape.log_softmax_rows(logits);
  auto picked = tape.pick_per_row(log_probs, labels);
  return tape.scale(tape.mean_all(picked), S(-1));
}

/// Identity loss: classifier logits in training mode, then cross-entropy.
template <typename S>
TensorPtr<S> loss_id(Tape<S>& tape, const TensorPtr<S>& batch_features,
                     const std::vector<std::size_t>& labels, Classifier<S>& classifier) {
  return cross_entropy(tape, classifier.logits_train(tape, batch_features), labels);
}

/// Center-anchored margin loss over ordered pairs with different labels:
/// mean over B^2 of [margin - d(f_i, f_j) + d(f_i, C_i) + d(f_j, C_j)]_+,
/// where C_i is the batch mean of all samples sharing label i (both
/// modalities pooled) and d is unsquared Euclidean distance.
template <typename S>
TensorPtr<S> loss_metric(Tape<S>& tape, const TensorPtr<S>& batch_features,
                         const std::vector<int>& labels, S margin) {
  const std::size_t b = batch_features->rows();
  if (labels.size() != b) throw ContractError("loss_metric: one label per row required");
  if (b < 2) throw ContractError("loss_metric: batch of at least two samples required");

  // class centers, one row per distinct label (ordered by first appearance)
  std::vector<int> distinct;
  std::vector<std::size_t> class_of(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t c = distinct.size();
    for (std::size_t t = 0; t < distinct.size(); ++t)
      if (distinct[t] == labels[i]) { c = t; break; }
    if (c == distinct.size()) distinct.push_back(labels[i]);
    class_of[i] = c;
  }
  std::vector<TensorPtr<S>> centers;
  centers.reserve(distinct.size());
  for (std::size_t t = 0; t < distinct.size(); ++t) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < b; ++i)
      if (class_of[i] == t) members.push_back(i);
    centers.push_back(tape.mean_rows(tape.select_rows(batch_features, members)));
  }
  auto center_mat = tape.concat_rows(centers);

  auto pair_dist = tape.sqrt_shift(tape.pairwise_sqdist(batch_features, batch_features),
                                   detail::kDistEps<S>);
  auto center_dist_all = tape.sqrt_shift(tape.pairwise_sqdist(batch_features, center_mat),
                                         detail::kDistEps<S>);
  auto own_center_dist = tape.pick_per_row(center_dist_all, class_of);  // B x 1

  auto term = tape.add_scalar(tape.scale(pair_dist, S(-1)), margin);
  term = tape.add_colvec(term, own_center_dist);
  term = tape.add_rowvec(term, tape.transpose(own_center_dist));
  auto hinge = tape.clamp_min(term, S(0));

  std::vector<S> mask(b * b, S(0));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      if (labels[i] != labels[j]) mask[i * b + j] = S(1);
  return tape.scale(tape.sum_all(tape.mul_mask(hinge, std::move(mask))), S(1) / S(b * b));
}

/// Pattern separation: mean cosine over unordered pairs among the first k-1
/// patterns, normalized by k^2. The last pattern is the global representation
/// and is excluded. Zero-norm rows contribute zero.
template <typename S>
TensorPtr<S> loss_sep(Tape<S>& tape, const TensorPtr<S>& patterns) {
  const std::size_t k = patterns->rows();
  if (k < 2) throw ContractError("loss_sep: at least two patterns required");
  std::vector<std::size_t> keep(k - 1);
  for (std::size_t i = 0; i + 1 < k; ++i) keep[i] = i;
  auto normed = tape.l2_normalize_rows(tape.select_rows(patterns, keep));
  auto cosine = tape.matmul(normed, tape.transpose(normed));
  std::vector<S> upper(keep.size() * keep.size(), S(0));
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (std::size_t j = i + 1; j < keep.size(); ++j) upper[i * keep.size() + j] = S(1);
  return tape.scale(tape.sum_all(tape.mul_mask(cosine, std::move(upper))), S(1) / S(k * k));
}

namespace detail {

// Shared assembly of the biased two-sample statistic from the (Bv+Br)^2
// squared-distance matrix and a list of 1/(2*sigma^2) nodes.
template <typename S>
TensorPtr<S> mmd_from_sqdist(Tape<S>& tape, const TensorPtr<S>& sqdist, std::size_t bv,
                             std::size_t br, const std::vector<TensorPtr<S>>& inv_two_sigma_sq) {
  const std::size_t b = bv + br;
  TensorPtr<S> gram;
  for (const auto& inv : inv_two_sigma_sq) {
    auto k = tape.exp(tape.scale(tape.mul_scalar_node(sqdist, inv), S(-1)));
    gram = gram ? tape.add(gram, k) : k;
  }
  gram = tape.scale(gram, S(1) / S(inv_two_sigma_sq.size()));

  std::vector<S> mask_vv(b * b, S(0)), mask_rr(b * b, S(0)), mask_vr(b * b, S(0));
  for (std::size_t i = 0; i < bv; ++i)
    for (std::size_t j = 0; j < bv; ++j) mask_vv[i * b + j] = S(1);
  for (std::size_t i = bv; i < b; ++i)
    for (std::size_t j = bv; j < b; ++j) mask_rr[i * b + j] = S(1);
  for (std::size_t i = 0; i < bv; ++i)
    for (std::size_t j = bv; j < b; ++j) mask_vr[i * b + j] = S(1);

  auto mean_vv = tape.scale(tape.sum_all(tape.mul_mask(gram, std::move(mask_vv))), S(1) / S(bv * bv));
  auto mean_rr = tape.scale(tape.sum_all(tape.mul_mask(gram, std::move(mask_rr))), S(1) / S(br * br));
  auto mean_vr = tape.scale(tape.sum_all(tape.mul_mask(gram, std::move(mask_vr))), S(1) / S(bv * br));
  auto stat = tape.add(tape.add(mean_vv, mean_rr), tape.scale(mean_vr, S(-2)));
  return tape.clamp_min(stat, S(0));
}

}  // namespace detail

/// Biased squared two-sample discrepancy with a fixed Gaussian kernel bank
/// (mean of kernels), clamped at zero.
template <typename S>
TensorPtr<S> loss_mmd(Tape<S>& tape, const TensorPtr<S>& visible, const TensorPtr<S>& infrared,
                      const KernelBank<S>& bank) {
  if (bank.sigmas.empty()) throw ContractError("loss_mmd: kernel bank is empty");
  const std::size_t bv = visible->rows(), br = infrared->rows();
  auto joint = tape.concat_rows({visible, infrared});
  auto sqdist = tape.pairwise_sqdist(joint, joint);
  std::vector<TensorPtr<S>> inv;
  for (S sigma : bank.sigmas) {
    if (sigma <= S(0)) throw ContractError("loss_mmd: bandwidths must be positive");
    inv.push_back(make_scalar<S>(S(1) / (S(2) * sigma * sigma)));
  }
  return detail::mmd_from_sqdist(tape, sqdist, bv, br, inv);
}

/// Same statistic with the bandwidth picked per batch: the median pairwise
/// distance of the joint batch scaled by powers of two (2^-2 .. 2^2). The
/// median is part of the graph, so gradients flow through the bandwidth.
template <typename S>
TensorPtr<S> loss_mmd_adaptive(Tape<S>& tape, const TensorPtr<S>& visible,
                               const TensorPtr<S>& infrared) {
  const std::size_t bv = visible->rows(), br = infrared->rows();
  auto joint = tape.concat_rows({visible, infrared});
  auto sqdist = tape.pairwise_sqdist(joint, joint);
  auto median = tape.median_offdiag(tape.sqrt_shift(sqdist, detail::kDistEps<S>));
  auto sigma = tape.clamp_min(median, S(1e-6));
  auto inv_two_sigma_sq = tape.reciprocal(tape.scale(tape.mul(sigma, sigma), S(2)));
  std::vector<TensorPtr<S>> inv;
  for (int e = -2; e <= 2; ++e) {
    const S factor = static_cast<S>(std::pow(4.0, -e));  // 1/(2*(sigma*2^e)^2)
    inv.push_back(tape.scale(inv_two_sigma_sq, factor));
  }
  return detail::mmd_from_sqdist(tape, sqdist, bv, br, inv);
}

/// Mean absolute element difference between reconstruction and target.
template <typename S>
TensorPtr<S> loss_rec(Tape<S>& tape, const TensorPtr<S>& reconstructed,
                      const TensorPtr<S>& target) {
  if (reconstructed->shape != target->shape)
    throw DimensionError("loss_rec: reconstruction/target shapes differ");
  return tape.mean_all(tape.abs(tape.sub(reconstructed, target)));
}

/// Euclidean distance between flattened tensors, divided by element count.
template <typename S>
TensorPtr<S> loss_aln(Tape<S>& tape, const TensorPtr<S>& reconstructed,
                      const TensorPtr<S>& target) {
  if (reconstructed->shape != target->shape)
    throw DimensionError("loss_aln: reconstruction/target shapes differ");
  auto diff = tape.sub(reconstructed, target);
  auto norm = tape.sqrt_shift(tape.sum_all(tape.mul(diff, diff)), detail::kDistEps<S>);
  return tape.scale(norm, S(1) / S(reconstructed->size()));
}

/// The six component scalars of one training step.
template <typename S>
struct LossTerms {
  TensorPtr<S> id;
  TensorPtr<S> metric;
  TensorPtr<S> sep;
  TensorPtr<S> mmd;
  TensorPtr<S> rec;
  TensorPtr<S> aln;
};

/// Weighted total; any missing component counts as zero. A non-finite
/// component aborts with its name.
template <typename S>
TensorPtr<S> loss_total(Tape<S>& tape, const LossTerms<S>& terms, const LossWeights<S>& w) {
  const auto guard = [](const TensorPtr<S>& t, const char* name) {
    if (t && !std::isfinite(static_cast<double>(t->values[0])))
      throw NumericError(std::string("non-finite loss component: ") + name);
  };
  guard(terms.id, "L_id");
  guard(terms.metric, "L_me");
  guard(terms.sep, "L_sep");
  guard(terms.mmd, "L_MMD");
  guard(terms.rec, "L_rec");
  guard(terms.aln, "L_aln");

  TensorPtr<S> total = make_scalar<S>(S(0));
  const auto accumulate = [&](const TensorPtr<S>& t, S weight) {
    if (t && weight != S(0)) total = tape.add(total, tape.scale(t, weight));
  };
  accumulate(terms.id, S(1));
  accumulate(terms.metric, S(1));
  accumulate(terms.sep, w.lambda_sep);
  accumulate(terms.mmd, w.lambda_mmd);
  accumulate(terms.rec, w.lambda_rec);
  accumulate(terms.aln, w.lambda_aln);
  return total;
}

}  // namespace cytr
