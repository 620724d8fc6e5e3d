#pragma once

// Discrepancy modeling: re-expresses captured patterns in a modality-neutral
// space. The patterns attend over a bank of trainable prototypes shifted by
// the mean captured feature, add the aggregate back as a residual, and are
// finally reweighted by a softmax over trainable per-pattern logits.

#include <cmath>
#include <string>

#include "cytr/param_store.hpp"
#include "cytr/rng.hpp"
#include "cytr/tensor.hpp"

namespace cytr {

template <typename S>
struct DmmParams {
  TensorPtr<S> prototypes;      // n x d
  TensorPtr<S> query_weight;    // d x c
  TensorPtr<S> key_weight;      // d x c
  TensorPtr<S> pattern_logits;  // 1 x k
  std::size_t scale_dim = 0;
};

namespace ids {
inline constexpr const char* kDmmPrototypes = "dmm.prototypes";
inline constexpr const char* kDmmQueryWeight = "dmm.w_psi";
inline constexpr const char* kDmmKeyWeight = "dmm.w_sigma";
inline constexpr const char* kDmmPatternLogits = "dmm.pattern_logits";
}  // namespace ids

template <typename S>
DmmParams<S> make_dmm_params(ParameterStore<S>& store, std::size_t num_prototypes,
                             std::size_t feature_dim, std::size_t num_patterns,
                             std::size_t scale_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  const auto uniform_init = [&rng, bound](std::vector<S>& v) {
    for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
  };
  // Prototype rows start at unit-ish norm; near-zero prototypes collapse the
  // neutral features to one point and stall the identity pathway.
  const auto gauss_init = [&rng, bound](std::vector<S>& v) {
    for (auto& x : v) x = static_cast<S>(rng.gaussian(0.0, bound));
  };
  DmmParams<S> p;
  p.prototypes = store.get_or_register(ids::kDmmPrototypes, {num_prototypes, feature_dim}, gauss_init);
  p.query_weight = store.get_or_register(ids::kDmmQueryWeight, {feature_dim, scale_dim}, uniform_init);
  p.key_weight = store.get_or_register(ids::kDmmKeyWeight, {feature_dim, scale_dim}, uniform_init);
  p.pattern_logits = store.get_or_register(ids::kDmmPatternLogits, {1, num_patterns}, nullptr);
  p.scale_dim = scale_dim;
  return p;
}

/// Prototypes shifted by the mean captured feature: P - f_mean, broadcast
/// across prototype rows.
template <typename S>
TensorPtr<S> dmm_discrepancy(Tape<S>& tape, const TensorPtr<S>& prototypes,
                             const TensorPtr<S>& feature_mean) {
  if (feature_mean->rows() != 1 || feature_mean->cols() != prototypes->cols())
    throw DimensionError("dmm_discrepancy: feature mean must be 1 x d");
  return tape.sub_rowvec(prototypes, feature_mean);
}

/// Row-stochastic attention of the k captured patterns over the n prototypes.
template <typename S>
TensorPtr<S> dmm_attend(Tape<S>& tape, const TensorPtr<S>& captured,
                        const TensorPtr<S>& prototypes, const DmmParams<S>& params) {
  if (captured->cols() != prototypes->cols() || captured->cols() != params.query_weight->rows())
    throw DimensionError("dmm_attend: feature dims of patterns/prototypes/params differ");
  auto q = tape.matmul(captured, params.query_weight);
  auto k = tape.matmul(prototypes, params.key_weight);
  auto logits = tape.scale(tape.matmul(q, tape.transpose(k)),
                           S(1) / static_cast<S>(std::sqrt(static_cast<double>(params.scale_dim))));
  return tape.softmax_rows(logits);
}

/// Neutral feature bundle: the reweighted patterns plus their flattening used
/// for retrieval, with the attention matrix exposed for audits.
template <typename S>
struct NeutralFeatures {
  TensorPtr<S> patterns;   // k x d, reweighted
  TensorPtr<S> flat;       // 1 x (k*d), row-major flattening of patterns
  TensorPtr<S> attention;  // k x n
};

template <typename S>
NeutralFeatures<S> dmm_forward(Tape<S>& tape, const TensorPtr<S>& captured,
                               const DmmParams<S>& params) {
  auto feature_mean = tape.mean_rows(captured);
  auto shifted = dmm_discrepancy(tape, params.prototypes, feature_mean);
  auto attention = dmm_attend(tape, captured, params.prototypes, params);
  auto residual = tape.add(captured, tape.matmul(attention, shifted));
  auto weights = tape.softmax_rows(params.pattern_logits);
  auto patterns = tape.scale_rows(residual, weights);
  return {patterns, tape.flatten(patterns), attention};
}

}  // namespace cytr
