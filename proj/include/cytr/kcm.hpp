#pragma once

// Knowledge capturing: refine a feature map by cosine self-attention over its
// spatial rows, then capture a fixed number of patterns from the refined rows
// with query-driven cross-attention.
//
// The refinement stage is unscaled and unprojected on purpose: logits are the
// cosine similarities between rows, and the values are the raw input rows.
// The capture stage projects queries and keys (scaled by sqrt of the
// projection width) but aggregates the unprojected gallery rows.

#include <cmath>
#include <string>

#include "cytr/param_store.hpp"
#include "cytr/rng.hpp"
#include "cytr/tensor.hpp"

namespace cytr {

/// Projection weights shared by every capture site in the pipeline.
template <typename S>
struct KcmParams {
  TensorPtr<S> query_weight;  // d x c
  TensorPtr<S> key_weight;    // d x c
  std::size_t scale_dim = 0;  // c, the sqrt divisor of the capture logits
};

/// Per-modality trainable pseudo queries (k x d each).
template <typename S>
struct PseudoQueries {
  TensorPtr<S> visible;
  TensorPtr<S> infrared;
};

namespace ids {
inline constexpr const char* kKcmQueryWeight = "kcm.w_theta";
inline constexpr const char* kKcmKeyWeight = "kcm.w_tau";
inline constexpr const char* kQueriesVisible = "queries.visible";
inline constexpr const char* kQueriesInfrared = "queries.infrared";
}  // namespace ids

/// Registers (or resolves) the shared capture weights. Every call site that
/// registers against the same store observes the same physical tensors.
template <typename S>
KcmParams<S> make_kcm_params(ParameterStore<S>& store, std::size_t feature_dim,
                             std::size_t scale_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  const auto uniform_init = [&rng, bound](std::vector<S>& v) {
    for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
  };
  KcmParams<S> p;
  p.query_weight = store.get_or_register(ids::kKcmQueryWeight, {feature_dim, scale_dim}, uniform_init);
  p.key_weight = store.get_or_register(ids::kKcmKeyWeight, {feature_dim, scale_dim}, uniform_init);
  p.scale_dim = scale_dim;
  return p;
}

template <typename S>
PseudoQueries<S> make_pseudo_queries(ParameterStore<S>& store, std::size_t num_queries,
                                     std::size_t feature_dim, Rng& rng) {
  // Scaled so the initial capture logits are O(1); a much smaller scale leaves
  // every attention row uniform and the captured patterns indistinguishable.
  const double stddev = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  const auto gauss_init = [&rng, stddev](std::vector<S>& v) {
    for (auto& x : v) x = static_cast<S>(rng.gaussian(0.0, stddev));
  };
  PseudoQueries<S> q;
  q.visible = store.get_or_register(ids::kQueriesVisible, {num_queries, feature_dim}, gauss_init);
  q.infrared = store.get_or_register(ids::kQueriesInfrared, {num_queries, feature_dim}, gauss_init);
  return q;
}

/// Attention output plus the row-stochastic attention matrix that produced it.
template <typename S>
struct Attended {
  TensorPtr<S> out;
  TensorPtr<S> attention;
};

/// Cosine self-attention over spatial rows; each output row is a convex
/// combination of the input rows.
template <typename S>
Attended<S> kcm_refine(Tape<S>& tape, const TensorPtr<S>& feat_rows) {
  auto normed = tape.l2_normalize_rows(feat_rows);
  auto attention = tape.softmax_rows(tape.matmul(normed, tape.transpose(normed)));
  return {tape.matmul(attention, feat_rows), attention};
}

/// Query-driven capture over a refined gallery. Aggregates the unprojected
/// gallery rows, so each output row stays inside their convex hull.
template <typename S>
Attended<S> kcm_capture(Tape<S>& tape, const TensorPtr<S>& gallery, const TensorPtr<S>& queries,
                        const KcmParams<S>& params) {
  if (gallery->cols() != params.query_weight->rows() || queries->cols() != gallery->cols())
    throw DimensionError("kcm_capture: feature dims of queries/gallery/params differ");
  auto projected_queries = tape.matmul(queries, params.query_weight);
  auto projected_keys = tape.matmul(gallery, params.key_weight);
  auto logits = tape.scale(tape.matmul(projected_queries, tape.transpose(projected_keys)),
                           S(1) / static_cast<S>(std::sqrt(static_cast<double>(params.scale_dim))));
  auto attention = tape.softmax_rows(logits);
  return {tape.matmul(attention, gallery), attention};
}

/// Full module result: captured patterns plus every attention stage and the
/// refined map (reused by the cycle stage as gallery material).
template <typename S>
struct KcmForward {
  TensorPtr<S> captured;  // k x d
  TensorPtr<S> refined;   // hw x d
  TensorPtr<S> refine_attention;
  TensorPtr<S> capture_attention;
};

template <typename S>
KcmForward<S> kcm_forward(Tape<S>& tape, const TensorPtr<S>& feat_rows,
                          const TensorPtr<S>& queries, const KcmParams<S>& params) {
  auto refined = kcm_refine(tape, feat_rows);
  auto captured = kcm_capture(tape, refined.out, queries, params);
  return {captured.out, refined.out, refined.attention, captured.attention};
}

}  // namespace cytr
