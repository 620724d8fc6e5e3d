#pragma once

// End-to-end model composition: stub backbone -> knowledge capture ->
// discrepancy modeling, plus the cycle stage that reconstructs
// modality-relevant patterns from the neutral ones through the same capture
// weights. One KcmParams instance exists per model; the forward capture and
// both reconstruction sites resolve to the identical parameter ids.

#include <string>
#include <vector>

#include "cytr/data_io.hpp"
#include "cytr/dmm.hpp"
#include "cytr/kcm.hpp"
#include "cytr/losses.hpp"
#include "cytr/param_store.hpp"
#include "cytr/rng.hpp"
#include "cytr/tensor.hpp"

namespace cytr {

/// Ablation variants: the full objective, the transform without cycle
/// reconstruction losses, and a pooled-backbone identity-loss-only baseline.
enum class Variant { full, no_cycle, baseline };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_cycle: return "no-cycle";
    default: return "baseline";
  }
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "no-cycle") return Variant::no_cycle;
  if (s == "baseline") return Variant::baseline;
  throw ConfigError("unknown variant: " + s);
}

struct ModelDims {
  std::size_t raw_dim = 16;
  std::size_t feature_dim = 32;     // d
  std::size_t num_queries = 7;      // k, patterns per sample
  std::size_t num_prototypes = 64;  // n
  std::size_t scale_dim = 0;        // c; 0 selects feature_dim
  std::size_t num_classes = 0;      // N_p

  std::size_t resolved_scale_dim() const { return scale_dim ? scale_dim : feature_dim; }
};

template <typename S>
struct BatchInput {
  TensorPtr<S> raw_rows;  // hw x raw_dim
  int identity = 0;
  Modality modality = Modality::visible;
};

/// Per-sample forward state kept alive for loss assembly and audits.
template <typename S>
struct SampleForward {
  int identity = 0;
  Modality modality = Modality::visible;
  TensorPtr<S> feature_rows;       // backbone output, hw x d
  TensorPtr<S> refined;            // hw x d (null for the baseline variant)
  TensorPtr<S> relevant;           // captured patterns, k x d
  NeutralFeatures<S> neutral;      // reweighted patterns + flattening
  TensorPtr<S> recon_same;         // k x d, own-map reconstruction
  TensorPtr<S> recon_cross;        // k x d, opposite-modality reconstruction
  TensorPtr<S> embedding;          // 1 x E retrieval row
  TensorPtr<S> refine_attention;
  TensorPtr<S> capture_attention;
};

template <typename S>
struct BatchForward {
  std::vector<SampleForward<S>> samples;
  TensorPtr<S> batch_embeddings;  // B x E, rows aligned with samples
};

template <typename S>
class Model {
 public:
  Model(const ModelDims& dims, Variant variant, std::uint64_t seed)
      : dims_(dims), variant_(variant) {
    if (dims_.num_classes < 2) throw ContractError("model: at least two identities required");
    Rng rng(seed);
    backbone_ = StubBackbone<S>(store_, dims_.raw_dim, dims_.feature_dim, rng);
    if (variant_ != Variant::baseline) {
      kcm_ = make_kcm_params(store_, dims_.feature_dim, dims_.resolved_scale_dim(), rng);
      queries_ = make_pseudo_queries(store_, dims_.num_queries, dims_.feature_dim, rng);
      dmm_ = make_dmm_params(store_, dims_.num_prototypes, dims_.feature_dim, dims_.num_queries,
                             dims_.resolved_scale_dim(), rng);
    }
    classifier_ = Classifier<S>(store_, embedding_dim(), dims_.num_classes, rng);
  }

  const ModelDims& dims() const { return dims_; }
  Variant variant() const { return variant_; }
  ParameterStore<S>& store() { return store_; }
  const ParameterStore<S>& store() const { return store_; }
  Classifier<S>& classifier() { return classifier_; }
  const Classifier<S>& classifier() const { return classifier_; }
  const KcmParams<S>& kcm_params() const { return kcm_; }
  const DmmParams<S>& dmm_params() const { return dmm_; }
  const PseudoQueries<S>& pseudo_queries() const { return queries_; }
  const StubBackbone<S>& backbone() const { return backbone_; }

  std::size_t embedding_dim() const {
    return variant_ == Variant::baseline ? dims_.feature_dim
                                         : dims_.num_queries * dims_.feature_dim;
  }

  const TensorPtr<S>& queries_for(Modality m) const {
    return m == Modality::visible ? queries_.visible : queries_.infrared;
  }

  /// Single-sample pipeline: backbone projection, capture, neutralization.
  SampleForward<S> forward_sample(Tape<S>& tape, const TensorPtr<S>& raw_rows,
                                  Modality modality, int identity = 0) const {
    SampleForward<S> s;
    s.identity = identity;
    s.modality = modality;
    s.feature_rows = backbone_.forward(tape, raw_rows);
    if (variant_ == Variant::baseline) {
      s.embedding = tape.mean_rows(s.feature_rows);
      return s;
    }
    auto captured = kcm_forward(tape, s.feature_rows, queries_for(modality), kcm_);
    s.refined = captured.refined;
    s.relevant = captured.captured;
    s.refine_attention = captured.refine_attention;
    s.capture_attention = captured.capture_attention;
    s.neutral = dmm_forward(tape, s.relevant, dmm_);
    s.embedding = s.neutral.flat;
    return s;
  }

  /// Own-map reconstruction: the sample's refined rows act as gallery and its
  /// neutral patterns as queries, through the shared capture weights.
  TensorPtr<S> reconstruct_same(Tape<S>& tape, const SampleForward<S>& sample) const {
    return kcm_capture(tape, sample.refined, sample.neutral.patterns, kcm_).out;
  }

  /// Cross-modality reconstruction over the row-concatenation of the refined
  /// maps of same-identity opposite-modality samples. Returns null when the
  /// gallery is empty (the caller then omits the alignment term).
  TensorPtr<S> reconstruct_cross(Tape<S>& tape, const SampleForward<S>& sample,
                                 const std::vector<const SampleForward<S>*>& cross_gallery) const {
    if (cross_gallery.empty()) return nullptr;
    std::vector<TensorPtr<S>> parts;
    parts.reserve(cross_gallery.size());
    for (const auto* other : cross_gallery) parts.push_back(other->refined);
    auto gallery = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);
    return kcm_capture(tape, gallery, sample.neutral.patterns, kcm_).out;
  }

  /// Whole-batch forward. With the cycle stage enabled, each sample gets an
  /// own-map reconstruction and, when the batch provides same-identity
  /// opposite-modality samples, a cross-modality one.
  BatchForward<S> forward_batch(Tape<S>& tape, const std::vector<BatchInput<S>>& inputs,
                                bool with_cycle) const {
    BatchForward<S> out;
    out.samples.reserve(inputs.size());
    for (const auto& in : inputs)
      out.samples.push_back(forward_sample(tape, in.raw_rows, in.modality, in.identity));

    if (with_cycle && variant_ == Variant::full) {
      for (auto& s : out.samples) {
        s.recon_same = reconstruct_same(tape, s);
        std::vector<const SampleForward<S>*> gallery;
        for (const auto& other : out.samples)
          if (other.identity == s.identity && other.modality != s.modality)
            gallery.push_back(&other);
        s.recon_cross = reconstruct_cross(tape, s, gallery);
      }
    }

    std::vector<TensorPtr<S>> rows;
    rows.reserve(out.samples.size());
    for (const auto& s : out.samples) rows.push_back(s.embedding);
    out.batch_embeddings = tape.concat_rows(rows);
    return out;
  }

  /// Assembles the objective components for one batch. Terms that do not
  /// apply to the variant (or lack inputs) are left null and weigh zero.
  LossTerms<S> batch_losses(Tape<S>& tape, const BatchForward<S>& batch,
                            const LossWeights<S>& weights) {
    LossTerms<S> terms;
    const std::size_t b = batch.samples.size();
    std::vector<std::size_t> labels(b);
    std::vector<int> labels_i(b);
    for (std::size_t i = 0; i < b; ++i) {
      if (batch.samples[i].identity < 0 ||
          std::size_t(batch.samples[i].identity) >= dims_.num_classes)
        throw ContractError("batch_losses: label out of range");
      labels[i] = std::size_t(batch.samples[i].identity);
      labels_i[i] = batch.samples[i].identity;
    }

    terms.id = loss_id(tape, batch.batch_embeddings, labels, classifier_);
    if (variant_ == Variant::baseline) return terms;

    terms.metric = loss_metric(tape, batch.batch_embeddings, labels_i, weights.margin);

    TensorPtr<S> sep_sum;
    for (const auto& s : batch.samples) {
      auto one = loss_sep(tape, s.neutral.patterns);
      sep_sum = sep_sum ? tape.add(sep_sum, one) : one;
    }
    terms.sep = tape.scale(sep_sum, S(1) / S(b));

    std::vector<std::size_t> visible_rows, infrared_rows;
    for (std::size_t i = 0; i < b; ++i)
      (batch.samples[i].modality == Modality::visible ? visible_rows : infrared_rows).push_back(i);
    if (!visible_rows.empty() && !infrared_rows.empty()) {
      auto vis = tape.select_rows(batch.batch_embeddings, visible_rows);
      auto inf = tape.select_rows(batch.batch_embeddings, infrared_rows);
      terms.mmd = loss_mmd_adaptive(tape, vis, inf);
    }

    if (variant_ == Variant::full) {
      terms.rec = direction_mean(tape, batch, /*cross=*/false);
      terms.aln = direction_mean(tape, batch, /*cross=*/true);
    }
    return terms;
  }

 private:
  // Per-direction sample means of the reconstruction (or alignment) distances,
  // averaged over the modality directions present in the batch.
  TensorPtr<S> direction_mean(Tape<S>& tape, const BatchForward<S>& batch, bool cross) {
    TensorPtr<S> direction_sum;
    std::size_t directions = 0;
    for (Modality m : {Modality::visible, Modality::infrared}) {
      TensorPtr<S> sum;
      std::size_t count = 0;
      for (const auto& s : batch.samples) {
        if (s.modality != m) continue;
        const TensorPtr<S>& recon = cross ? s.recon_cross : s.recon_same;
        if (!recon) continue;
        auto one = cross ? loss_aln(tape, recon, s.relevant) : loss_rec(tape, recon, s.relevant);
        sum = sum ? tape.add(sum, one) : one;
        ++count;
      }
      if (!count) continue;
      auto mean = tape.scale(sum, S(1) / S(count));
      direction_sum = direction_sum ? tape.add(direction_sum, mean) : mean;
      ++directions;
    }
    if (!directions) return nullptr;
    return tape.scale(direction_sum, S(1) / S(directions));
  }

  ModelDims dims_;
  Variant variant_;
  ParameterStore<S> store_;
  StubBackbone<S> backbone_;
  KcmParams<S> kcm_;
  PseudoQueries<S> queries_;
  DmmParams<S> dmm_;
  Classifier<S> classifier_;
};

}  // namespace cytr
