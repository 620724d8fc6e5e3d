#pragma once

// Optimization loop: Adam with bias correction, a milestone learning-rate
// schedule, per-step loss logging, and checkpointing of every parameter plus
// the classifier running statistics.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cytr/data_io.hpp"
#include "cytr/param_store.hpp"
#include "cytr/pipeline.hpp"
#include "cytr/tensor.hpp"
#include "cytr/tensor_io.hpp"

namespace cytr {

/// Bias-corrected Adam over a parameter store. Moment buffers mirror the
/// parameter shapes; parameters with an empty gradient slot see a zero
/// gradient (their moments decay, values stay put). Gradients are zeroed
/// after each step.
template <typename S>
class Adam {
 public:
  explicit Adam(S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::size_t step_count() const { return t_; }

  void step(ParameterStore<S>& store, S lr) {
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), double(t_)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), double(t_)));
    for (const auto& id : store.ids()) {
      TensorPtr<S> p = store.get(id);
      auto& mom = moments_[id];
      if (mom.m.size() != p->size()) {
        mom.m.assign(p->size(), S(0));
        mom.v.assign(p->size(), S(0));
      }
      const bool has_grad = !p->grad.empty();
      for (std::size_t i = 0; i < p->size(); ++i) {
        const S g = has_grad ? p->grad[i] : S(0);
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("non-finite gradient in parameter " + id);
        mom.m[i] = beta1_ * mom.m[i] + (S(1) - beta1_) * g;
        mom.v[i] = beta2_ * mom.v[i] + (S(1) - beta2_) * g * g;
        const S m_hat = mom.m[i] / bc1;
        const S v_hat = mom.v[i] / bc2;
        p->values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
      }
      p->zero_grad();
    }
  }

 private:
  struct Moments {
    std::vector<S> m, v;
  };
  S beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Piecewise-constant decay: lr(epoch) = base * decay^(#milestones <= epoch).
struct Schedule {
  std::vector<std::size_t> milestones{40, 70};
  double decay = 0.1;
  std::size_t total_epochs = 140;

  void validate() const {
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i && milestones[i] <= milestones[i - 1])
        throw ConfigError("schedule milestones must be strictly increasing");
      if (milestones[i] >= total_epochs)
        throw ConfigError("schedule milestones must precede the final epoch");
    }
  }
};

inline double lr_at_epoch(const Schedule& schedule, double base_lr, std::size_t epoch) {
  if (epoch >= schedule.total_epochs) throw ContractError("lr_at_epoch: epoch beyond schedule");
  double lr = base_lr;
  for (std::size_t m : schedule.milestones)
    if (m <= epoch) lr *= schedule.decay;
  return lr;
}

// ---------------------------------------------------------------------------
// Checkpoints: concatenated CYTR1 blobs plus a text index of
// "id<TAB>byte offset<TAB>shape" lines.
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const std::string& stem,
                     const std::vector<std::pair<std::string, Tensor<S>>>& entries) {
  std::ofstream tensors(stem + ".tensors", std::ios::binary);
  std::ofstream index(stem + ".index");
  if (!tensors || !index) throw IoError("cannot write checkpoint: " + stem);
  index << "# cytrans checkpoint v1\n";
  std::size_t offset = 0;
  for (const auto& [id, tensor] : entries) {
    const std::string blob = encode_cytr1(tensor);
    tensors.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    index << id << '\t' << offset << '\t' << shape_to_string(tensor.shape) << '\n';
    offset += blob.size();
  }
  if (!tensors || !index) throw IoError("checkpoint write failed: " + stem);
}

template <typename S>
std::map<std::string, Tensor<S>> load_checkpoint(const std::string& stem) {
  std::ifstream tensors(stem + ".tensors", std::ios::binary);
  std::ifstream index(stem + ".index");
  if (!tensors || !index) throw IoError("cannot read checkpoint: " + stem);
  const std::string blob((std::istreambuf_iterator<char>(tensors)),
                         std::istreambuf_iterator<char>());
  std::vector<std::pair<std::string, std::size_t>> slots;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::size_t tab1 = line.find('\t');
    const std::size_t tab2 = line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos)
      throw IoError("bad checkpoint index line: " + line);
    slots.push_back({line.substr(0, tab1), std::stoull(line.substr(tab1 + 1, tab2 - tab1 - 1))});
  }
  std::map<std::string, Tensor<S>> out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::size_t begin = slots[i].second;
    const std::size_t end = (i + 1 < slots.size()) ? slots[i + 1].second : blob.size();
    if (end > blob.size() || begin >= end) throw IoError("checkpoint offsets out of range: " + stem);
    out.emplace(slots[i].first, decode_cytr1<S>(blob.substr(begin, end - begin), stem));
  }
  return out;
}

namespace ids {
inline constexpr const char* kBnRunningMean = "classifier.bn.running_mean";
inline constexpr const char* kBnRunningVar = "classifier.bn.running_var";
}  // namespace ids

/// Everything a forward pass depends on: trainable parameters in registration
/// order plus the classifier running statistics.
template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> model_state(const Model<S>& model) {
  std::vector<std::pair<std::string, Tensor<S>>> entries;
  for (const auto& id : model.store().ids()) entries.push_back({id, *model.store().get(id)});
  const auto& cls = model.classifier();
  entries.push_back({ids::kBnRunningMean,
                     Tensor<S>({1, cls.running_mean().size()}, cls.running_mean())});
  entries.push_back({ids::kBnRunningVar,
                     Tensor<S>({1, cls.running_var().size()}, cls.running_var())});
  return entries;
}

template <typename S>
void load_model_state(Model<S>& model, const std::map<std::string, Tensor<S>>& entries) {
  for (const auto& id : model.store().ids()) {
    auto it = entries.find(id);
    if (it == entries.end()) throw IoError("checkpoint is missing parameter " + id);
    TensorPtr<S> p = model.store().get(id);
    if (it->second.shape != p->shape)
      throw DimensionError("checkpoint shape mismatch for " + id + ": expected " +
                           shape_to_string(p->shape) + ", found " +
                           shape_to_string(it->second.shape));
    p->values = it->second.values;
    p->zero_grad();
  }
  const auto mean_it = entries.find(ids::kBnRunningMean);
  const auto var_it = entries.find(ids::kBnRunningVar);
  if (mean_it == entries.end() || var_it == entries.end())
    throw IoError("checkpoint is missing classifier running statistics");
  if (mean_it->second.size() != model.classifier().running_mean().size())
    throw DimensionError("checkpoint running-stat size mismatch");
  model.classifier().running_mean() = mean_it->second.values;
  model.classifier().running_var() = var_it->second.values;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename S>
struct TrainOptions {
  std::size_t epochs = 140;
  std::size_t batch_identities = 8;
  std::size_t batch_visible = 4;
  std::size_t batch_infrared = 4;
  double base_lr = 3.5e-4;
  Schedule schedule;
  LossWeights<S> weights;
  std::size_t checkpoint_every = 0;  // epochs; 0 keeps only the final one
  std::uint64_t seed = 42;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

struct TrainResult {
  std::string checkpoint_stem;
  std::string loss_csv_path;
  std::size_t steps = 0;
};

namespace detail {

inline std::string format_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

template <typename S>
void clip_gradients(ParameterStore<S>& store, S max_norm) {
  double total = 0;
  for (const auto& id : store.ids()) {
    const TensorPtr<S> p = store.get(id);
    for (std::size_t i = 0; i < p->grad.size(); ++i)
      total += double(p->grad[i]) * double(p->grad[i]);
  }
  const double norm = std::sqrt(total);
  if (norm <= double(max_norm)) return;
  const S factor = static_cast<S>(double(max_norm) / norm);
  for (const auto& id : store.ids()) {
    TensorPtr<S> p = store.get(id);
    for (auto& g : p->grad) g *= factor;
  }
}

/// Runs the full loop: sample a balanced batch, forward with the cycle stage,
/// assemble the objective, backpropagate, Adam step, log one CSV row.
/// A non-finite loss or gradient aborts with the last written checkpoint
/// retained on disk.
template <typename S>
TrainResult train(Model<S>& model, const Manifest& manifest, const std::string& data_root,
                  const std::string& out_dir, const TrainOptions<S>& opts) {
  namespace fs = std::filesystem;
  opts.schedule.validate();
  if (opts.epochs > opts.schedule.total_epochs)
    throw ConfigError("train: epochs exceed the schedule length");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  // raw maps are small at desk scale; cache them up front
  std::map<std::size_t, TensorPtr<S>> raw_cache;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].split == Split::train)
      raw_cache[i] = load_feature_rows<S>(data_root, manifest.records[i]);

  Rng seeder(opts.seed);
  PkSampler sampler(manifest, opts.batch_identities, opts.batch_visible, opts.batch_infrared,
                    seeder.fork(1).next_u64());
  Adam<S> adam;

  TrainResult result;
  result.loss_csv_path = (fs::path(out_dir) / "loss.csv").string();
  result.checkpoint_stem = (fs::path(out_dir) / "checkpoint_final").string();
  std::ofstream log(result.loss_csv_path);
  if (!log) throw IoError("cannot write loss log: " + result.loss_csv_path);
  log << "step,L_id,L_me,L_sep,L_MMD,L_rec,L_aln,total,lr\n";

  const auto value_or_zero = [](const TensorPtr<S>& t) {
    return t ? static_cast<double>(t->values[0]) : 0.0;
  };

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const double lr = lr_at_epoch(opts.schedule, opts.base_lr, epoch);
    for (std::size_t b = 0; b < sampler.batches_per_epoch(); ++b) {
      std::vector<BatchInput<S>> inputs;
      for (std::size_t idx : sampler.next_batch()) {
        const auto& rec = manifest.records[idx];
        inputs.push_back({raw_cache.at(idx), rec.identity, rec.modality});
      }
      Tape<S> tape;
      auto batch = model.forward_batch(tape, inputs, /*with_cycle=*/true);
      auto terms = model.batch_losses(tape, batch, opts.weights);
      auto total = loss_total(tape, terms, opts.weights);
      tape.backward(total);
      if (opts.grad_clip > 0.0) clip_gradients(model.store(), static_cast<S>(opts.grad_clip));
      adam.step(model.store(), static_cast<S>(lr));

      log << step << ',' << detail::format_float(value_or_zero(terms.id)) << ','
          << detail::format_float(value_or_zero(terms.metric)) << ','
          << detail::format_float(value_or_zero(terms.sep)) << ','
          << detail::format_float(value_or_zero(terms.mmd)) << ','
          << detail::format_float(value_or_zero(terms.rec)) << ','
          << detail::format_float(value_or_zero(terms.aln)) << ','
          << detail::format_float(value_or_zero(total)) << ','
          << detail::format_float(lr) << '\n';
      ++step;
    }
    if (opts.checkpoint_every && (epoch + 1) % opts.checkpoint_every == 0) {
      const std::string stem =
          (fs::path(out_dir) / ("checkpoint_epoch" + std::to_string(epoch + 1))).string();
      save_checkpoint(stem, model_state(model));
    }
  }
  save_checkpoint(result.checkpoint_stem, model_state(model));
  result.steps = step;
  return result;
}

}  // namespace cytr
