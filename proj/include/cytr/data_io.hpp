#pragma once

// Dataset contract and desk-scale data machinery: the manifest CSV, a
// synthetic two-modality generator, the stub backbone that projects raw maps
// into feature space, and the identity-balanced two-modality batch sampler.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cytr/param_store.hpp"
#include "cytr/rng.hpp"
#include "cytr/tensor.hpp"
#include "cytr/tensor_io.hpp"

namespace cytr {

enum class Modality { visible, infrared };
enum class Split { train, query, gallery };

inline std::string to_string(Modality m) { return m == Modality::visible ? "visible" : "infrared"; }
inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    default: return "gallery";
  }
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "visible") return Modality::visible;
  if (s == "infrared") return Modality::infrared;
  throw ContractError("unknown modality tag: " + s);
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw ContractError("unknown split tag: " + s);
}

struct SampleRecord {
  std::string sample_id;
  int identity = 0;
  Modality modality = Modality::visible;
  std::string path;  // relative to the data root
  Split split = Split::train;
};

/// Dataset manifest. The CSV layout is fixed:
/// header "sample_id,identity,modality,path,split", one record per line.
struct Manifest {
  std::vector<SampleRecord> records;

  static constexpr const char* kHeader = "sample_id,identity,modality,path,split";

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }

  int num_identities() const {
    int top = -1;
    for (const auto& r : records) top = std::max(top, r.identity);
    return top + 1;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << kHeader << "\n";
    for (const auto& r : records)
      out << r.sample_id << ',' << r.identity << ',' << to_string(r.modality) << ',' << r.path
          << ',' << to_string(r.split) << "\n";
    if (!out) throw IoError("manifest write failed: " + path);
  }

  static Manifest read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest: " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty manifest: " + path);
    if (line != kHeader) throw IoError("bad manifest header in " + path + ": " + line);
    Manifest m;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> fields;
      std::stringstream ss(line);
      std::string field;
      while (std::getline(ss, field, ',')) fields.push_back(field);
      if (fields.size() != 5) throw IoError("bad manifest row in " + path + ": " + line);
      SampleRecord r;
      r.sample_id = fields[0];
      r.identity = std::stoi(fields[1]);
      r.modality = modality_from_string(fields[2]);
      r.path = fields[3];
      r.split = split_from_string(fields[4]);
      m.records.push_back(std::move(r));
    }
    return m;
  }
};

/// Parameters of the synthetic two-modality dataset. Each raw sample is an
/// identity vector plus a per-modality offset, replicated over the spatial
/// grid with a fixed per-position signature and per-position noise. The
/// position signatures are shared by the whole dataset (they mimic the
/// part-structure of a feature map and give attention something to select
/// over); a large offset-to-signal ratio manufactures the cross-modality gap
/// that training has to close.
struct SyntheticSpec {
  int num_identities = 32;
  int train_per_identity = 25;  // per modality
  int query_per_identity = 3;   // infrared, held out
  int gallery_per_identity = 3; // visible, held out
  std::size_t map_h = 6;
  std::size_t map_w = 3;
  std::size_t raw_dim = 16;
  double identity_scale = 0.5;
  double modality_offset_scale = 2.25;
  double position_scale = 0.5;
  double noise_scale = 0.25;
  std::uint64_t seed = 42;
};

/// Writes the tensor files and manifest under `data_root` and returns the
/// manifest. Generation is fully deterministic under the spec seed.
inline Manifest synth_generate(const SyntheticSpec& spec, const std::string& data_root) {
  namespace fs = std::filesystem;
  if (spec.num_identities <= 0) throw ContractError("synth: need at least one identity");
  if (spec.identity_scale < 0 || spec.modality_offset_scale < 0 || spec.noise_scale < 0 ||
      spec.position_scale < 0)
    throw ContractError("synth: scales must be nonnegative");
  std::error_code ec;
  fs::create_directories(fs::path(data_root) / "tensors", ec);
  if (ec) throw IoError("cannot create data root: " + data_root);

  Rng rng(spec.seed);
  const std::size_t d = spec.raw_dim;
  const std::size_t positions = spec.map_h * spec.map_w;

  std::vector<std::vector<double>> identity_vec(spec.num_identities, std::vector<double>(d));
  for (auto& v : identity_vec)
    for (auto& x : v) x = rng.gaussian(0.0, spec.identity_scale);
  // The modality offset is one shared vector per modality (this is what makes
  // raw cross-modal matching fail) plus a half-scale per-position component,
  // which keeps the gap from being removable by a single linear projection.
  std::vector<std::vector<double>> offset_visible(positions, std::vector<double>(d));
  std::vector<std::vector<double>> offset_infrared(positions, std::vector<double>(d));
  for (auto* offsets : {&offset_visible, &offset_infrared}) {
    std::vector<double> base(d);
    for (auto& x : base) x = rng.gaussian(0.0, spec.modality_offset_scale);
    for (auto& v : *offsets)
      for (std::size_t j = 0; j < d; ++j)
        v[j] = base[j] + rng.gaussian(0.0, 0.5 * spec.modality_offset_scale);
  }
  std::vector<std::vector<double>> position_vec(positions, std::vector<double>(d));
  for (auto& v : position_vec)
    for (auto& x : v) x = rng.gaussian(0.0, spec.position_scale);

  Manifest manifest;
  char buf[64];
  const auto emit = [&](int identity, Modality m, Split split, int index) {
    std::snprintf(buf, sizeof(buf), "id%04d_%c_%s%03d", identity,
                  m == Modality::visible ? 'v' : 'r', to_string(split).substr(0, 1).c_str(), index);
    const std::string sample_id = buf;
    const std::vector<std::vector<double>>& offset =
        m == Modality::visible ? offset_visible : offset_infrared;
    std::vector<float> values(positions * d);
    for (std::size_t pos = 0; pos < positions; ++pos)
      for (std::size_t j = 0; j < d; ++j)
        values[pos * d + j] = static_cast<float>(identity_vec[identity][j] + offset[pos][j] +
                                                 position_vec[pos][j] +
                                                 rng.gaussian(0.0, spec.noise_scale));
    Tensor<f32> t({spec.map_h, spec.map_w, d}, std::move(values));
    const std::string rel = "tensors/" + sample_id + ".cyt";
    save_tensor((fs::path(data_root) / rel).string(), t);
    manifest.records.push_back({sample_id, identity, m, rel, split});
  };

  for (int y = 0; y < spec.num_identities; ++y) {
    for (int i = 0; i < spec.train_per_identity; ++i) emit(y, Modality::visible, Split::train, i);
    for (int i = 0; i < spec.train_per_identity; ++i) emit(y, Modality::infrared, Split::train, i);
    for (int i = 0; i < spec.query_per_identity; ++i) emit(y, Modality::infrared, Split::query, i);
    for (int i = 0; i < spec.gallery_per_identity; ++i)
      emit(y, Modality::visible, Split::gallery, i);
  }
  manifest.write_csv((fs::path(data_root) / "manifest.csv").string());
  return manifest;
}

/// Loads a sample tensor and reshapes the (h x w x d) map to (h*w x d) rows.
template <typename S>
TensorPtr<S> load_feature_rows(const std::string& data_root, const SampleRecord& rec) {
  namespace fs = std::filesystem;
  Tensor<S> t = load_tensor<S>((fs::path(data_root) / rec.path).string());
  Shape rows_shape;
  if (t.rank() == 3)
    rows_shape = {t.shape[0] * t.shape[1], t.shape[2]};
  else if (t.rank() == 2)
    rows_shape = t.shape;
  else
    throw DimensionError("sample tensor must be rank 2 or 3: " + rec.path);
  return make_tensor<S>(rows_shape, std::move(t.values));
}

namespace ids {
inline constexpr const char* kBackboneWeight = "backbone.w";
inline constexpr const char* kBackboneBias = "backbone.b";
}  // namespace ids

/// Minimal trainable feature extractor: a shared linear projection and tanh,
/// applied per spatial position.
template <typename S>
struct StubBackbone {
  TensorPtr<S> weight;  // d_raw x d
  TensorPtr<S> bias;    // 1 x d

  StubBackbone() = default;

  StubBackbone(ParameterStore<S>& store, std::size_t raw_dim, std::size_t feature_dim, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(raw_dim));
    weight = store.get_or_register(ids::kBackboneWeight, {raw_dim, feature_dim},
                                   [&rng, bound](std::vector<S>& v) {
                                     for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
                                   });
    bias = store.get_or_register(ids::kBackboneBias, {1, feature_dim}, nullptr);
  }

  TensorPtr<S> forward(Tape<S>& tape, const TensorPtr<S>& raw_rows) const {
    if (raw_rows->cols() != weight->rows())
      throw DimensionError("backbone: raw feature dim mismatch");
    return tape.tanh(tape.add_rowvec(tape.matmul(raw_rows, weight), bias));
  }
};

/// Identity-balanced batch sampler: every batch holds P distinct identities
/// with exactly K_v visible and K_r infrared samples each. Identity and
/// per-modality queues are reshuffled per pass and consumed without
/// replacement, so an epoch covers every train sample once whenever the
/// counts divide evenly. An identity with fewer than K samples in a modality
/// is resampled with replacement (warned once).
class PkSampler {
 public:
  PkSampler(const Manifest& manifest, std::size_t num_identities_per_batch,
            std::size_t visible_per_identity, std::size_t infrared_per_identity,
            std::uint64_t seed)
      : p_(num_identities_per_batch),
        kv_(visible_per_identity),
        kr_(infrared_per_identity),
        rng_(seed) {
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const auto& r = manifest.records[i];
      if (r.split != Split::train) continue;
      auto& pool = pools_[r.identity];
      (r.modality == Modality::visible ? pool.visible : pool.infrared).push_back(i);
      ++total_train_;
    }
    if (pools_.size() < p_)
      throw ContractError("sampler: fewer identities than requested per batch");
    for (auto& [identity, pool] : pools_) {
      identities_.push_back(identity);
      std::sort(pool.visible.begin(), pool.visible.end());
      std::sort(pool.infrared.begin(), pool.infrared.end());
      if (pool.visible.empty() || pool.infrared.empty())
        throw ContractError("sampler: identity " + std::to_string(identity) +
                            " is missing one modality entirely");
    }
    std::sort(identities_.begin(), identities_.end());
  }

  std::size_t batch_size() const { return p_ * (kv_ + kr_); }

  /// Number of batches that covers every train sample once (when divisible).
  std::size_t batches_per_epoch() const {
    return std::max<std::size_t>(1, total_train_ / batch_size());
  }

  /// Indices into the manifest record list for the next batch.
  std::vector<std::size_t> next_batch() {
    std::vector<int> chosen, deferred;
    while (chosen.size() < p_) {
      if (identity_queue_.empty()) {
        identity_queue_ = identities_;
        rng_.shuffle(identity_queue_);
      }
      const int id = identity_queue_.back();
      identity_queue_.pop_back();
      if (std::find(chosen.begin(), chosen.end(), id) != chosen.end())
        deferred.push_back(id);  // refill boundary; keep the identity for the next batch
      else
        chosen.push_back(id);
    }
    for (int id : deferred) identity_queue_.push_back(id);

    std::vector<std::size_t> batch;
    batch.reserve(batch_size());
    for (int identity : chosen) {
      auto& pool = pools_.at(identity);
      draw(pool.visible, pool.visible_queue, kv_, identity, Modality::visible, batch);
      draw(pool.infrared, pool.infrared_queue, kr_, identity, Modality::infrared, batch);
    }
    return batch;
  }

 private:
  struct Pool {
    std::vector<std::size_t> visible, infrared;               // all sample indices
    std::vector<std::size_t> visible_queue, infrared_queue;   // epoch remainder
  };

  void draw(const std::vector<std::size_t>& all, std::vector<std::size_t>& queue, std::size_t k,
            int identity, Modality m, std::vector<std::size_t>& batch) {
    if (all.size() < k) {
      warn_insufficient(identity, m, all.size(), k);
      for (std::size_t i = 0; i < k; ++i)
        batch.push_back(all[static_cast<std::size_t>(rng_.below(all.size()))]);
      return;
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (queue.empty()) {
        queue = all;
        rng_.shuffle(queue);
      }
      batch.push_back(queue.back());
      queue.pop_back();
    }
  }

  void warn_insufficient(int identity, Modality m, std::size_t have, std::size_t need) {
    const auto key = std::make_pair(identity, static_cast<int>(m));
    if (warned_.count(key)) return;
    warned_.insert(key);
    std::cerr << "warning: identity " << identity << " has only " << have << " " << to_string(m)
              << " train samples, need " << need << "; resampling with replacement\n";
  }

  std::size_t p_, kv_, kr_;
  Rng rng_;
  std::map<int, Pool> pools_;
  std::vector<int> identities_;
  std::vector<int> identity_queue_;
  std::set<std::pair<int, int>> warned_;
  std::size_t total_train_ = 0;
};

}  // namespace cytr
