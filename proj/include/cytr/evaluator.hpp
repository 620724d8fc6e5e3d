#pragma once

// Cross-modal retrieval evaluation: embedding extraction, similarity ranking
// with a deterministic sample-id tie-break, cumulative matching (rank-1/10/20)
// and mean average precision, under multi-shot (full gallery) and single-shot
// (one gallery sample per identity, averaged over draws) protocols.
//
// cmc_map_oracle is a deliberately separate naive implementation used to
// cross-check cmc_map; the two share no ranking code.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cytr/data_io.hpp"
#include "cytr/pipeline.hpp"
#include "cytr/tensor.hpp"

namespace cytr {

enum class Metric { cosine, euclidean };

inline std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

inline Metric metric_from_string(const std::string& s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "euclidean") return Metric::euclidean;
  throw ConfigError("unknown metric: " + s);
}

/// Flattened retrieval rows with their identity/modality/sample-id columns.
struct EmbeddingSet {
  std::vector<std::vector<double>> rows;
  std::vector<std::string> sample_ids;
  std::vector<int> identities;
  std::vector<Modality> modalities;

  std::size_t size() const { return rows.size(); }

  EmbeddingSet subset(const std::vector<std::size_t>& indices) const {
    EmbeddingSet out;
    for (std::size_t i : indices) {
      out.rows.push_back(rows[i]);
      out.sample_ids.push_back(sample_ids[i]);
      out.identities.push_back(identities[i]);
      out.modalities.push_back(modalities[i]);
    }
    return out;
  }
};

struct EvalReport {
  double rank1 = 0, rank10 = 0, rank20 = 0, map = 0;  // percent
  std::string protocol = "multi-shot";
  std::size_t gallery_draws = 1;
  std::size_t num_queries = 0;
  std::size_t num_excluded = 0;  // query identities absent from the gallery
};

/// Deterministic embedding extraction for one manifest split. No cycle stage
/// runs at test time; the classifier stays in running-statistics mode.
template <typename S>
EmbeddingSet embed(const Model<S>& model, const Manifest& manifest, Split split,
                   const std::string& data_root) {
  EmbeddingSet out;
  for (std::size_t i : manifest.split_indices(split)) {
    const auto& rec = manifest.records[i];
    Tape<S> tape;
    auto raw = load_feature_rows<S>(data_root, rec);
    auto fwd = model.forward_sample(tape, raw, rec.modality, rec.identity);
    std::vector<double> row(fwd.embedding->size());
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = static_cast<double>(fwd.embedding->values[j]);
    out.rows.push_back(std::move(row));
    out.sample_ids.push_back(rec.sample_id);
    out.identities.push_back(rec.identity);
    out.modalities.push_back(rec.modality);
  }
  if (out.rows.empty()) throw ContractError("embed: split " + to_string(split) + " is empty");
  return out;
}

namespace detail {

inline std::vector<double> l2_normalized(const std::vector<double>& v) {
  double ssq = 0;
  for (double x : v) ssq += x * x;
  const double denom = std::max(std::sqrt(ssq), 1e-12);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / denom;
  return out;
}

inline double similarity(const std::vector<double>& a, const std::vector<double>& b,
                         Metric metric) {
  if (metric == Metric::cosine) {
    double dot = 0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot;
  }
  double ssq = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    ssq += diff * diff;
  }
  return -std::sqrt(ssq);
}

}  // namespace detail

/// Ranks the gallery per query by descending similarity (ascending sample_id
/// on ties) and accumulates CMC at ranks 1/10/20 plus mean average precision.
/// Queries whose identity is absent from the gallery are excluded and counted.
inline EvalReport cmc_map(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                          Metric metric = Metric::cosine) {
  if (queries.size() == 0 || gallery.size() == 0)
    throw ContractError("cmc_map: empty query or gallery set");
  for (std::size_t q = 0; q < queries.size(); ++q)
    for (std::size_t g = 0; g < gallery.size(); ++g)
      if (queries.modalities[q] == gallery.modalities[g])
        throw ContractError("cmc_map: query and gallery modalities must be disjoint");

  std::vector<std::vector<double>> qrows = queries.rows, grows = gallery.rows;
  if (metric == Metric::cosine) {
    for (auto& r : qrows) r = detail::l2_normalized(r);
    for (auto& r : grows) r = detail::l2_normalized(r);
  }
  std::set<int> gallery_identities(gallery.identities.begin(), gallery.identities.end());

  EvalReport report;
  report.protocol = "multi-shot";
  double cmc1 = 0, cmc10 = 0, cmc20 = 0, ap_sum = 0;
  std::size_t counted = 0;

  std::vector<std::size_t> order(gallery.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (!gallery_identities.count(queries.identities[q])) {
      ++report.num_excluded;
      std::cerr << "warning: query " << queries.sample_ids[q]
                << " has no same-identity gallery entry; excluded\n";
      continue;
    }
    std::vector<double> sims(gallery.size());
    for (std::size_t g = 0; g < gallery.size(); ++g)
      sims[g] = detail::similarity(qrows[q], grows[g], metric);
    for (std::size_t g = 0; g < gallery.size(); ++g) order[g] = g;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sims[a] != sims[b]) return sims[a] > sims[b];
      return gallery.sample_ids[a] < gallery.sample_ids[b];
    });

    std::size_t first_correct = 0, num_relevant = 0;
    double precision_sum = 0;
    bool seen_correct = false;
    for (std::size_t rank = 1; rank <= order.size(); ++rank) {
      if (gallery.identities[order[rank - 1]] == queries.identities[q]) {
        ++num_relevant;
        precision_sum += double(num_relevant) / double(rank);
        if (!seen_correct) {
          first_correct = rank;
          seen_correct = true;
        }
      }
    }
    cmc1 += (first_correct <= 1);
    cmc10 += (first_correct <= 10);
    cmc20 += (first_correct <= 20);
    ap_sum += precision_sum / double(num_relevant);
    ++counted;
  }
  if (!counted) throw ContractError("cmc_map: every query was excluded");
  report.num_queries = counted;
  report.rank1 = 100.0 * cmc1 / double(counted);
  report.rank10 = 100.0 * cmc10 / double(counted);
  report.rank20 = 100.0 * cmc20 / double(counted);
  report.map = 100.0 * ap_sum / double(counted);
  return report;
}

/// Independent naive evaluator: builds one fully sorted candidate table per
/// query and walks it. Must agree with cmc_map exactly, including under the
/// sample_id tie-break.
inline EvalReport cmc_map_oracle(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                 Metric metric = Metric::cosine) {
  struct Candidate {
    double sim;
    std::string sample_id;
    int identity;
  };

  EvalReport report;
  report.protocol = "multi-shot";
  double cmc1 = 0, cmc10 = 0, cmc20 = 0, ap_sum = 0;
  std::size_t counted = 0;

  for (std::size_t q = 0; q < queries.size(); ++q) {
    bool has_match = false;
    for (int id : gallery.identities) has_match |= (id == queries.identities[q]);
    if (!has_match) {
      ++report.num_excluded;
      continue;
    }

    std::vector<Candidate> table;
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      double sim;
      if (metric == Metric::cosine) {
        double dot = 0, qn = 0, gn = 0;
        for (std::size_t c = 0; c < queries.rows[q].size(); ++c) {
          dot += queries.rows[q][c] * gallery.rows[g][c];
          qn += queries.rows[q][c] * queries.rows[q][c];
          gn += gallery.rows[g][c] * gallery.rows[g][c];
        }
        sim = (dot / std::max(std::sqrt(qn), 1e-12)) / std::max(std::sqrt(gn), 1e-12);
      } else {
        double ssq = 0;
        for (std::size_t c = 0; c < queries.rows[q].size(); ++c) {
          const double diff = queries.rows[q][c] - gallery.rows[g][c];
          ssq += diff * diff;
        }
        sim = -std::sqrt(ssq);
      }
      table.push_back({sim, gallery.sample_ids[g], gallery.identities[g]});
    }
    std::stable_sort(table.begin(), table.end(), [](const Candidate& a, const Candidate& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      return a.sample_id < b.sample_id;
    });

    std::size_t num_relevant = 0, first = 0;
    double precision_sum = 0;
    for (std::size_t rank = 1; rank <= table.size(); ++rank) {
      if (table[rank - 1].identity == queries.identities[q]) {
        ++num_relevant;
        precision_sum += double(num_relevant) / double(rank);
        if (first == 0) first = rank;
      }
    }
    cmc1 += (first >= 1 && first <= 1);
    cmc10 += (first >= 1 && first <= 10);
    cmc20 += (first >= 1 && first <= 20);
    ap_sum += precision_sum / double(num_relevant);
    ++counted;
  }
  if (!counted) throw ContractError("cmc_map_oracle: every query was excluded");
  report.num_queries = counted;
  report.rank1 = 100.0 * cmc1 / double(counted);
  report.rank10 = 100.0 * cmc10 / double(counted);
  report.rank20 = 100.0 * cmc20 / double(counted);
  report.map = 100.0 * ap_sum / double(counted);
  return report;
}

/// One gallery sample per identity, uniformly drawn.
inline std::vector<std::size_t> single_shot_gallery(const EmbeddingSet& gallery, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t g = 0; g < gallery.size(); ++g) by_identity[gallery.identities[g]].push_back(g);
  std::vector<std::size_t> chosen;
  for (const auto& [identity, members] : by_identity)
    chosen.push_back(members[static_cast<std::size_t>(rng.below(members.size()))]);
  return chosen;
}

/// Metrics averaged over `draws` random single-shot galleries.
inline EvalReport single_shot_eval(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                   std::size_t draws, std::uint64_t seed,
                                   Metric metric = Metric::cosine) {
  if (draws == 0) throw ContractError("single_shot_eval: at least one draw required");
  Rng rng(seed);
  EvalReport avg;
  avg.protocol = "single-shot";
  avg.gallery_draws = draws;
  for (std::size_t d = 0; d < draws; ++d) {
    EvalReport one = cmc_map(queries, gallery.subset(single_shot_gallery(gallery, rng)), metric);
    avg.rank1 += one.rank1 / double(draws);
    avg.rank10 += one.rank10 / double(draws);
    avg.rank20 += one.rank20 / double(draws);
    avg.map += one.map / double(draws);
    avg.num_queries = one.num_queries;
    avg.num_excluded = one.num_excluded;
  }
  return avg;
}

inline std::string format_report(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%-12s  draws=%-3zu  queries=%-5zu excluded=%-3zu  "
                "Rank-1 %6.2f  Rank-10 %6.2f  Rank-20 %6.2f  mAP %6.2f",
                r.protocol.c_str(), r.gallery_draws, r.num_queries, r.num_excluded, r.rank1,
                r.rank10, r.rank20, r.map);
  return buf;
}

inline void write_report_csv(const std::string& path, const std::vector<EvalReport>& reports) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report: " + path);
  out << "protocol,gallery_draws,num_queries,num_excluded,rank1,rank10,rank20,mAP\n";
  char buf[64];
  for (const auto& r : reports) {
    out << r.protocol << ',' << r.gallery_draws << ',' << r.num_queries << ',' << r.num_excluded;
    for (double v : {r.rank1, r.rank10, r.rank20, r.map}) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

/// CSV export of an embedding set: sample_id, identity, modality, then the
/// flattened feature columns.
inline void export_embeddings_csv(const std::string& path, const EmbeddingSet& set) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embeddings: " + path);
  out << "sample_id,identity,modality";
  if (!set.rows.empty())
    for (std::size_t c = 0; c < set.rows[0].size(); ++c) out << ",e" << c;
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < set.size(); ++i) {
    out << set.sample_ids[i] << ',' << set.identities[i] << ',' << to_string(set.modalities[i]);
    for (double v : set.rows[i]) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("embedding export failed: " + path);
}

}  // namespace cytr
