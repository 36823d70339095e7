#pragma once

// Correspondence classifier with an editable attention mask.
//
// Pipeline: kNN over global descriptors picks N candidates; each candidate is
// re-scored by matching every attended query cell to its most similar
// candidate cell and summing the top-T matches; the top-K re-ranked
// candidates vote for the label; supports are the best re-ranked candidates
// of the winning label.

#include <algorithm>
#include <bitset>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corr_attn/dataset.hpp"
#include "corr_attn/error.hpp"
#include "corr_attn/vector_math.hpp"

namespace corr_attn {

inline constexpr std::size_t kMaxSupports = 5;

struct ClassifierConfig {
  std::size_t n_candidates = 50;  // N
  std::size_t pairs_per_candidate = 5;  // T
  std::size_t vote_pool = 20;  // K

  void validate() const {
    if (n_candidates < 1) throw Error(ErrorCode::InvalidParam, "N must be >= 1");
    if (pairs_per_candidate < 1 || pairs_per_candidate > static_cast<std::size_t>(kCells)) {
      throw Error(ErrorCode::InvalidParam, "T must lie in [1, 49]");
    }
    if (vote_pool < 1 || vote_pool > n_candidates) throw Error(ErrorCode::InvalidParam, "K must lie in [1, N]");
  }

  bool operator==(const ClassifierConfig&) const = default;
};

/// 7x7 grid of query cells the classifier may use; cell index = row * 7 + col.
class AttentionMask {
 public:
  AttentionMask() = default;

  static AttentionMask all() {
    AttentionMask m;
    m.bits_.set();
    return m;
  }
  static AttentionMask none() { return AttentionMask(); }

  static AttentionMask from_cells(std::initializer_list<int> cells) {
    AttentionMask m;
    for (int c : cells) m.set(c, true);
    return m;
  }

  /// Parses a 49-character string of '0'/'1', row-major.
  static AttentionMask from_bitstring(std::string_view s) {
    if (s.size() != static_cast<std::size_t>(kCells)) {
      throw Error(ErrorCode::BadRequest, "mask bitstring must have 49 characters, got " + std::to_string(s.size()));
    }
    AttentionMask m;
    for (int i = 0; i < kCells; ++i) {
      if (s[i] == '1') {
        m.bits_.set(i);
      } else if (s[i] != '0') {
        throw Error(ErrorCode::BadRequest, "mask bitstring may only contain '0' and '1'");
      }
    }
    return m;
  }

  static AttentionMask from_bools(std::span<const bool> cells) {
    if (cells.size() != static_cast<std::size_t>(kCells)) {
      throw Error(ErrorCode::BadRequest, "mask must have 49 cells, got " + std::to_string(cells.size()));
    }
    AttentionMask m;
    for (int i = 0; i < kCells; ++i) m.bits_.set(i, cells[i]);
    return m;
  }

  std::string to_bitstring() const {
    std::string s(kCells, '0');
    for (int i = 0; i < kCells; ++i) {
      if (bits_.test(i)) s[i] = '1';
    }
    return s;
  }

  std::vector<bool> to_bools() const {
    std::vector<bool> v(kCells);
    for (int i = 0; i < kCells; ++i) v[i] = bits_.test(i);
    return v;
  }

  bool test(int cell) const { return bits_.test(static_cast<std::size_t>(cell)); }
  void set(int cell, bool on) {
    if (cell < 0 || cell >= kCells) throw Error(ErrorCode::BadRequest, "cell index out of range");
    bits_.set(static_cast<std::size_t>(cell), on);
  }
  std::size_t count() const { return bits_.count(); }
  bool empty() const { return bits_.none(); }
  bool is_subset_of(const AttentionMask& o) const { return (bits_ & ~o.bits_).none(); }

  bool operator==(const AttentionMask&) const = default;

 private:
  std::bitset<kCells> bits_;
};

struct CorrespondencePair {
  int query_cell = 0;
  int candidate_cell = 0;
  double similarity = 0.0;

  bool operator==(const CorrespondencePair&) const = default;
};

struct Neighbor {
  std::size_t record = 0;  // position in the index
  double similarity = 0.0;

  bool operator==(const Neighbor&) const = default;
};

struct CandidateScore {
  std::size_t record = 0;
  std::string record_id;
  std::uint32_t label_id = 0;
  std::size_t knn_rank = 0;
  std::vector<CorrespondencePair> pairs;  // top-T, similarity descending
  double score = 0.0;

  bool operator==(const CandidateScore&) const = default;
};

struct Prediction {
  std::uint32_t label_id = 0;
  std::size_t vote_count = 0;
  double total_score = 0.0;  // summed score of the winning label's votes
  std::vector<CandidateScore> reranked;

  bool operator==(const Prediction&) const = default;
};

struct SupportExample {
  std::string record_id;
  std::string image_ref;
  std::uint32_t label_id = 0;
  std::size_t rerank_position = 0;
  std::vector<CorrespondencePair> pairs;

  bool operator==(const SupportExample&) const = default;
};

struct Explanation {
  std::uint32_t predicted_label_id = 0;
  std::vector<SupportExample> supports;

  bool operator==(const Explanation&) const = default;
};

struct Classification {
  Prediction prediction;
  Explanation explanation;

  bool operator==(const Classification&) const = default;
};

/// Query embeddings; shaped like a record but without identity.
struct QueryEmbedding {
  std::vector<float> global_vec;
  std::vector<float> patch_grid;

  static QueryEmbedding from_record(const EmbeddingRecord& r) { return {r.global_vec, r.patch_grid}; }

  std::size_t patch_dim() const { return patch_grid.size() / kCells; }
  std::span<const float> patch(int cell) const {
    const std::size_t dim = patch_dim();
    return std::span<const float>(patch_grid).subspan(static_cast<std::size_t>(cell) * dim, dim);
  }
};

/// The N records most similar to the query, best first; exact ties keep
/// canonical record order.
inline std::vector<Neighbor> knn_retrieve(const DatasetIndex& index, std::span<const float> query_global,
                                          std::size_t n) {
  if (index.empty()) throw Error(ErrorCode::EmptyIndex, "index has no records");
  if (query_global.size() != index.global_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query global vector has dimension " +
                                                  std::to_string(query_global.size()) + ", index uses " +
                                                  std::to_string(index.global_dim()));
  }
  if (n < 1) throw Error(ErrorCode::InvalidParam, "N must be >= 1");
  std::vector<Neighbor> all(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    all[i] = {i, dot(query_global, index[i].global_vec)};
  }
  const std::size_t keep = std::min(n, all.size());
  auto better = [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.record < b.record;
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
  all.resize(keep);
  return all;
}

/// One pair per attended query cell, matched to its most similar candidate
/// cell (lowest index on ties). Sorted by similarity descending, then by
/// query cell.
template <class QueryGrid, class CandidateGrid>
std::vector<CorrespondencePair> patch_pairs(const QueryGrid& query, const CandidateGrid& candidate,
                                            const AttentionMask& mask) {
  if (mask.empty()) throw Error(ErrorCode::EmptyMask, "attention mask selects no cells");
  if (query.patch_dim() != candidate.patch_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query and candidate patch dimensions differ");
  }
  std::vector<CorrespondencePair> pairs;
  pairs.reserve(mask.count());
  for (int q = 0; q < kCells; ++q) {
    if (!mask.test(q)) continue;
    const auto qv = query.patch(q);
    int best_cell = 0;
    double best = dot(qv, candidate.patch(0));
    for (int c = 1; c < kCells; ++c) {
      const double s = dot(qv, candidate.patch(c));
      if (s > best) {
        best = s;
        best_cell = c;
      }
    }
    pairs.push_back({q, best_cell, best});
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const CorrespondencePair& a, const CorrespondencePair& b) { return a.similarity > b.similarity; });
  return pairs;
}

/// Sum of the first min(T, |pairs|) similarities of a descending list.
inline double score_candidate(std::span<const CorrespondencePair> pairs, std::size_t t) {
  double sum = 0.0;
  const std::size_t n = std::min(t, pairs.size());
  for (std::size_t i = 0; i < n; ++i) sum += pairs[i].similarity;
  return sum;
}

inline std::vector<CandidateScore> rerank(const DatasetIndex& index, std::span<const Neighbor> candidates,
                                          const QueryEmbedding& query, const AttentionMask& mask,
                                          const ClassifierConfig& config) {
  if (mask.empty()) throw Error(ErrorCode::EmptyMask, "attention mask selects no cells");
  std::vector<CandidateScore> scored;
  scored.reserve(candidates.size());
  for (std::size_t rank = 0; rank < candidates.size(); ++rank) {
    const auto& rec = index[candidates[rank].record];
    auto pairs = patch_pairs(query, rec, mask);
    CandidateScore cs;
    cs.record = candidates[rank].record;
    cs.record_id = rec.id;
    cs.label_id = rec.label_id;
    cs.knn_rank = rank;
    cs.score = score_candidate(pairs, config.pairs_per_candidate);
    pairs.resize(std::min(pairs.size(), config.pairs_per_candidate));
    cs.pairs = std::move(pairs);
    scored.push_back(std::move(cs));
  }
  std::sort(scored.begin(), scored.end(), [](const CandidateScore& a, const CandidateScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.knn_rank != b.knn_rank) return a.knn_rank < b.knn_rank;
    return a.record < b.record;
  });
  return scored;
}

/// Majority vote over the top-K; ties go to the larger summed score, then to
/// the label whose best candidate ranks earliest.
inline Prediction predict(std::vector<CandidateScore> reranked, std::size_t k) {
  if (reranked.empty()) throw Error(ErrorCode::EmptyCandidates, "no candidates to vote");
  if (k < 1) throw Error(ErrorCode::InvalidParam, "K must be >= 1");
  struct Tally {
    std::uint32_t label;
    std::size_t votes;
    double score;
    std::size_t first;
  };
  std::vector<Tally> tallies;
  const std::size_t pool = std::min(k, reranked.size());
  for (std::size_t i = 0; i < pool; ++i) {
    const auto& c = reranked[i];
    auto it = std::find_if(tallies.begin(), tallies.end(), [&](const Tally& t) { return t.label == c.label_id; });
    if (it == tallies.end()) {
      tallies.push_back({c.label_id, 1, c.score, i});
    } else {
      ++it->votes;
      it->score += c.score;
    }
  }
  // tallies are in first-appearance order, so keeping the earliest on full ties
  // is just "replace only when strictly better".
  const Tally* best = &tallies.front();
  for (const auto& t : tallies) {
    if (t.votes > best->votes || (t.votes == best->votes && t.score > best->score)) best = &t;
  }
  Prediction p;
  p.label_id = best->label;
  p.vote_count = best->votes;
  p.total_score = best->score;
  p.reranked = std::move(reranked);
  return p;
}

inline Explanation explain(const Prediction& prediction, const DatasetIndex* index = nullptr) {
  Explanation e;
  e.predicted_label_id = prediction.label_id;
  for (std::size_t i = 0; i < prediction.reranked.size() && e.supports.size() < kMaxSupports; ++i) {
    const auto& c = prediction.reranked[i];
    if (c.label_id != prediction.label_id) continue;
    SupportExample s;
    s.record_id = c.record_id;
    s.label_id = c.label_id;
    s.rerank_position = i;
    s.pairs = c.pairs;
    if (index != nullptr && c.record < index->size()) s.image_ref = (*index)[c.record].image_ref;
    e.supports.push_back(std::move(s));
  }
  return e;
}

/// Normalizes query vectors and fills a missing global descriptor.
inline QueryEmbedding prepare_query(const DatasetIndex& index, QueryEmbedding query) {
  if (query.patch_grid.size() != kCells * index.patch_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query patch grid does not match the index's 49 x " +
                                                  std::to_string(index.patch_dim()));
  }
  for (int c = 0; c < kCells; ++c) {
    normalize_in_place(std::span<float>(query.patch_grid).subspan(c * index.patch_dim(), index.patch_dim()));
  }
  if (query.global_vec.empty()) query.global_vec = mean_pool_patches(query.patch_grid, index.patch_dim());
  if (query.global_vec.size() != index.global_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "query global vector does not match the index");
  }
  normalize_in_place(query.global_vec);
  return query;
}

/// Full pipeline. An omitted mask means every cell is attended.
inline Classification classify(const DatasetIndex& index, const QueryEmbedding& query,
                               const std::optional<AttentionMask>& mask, const ClassifierConfig& config) {
  config.validate();
  const AttentionMask m = mask.value_or(AttentionMask::all());
  if (m.empty()) throw Error(ErrorCode::EmptyMask, "attention mask selects no cells");
  const QueryEmbedding q = prepare_query(index, query);
  const auto neighbors = knn_retrieve(index, q.global_vec, config.n_candidates);
  Classification out;
  out.prediction = predict(rerank(index, neighbors, q, m, config), config.vote_pool);
  out.explanation = explain(out.prediction, &index);
  return out;
}

struct PoolDiagnostic {
  bool gt_in_pool = false;
  std::optional<std::size_t> best_gt_rank;  // 1-based position in the re-ranked list

  bool operator==(const PoolDiagnostic&) const = default;
};

/// Whether the ground-truth class is reachable at all from this candidate
/// pool. When it is not, no attention edit can make the prediction correct.
inline PoolDiagnostic pool_diagnostic(std::span<const CandidateScore> reranked, std::uint32_t ground_truth) {
  for (std::size_t i = 0; i < reranked.size(); ++i) {
    if (reranked[i].label_id == ground_truth) return {true, i + 1};
  }
  return {};
}

}  // namespace corr_attn
