#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "corr_attn/classifier.hpp"
#include "corr_attn/json_io.hpp"
#include "oracle/brute_force.hpp"
#include "test_support.hpp"

using namespace corr_attn;
using testing_support::random_grid;
using testing_support::random_index;
using testing_support::random_mask;
using testing_support::random_query;

namespace {

std::vector<float> basis(std::size_t dim, std::size_t axis) {
  std::vector<float> v(dim, 0.f);
  v[axis] = 1.f;
  return v;
}

struct Grid {
  std::vector<float> patch_grid;
  std::size_t dim;
  std::size_t patch_dim() const { return dim; }
  std::span<const float> patch(int c) const { return std::span<const float>(patch_grid).subspan(c * dim, dim); }
};

Grid grid_of_axes(std::size_t dim, std::size_t first_axis) {
  Grid g{{}, dim};
  for (int c = 0; c < kCells; ++c) {
    auto v = basis(dim, first_axis + c);
    g.patch_grid.insert(g.patch_grid.end(), v.begin(), v.end());
  }
  return g;
}

CandidateScore candidate(std::uint32_t label, double score, std::size_t rank) {
  CandidateScore c;
  c.record = rank;
  c.record_id = "r" + std::to_string(rank);
  c.label_id = label;
  c.knn_rank = rank;
  c.score = score;
  return c;
}

SynthParams synth11() {
  SynthParams p;
  p.n_records = 300;
  p.n_classes = 12;
  p.dim = 16;
  p.spread = 0.8;
  p.seed = 11;
  return p;
}

}  // namespace

// --- AttentionMask / config --------------------------------------------------

TEST(AttentionMask, BitstringRoundTrip) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto m = random_mask(rng, rng.uniform());
    EXPECT_EQ(AttentionMask::from_bitstring(m.to_bitstring()), m);
    const auto bools = m.to_bools();
    bool arr[kCells];
    std::copy(bools.begin(), bools.end(), arr);
    EXPECT_EQ(AttentionMask::from_bools(arr), m);
  }
  EXPECT_EQ(AttentionMask::all().count(), 49u);
  EXPECT_THROW(AttentionMask::from_bitstring("0101"), Error);
  EXPECT_THROW(AttentionMask::from_bitstring(std::string(48, '1') + "x"), Error);
}

TEST(ClassifierConfig, Validation) {
  EXPECT_NO_THROW(ClassifierConfig{}.validate());
  EXPECT_THROW((ClassifierConfig{50, 0, 20}).validate(), Error);
  EXPECT_THROW((ClassifierConfig{50, 50, 20}).validate(), Error);
  EXPECT_THROW((ClassifierConfig{10, 5, 20}).validate(), Error);
  EXPECT_THROW((ClassifierConfig{0, 5, 1}).validate(), Error);
}

// --- knn_retrieve --------------------------------------------------------------

TEST(Knn, ExactMatchRanksFirst) {
  Rng rng(2);
  const auto idx = random_index(rng, 40, 3, 8, 2);
  const auto hits = knn_retrieve(idx, idx[17].global_vec, 5);
  ASSERT_EQ(hits.size(), 5u);
  EXPECT_EQ(hits[0].record, 17u);
  EXPECT_NEAR(hits[0].similarity, 1.0, 1e-6);
}

TEST(Knn, OrthogonalTiesKeepFileOrder) {
  std::vector<EmbeddingRecord> recs(3);
  const char* ids[] = {"A", "B", "C"};
  Rng rng(0);
  for (int i = 0; i < 3; ++i) {
    recs[i].id = ids[i];
    recs[i].global_vec = basis(3, i);
    recs[i].patch_grid = random_grid(rng, 2);
  }
  const DatasetIndex idx({"only"}, recs, 3, 2);
  const auto hits = knn_retrieve(idx, basis(3, 0), 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(idx[hits[0].record].id, "A");
  EXPECT_EQ(idx[hits[1].record].id, "B");
  EXPECT_EQ(idx[hits[2].record].id, "C");
  EXPECT_EQ(hits[0].similarity, 1.0);
  EXPECT_EQ(hits[1].similarity, 0.0);
  EXPECT_EQ(hits[2].similarity, 0.0);
}

TEST(Knn, MatchesFullSortOracle) {
  Rng rng(11);
  const auto idx = random_index(rng, 1000, 20, 64, 2);
  for (int q = 0; q < 5; ++q) {
    const auto query = testing_support::random_unit(rng, 64);
    const auto hits = knn_retrieve(idx, query, 50);
    const auto ref = oracle::knn(idx, query, 50);
    ASSERT_EQ(hits.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(hits[i].record, ref[i]);
  }
}

TEST(Knn, ReturnsAllWhenIndexSmallerThanN) {
  Rng rng(3);
  const auto idx = random_index(rng, 7, 2, 4, 2);
  EXPECT_EQ(knn_retrieve(idx, idx[0].global_vec, 50).size(), 7u);
}

TEST(Knn, Errors) {
  const DatasetIndex empty({"a"}, {}, 4, 2);
  EXPECT_THROW(knn_retrieve(empty, basis(4, 0), 3), Error);
  Rng rng(3);
  const auto idx = random_index(rng, 5, 2, 4, 2);
  try {
    knn_retrieve(idx, basis(5, 0), 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}

// --- patch_pairs / score_candidate ----------------------------------------------

TEST(PatchPairs, SingleCellFindsItsTwin) {
  const std::size_t dim = 50;
  Grid query = grid_of_axes(dim, 1);
  Grid cand = grid_of_axes(dim, 1);
  // Query cell 10 and candidate cell 33 hold e0; every other candidate cell is
  // a distinct axis orthogonal to e0.
  std::fill_n(query.patch_grid.begin() + 10 * dim, dim, 0.f);
  query.patch_grid[10 * dim] = 1.f;
  std::fill_n(cand.patch_grid.begin() + 33 * dim, dim, 0.f);
  cand.patch_grid[33 * dim] = 1.f;
  const auto pairs = patch_pairs(query, cand, AttentionMask::from_cells({10}));
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0], (CorrespondencePair{10, 33, 1.0}));
}

TEST(PatchPairs, IdenticalGridsPairCellsWithThemselves) {
  const auto g = grid_of_axes(49, 0);
  const auto pairs = patch_pairs(g, g, AttentionMask::all());
  ASSERT_EQ(pairs.size(), 49u);
  for (int i = 0; i < kCells; ++i) EXPECT_EQ(pairs[i], (CorrespondencePair{i, i, 1.0}));
}

TEST(PatchPairs, ArgmaxTiesPickLowestCandidateCell) {
  Grid q{std::vector<float>(kCells * 2, 0.f), 2};
  Grid c{std::vector<float>(kCells * 2, 0.f), 2};
  for (int i = 0; i < kCells; ++i) {
    q.patch_grid[i * 2] = 1.f;
    c.patch_grid[i * 2] = 1.f;  // every candidate cell ties
  }
  const auto pairs = patch_pairs(q, c, AttentionMask::from_cells({4, 2}));
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0], (CorrespondencePair{2, 0, 1.0}));
  EXPECT_EQ(pairs[1], (CorrespondencePair{4, 0, 1.0}));
}

TEST(PatchPairs, MatchesExhaustiveSearch) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dim = 2 + rng.below(20);
    const Grid q{random_grid(rng, dim), dim};
    const Grid c{random_grid(rng, dim), dim};
    const auto mask = testing_support::random_mask_of_size(rng, 12);
    const auto got = patch_pairs(q, c, mask);
    const auto ref = oracle::pairs(q.patch_grid, c.patch_grid, dim, mask);
    ASSERT_EQ(got.size(), 12u);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_EQ(got[i].query_cell, ref[i].q);
      EXPECT_EQ(got[i].candidate_cell, ref[i].c);
      EXPECT_NEAR(got[i].similarity, ref[i].s, 1e-9);
    }
  }
}

TEST(PatchPairs, EmptyMaskRejected) {
  const auto g = grid_of_axes(49, 0);
  try {
    patch_pairs(g, g, AttentionMask::none());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyMask);
  }
}

TEST(ScoreCandidate, Examples) {
  std::vector<CorrespondencePair> pairs;
  for (double s : {1.0, 0.9, 0.8, 0.7, 0.6, 0.5}) pairs.push_back({0, 0, s});
  EXPECT_NEAR(score_candidate(pairs, 5), 4.0, 1e-12);
  pairs.resize(2);
  EXPECT_NEAR(score_candidate(pairs, 5), 1.9, 1e-12);
  EXPECT_EQ(score_candidate({}, 5), 0.0);
}

TEST(ScoreCandidate, MatchesSortThenSumOracle) {
  Rng rng(200);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> sims(1 + rng.below(49));
    for (auto& s : sims) s = 2.0 * rng.uniform() - 1.0;
    std::vector<CorrespondencePair> pairs;
    for (double s : sims) pairs.push_back({0, 0, s});
    std::sort(pairs.begin(), pairs.end(), [](auto& a, auto& b) { return a.similarity > b.similarity; });
    const std::size_t t = 1 + rng.below(10);
    EXPECT_NEAR(score_candidate(pairs, t), oracle::top_sum(sims, t), 1e-12);
  }
}

// --- rerank / predict / explain ---------------------------------------------------

TEST(Rerank, SingleCandidate) {
  Rng rng(7);
  const auto idx = random_index(rng, 1, 1, 4, 3);
  const auto q = random_query(rng, 4, 3);
  const auto hits = knn_retrieve(idx, q.global_vec, 50);
  const auto r = rerank(idx, hits, q, random_mask(rng), ClassifierConfig{});
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].record_id, "x0");
}

TEST(Rerank, IdenticalGridBeatsOrthogonalGrid) {
  const std::size_t dim = 98;
  const auto query_grid = grid_of_axes(dim, 0);
  std::vector<EmbeddingRecord> recs(2);
  recs[0] = {"A", 0, basis(dim, 0), grid_of_axes(dim, 49).patch_grid, ""};
  recs[1] = {"B", 1, basis(dim, 1), query_grid.patch_grid, ""};
  const DatasetIndex idx({"a", "b"}, recs, dim, dim);
  QueryEmbedding q{basis(dim, 0), query_grid.patch_grid};
  const auto hits = knn_retrieve(idx, q.global_vec, 50);
  ASSERT_EQ(idx[hits[0].record].id, "A");  // kNN puts A first
  for (const auto& mask : {AttentionMask::all(), AttentionMask::from_cells({3, 9, 40})}) {
    const auto r = rerank(idx, hits, q, mask, ClassifierConfig{});
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].record_id, "B");
    EXPECT_EQ(r[0].knn_rank, 1u);
    EXPECT_DOUBLE_EQ(r[0].score, static_cast<double>(std::min<std::size_t>(5, mask.count())));
    EXPECT_EQ(r[1].score, 0.0);
  }
}

TEST(Rerank, MatchesBruteForceOnSyntheticData) {
  const auto idx = synth_dataset(synth11());
  auto qp = synth11();
  qp.noise_seed = 1011;
  qp.n_records = 24;
  qp.id_prefix = "q";
  const auto queries = synth_dataset(qp);
  const ClassifierConfig cfg;
  for (const auto& rec : queries.records()) {
    const auto q = QueryEmbedding::from_record(rec);
    const auto hits = knn_retrieve(idx, q.global_vec, cfg.n_candidates);
    const auto got = rerank(idx, hits, q, AttentionMask::all(), cfg);
    std::vector<std::size_t> cands;
    for (const auto& h : hits) cands.push_back(h.record);
    const auto ref = oracle::rerank(idx, cands, q, AttentionMask::all(), cfg.pairs_per_candidate);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_EQ(got[i].record, ref[i].record);
      EXPECT_NEAR(got[i].score, ref[i].score, 1e-9);
    }
  }
}

TEST(Predict, TopOneWhenKIsOne) {
  std::vector<CandidateScore> r = {candidate(3, 2.0, 0), candidate(1, 1.9, 1), candidate(1, 1.8, 2)};
  const auto p = predict(r, 1);
  EXPECT_EQ(p.label_id, 3u);
  EXPECT_EQ(p.vote_count, 1u);
}

TEST(Predict, VoteTieBrokenBySummedScore) {
  std::vector<CandidateScore> r = {candidate(0, 1.0, 0), candidate(1, 0.95, 1), candidate(1, 0.75, 2),
                                   candidate(0, 0.9, 3)};
  const auto p = predict(r, 4);
  EXPECT_EQ(p.label_id, 0u);
  EXPECT_EQ(p.vote_count, 2u);
  EXPECT_NEAR(p.total_score, 1.9, 1e-12);
}

TEST(Predict, FullTieGoesToEarliestLabel) {
  std::vector<CandidateScore> r = {candidate(5, 1.0, 0), candidate(2, 1.0, 1)};
  EXPECT_EQ(predict(r, 2).label_id, 5u);
}

TEST(Predict, MatchesVoteCountingOracle) {
  Rng rng(20);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<CandidateScore> r;
    const std::size_t n = 1 + rng.below(50);
    const std::size_t labels = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse scores make vote and score ties common.
      r.push_back(candidate(static_cast<std::uint32_t>(rng.below(labels)), 0.25 * rng.below(8), i));
    }
    std::vector<std::uint32_t> ls;
    std::vector<double> ss;
    for (const auto& c : r) {
      ls.push_back(c.label_id);
      ss.push_back(c.score);
    }
    const auto [label, votes] = oracle::vote(ls, ss, 20);
    const auto p = predict(r, 20);
    EXPECT_EQ(p.label_id, label) << "trial " << trial;
    EXPECT_EQ(p.vote_count, votes);
  }
}

TEST(Predict, EmptyCandidatesRejected) {
  try {
    predict({}, 20);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCandidates);
  }
}

TEST(Explain, CapsAtFiveInRerankedOrder) {
  std::vector<CandidateScore> r;
  for (std::size_t i = 0; i < 10; ++i) r.push_back(candidate(i < 7 ? 1 : 2, 10.0 - i, i));
  std::swap(r[1], r[8]);
  Prediction p;
  p.label_id = 1;
  p.reranked = r;
  const auto e = explain(p);
  ASSERT_EQ(e.supports.size(), 5u);
  const std::vector<std::string> want = {"r0", "r2", "r3", "r4", "r5"};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(e.supports[i].record_id, want[i]);
}

TEST(Explain, FewerThanFiveAvailable) {
  Prediction p;
  p.label_id = 4;
  p.reranked = {candidate(4, 3.0, 0), candidate(1, 2.0, 1), candidate(4, 1.0, 2)};
  EXPECT_EQ(explain(p).supports.size(), 2u);
}

TEST(Explain, MatchesFilterOfReranked) {
  const auto idx = synth_dataset(synth11());
  auto qp = synth11();
  qp.noise_seed = 99;
  qp.n_records = 12;
  const auto queries = synth_dataset(qp);
  for (const auto& rec : queries.records()) {
    const auto c = classify(idx, QueryEmbedding::from_record(rec), std::nullopt, ClassifierConfig{});
    std::vector<std::string> want;
    for (const auto& cand : c.prediction.reranked) {
      if (cand.label_id == c.prediction.label_id && want.size() < 5) want.push_back(cand.record_id);
    }
    std::vector<std::string> got;
    for (const auto& s : c.explanation.supports) got.push_back(s.record_id);
    EXPECT_EQ(got, want);
  }
}

// --- classify -------------------------------------------------------------------

TEST(Classify, TrainingRecordOnNoiselessData) {
  SynthParams p;
  p.spread = 0.0;
  const auto idx = synth_dataset(p);
  const auto c = classify(idx, QueryEmbedding::from_record(idx[3]), std::nullopt, ClassifierConfig{});
  EXPECT_EQ(c.prediction.label_id, idx[3].label_id);
  ASSERT_FALSE(c.explanation.supports.empty());
  EXPECT_EQ(c.explanation.supports[0].record_id, idx[3].id);
}

TEST(Classify, MatchesBruteForcePipeline) {
  SynthParams p;
  p.n_records = 200;
  p.n_classes = 10;
  p.spread = 0.1;
  p.seed = 7;
  const auto idx = synth_dataset(p);
  p.noise_seed = 7007;
  p.n_records = 50;
  p.id_prefix = "h";
  const auto held_out = synth_dataset(p);
  const ClassifierConfig cfg;
  for (const auto& rec : held_out.records()) {
    const auto q = QueryEmbedding::from_record(rec);
    const auto c = classify(idx, q, std::nullopt, cfg);
    const auto ref = oracle::pipeline(idx, q, AttentionMask::all(), cfg);
    EXPECT_EQ(c.prediction.label_id, ref.label);
    EXPECT_EQ(c.prediction.vote_count, ref.votes);
    std::vector<std::string> support_ids;
    for (const auto& s : c.explanation.supports) support_ids.push_back(s.record_id);
    EXPECT_EQ(support_ids, ref.support_ids);
  }
}

TEST(Classify, OmittedMaskEqualsFullMask) {
  Rng rng(12);
  const auto idx = random_index(rng, 120, 6, 12, 6);
  for (int i = 0; i < 20; ++i) {
    const auto q = random_query(rng, 12, 6);
    EXPECT_EQ(classify(idx, q, std::nullopt, ClassifierConfig{}), classify(idx, q, AttentionMask::all(), {}));
  }
}

TEST(Classify, DeterministicSerialization) {
  Rng rng(13);
  const auto idx = random_index(rng, 80, 4, 8, 4);
  const auto q = random_query(rng, 8, 4);
  const auto mask = random_mask(rng);
  const auto a = classification_to_json(classify(idx, q, mask, {}), &idx).dump();
  const auto b = classification_to_json(classify(idx, q, mask, {}), &idx).dump();
  EXPECT_EQ(a, b);
}

TEST(Classify, RerankIsPermutationAndPairsAreCosines) {
  Rng rng(14);
  const auto idx = random_index(rng, 150, 5, 10, 5);
  for (int i = 0; i < 20; ++i) {
    const auto q = random_query(rng, 10, 5);
    const auto mask = random_mask(rng, 0.3);
    const auto c = classify(idx, q, mask, {});
    const auto hits = knn_retrieve(idx, q.global_vec, 50);
    std::multiset<std::size_t> a, b;
    for (const auto& h : hits) a.insert(h.record);
    for (const auto& r : c.prediction.reranked) b.insert(r.record);
    EXPECT_EQ(a, b);
    for (const auto& s : c.explanation.supports) {
      EXPECT_EQ(s.label_id, c.prediction.label_id);
      const auto& rec = idx[*idx.find(s.record_id)];
      for (const auto& pr : s.pairs) {
        EXPECT_TRUE(mask.test(pr.query_cell));
        EXPECT_NEAR(pr.similarity, cosine_similarity(q.patch(pr.query_cell), rec.patch(pr.candidate_cell)), 1e-9);
      }
    }
    // Majority: no label in the vote pool has more votes than the winner.
    std::map<std::uint32_t, std::size_t> votes;
    for (std::size_t k = 0; k < std::min<std::size_t>(20, c.prediction.reranked.size()); ++k) {
      ++votes[c.prediction.reranked[k].label_id];
    }
    for (const auto& [label, v] : votes) EXPECT_LE(v, c.prediction.vote_count);
    EXPECT_EQ(votes[c.prediction.label_id], c.prediction.vote_count);
  }
}

TEST(Classify, QueryDimensionChecked) {
  Rng rng(15);
  const auto idx = random_index(rng, 10, 2, 6, 4);
  auto q = random_query(rng, 6, 3);
  EXPECT_THROW(classify(idx, q, std::nullopt, {}), Error);
  EXPECT_THROW(classify(idx, random_query(rng, 6, 4), AttentionMask::none(), {}), Error);
}

TEST(MaskMonotonicity, SupersetNeverScoresLower) {
  Rng rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 2 + rng.below(12);
    const Grid q{random_grid(rng, dim), dim};
    const Grid c{random_grid(rng, dim), dim};
    const auto small = random_mask(rng, 0.2);
    auto big = small;
    for (int cell = 0; cell < kCells; ++cell) {
      if (rng.coin(0.3)) big.set(cell, true);
    }
    ASSERT_TRUE(small.is_subset_of(big));
    const std::size_t t = 1 + rng.below(10);
    EXPECT_GE(score_candidate(patch_pairs(q, c, big), t), score_candidate(patch_pairs(q, c, small), t));
  }
}

// --- pool_diagnostic ----------------------------------------------------------------

TEST(PoolDiagnostic, ReportsBestRank) {
  std::vector<CandidateScore> r;
  for (std::size_t i = 0; i < 20; ++i) r.push_back(candidate(i == 11 || i == 15 ? 7 : 1, 1.0, i));
  EXPECT_EQ(pool_diagnostic(r, 7), (PoolDiagnostic{true, 12}));
  EXPECT_EQ(pool_diagnostic(r, 9), (PoolDiagnostic{false, std::nullopt}));
}

TEST(PoolDiagnostic, MissingClassCanNeverBePredicted) {
  SynthParams p;
  p.n_records = 200;
  p.n_classes = 10;
  p.spread = 0.3;
  const auto full = synth_dataset(p);
  const std::uint32_t gt = 4;
  std::vector<EmbeddingRecord> kept;
  for (const auto& r : full.records()) {
    if (r.label_id != gt) kept.push_back(r);
  }
  const DatasetIndex idx(full.classes(), kept, full.global_dim(), full.patch_dim());
  p.noise_seed = 5;
  p.n_records = 20;
  const auto queries = synth_dataset(p);
  const auto& query = queries[gt];
  ASSERT_EQ(query.label_id, gt);
  Rng rng(100);
  for (int i = 0; i < 100; ++i) {
    const auto mask = random_mask(rng, rng.uniform());
    const auto c = classify(idx, QueryEmbedding::from_record(query), mask, {});
    EXPECT_EQ(pool_diagnostic(c.prediction.reranked, gt), (PoolDiagnostic{false, std::nullopt}));
    EXPECT_NE(c.prediction.label_id, gt);
  }
}
