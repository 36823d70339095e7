#pragma once

// Canonical JSON encoding of classifier outputs. Field order is fixed by
// nlohmann's sorted object keys, so equal values always dump to equal bytes.

#include <nlohmann/json.hpp>

#include "corr_attn/classifier.hpp"
#include "corr_attn/dataset.hpp"

namespace corr_attn {

inline nlohmann::json pairs_to_json(const std::vector<CorrespondencePair>& pairs) {
  auto arr = nlohmann::json::array();
  for (const auto& p : pairs) arr.push_back({p.query_cell, p.candidate_cell, p.similarity});
  return arr;
}

inline std::vector<CorrespondencePair> pairs_from_json(const nlohmann::json& j) {
  std::vector<CorrespondencePair> out;
  for (const auto& p : j) out.push_back({p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<double>()});
  return out;
}

inline nlohmann::json candidate_to_json(const CandidateScore& c) {
  return {{"id", c.record_id}, {"label", c.label_id}, {"knn_rank", c.knn_rank},
          {"score", c.score},  {"pairs", pairs_to_json(c.pairs)}};
}

inline nlohmann::json prediction_to_json(const Prediction& p, const DatasetIndex* index = nullptr) {
  nlohmann::json j = {{"label", p.label_id}, {"vote_count", p.vote_count}, {"total_score", p.total_score}};
  if (index != nullptr && p.label_id < index->classes().size()) j["label_name"] = index->classes()[p.label_id];
  return j;
}

inline nlohmann::json supports_to_json(const Explanation& e) {
  auto arr = nlohmann::json::array();
  for (const auto& s : e.supports) {
    arr.push_back({{"id", s.record_id},
                   {"image_ref", s.image_ref},
                   {"label", s.label_id},
                   {"rank", s.rerank_position},
                   {"pairs", pairs_to_json(s.pairs)}});
  }
  return arr;
}

inline nlohmann::json reranked_to_json(const std::vector<CandidateScore>& reranked) {
  auto arr = nlohmann::json::array();
  for (const auto& c : reranked) arr.push_back(candidate_to_json(c));
  return arr;
}

/// {prediction: {label, vote_count, total_score}, reranked: [...], supports: [...]}
inline nlohmann::json classification_to_json(const Classification& c, const DatasetIndex* index = nullptr) {
  return {{"prediction", prediction_to_json(c.prediction, index)},
          {"reranked", reranked_to_json(c.prediction.reranked)},
          {"supports", supports_to_json(c.explanation)}};
}

}  // namespace corr_attn
