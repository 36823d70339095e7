#pragma once

// Evaluation-set files written by `study sample` and read by `serve`.
//
//   {"pool": "<dataset path, relative to this file>", "seed": 1,
//    "config": {"n": 50, "t": 5, "k": 20},
//    "samples": [{"query_ref", "gt_label", "original_label", "ai_correct"}, ...]}
//
// A plain dataset file is also accepted as an evaluation set; every record is
// then a query.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

#include <nlohmann/json.hpp>

#include "corr_attn/dataset.hpp"
#include "corr_attn/session.hpp"
#include "corr_attn/study.hpp"

namespace corr_attn {

struct LoadedEvaluation {
  std::shared_ptr<const DatasetIndex> pool;
  std::shared_ptr<const EvaluationSet> queries;
  std::vector<study::EvalSample> samples;  // empty for plain dataset files
};

inline void write_eval_file(const std::filesystem::path& out, const std::filesystem::path& pool_path,
                            const ClassifierConfig& config, std::uint64_t seed,
                            const std::vector<study::EvalSample>& samples) {
  auto arr = nlohmann::json::array();
  for (const auto& s : samples) arr.push_back(study::to_json(s));
  auto base = std::filesystem::absolute(out).parent_path();
  auto rel = std::filesystem::absolute(pool_path).lexically_relative(base);
  nlohmann::json j = {{"pool", rel.empty() ? pool_path.string() : rel.string()},
                      {"seed", seed},
                      {"config",
                       {{"n", config.n_candidates}, {"t", config.pairs_per_candidate}, {"k", config.vote_pool}}},
                      {"samples", std::move(arr)}};
  const std::string text = j.dump(2) + "\n";
  detail::write_file_atomic(out, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline LoadedEvaluation load_evaluation(const std::filesystem::path& path) {
  auto head = detail::read_file(path);
  LoadedEvaluation out;
  if (head.size() >= kMagic.size() && std::memcmp(head.data(), kMagic.data(), kMagic.size()) == 0) {
    auto pool = std::make_shared<const DatasetIndex>(load_dataset(path));
    out.queries = std::make_shared<const EvaluationSet>(EvaluationSet::from_dataset(*pool));
    out.pool = std::move(pool);
    return out;
  }
  nlohmann::json j = nlohmann::json::parse(head.begin(), head.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw Error(ErrorCode::MagicMismatch, path.string() + " is neither a dataset nor an evaluation JSON file");
  }
  try {
    std::filesystem::path pool_path = j.at("pool").get<std::string>();
    if (pool_path.is_relative()) pool_path = path.parent_path() / pool_path;
    auto pool = std::make_shared<const DatasetIndex>(load_dataset(pool_path));
    std::vector<std::string> refs;
    for (const auto& s : j.at("samples")) {
      out.samples.push_back(study::eval_sample_from_json(s));
      refs.push_back(out.samples.back().query_ref);
    }
    out.queries = std::make_shared<const EvaluationSet>(EvaluationSet::from_refs(*pool, refs));
    out.pool = std::move(pool);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadRequest, "malformed evaluation file " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace corr_attn
