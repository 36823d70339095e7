#pragma once

// Study materials and analysis: balanced evaluation sets, per-unit decision
// accuracy, outcome categories for dynamic sessions, and the condition t-test.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "corr_attn/classifier.hpp"
#include "corr_attn/dataset.hpp"
#include "corr_attn/error.hpp"
#include "corr_attn/rng.hpp"
#include "corr_attn/session.hpp"
#include "corr_attn/stats.hpp"

namespace corr_attn::study {

inline constexpr std::size_t kDecisionsPerSubmission = 20;

struct EvalSample {
  std::string query_ref;
  std::uint32_t gt_label_id = 0;
  std::uint32_t original_label_id = 0;
  bool ai_correct = false;

  bool operator==(const EvalSample&) const = default;
};

/// Runs the frozen classifier (full attention) on every pool record.
inline std::vector<EvalSample> classify_pool(const DatasetIndex& index, const ClassifierConfig& config,
                                             const DatasetIndex& pool) {
  std::vector<EvalSample> out;
  out.reserve(pool.size());
  for (const auto& r : pool.records()) {
    const auto c = classify(index, QueryEmbedding::from_record(r), std::nullopt, config);
    out.push_back({r.id, r.label_id, c.prediction.label_id, c.prediction.label_id == r.label_id});
  }
  return out;
}

/// Uniform sample without replacement of `n_correct` AI-correct and
/// `n_incorrect` AI-incorrect samples, shuffled together. Deterministic in seed.
inline std::vector<EvalSample> sample_balanced(const std::vector<EvalSample>& classified, std::size_t n_correct,
                                               std::size_t n_incorrect, std::uint64_t seed) {
  std::vector<const EvalSample*> correct, incorrect;
  for (const auto& s : classified) (s.ai_correct ? correct : incorrect).push_back(&s);
  if (correct.size() < n_correct) {
    throw Error(ErrorCode::InsufficientStratum,
                "correct stratum short by " + std::to_string(n_correct - correct.size()));
  }
  if (incorrect.size() < n_incorrect) {
    throw Error(ErrorCode::InsufficientStratum,
                "incorrect stratum short by " + std::to_string(n_incorrect - incorrect.size()));
  }
  Rng rng(seed);
  auto draw = [&rng](std::vector<const EvalSample*>& stratum, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(stratum.size() - i));
      std::swap(stratum[i], stratum[j]);
    }
    stratum.resize(n);
  };
  draw(correct, n_correct);
  draw(incorrect, n_incorrect);
  std::vector<EvalSample> out;
  out.reserve(n_correct + n_incorrect);
  for (const auto* s : correct) out.push_back(*s);
  for (const auto* s : incorrect) out.push_back(*s);
  for (std::size_t i = out.size(); i > 1; --i) {
    std::swap(out[i - 1], out[static_cast<std::size_t>(rng.below(i))]);
  }
  return out;
}

inline std::vector<EvalSample> build_balanced_set(const DatasetIndex& index, const ClassifierConfig& config,
                                                  const DatasetIndex& pool, std::size_t n_correct,
                                                  std::size_t n_incorrect, std::uint64_t seed) {
  return sample_balanced(classify_pool(index, config, pool), n_correct, n_incorrect, seed);
}

/// Accepting a correct prediction or rejecting an incorrect one.
inline bool decision_correct(const LogLine& line) { return line.accepted == line.original_correct; }

// ---------------------------------------------------------------------------
// Outcome categories (dynamic condition only).

enum class OutcomeCategory {
  CorrectConsistent,                  // I
  CorrectInconsistent,                // II
  IncorrectConsistent,                // III
  IncorrectInconsistentNeverCorrect,  // IV
  IncorrectInconsistentBecomesCorrect,  // V
};

inline constexpr std::array<OutcomeCategory, 5> kCategories = {
    OutcomeCategory::CorrectConsistent, OutcomeCategory::CorrectInconsistent, OutcomeCategory::IncorrectConsistent,
    OutcomeCategory::IncorrectInconsistentNeverCorrect, OutcomeCategory::IncorrectInconsistentBecomesCorrect};

inline std::string to_string(OutcomeCategory c) {
  switch (c) {
    case OutcomeCategory::CorrectConsistent: return "I_correct_consistent";
    case OutcomeCategory::CorrectInconsistent: return "II_correct_inconsistent";
    case OutcomeCategory::IncorrectConsistent: return "III_incorrect_consistent";
    case OutcomeCategory::IncorrectInconsistentNeverCorrect: return "IV_incorrect_inconsistent_never_correct";
    case OutcomeCategory::IncorrectInconsistentBecomesCorrect: return "V_incorrect_inconsistent_becomes_correct";
  }
  return "?";
}

inline std::string describe(OutcomeCategory c) {
  switch (c) {
    case OutcomeCategory::CorrectConsistent: return "(i)   originally correct, consistent";
    case OutcomeCategory::CorrectInconsistent: return "(ii)  originally correct, inconsistent";
    case OutcomeCategory::IncorrectConsistent: return "(iii) originally incorrect, consistent";
    case OutcomeCategory::IncorrectInconsistentNeverCorrect: return "(iv)  originally incorrect, never correct";
    case OutcomeCategory::IncorrectInconsistentBecomesCorrect: return "(v)   originally incorrect, becomes correct";
  }
  return "?";
}

/// A session is consistent when every re-prediction repeats the original
/// label; sessions without edits count as consistent.
inline OutcomeCategory categorize(const LogLine& line) {
  if (line.condition != Condition::Dynamic) {
    throw Error(ErrorCode::StaticConditionLine, "session " + line.session_id + " is not a dynamic session");
  }
  const bool consistent = std::all_of(line.steps.begin(), line.steps.end(),
                                      [&](const StepSummary& s) { return s.label == line.original_label; });
  if (line.original_correct) {
    return consistent ? OutcomeCategory::CorrectConsistent : OutcomeCategory::CorrectInconsistent;
  }
  if (consistent) return OutcomeCategory::IncorrectConsistent;
  const bool reached_gt = std::any_of(line.steps.begin(), line.steps.end(),
                                      [&](const StepSummary& s) { return s.label == line.gt_label; });
  return reached_gt ? OutcomeCategory::IncorrectInconsistentBecomesCorrect
                    : OutcomeCategory::IncorrectInconsistentNeverCorrect;
}

struct CategoryStats {
  std::size_t count = 0;
  std::size_t correct_decisions = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // percent

  bool operator==(const CategoryStats& o) const {
    return count == o.count && correct_decisions == o.correct_decisions &&
           (accuracy == o.accuracy || (std::isnan(accuracy) && std::isnan(o.accuracy)));
  }
};

using Breakdown = std::array<CategoryStats, kCategories.size()>;

inline Breakdown breakdown(const std::vector<LogLine>& lines) {
  Breakdown out{};
  for (const auto& l : lines) {
    auto& c = out[static_cast<std::size_t>(categorize(l))];
    ++c.count;
    if (decision_correct(l)) ++c.correct_decisions;
  }
  for (auto& c : out) {
    if (c.count > 0) c.accuracy = 100.0 * static_cast<double>(c.correct_decisions) / static_cast<double>(c.count);
  }
  return out;
}

/// Mean number of attention edits per session.
inline double mean_interactions(const std::vector<LogLine>& lines) {
  if (lines.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& l : lines) total += static_cast<double>(l.steps.size());
  return total / static_cast<double>(lines.size());
}

// ---------------------------------------------------------------------------
// Per-unit accuracy.

enum class Unit { Submission, Participant };

inline std::string to_string(Unit u) { return u == Unit::Submission ? "submission" : "participant"; }

inline Unit parse_unit(const std::string& s) {
  if (s == "submission") return Unit::Submission;
  if (s == "participant") return Unit::Participant;
  throw Error(ErrorCode::InvalidParam, "unit must be 'submission' or 'participant'");
}

struct UnitAccuracy {
  std::string key;
  Condition condition = Condition::Static;
  std::size_t decisions = 0;
  double overall = 0.0;                      // percent
  std::optional<double> ai_correct;          // percent over AI-correct decisions, if any
  std::optional<double> ai_incorrect;

  bool operator==(const UnitAccuracy&) const = default;
};

/// Groups lines into units. Within each (participant, condition) the lines are
/// ordered by decision time then session id, so grouping does not depend on
/// the order of the input.
inline std::vector<UnitAccuracy> unit_accuracies(const std::vector<LogLine>& lines, Unit unit,
                                                 std::size_t batch = kDecisionsPerSubmission) {
  std::map<std::pair<Condition, std::string>, std::vector<const LogLine*>> groups;
  for (const auto& l : lines) groups[{l.condition, l.participant_id}].push_back(&l);

  std::vector<UnitAccuracy> units;
  auto summarize = [](std::string key, Condition cond, auto first, auto last) {
    UnitAccuracy u;
    u.key = std::move(key);
    u.condition = cond;
    std::size_t ok = 0, n_c = 0, ok_c = 0, n_i = 0, ok_i = 0;
    for (auto it = first; it != last; ++it) {
      const LogLine& l = **it;
      const bool good = decision_correct(l);
      ++u.decisions;
      ok += good;
      if (l.original_correct) {
        ++n_c;
        ok_c += good;
      } else {
        ++n_i;
        ok_i += good;
      }
    }
    u.overall = 100.0 * static_cast<double>(ok) / static_cast<double>(u.decisions);
    if (n_c > 0) u.ai_correct = 100.0 * static_cast<double>(ok_c) / static_cast<double>(n_c);
    if (n_i > 0) u.ai_incorrect = 100.0 * static_cast<double>(ok_i) / static_cast<double>(n_i);
    return u;
  };

  for (auto& [key, group] : groups) {
    const auto& [cond, participant] = key;
    std::sort(group.begin(), group.end(), [](const LogLine* a, const LogLine* b) {
      return std::tie(a->decided_at, a->session_id) < std::tie(b->decided_at, b->session_id);
    });
    if (unit == Unit::Participant) {
      units.push_back(summarize(participant, cond, group.begin(), group.end()));
      continue;
    }
    if (group.size() % batch != 0) {
      throw Error(ErrorCode::MalformedSubmission, "participant " + participant + " has " +
                                                      std::to_string(group.size()) + " " + to_string(cond) +
                                                      " decisions, not a multiple of " + std::to_string(batch));
    }
    for (std::size_t start = 0; start < group.size(); start += batch) {
      units.push_back(summarize(participant + "#" + std::to_string(start / batch), cond,
                                group.begin() + static_cast<std::ptrdiff_t>(start),
                                group.begin() + static_cast<std::ptrdiff_t>(start + batch)));
    }
  }
  return units;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
  bool std_defined = false;  // false when fewer than two units; std is then reported as 0

  bool operator==(const MeanStd& o) const {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return same(mean, o.mean) && same(std, o.std) && n == o.n && std_defined == o.std_defined;
  }
};

inline MeanStd summarize_values(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  m.mean = stats::mean(xs);
  if (xs.size() >= 2) {
    m.std = stats::sample_stddev(xs);
    m.std_defined = true;
  } else {
    m.std = 0.0;
  }
  return m;
}

struct ConditionStats {
  MeanStd overall;
  MeanStd ai_correct;
  MeanStd ai_incorrect;
  std::size_t n_decisions = 0;
  std::size_t n_ai_correct_decisions = 0;
  std::size_t n_ai_incorrect_decisions = 0;
  std::size_t n_units = 0;

  bool operator==(const ConditionStats&) const = default;
};

inline ConditionStats condition_stats(const std::vector<UnitAccuracy>& units, const std::vector<LogLine>& lines,
                                      Condition cond) {
  ConditionStats cs;
  std::vector<double> overall, correct, incorrect;
  for (const auto& u : units) {
    if (u.condition != cond) continue;
    overall.push_back(u.overall);
    if (u.ai_correct) correct.push_back(*u.ai_correct);
    if (u.ai_incorrect) incorrect.push_back(*u.ai_incorrect);
  }
  cs.overall = summarize_values(overall);
  cs.ai_correct = summarize_values(correct);
  cs.ai_incorrect = summarize_values(incorrect);
  cs.n_units = overall.size();
  for (const auto& l : lines) {
    if (l.condition != cond) continue;
    ++cs.n_decisions;
    (l.original_correct ? cs.n_ai_correct_decisions : cs.n_ai_incorrect_decisions)++;
  }
  return cs;
}

struct StudyReport {
  Unit unit = Unit::Submission;
  ConditionStats static_condition;
  ConditionStats dynamic_condition;
  Breakdown categories{};
  std::optional<stats::WelchResult> t_test;  // static vs dynamic per-unit overall accuracy
  double mean_interactions = std::numeric_limits<double>::quiet_NaN();

  bool operator==(const StudyReport& o) const {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    const bool t_same = t_test.has_value() == o.t_test.has_value() &&
                        (!t_test || (t_test->t == o.t_test->t && t_test->p == o.t_test->p && t_test->df == o.t_test->df));
    return unit == o.unit && static_condition == o.static_condition && dynamic_condition == o.dynamic_condition &&
           categories == o.categories && t_same && same(mean_interactions, o.mean_interactions);
  }
};

inline StudyReport aggregate(const std::vector<LogLine>& lines, Unit unit,
                             std::size_t batch = kDecisionsPerSubmission) {
  StudyReport r;
  r.unit = unit;
  const auto units = unit_accuracies(lines, unit, batch);
  r.static_condition = condition_stats(units, lines, Condition::Static);
  r.dynamic_condition = condition_stats(units, lines, Condition::Dynamic);

  // Dynamic-only analyses run in canonical order so the result is independent
  // of log order.
  std::vector<LogLine> dynamic;
  for (const auto& l : lines) {
    if (l.condition == Condition::Dynamic) dynamic.push_back(l);
  }
  std::sort(dynamic.begin(), dynamic.end(),
            [](const LogLine& a, const LogLine& b) { return a.session_id < b.session_id; });
  r.categories = breakdown(dynamic);
  r.mean_interactions = mean_interactions(dynamic);

  std::vector<double> a, b;
  for (const auto& u : units) (u.condition == Condition::Static ? a : b).push_back(u.overall);
  try {
    r.t_test = stats::welch_t_test(a, b);
  } catch (const Error&) {
    r.t_test.reset();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Report rendering.

inline nlohmann::json to_json(const MeanStd& m) {
  return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}, {"std_defined", m.std_defined}};
}

inline nlohmann::json to_json(const ConditionStats& c) {
  return {{"overall_mean", c.overall.mean},
          {"overall_std", c.overall.std},
          {"std_defined", c.overall.std_defined},
          {"mean_ai_correct", c.ai_correct.mean},
          {"std_ai_correct", c.ai_correct.std},
          {"mean_ai_incorrect", c.ai_incorrect.mean},
          {"std_ai_incorrect", c.ai_incorrect.std},
          {"n_decisions", c.n_decisions},
          {"n_ai_correct_decisions", c.n_ai_correct_decisions},
          {"n_ai_incorrect_decisions", c.n_ai_incorrect_decisions},
          {"n_submissions", c.n_units}};
}

inline nlohmann::json to_json(const StudyReport& r) {
  nlohmann::json cats = nlohmann::json::object();
  for (auto c : kCategories) {
    const auto& s = r.categories[static_cast<std::size_t>(c)];
    cats[to_string(c)] = {{"count", s.count}, {"correct_decisions", s.correct_decisions}, {"accuracy", s.accuracy}};
  }
  nlohmann::json j = {{"unit", to_string(r.unit)},
                      {"static", to_json(r.static_condition)},
                      {"dynamic", to_json(r.dynamic_condition)},
                      {"categories", std::move(cats)},
                      {"mean_interactions", r.mean_interactions}};
  if (r.t_test) {
    j["t_statistic"] = r.t_test->t;
    j["p_value"] = r.t_test->p;
    j["degrees_of_freedom"] = r.t_test->df;
  } else {
    j["t_statistic"] = nullptr;
    j["p_value"] = nullptr;
    j["degrees_of_freedom"] = nullptr;
  }
  return j;
}

namespace detail {

inline std::string fmt(double v, int precision = 2) {
  if (std::isnan(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline std::string pm(const MeanStd& m) {
  if (m.n == 0) return "-";
  return fmt(m.mean) + " +/- " + fmt(m.std) + (m.std_defined ? "" : " (n=1)");
}

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace detail

/// Plain-text condition table followed by the dynamic outcome breakdown.
inline std::string render_text(const StudyReport& r) {
  using detail::pad;
  std::ostringstream os;
  const auto& s = r.static_condition;
  const auto& d = r.dynamic_condition;
  os << "Decision accuracy (%) per " << to_string(r.unit) << "\n";
  os << pad("", 26) << pad("static", 28) << "dynamic\n";
  os << pad("overall", 26) << pad(detail::pm(s.overall), 28) << detail::pm(d.overall) << "\n";
  os << pad("AI correct", 26) << pad(detail::pm(s.ai_correct), 28) << detail::pm(d.ai_correct) << "\n";
  os << pad("AI incorrect", 26) << pad(detail::pm(s.ai_incorrect), 28) << detail::pm(d.ai_incorrect) << "\n";
  os << pad("decisions (AI ok / not)", 26)
     << pad(std::to_string(s.n_ai_correct_decisions) + " / " + std::to_string(s.n_ai_incorrect_decisions), 28)
     << d.n_ai_correct_decisions << " / " << d.n_ai_incorrect_decisions << "\n";
  os << pad(to_string(r.unit) + "s", 26) << pad(std::to_string(s.n_units), 28) << d.n_units << "\n";
  if (r.t_test) {
    os << "Welch t = " << detail::fmt(r.t_test->t, 3) << ", df = " << detail::fmt(r.t_test->df, 2)
       << ", p = " << detail::fmt(r.t_test->p, 3) << "\n";
  } else {
    os << "Welch t-test: not enough units\n";
  }
  os << "\nDynamic outcome categories\n";
  for (auto c : kCategories) {
    const auto& cs = r.categories[static_cast<std::size_t>(c)];
    os << pad(describe(c), 46) << pad(detail::fmt(cs.accuracy), 8) << "(n=" << cs.count << ")\n";
  }
  os << "mean attention edits per dynamic session: " << detail::fmt(r.mean_interactions) << "\n";
  return os.str();
}

inline nlohmann::json to_json(const EvalSample& s) {
  return {{"query_ref", s.query_ref},
          {"gt_label", s.gt_label_id},
          {"original_label", s.original_label_id},
          {"ai_correct", s.ai_correct}};
}

inline EvalSample eval_sample_from_json(const nlohmann::json& j) {
  return {j.at("query_ref").get<std::string>(), j.at("gt_label").get<std::uint32_t>(),
          j.at("original_label").get<std::uint32_t>(), j.at("ai_correct").get<bool>()};
}

}  // namespace corr_attn::study
