#pragma once

// Interactive decision sessions and the append-only study log.
//
// A session pins one evaluation query and its original (full-attention)
// classification. Dynamic sessions accept attention edits, each re-running
// the classifier; static sessions do not. The final accept/reject decision
// closes the session and appends exactly one JSON line to the log, which is
// enough to rebuild every closed session after a restart.

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "corr_attn/classifier.hpp"
#include "corr_attn/dataset.hpp"
#include "corr_attn/error.hpp"
#include "corr_attn/json_io.hpp"

namespace corr_attn {

enum class Condition { Static, Dynamic };

inline std::string to_string(Condition c) { return c == Condition::Static ? "static" : "dynamic"; }

inline Condition parse_condition(const std::string& s) {
  if (s == "static") return Condition::Static;
  if (s == "dynamic") return Condition::Dynamic;
  throw Error(ErrorCode::BadRequest, "condition must be 'static' or 'dynamic', got '" + s + "'");
}

using Clock = std::chrono::system_clock;
using Timestamp = std::chrono::time_point<Clock, std::chrono::milliseconds>;

inline Timestamp now_ms() { return std::chrono::floor<std::chrono::milliseconds>(Clock::now()); }

/// ISO-8601 UTC with milliseconds, e.g. 2024-05-01T12:00:00.250Z.
inline std::string format_timestamp(Timestamp t) {
  const auto ms_total = t.time_since_epoch().count();
  auto secs = static_cast<std::time_t>(ms_total / 1000);
  auto ms = static_cast<int>(ms_total % 1000);
  if (ms < 0) {
    ms += 1000;
    --secs;
  }
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, ms);
  return buf;
}

inline Timestamp parse_timestamp(const std::string& s) {
  int y, mo, d, h, mi, sec, ms;
  char z = 0;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d.%3d%c", &y, &mo, &d, &h, &mi, &sec, &ms, &z) != 8 || z != 'Z') {
    throw Error(ErrorCode::BadRequest, "timestamp '" + s + "' is not ISO-8601 UTC with milliseconds");
  }
  std::tm tm{};
  tm.tm_year = y - 1900;
  tm.tm_mon = mo - 1;
  tm.tm_mday = d;
  tm.tm_hour = h;
  tm.tm_min = mi;
  tm.tm_sec = sec;
  const std::time_t secs = timegm(&tm);
  return Timestamp(std::chrono::milliseconds(static_cast<std::int64_t>(secs) * 1000 + ms));
}

// ---------------------------------------------------------------------------
// Evaluation set: the queries participants decide on.

struct EvalItem {
  std::string query_ref;
  std::uint32_t gt_label = 0;
  QueryEmbedding embedding;
  std::string image_ref;
};

class EvaluationSet {
 public:
  EvaluationSet() = default;

  /// Every record of `pool` becomes a query; its label is the ground truth.
  static EvaluationSet from_dataset(const DatasetIndex& pool) {
    EvaluationSet set;
    for (const auto& r : pool.records()) set.add({r.id, r.label_id, QueryEmbedding::from_record(r), r.image_ref});
    return set;
  }

  /// Only the listed records of `pool`, in the listed order.
  static EvaluationSet from_refs(const DatasetIndex& pool, const std::vector<std::string>& refs) {
    EvaluationSet set;
    for (const auto& ref : refs) {
      auto pos = pool.find(ref);
      if (!pos) throw Error(ErrorCode::UnknownQuery, "query '" + ref + "' is not in the pool");
      const auto& r = pool[*pos];
      set.add({r.id, r.label_id, QueryEmbedding::from_record(r), r.image_ref});
    }
    return set;
  }

  void add(EvalItem item) {
    if (by_ref_.count(item.query_ref) != 0) throw Error(ErrorCode::DuplicateId, "query '" + item.query_ref + "' repeated");
    by_ref_.emplace(item.query_ref, items_.size());
    items_.push_back(std::move(item));
  }

  const EvalItem* find(const std::string& ref) const {
    auto it = by_ref_.find(ref);
    return it == by_ref_.end() ? nullptr : &items_[it->second];
  }
  const std::vector<EvalItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

 private:
  std::vector<EvalItem> items_;
  std::unordered_map<std::string, std::size_t> by_ref_;
};

// ---------------------------------------------------------------------------
// Sessions.

struct InteractionStep {
  AttentionMask mask;
  Classification result;
  Timestamp at;

  bool operator==(const InteractionStep&) const = default;
};

struct Decision {
  bool accepted = false;
  Timestamp at;

  bool operator==(const Decision&) const = default;
};

struct Session {
  std::string session_id;
  std::string participant_id;
  Condition condition = Condition::Static;
  std::string query_ref;
  std::uint32_t gt_label = 0;
  Classification original;
  std::vector<InteractionStep> steps;
  std::optional<Decision> decision;
  Timestamp created_at;

  bool finalized() const { return decision.has_value(); }
  bool operator==(const Session&) const = default;
};

struct StepSummary {
  std::string mask;  // 49-char bitstring
  std::uint32_t label = 0;
  bool correct = false;
  std::optional<std::string> at;

  bool operator==(const StepSummary&) const = default;
};

/// One finalized session as it appears in the study log.
struct LogLine {
  std::string session_id;
  std::string participant_id;
  Condition condition = Condition::Static;
  std::string query_ref;
  std::uint32_t gt_label = 0;
  std::uint32_t original_label = 0;
  bool original_correct = false;
  std::vector<StepSummary> steps;
  bool accepted = false;
  std::string created_at;
  std::string decided_at;

  bool operator==(const LogLine&) const = default;
};

inline LogLine to_log_line(const Session& s) {
  if (!s.decision) throw Error(ErrorCode::BadRequest, "session " + s.session_id + " has no decision");
  LogLine l;
  l.session_id = s.session_id;
  l.participant_id = s.participant_id;
  l.condition = s.condition;
  l.query_ref = s.query_ref;
  l.gt_label = s.gt_label;
  l.original_label = s.original.prediction.label_id;
  l.original_correct = l.original_label == s.gt_label;
  for (const auto& step : s.steps) {
    l.steps.push_back({step.mask.to_bitstring(), step.result.prediction.label_id,
                       step.result.prediction.label_id == s.gt_label, format_timestamp(step.at)});
  }
  l.accepted = s.decision->accepted;
  l.created_at = format_timestamp(s.created_at);
  l.decided_at = format_timestamp(s.decision->at);
  return l;
}

inline nlohmann::json log_line_to_json(const LogLine& l) {
  auto steps = nlohmann::json::array();
  for (const auto& s : l.steps) {
    nlohmann::json j = {{"mask", s.mask}, {"label", s.label}, {"correct", s.correct}};
    if (s.at) j["at"] = *s.at;
    steps.push_back(std::move(j));
  }
  return {{"session_id", l.session_id},
          {"participant_id", l.participant_id},
          {"condition", to_string(l.condition)},
          {"query_ref", l.query_ref},
          {"gt_label", l.gt_label},
          {"original_label", l.original_label},
          {"original_correct", l.original_correct},
          {"steps", std::move(steps)},
          {"accepted", l.accepted},
          {"created_at", l.created_at},
          {"decided_at", l.decided_at}};
}

inline LogLine log_line_from_json(const nlohmann::json& j) {
  try {
    LogLine l;
    l.session_id = j.at("session_id").get<std::string>();
    l.participant_id = j.at("participant_id").get<std::string>();
    l.condition = parse_condition(j.at("condition").get<std::string>());
    l.query_ref = j.at("query_ref").get<std::string>();
    l.gt_label = j.at("gt_label").get<std::uint32_t>();
    l.original_label = j.at("original_label").get<std::uint32_t>();
    l.original_correct = j.at("original_correct").get<bool>();
    for (const auto& s : j.at("steps")) {
      StepSummary step{s.at("mask").get<std::string>(), s.at("label").get<std::uint32_t>(),
                       s.at("correct").get<bool>(), std::nullopt};
      if (s.contains("at")) step.at = s.at("at").get<std::string>();
      l.steps.push_back(std::move(step));
    }
    l.accepted = j.at("accepted").get<bool>();
    l.created_at = j.at("created_at").get<std::string>();
    l.decided_at = j.at("decided_at").get<std::string>();
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadRequest, std::string("malformed log line: ") + e.what());
  }
}

inline std::vector<LogLine> parse_log(std::istream& in) {
  std::vector<LogLine> lines;
  std::string text;
  std::size_t number = 0;
  while (std::getline(in, text)) {
    ++number;
    if (text.empty()) continue;
    try {
      lines.push_back(log_line_from_json(nlohmann::json::parse(text)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadRequest, "log line " + std::to_string(number) + ": " + e.what());
    }
  }
  return lines;
}

inline std::vector<LogLine> read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open log " + path.string());
  return parse_log(in);
}

inline std::size_t write_log(const std::vector<LogLine>& lines, const std::filesystem::path& path) {
  std::string text;
  for (const auto& l : lines) text += log_line_to_json(l).dump() + "\n";
  detail::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return lines.size();
}

/// Append-only file; each append is a single write(2) on an O_APPEND descriptor.
class AppendLog {
 public:
  explicit AppendLog(const std::filesystem::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(ErrorCode::StorageFailure, "cannot open log " + path.string());
  }
  AppendLog(const AppendLog&) = delete;
  AppendLog& operator=(const AppendLog&) = delete;
  ~AppendLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  void append(const std::string& line) {
    std::lock_guard lock(mutex_);
    const ssize_t n = ::write(fd_, line.data(), line.size());
    if (n != static_cast<ssize_t>(line.size())) {
      throw Error(ErrorCode::StorageFailure, "short write to " + path_.string());
    }
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  std::mutex mutex_;
};

/// Thread-safe store of sessions backed by an optional append-only log.
/// Mutations of one session are serialized; distinct sessions proceed in
/// parallel against the shared read-only index.
class SessionStore {
 public:
  using ClockFn = std::function<Timestamp()>;

  SessionStore(std::shared_ptr<const DatasetIndex> index, std::shared_ptr<const EvaluationSet> eval,
               ClassifierConfig config, std::optional<std::filesystem::path> log_path = std::nullopt,
               ClockFn clock = now_ms)
      : index_(std::move(index)), eval_(std::move(eval)), config_(config), clock_(std::move(clock)) {
    config_.validate();
    if (log_path) log_ = std::make_unique<AppendLog>(*log_path);
  }

  const DatasetIndex& index() const { return *index_; }
  const EvaluationSet& evaluation_set() const { return *eval_; }
  const ClassifierConfig& config() const { return config_; }

  Session create_session(const std::string& participant_id, Condition condition, const std::string& query_ref) {
    const EvalItem* item = eval_->find(query_ref);
    if (item == nullptr) throw Error(ErrorCode::UnknownQuery, "query '" + query_ref + "' is not in the evaluation set");
    auto slot = std::make_shared<Slot>();
    Session& s = slot->session;
    s.participant_id = participant_id;
    s.condition = condition;
    s.query_ref = query_ref;
    s.gt_label = item->gt_label;
    s.original = classify(*index_, item->embedding, std::nullopt, config_);
    s.created_at = clock_();
    {
      std::unique_lock lock(map_mutex_);
      s.session_id = make_id(++next_id_);
      sessions_.emplace(s.session_id, slot);
    }
    return s;
  }

  InteractionStep apply_attention(const std::string& session_id, const AttentionMask& mask) {
    auto slot = find_slot(session_id);
    std::lock_guard lock(slot->mutex);
    Session& s = slot->session;
    if (s.condition == Condition::Static) {
      throw Error(ErrorCode::StaticCondition, "session " + session_id + " uses static explanations");
    }
    if (s.finalized()) throw Error(ErrorCode::SessionFinalized, "session " + session_id + " already has a decision");
    if (mask.empty()) throw Error(ErrorCode::EmptyMask, "attention mask selects no cells");
    const EvalItem* item = eval_->find(s.query_ref);
    InteractionStep step{mask, classify(*index_, item->embedding, mask, config_), clock_()};
    s.steps.push_back(step);
    return step;
  }

  Session record_decision(const std::string& session_id, bool accepted) {
    auto slot = find_slot(session_id);
    std::lock_guard lock(slot->mutex);
    Session& s = slot->session;
    if (s.finalized()) throw Error(ErrorCode::SessionFinalized, "session " + session_id + " already has a decision");
    Session closed = s;
    closed.decision = Decision{accepted, clock_()};
    // Log first: if the append fails the session stays open.
    {
      std::lock_guard order_lock(order_mutex_);
      if (log_) log_->append(log_line_to_json(to_log_line(closed)).dump() + "\n");
      decision_order_.push_back(session_id);
    }
    s = closed;
    return s;
  }

  Session get(const std::string& session_id) const {
    auto slot = find_slot(session_id);
    std::lock_guard lock(slot->mutex);
    return slot->session;
  }

  std::size_t session_count() const {
    std::shared_lock lock(map_mutex_);
    return sessions_.size();
  }

  /// Closed sessions in decision order.
  std::vector<Session> finalized_sessions() const {
    std::vector<std::string> order;
    {
      std::lock_guard lock(order_mutex_);
      order = decision_order_;
    }
    std::vector<Session> out;
    out.reserve(order.size());
    for (const auto& id : order) out.push_back(get(id));
    return out;
  }

  std::vector<LogLine> finalized_log_lines() const {
    std::vector<LogLine> lines;
    for (const auto& s : finalized_sessions()) lines.push_back(to_log_line(s));
    return lines;
  }

  /// Writes the canonical JSONL log of closed sessions; returns the line count.
  std::size_t export_log(const std::filesystem::path& path) const { return write_log(finalized_log_lines(), path); }

  /// Rebuilds closed sessions from a log written by a previous store over the
  /// same index, evaluation set and config. Every recorded prediction is
  /// re-derived and checked against the logged label.
  std::size_t recover(const std::vector<LogLine>& lines) {
    std::size_t restored = 0;
    for (const auto& line : lines) {
      const EvalItem* item = eval_->find(line.query_ref);
      if (item == nullptr) throw Error(ErrorCode::UnknownQuery, "log references unknown query '" + line.query_ref + "'");
      auto slot = std::make_shared<Slot>();
      Session& s = slot->session;
      s.session_id = line.session_id;
      s.participant_id = line.participant_id;
      s.condition = line.condition;
      s.query_ref = line.query_ref;
      s.gt_label = item->gt_label;
      s.original = classify(*index_, item->embedding, std::nullopt, config_);
      if (s.original.prediction.label_id != line.original_label || s.gt_label != line.gt_label) {
        throw Error(ErrorCode::ReplayMismatch, "session " + line.session_id + " original prediction differs from log");
      }
      for (const auto& st : line.steps) {
        const auto mask = AttentionMask::from_bitstring(st.mask);
        InteractionStep step{mask, classify(*index_, item->embedding, mask, config_),
                             st.at ? parse_timestamp(*st.at) : parse_timestamp(line.decided_at)};
        if (step.result.prediction.label_id != st.label) {
          throw Error(ErrorCode::ReplayMismatch, "session " + line.session_id + " step prediction differs from log");
        }
        s.steps.push_back(std::move(step));
      }
      s.created_at = parse_timestamp(line.created_at);
      s.decision = Decision{line.accepted, parse_timestamp(line.decided_at)};
      {
        std::unique_lock lock(map_mutex_);
        if (!sessions_.emplace(s.session_id, slot).second) {
          throw Error(ErrorCode::DuplicateId, "session " + s.session_id + " already present");
        }
        next_id_ = std::max(next_id_, parse_id(s.session_id));
      }
      {
        std::lock_guard lock(order_mutex_);
        decision_order_.push_back(s.session_id);
      }
      ++restored;
    }
    return restored;
  }

  std::size_t recover(const std::filesystem::path& log_path) {
    if (!std::filesystem::exists(log_path)) return 0;
    return recover(read_log(log_path));
  }

 private:
  struct Slot {
    mutable std::mutex mutex;
    Session session;
  };

  static std::string make_id(std::uint64_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%06llu", static_cast<unsigned long long>(n));
    return buf;
  }
  static std::uint64_t parse_id(const std::string& id) {
    if (id.size() < 2 || id[0] != 's') return 0;
    try {
      return std::stoull(id.substr(1));
    } catch (const std::exception&) {
      return 0;
    }
  }

  std::shared_ptr<Slot> find_slot(const std::string& id) const {
    std::shared_lock lock(map_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::UnknownSession, "no session '" + id + "'");
    return it->second;
  }

  std::shared_ptr<const DatasetIndex> index_;
  std::shared_ptr<const EvaluationSet> eval_;
  ClassifierConfig config_;
  ClockFn clock_;
  std::unique_ptr<AppendLog> log_;

  mutable std::shared_mutex map_mutex_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
  std::uint64_t next_id_ = 0;

  mutable std::mutex order_mutex_;
  std::vector<std::string> decision_order_;
};

// ---------------------------------------------------------------------------
// Wire encoding of sessions for the HTTP API. Ground truth stays server-side.

inline nlohmann::json step_to_json(const InteractionStep& step, const DatasetIndex& index) {
  return {{"mask", step.mask.to_bools()},
          {"mask_bits", step.mask.to_bitstring()},
          {"result", classification_to_json(step.result, &index)},
          {"at", format_timestamp(step.at)}};
}

inline nlohmann::json session_to_json(const Session& s, const DatasetIndex& index) {
  auto steps = nlohmann::json::array();
  for (const auto& st : s.steps) steps.push_back(step_to_json(st, index));
  nlohmann::json decision = nullptr;
  if (s.decision) decision = {{"accepted", s.decision->accepted}, {"at", format_timestamp(s.decision->at)}};
  return {{"session_id", s.session_id},
          {"participant_id", s.participant_id},
          {"condition", to_string(s.condition)},
          {"query_ref", s.query_ref},
          {"original", classification_to_json(s.original, &index)},
          {"steps", std::move(steps)},
          {"decision", std::move(decision)},
          {"created_at", format_timestamp(s.created_at)}};
}

}  // namespace corr_attn
