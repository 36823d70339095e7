// corr-attn: dataset tooling, one-shot classification, the session server
// and study analysis.

#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "corr_attn/corr_attn.hpp"
#include "corr_attn/http_service.hpp"

namespace {

using namespace corr_attn;

void add_config_options(CLI::App* cmd, ClassifierConfig& config) {
  cmd->add_option("--n", config.n_candidates, "kNN candidate count")->capture_default_str();
  cmd->add_option("--t", config.pairs_per_candidate, "correspondence pairs scored per candidate")
      ->capture_default_str();
  cmd->add_option("--k", config.vote_pool, "re-ranked candidates that vote")->capture_default_str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "write failed on " + path);
}

int cmd_validate(const std::string& path) {
  const auto index = load_dataset(path);
  std::cout << path << ": ok\n"
            << "  records  " << index.size() << "\n"
            << "  classes  " << index.classes().size() << "\n"
            << "  D_g      " << index.global_dim() << "\n"
            << "  D_p      " << index.patch_dim() << "\n";
  return 0;
}

int cmd_classify(const std::string& index_path, const std::string& query_path, const std::string& query_id,
                 const std::string& mask_bits, const ClassifierConfig& config, const std::string& out_path) {
  const auto index = load_dataset(index_path);
  const auto queries = load_dataset(query_path);
  if (queries.empty()) throw Error(ErrorCode::UnknownQuery, query_path + " has no records");
  std::size_t pos = 0;
  if (!query_id.empty()) {
    auto found = queries.find(query_id);
    if (!found) throw Error(ErrorCode::UnknownQuery, "no record '" + query_id + "' in " + query_path);
    pos = *found;
  }
  std::optional<AttentionMask> mask;
  if (!mask_bits.empty()) mask = AttentionMask::from_bitstring(mask_bits);
  const auto result = classify(index, QueryEmbedding::from_record(queries[pos]), mask, config);
  auto j = classification_to_json(result, &index);
  j["query"] = queries[pos].id;
  write_text(out_path, j.dump(2) + "\n");
  const auto label = result.prediction.label_id;
  std::cout << queries[pos].id << " -> " << index.classes()[label] << " (" << result.prediction.vote_count
            << " votes)\n";
  return 0;
}

HttpService* g_service = nullptr;

void handle_signal(int) {
  if (g_service != nullptr) g_service->stop();
}

int cmd_serve(const std::string& index_path, const std::string& eval_path, const std::string& log_path,
              const std::string& host, int port, const ClassifierConfig& config) {
  auto index = std::make_shared<const DatasetIndex>(load_dataset(index_path));
  auto eval = load_evaluation(eval_path);
  if (eval.pool->global_dim() != index->global_dim() || eval.pool->patch_dim() != index->patch_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "evaluation pool dimensions do not match the index");
  }
  SessionStore store(index, eval.queries, config, log_path);
  const std::size_t restored = store.recover(log_path);
  HttpService service(store);
  g_service = &service;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::cout << "serving " << eval.queries->size() << " queries on http://" << host << ":" << port << " (restored "
            << restored << " closed sessions from " << log_path << ")\n";
  const bool ok = service.listen(host, port);
  g_service = nullptr;
  return ok ? 0 : 1;
}

int cmd_study_sample(const std::string& index_path, const std::string& pool_path, std::size_t n_correct,
                     std::size_t n_incorrect, std::uint64_t seed, const ClassifierConfig& config,
                     const std::string& out_path) {
  const auto index = load_dataset(index_path);
  const auto pool = load_dataset(pool_path);
  const auto samples = study::build_balanced_set(index, config, pool, n_correct, n_incorrect, seed);
  write_eval_file(out_path, pool_path, config, seed, samples);
  std::cout << "wrote " << samples.size() << " samples (" << n_correct << " AI-correct, " << n_incorrect
            << " AI-incorrect) to " << out_path << "\n";
  return 0;
}

int cmd_study_analyze(const std::string& log_path, const std::string& unit, std::size_t batch,
                      const std::string& out_path) {
  const auto lines = read_log(log_path);
  const auto report = study::aggregate(lines, study::parse_unit(unit), batch);
  if (!out_path.empty()) write_text(out_path, study::to_json(report).dump(2) + "\n");
  std::cout << study::render_text(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Correspondence classifier with editable attention, session server and study analysis"};
  app.require_subcommand(1);

  auto* dataset = app.add_subcommand("dataset", "Embedding dataset files");
  dataset->require_subcommand(1);

  std::string validate_path;
  auto* validate = dataset->add_subcommand("validate", "Load and validate a dataset file");
  validate->add_option("path", validate_path, "dataset file")->required();

  SynthParams synth;
  std::optional<std::uint64_t> noise_seed;
  std::string synth_out;
  auto* synth_cmd = dataset->add_subcommand("synth", "Generate a synthetic dataset with planted classes");
  synth_cmd->add_option("--n", synth.n_records, "record count")->required();
  synth_cmd->add_option("--classes", synth.n_classes, "class count")->required();
  synth_cmd->add_option("--dim", synth.dim, "patch/global dimension")->required();
  synth_cmd->add_option("--spread", synth.spread, "noise scale around class prototypes")->required();
  synth_cmd->add_option("--seed", synth.seed, "prototype seed")->required();
  synth_cmd->add_option("--noise-seed", noise_seed, "per-record noise seed (default: --seed)");
  synth_cmd->add_option("--id-prefix", synth.id_prefix, "record id prefix")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "output path")->required();

  ClassifierConfig classify_config;
  std::string index_path, query_path, query_id, mask_bits, classify_out;
  auto* classify_cmd = app.add_subcommand("classify", "Classify one query");
  classify_cmd->add_option("--index", index_path, "training dataset")->required();
  classify_cmd->add_option("--query", query_path, "dataset file holding the query")->required();
  classify_cmd->add_option("--query-id", query_id, "record id inside --query (default: first record)");
  classify_cmd->add_option("--mask", mask_bits, "49-character 0/1 attention mask, row-major");
  add_config_options(classify_cmd, classify_config);
  classify_cmd->add_option("--out", classify_out, "output JSON")->required();

  ClassifierConfig serve_config;
  std::string serve_index, eval_path, log_path, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the interactive session server");
  serve->add_option("--index", serve_index, "training dataset")->required();
  serve->add_option("--eval", eval_path, "evaluation JSON or dataset file")->required();
  serve->add_option("--log", log_path, "append-only JSONL study log")->required();
  serve->add_option("--port", port, "TCP port")->capture_default_str();
  serve->add_option("--host", host, "bind address")->capture_default_str();
  add_config_options(serve, serve_config);

  auto* study_cmd = app.add_subcommand("study", "Study materials and analysis");
  study_cmd->require_subcommand(1);

  ClassifierConfig sample_config;
  std::string sample_index, pool_path, sample_out;
  std::size_t n_correct = 300, n_incorrect = 300;
  std::uint64_t sample_seed = 0;
  auto* sample = study_cmd->add_subcommand("sample", "Draw a balanced evaluation set");
  sample->add_option("--index", sample_index, "training dataset")->required();
  sample->add_option("--pool", pool_path, "labeled query pool (dataset file)")->required();
  sample->add_option("--n-correct", n_correct, "AI-correct samples")->capture_default_str();
  sample->add_option("--n-incorrect", n_incorrect, "AI-incorrect samples")->capture_default_str();
  sample->add_option("--seed", sample_seed, "sampling seed")->required();
  add_config_options(sample, sample_config);
  sample->add_option("--out", sample_out, "output evaluation JSON")->required();

  std::string analyze_log, unit = "submission", analyze_out;
  std::size_t batch = study::kDecisionsPerSubmission;
  auto* analyze = study_cmd->add_subcommand("analyze", "Summarize a study log");
  analyze->add_option("--log", analyze_log, "JSONL study log")->required();
  analyze->add_option("--unit", unit, "submission | participant")
      ->check(CLI::IsMember({"submission", "participant"}))
      ->capture_default_str();
  analyze->add_option("--batch", batch, "decisions per submission")->capture_default_str();
  analyze->add_option("--out", analyze_out, "report JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) return cmd_validate(validate_path);
    if (synth_cmd->parsed()) {
      synth.noise_seed = noise_seed;
      write_dataset(synth_dataset(synth), synth_out);
      std::cout << "wrote " << synth.n_records << " records to " << synth_out << "\n";
      return 0;
    }
    if (classify_cmd->parsed()) {
      return cmd_classify(index_path, query_path, query_id, mask_bits, classify_config, classify_out);
    }
    if (serve->parsed()) return cmd_serve(serve_index, eval_path, log_path, host, port, serve_config);
    if (sample->parsed()) {
      return cmd_study_sample(sample_index, pool_path, n_correct, n_incorrect, sample_seed, sample_config, sample_out);
    }
    if (analyze->parsed()) return cmd_study_analyze(analyze_log, unit, batch, analyze_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
