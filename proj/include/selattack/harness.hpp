#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "selattack/attack.hpp"
#include "selattack/blackbox.hpp"
#include "selattack/corpus.hpp"
#include "selattack/selector.hpp"

namespace selattack {

struct TargetSpec {
  enum class Kind { linear_bow, local_cnn, remote };
  Kind kind = Kind::linear_bow;
  std::string checkpoint;  // local kinds
  std::string url;         // remote
  double timeout_sec = 5.0;
  int max_retries = 2;
  int classes = 2;
};
const char* target_kind_name(TargetSpec::Kind k);
TargetSpec::Kind target_kind_from_string(const std::string& s);

struct AttackSettings {
  double max_perturb_fraction = 0.4;
  int candidate_limit = 8;
  std::string stopword_path;  // empty = no stopword demotion
  RankingKind ranking = RankingKind::selector_rank;
};

// A run is reproducible from this config and nothing else.
struct ExperimentConfig {
  std::string substitute_path;
  std::string target_train_path;
  std::string target_test_path;
  DatasetFormat format = DatasetFormat::csv;
  std::string embedding_path;
  std::string synonym_embedding_path;  // empty = share embedding_path
  std::string synonym_cache_path;      // empty = rebuild every run
  int synonym_candidates = 8;
  double synonym_min_cosine = 0.5;
  TargetSpec target;
  SelectionConfig selection;
  TrainingConfig training;
  bool train_selector = true;  // false attacks with the freshly initialized selector
  AttackSettings attack;
  int eval_count = 200;
  int workers = 1;
  uint64_t seed = 1;
  std::string out_dir = "out";
};

ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& config, const std::string& path);
uint64_t config_hash(const ExperimentConfig& config);

struct ExperimentReport {
  double clean_acc = 0.0;   // percent
  double adv_acc = 0.0;     // percent, denominator = full evaluation sample
  double avg_queries = 0.0; // mean attack-phase queries per attacked example
  uint64_t overhead_queries = 0;
  uint64_t evaluation_queries = 0;
  uint64_t attack_ranking_queries = 0;
  uint64_t attack_substitution_queries = 0;
  uint64_t total_queries = 0;
  int eval_count = 0;
  int attacked = 0;
  int flipped = 0;
  int test_portion = 0;
  std::string labels_source;
  std::string ranking;
  std::string config_hash_hex;
  double wall_seconds = 0.0;  // excluded from determinism comparisons
};

std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);
void save_report(const ExperimentReport& report, const std::string& path);
ExperimentReport load_report(const std::string& path);

// One record per evaluation example. Examples the target already gets
// wrong are not attacked and carry no outcome.
struct EvalRecord {
  int gold = 0;
  int predicted = 0;
  std::optional<AttackOutcome> outcome;
};

// clean_acc: evaluation examples the target labels correctly.
// adv_acc:   examples still correctly labeled after attacking the correct
//            ones, over the full evaluation sample.
// avg_queries: mean attack-phase (ranking + substitution) queries over
//            attacked examples.
ExperimentReport compute_metrics(const std::vector<EvalRecord>& records);

// Everything loaded/derived once per experiment; exposed so callers can
// run several attack configurations against the same trained state.
struct ExperimentState {
  EmbeddingTable embeddings;
  SynonymIndex synonyms;
  std::vector<LabeledExample> substitute, target_train, target_test;
  std::unique_ptr<TargetAdapter> target;
  std::unique_ptr<SelectorModel> selector;
  std::unique_ptr<SubstituteClassifier> fb;
  QueryLedger ledger;
  TrainingLog training_log;
};

// ingest -> target -> distill -> train selector -> attack -> metrics.
// Writes report.json and traces.jsonl under config.out_dir.
ExperimentReport run_experiment(const ExperimentConfig& config);
ExperimentReport run_experiment(const ExperimentConfig& config, ExperimentState* state_out);

// Attack + metrics stage on prepared state. Evaluation examples are drawn
// from the target test split by seed; attacks fan out over config.workers
// with per-example sub-ledgers merged into state.ledger.
std::vector<EvalRecord> attack_evaluation_sample(const ExperimentConfig& config,
                                                 ExperimentState& state);

// Portions may be fractions in (0,1] or absolute counts (> 1). Emits one
// report per portion plus a combined CSV at csv_path (empty = no CSV).
std::vector<ExperimentReport> run_ablation(const ExperimentConfig& config,
                                           const std::vector<double>& portions,
                                           const std::string& csv_path);

// Gold-label logistic regression trainer for the transparent target kind.
LinearBowTarget train_linear_bow(std::span<const LabeledExample> data, int epochs, double lr,
                                 uint64_t seed);

}  // namespace selattack
