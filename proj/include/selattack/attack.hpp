#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "selattack/blackbox.hpp"
#include "selattack/corpus.hpp"
#include "selattack/selector.hpp"

namespace selattack {

enum class RankingKind { selector_rank, deletion_rank, random_rank };
const char* ranking_kind_name(RankingKind k);
RankingKind ranking_kind_from_string(const std::string& s);

// selector_rank costs 0 target queries per ranking; deletion_rank costs
// exactly L; random_rank costs 0 and derives its order from (seed, example).
struct RankingProvider {
  RankingKind kind = RankingKind::selector_rank;
  const SelectorModel* selector = nullptr;
  uint64_t seed = 0;
};

struct AttackConfig {
  double max_perturb_fraction = 0.4;  // rho: cap on committed substitutions
  int candidate_limit = 8;
  std::set<std::string> stopwords;    // never substituted, ranked last
  RankingKind ranking = RankingKind::selector_rank;

  int budget_for(int length) const;
};

std::set<std::string> load_stopwords(const std::string& path);

struct PhaseCounts {
  uint64_t ranking = 0;
  uint64_t substitution = 0;
  uint64_t evaluation = 0;
  uint64_t attack_total() const { return ranking + substitution; }
  uint64_t total() const { return ranking + substitution + evaluation; }
};

struct SubstitutionStep {
  int position = -1;
  std::string old_word, new_word;
  double original_class_prob = 0.0;  // after committing this substitution
};

struct AttackOutcome {
  Document original, perturbed;
  bool success = false;
  int original_label = -1;
  int final_label = -1;
  int words_perturbed = 0;
  PhaseCounts queries;
  std::vector<SubstitutionStep> trace;
  int64_t example_id = -1;
};

// Full ordering of token positions, most important first; stopword
// positions are demoted to the tail in original order.
std::vector<int> rank_words(const RankingProvider& provider, const Document& doc,
                            int original_label, const TargetAdapter& target,
                            const AttackConfig& config, QueryLedger& ledger,
                            int64_t example_id = 0);

// Initial prediction already counted by the caller (one evaluation query).
struct InitialPrediction {
  std::vector<double> probs;
};

// Greedy importance-ordered synonym substitution. Visits positions in rank
// order; at each position every candidate is scored with one substitution
// query, the strict best improvement is committed, and the attack stops the
// moment the committed substitution flips the label.
AttackOutcome greedy_attack(const Document& doc, const TargetAdapter& target,
                            const AttackConfig& config, const RankingProvider& provider,
                            const SynonymIndex& synonyms, const Vocab& vocab,
                            QueryLedger& ledger, int64_t example_id = 0,
                            const InitialPrediction* initial = nullptr);

struct OracleResult {
  bool flip_exists = false;
  int min_words_perturbed = 0;
  Document witness;
};

// Brute force over every substitution combination within the perturbation
// budget. Bounded to L <= 8 and <= 3 candidates per position. Queries go
// straight to the adapter and are not ledger-counted (verification only).
OracleResult exhaustive_attack_oracle(const Document& doc, const TargetAdapter& target,
                                      const AttackConfig& config, const SynonymIndex& synonyms,
                                      const Vocab& vocab);

// One outcome per line, JSON records with a stable field order.
void append_trace(const AttackOutcome& outcome, std::ostream& out);
std::string outcome_to_json(const AttackOutcome& outcome);
std::vector<AttackOutcome> load_traces(const std::string& path, const Vocab& vocab);

}  // namespace selattack
