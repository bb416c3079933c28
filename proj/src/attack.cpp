#include "selattack/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "selattack/util.hpp"

namespace selattack {

const char* ranking_kind_name(RankingKind k) {
  switch (k) {
    case RankingKind::selector_rank: return "selector_rank";
    case RankingKind::deletion_rank: return "deletion_rank";
    case RankingKind::random_rank: return "random_rank";
  }
  return "?";
}

RankingKind ranking_kind_from_string(const std::string& s) {
  if (s == "selector_rank") return RankingKind::selector_rank;
  if (s == "deletion_rank") return RankingKind::deletion_rank;
  if (s == "random_rank") return RankingKind::random_rank;
  throw Error("unknown ranking kind '" + s + "'");
}

int AttackConfig::budget_for(int length) const {
  return static_cast<int>(std::ceil(max_perturb_fraction * length));
}

std::set<std::string> load_stopwords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open stopword file: " + path);
  std::set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] != '#') words.insert(line);
  }
  return words;
}

namespace {

Document with_substitution(const Document& doc, int position, int new_id,
                           const std::string& new_word) {
  Document out = doc;
  out.tokens[static_cast<size_t>(position)] = new_word;
  out.ids[static_cast<size_t>(position)] = new_id;
  out.raw = out.joined();
  return out;
}

std::vector<int> order_by_importance(const std::vector<double>& importance) {
  std::vector<int> order(importance.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (importance[a] != importance[b]) return importance[a] > importance[b];
    return a < b;
  });
  return order;
}

}  // namespace

std::vector<int> rank_words(const RankingProvider& provider, const Document& doc,
                            int original_label, const TargetAdapter& target,
                            const AttackConfig& config, QueryLedger& ledger,
                            int64_t example_id) {
  if (doc.empty()) throw Error("rank_words: empty document");
  const size_t L = doc.tokens.size();

  std::vector<int> order;
  switch (provider.kind) {
    case RankingKind::selector_rank: {
      if (!provider.selector) throw Error("rank_words: selector_rank without a selector");
      order = order_by_importance(provider.selector->scores(doc));
      break;
    }
    case RankingKind::deletion_rank: {
      // Lower remaining true-class probability after deleting position i
      // means a larger drop, so rank by the negated remainder. One query
      // per position, exactly L in total.
      std::vector<double> importance(L);
      for (size_t i = 0; i < L; ++i) {
        Document reduced = doc;
        reduced.tokens.erase(reduced.tokens.begin() + static_cast<long>(i));
        reduced.ids.erase(reduced.ids.begin() + static_cast<long>(i));
        reduced.raw = reduced.joined();
        std::vector<double> probs =
            predict_proba(target, reduced, ledger, Phase::attack_ranking);
        importance[i] = -probs[static_cast<size_t>(original_label)];
      }
      order = order_by_importance(importance);
      break;
    }
    case RankingKind::random_rank: {
      order.resize(L);
      std::iota(order.begin(), order.end(), 0);
      auto rng = named_rng(mix_seed(provider.seed, static_cast<uint64_t>(example_id)), "rank");
      std::shuffle(order.begin(), order.end(), rng);
      break;
    }
  }

  if (!config.stopwords.empty()) {
    std::vector<int> head, tail;
    for (int pos : order)
      if (config.stopwords.count(doc.tokens[static_cast<size_t>(pos)]))
        tail.push_back(pos);
      else
        head.push_back(pos);
    std::sort(tail.begin(), tail.end());
    head.insert(head.end(), tail.begin(), tail.end());
    order = std::move(head);
  }
  return order;
}

AttackOutcome greedy_attack(const Document& doc, const TargetAdapter& target,
                            const AttackConfig& config, const RankingProvider& provider,
                            const SynonymIndex& synonyms, const Vocab& vocab,
                            QueryLedger& ledger, int64_t example_id,
                            const InitialPrediction* initial) {
  if (doc.empty()) throw Error("greedy_attack: empty document");

  AttackOutcome outcome;
  outcome.original = doc;
  outcome.example_id = example_id;

  std::vector<double> init_probs;
  if (initial) {
    init_probs = initial->probs;
  } else {
    init_probs = predict_proba(target, doc, ledger, Phase::evaluation);
  }
  outcome.queries.evaluation = 1;
  outcome.original_label = argmax_label(init_probs);
  outcome.final_label = outcome.original_label;

  uint64_t ranking_before = ledger.count(Phase::attack_ranking);
  std::vector<int> order =
      rank_words(provider, doc, outcome.original_label, target, config, ledger, example_id);
  outcome.queries.ranking = ledger.count(Phase::attack_ranking) - ranking_before;

  const int budget = config.budget_for(doc.length());
  double current_prob = init_probs[static_cast<size_t>(outcome.original_label)];
  Document current = doc;

  for (int pos : order) {
    if (outcome.words_perturbed >= budget) break;
    const std::string& word = current.tokens[static_cast<size_t>(pos)];
    if (config.stopwords.count(word)) continue;
    const auto& candidates = synonyms.candidates_for(current.ids[static_cast<size_t>(pos)]);
    if (candidates.empty()) continue;

    int limit = std::min<int>(config.candidate_limit, static_cast<int>(candidates.size()));
    double best_prob = current_prob;
    int best_candidate = -1;
    std::vector<double> best_probs;
    for (int c = 0; c < limit; ++c) {
      const auto& [cand_id, cand_score] = candidates[static_cast<size_t>(c)];
      Document trial =
          with_substitution(current, pos, cand_id, vocab.words[static_cast<size_t>(cand_id)]);
      std::vector<double> probs =
          predict_proba(target, trial, ledger, Phase::attack_substitution);
      ++outcome.queries.substitution;
      double p = probs[static_cast<size_t>(outcome.original_label)];
      if (p < best_prob) {
        best_prob = p;
        best_candidate = c;
        best_probs = std::move(probs);
      }
    }
    if (best_candidate < 0) continue;  // no strict improvement at this position

    const auto& [cand_id, cand_score] = candidates[static_cast<size_t>(best_candidate)];
    std::string new_word = vocab.words[static_cast<size_t>(cand_id)];
    SubstitutionStep step;
    step.position = pos;
    step.old_word = current.tokens[static_cast<size_t>(pos)];
    step.new_word = new_word;
    step.original_class_prob = best_prob;
    outcome.trace.push_back(std::move(step));
    current = with_substitution(current, pos, cand_id, new_word);
    current_prob = best_prob;
    ++outcome.words_perturbed;

    int label_now = argmax_label(best_probs);
    if (label_now != outcome.original_label) {
      outcome.success = true;
      outcome.final_label = label_now;
      break;
    }
  }

  outcome.perturbed = current;
  ledger.attribute(example_id, outcome.queries.attack_total());
  return outcome;
}

OracleResult exhaustive_attack_oracle(const Document& doc, const TargetAdapter& target,
                                      const AttackConfig& config, const SynonymIndex& synonyms,
                                      const Vocab& vocab) {
  const int L = doc.length();
  if (L > 8) throw Error("exhaustive_attack_oracle: document length exceeds bound of 8");

  // Per-position options: index 0 keeps the original word.
  std::vector<std::vector<std::pair<int, std::string>>> options(static_cast<size_t>(L));
  for (int pos = 0; pos < L; ++pos) {
    auto& opts = options[static_cast<size_t>(pos)];
    opts.emplace_back(doc.ids[static_cast<size_t>(pos)], doc.tokens[static_cast<size_t>(pos)]);
    if (config.stopwords.count(doc.tokens[static_cast<size_t>(pos)])) continue;
    const auto& candidates = synonyms.candidates_for(doc.ids[static_cast<size_t>(pos)]);
    int limit = std::min<int>(config.candidate_limit, static_cast<int>(candidates.size()));
    if (limit > 3)
      throw Error("exhaustive_attack_oracle: more than 3 candidates at position " +
                  std::to_string(pos));
    for (int c = 0; c < limit; ++c)
      opts.emplace_back(candidates[static_cast<size_t>(c)].first,
                        vocab.words[static_cast<size_t>(candidates[static_cast<size_t>(c)].first)]);
  }

  const int original_label = argmax_label(target.score(doc));
  const int budget = config.budget_for(L);

  OracleResult result;
  std::vector<size_t> choice(static_cast<size_t>(L), 0);
  // Odometer over all combinations; prune by perturbation count.
  while (true) {
    int perturbed = 0;
    for (int pos = 0; pos < L; ++pos)
      if (choice[static_cast<size_t>(pos)] != 0) ++perturbed;
    if (perturbed > 0 && perturbed <= budget &&
        (!result.flip_exists || perturbed < result.min_words_perturbed)) {
      Document trial = doc;
      for (int pos = 0; pos < L; ++pos) {
        const auto& [id, word] = options[static_cast<size_t>(pos)][choice[static_cast<size_t>(pos)]];
        trial.ids[static_cast<size_t>(pos)] = id;
        trial.tokens[static_cast<size_t>(pos)] = word;
      }
      trial.raw = trial.joined();
      if (argmax_label(target.score(trial)) != original_label) {
        if (!result.flip_exists || perturbed < result.min_words_perturbed) {
          result.flip_exists = true;
          result.min_words_perturbed = perturbed;
          result.witness = trial;
        }
      }
    }
    // advance odometer
    int pos = 0;
    while (pos < L) {
      if (++choice[static_cast<size_t>(pos)] < options[static_cast<size_t>(pos)].size()) break;
      choice[static_cast<size_t>(pos)] = 0;
      ++pos;
    }
    if (pos == L) break;
  }
  return result;
}

std::string outcome_to_json(const AttackOutcome& outcome) {
  nlohmann::ordered_json j;
  j["example_id"] = outcome.example_id;
  j["original_tokens"] = outcome.original.tokens;
  j["perturbed_tokens"] = outcome.perturbed.tokens;
  j["success"] = outcome.success;
  j["original_label"] = outcome.original_label;
  j["final_label"] = outcome.final_label;
  j["words_perturbed"] = outcome.words_perturbed;
  j["queries"] = {{"ranking", outcome.queries.ranking},
                  {"substitution", outcome.queries.substitution},
                  {"evaluation", outcome.queries.evaluation}};
  nlohmann::ordered_json trace = nlohmann::ordered_json::array();
  for (const auto& step : outcome.trace) {
    trace.push_back({{"position", step.position},
                     {"old_word", step.old_word},
                     {"new_word", step.new_word},
                     {"original_class_prob", step.original_class_prob}});
  }
  j["trace"] = std::move(trace);
  return j.dump();
}

void append_trace(const AttackOutcome& outcome, std::ostream& out) {
  out << outcome_to_json(outcome) << "\n";
}

std::vector<AttackOutcome> load_traces(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trace file: " + path);
  std::vector<AttackOutcome> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw Error(path + ":" + std::to_string(line_no) + ": malformed trace record");
    AttackOutcome o;
    o.example_id = j.at("example_id").get<int64_t>();
    auto rebuild = [&vocab](const std::vector<std::string>& tokens) {
      Document d;
      d.tokens = tokens;
      d.ids.reserve(tokens.size());
      for (const auto& t : tokens) d.ids.push_back(vocab.lookup(t));
      d.raw = d.joined();
      return d;
    };
    o.original = rebuild(j.at("original_tokens").get<std::vector<std::string>>());
    o.perturbed = rebuild(j.at("perturbed_tokens").get<std::vector<std::string>>());
    o.success = j.at("success").get<bool>();
    o.original_label = j.at("original_label").get<int>();
    o.final_label = j.at("final_label").get<int>();
    o.words_perturbed = j.at("words_perturbed").get<int>();
    o.queries.ranking = j.at("queries").at("ranking").get<uint64_t>();
    o.queries.substitution = j.at("queries").at("substitution").get<uint64_t>();
    o.queries.evaluation = j.at("queries").at("evaluation").get<uint64_t>();
    for (const auto& s : j.at("trace")) {
      SubstitutionStep step;
      step.position = s.at("position").get<int>();
      step.old_word = s.at("old_word").get<std::string>();
      step.new_word = s.at("new_word").get<std::string>();
      step.original_class_prob = s.at("original_class_prob").get<double>();
      o.trace.push_back(std::move(step));
    }
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace selattack
