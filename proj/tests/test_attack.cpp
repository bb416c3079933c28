#include <doctest.h>

#include <cmath>
#include <fstream>

#include "selattack/attack.hpp"
#include "selattack/util.hpp"

using namespace selattack;

namespace {

Vocab make_vocab(const std::vector<std::string>& words) {
  Vocab v;
  v.words = words;
  for (size_t i = 0; i < words.size(); ++i) v.index[words[i]] = static_cast<int>(i);
  v.unk_index = static_cast<int>(words.size());
  return v;
}

Document doc_of(const std::vector<std::string>& tokens, const Vocab& v) {
  Document d;
  d.tokens = tokens;
  for (const auto& t : tokens) d.ids.push_back(v.lookup(t));
  d.raw = d.joined();
  return d;
}

// good <-> bad are planted synonyms; fine <-> ok likewise; movie is isolated.
struct Fixture {
  Vocab vocab = make_vocab({"good", "bad", "fine", "ok", "movie"});
  SynonymIndex synonyms;
  LinearBowTarget target{{{"good", 1.0}, {"bad", -1.0}, {"fine", 0.5}, {"ok", 0.4}}, 0.0};

  Fixture() {
    synonyms.max_candidates = 8;
    synonyms.min_cosine = 0.5;
    synonyms.candidates.resize(vocab.words.size() + 1);
    synonyms.candidates[0] = {{1, 0.9}};  // good -> bad
    synonyms.candidates[1] = {{0, 0.9}};  // bad -> good
    synonyms.candidates[2] = {{3, 0.8}};  // fine -> ok
    synonyms.candidates[3] = {{2, 0.8}};  // ok -> fine
  }
};

}  // namespace

TEST_SUITE("attack") {

TEST_CASE("selector_rank orders by score without queries") {
  Fixture f;
  // fake selector via deletion of provider: use a hand-rolled provider with scores
  // selector_rank requires a model; emulate with deletion-free check through
  // random_rank determinism below, and check the score path via rank order on
  // a real selector in the harness tests. Here: deletion_rank and random_rank.
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  provider.seed = 5;
  AttackConfig cfg;
  Document d = doc_of({"good", "movie", "fine"}, f.vocab);
  auto order1 = rank_words(provider, d, 1, f.target, cfg, ledger, 3);
  auto order2 = rank_words(provider, d, 1, f.target, cfg, ledger, 3);
  CHECK(order1 == order2);  // deterministic per (seed, example)
  CHECK(ledger.total() == 0);
  std::vector<int> sorted = order1;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2});
}

TEST_CASE("deletion_rank costs exactly L and finds the heavy word") {
  Fixture f;
  LinearBowTarget target({{"good", 2.0}, {"fine", 0.5}}, 0.0);
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::deletion_rank;
  AttackConfig cfg;
  Document d = doc_of({"fine", "good"}, f.vocab);
  auto order = rank_words(provider, d, 1, target, cfg, ledger, 0);
  CHECK(ledger.count(Phase::attack_ranking) == 2);
  // dropping "good" hurts the positive class most
  CHECK(order == std::vector<int>{1, 0});

  QueryLedger ledger7;
  Document d7 = doc_of({"good", "bad", "fine", "ok", "movie", "good", "bad"}, f.vocab);
  rank_words(provider, d7, 1, target, cfg, ledger7, 0);
  CHECK(ledger7.count(Phase::attack_ranking) == 7);
}

TEST_CASE("stopwords are demoted to the tail in original order") {
  Fixture f;
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::deletion_rank;
  AttackConfig cfg;
  cfg.stopwords = {"movie", "ok"};
  Document d = doc_of({"movie", "good", "ok", "fine"}, f.vocab);
  auto order = rank_words(provider, d, 1, f.target, cfg, ledger, 0);
  REQUIRE(order.size() == 4);
  // tail holds stopword positions 0 and 2 in original order
  CHECK(order[2] == 0);
  CHECK(order[3] == 2);
}

TEST_CASE("rank_words rejects empty documents") {
  Fixture f;
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  AttackConfig cfg;
  Document empty;
  CHECK_THROWS_AS(rank_words(provider, empty, 0, f.target, cfg, ledger, 0), Error);
}

TEST_CASE("greedy attack flips a one-word sentence in one query") {
  Fixture f;
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  AttackConfig cfg;
  cfg.max_perturb_fraction = 1.0;
  Document d = doc_of({"good", "movie"}, f.vocab);

  AttackOutcome out = greedy_attack(d, f.target, cfg, provider, f.synonyms, f.vocab, ledger, 0);
  CHECK(out.success);
  CHECK(out.original_label == 1);
  CHECK(out.final_label == 0);
  CHECK(out.words_perturbed == 1);
  CHECK(out.queries.evaluation == 1);
  CHECK(out.queries.substitution == 1);  // single candidate at the only candidate position
  CHECK(out.perturbed.tokens == std::vector<std::string>{"bad", "movie"});
  CHECK(ledger.count(Phase::evaluation) == 1);
  CHECK(ledger.count(Phase::attack_substitution) == 1);
  // sigmoid(-1) < 0.5: the flip is forced
  REQUIRE(out.trace.size() == 1);
  CHECK(out.trace[0].original_class_prob ==
        doctest::Approx(1.0 / (1.0 + std::exp(1.0))).epsilon(1e-9));
}

TEST_CASE("no candidates anywhere fails with zero substitution queries") {
  Fixture f;
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  AttackConfig cfg;
  Document d = doc_of({"movie"}, f.vocab);
  AttackOutcome out = greedy_attack(d, f.target, cfg, provider, f.synonyms, f.vocab, ledger, 0);
  CHECK_FALSE(out.success);
  CHECK(out.words_perturbed == 0);
  CHECK(out.queries.substitution == 0);
  CHECK(out.final_label == out.original_label);
}

TEST_CASE("committed trace probabilities strictly decrease") {
  Fixture f;
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  provider.seed = 11;
  AttackConfig cfg;
  cfg.max_perturb_fraction = 1.0;
  Document d = doc_of({"good", "good", "fine", "movie", "good"}, f.vocab);
  AttackOutcome out = greedy_attack(d, f.target, cfg, provider, f.synonyms, f.vocab, ledger, 0);
  REQUIRE(out.trace.size() >= 1);
  double prev = 1.0;
  for (const auto& step : out.trace) {
    CHECK(step.original_class_prob < prev);
    prev = step.original_class_prob;
  }
  CHECK(out.success);
}

TEST_CASE("perturbation budget is respected") {
  Fixture f;
  // target that never flips: huge bias keeps label 1 regardless
  LinearBowTarget stubborn({{"good", 1.0}, {"bad", -1.0}}, 50.0);
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  AttackConfig cfg;
  cfg.max_perturb_fraction = 0.4;
  Document d = doc_of({"good", "good", "good", "good", "good"}, f.vocab);
  AttackOutcome out = greedy_attack(d, stubborn, cfg, provider, f.synonyms, f.vocab, ledger, 0);
  CHECK_FALSE(out.success);
  CHECK(out.words_perturbed <= 2);  // ceil(0.4 * 5)
}

TEST_CASE("query exactness against the ledger") {
  Fixture f;
  for (uint64_t seed = 0; seed < 8; ++seed) {
    QueryLedger ledger;
    RankingProvider provider;
    provider.kind = RankingKind::random_rank;
    provider.seed = seed;
    AttackConfig cfg;
    cfg.max_perturb_fraction = 1.0;
    Document d = doc_of({"good", "fine", "movie", "ok", "bad"}, f.vocab);
    AttackOutcome out =
        greedy_attack(d, f.target, cfg, provider, f.synonyms, f.vocab, ledger, 7);
    CHECK(out.queries.evaluation == 1);
    CHECK(out.queries.ranking == ledger.count(Phase::attack_ranking));
    CHECK(out.queries.substitution == ledger.count(Phase::attack_substitution));
    CHECK(ledger.count(Phase::evaluation) == 1);
    CHECK(ledger.total() == out.queries.total());
    auto per = ledger.per_example();
    REQUIRE(per.count(7) == 1);
    CHECK(per[7] == out.queries.attack_total());
  }
}

TEST_CASE("oracle agrees with greedy feasibility") {
  Fixture f;
  AttackConfig cfg;
  cfg.max_perturb_fraction = 1.0;

  SUBCASE("greedy success implies oracle flip") {
    Document d = doc_of({"good", "movie"}, f.vocab);
    OracleResult oracle = exhaustive_attack_oracle(d, f.target, cfg, f.synonyms, f.vocab);
    CHECK(oracle.flip_exists);
    CHECK(oracle.min_words_perturbed == 1);
    QueryLedger ledger;
    RankingProvider provider;
    provider.kind = RankingKind::random_rank;
    AttackOutcome out =
        greedy_attack(d, f.target, cfg, provider, f.synonyms, f.vocab, ledger, 0);
    CHECK(out.success);
  }

  SUBCASE("oracle proving no flip implies greedy failure") {
    LinearBowTarget stubborn({{"good", 1.0}, {"bad", -1.0}}, 50.0);
    Document d = doc_of({"good", "fine", "movie"}, f.vocab);
    OracleResult oracle = exhaustive_attack_oracle(d, stubborn, cfg, f.synonyms, f.vocab);
    CHECK_FALSE(oracle.flip_exists);
    QueryLedger ledger;
    RankingProvider provider;
    provider.kind = RankingKind::random_rank;
    AttackOutcome out =
        greedy_attack(d, stubborn, cfg, provider, f.synonyms, f.vocab, ledger, 0);
    CHECK_FALSE(out.success);
  }

  SUBCASE("planted two-word flip") {
    // logit 2 with label 1: needs two good->bad swaps (each is -2)
    Document d = doc_of({"good", "good", "movie"}, f.vocab);
    OracleResult oracle = exhaustive_attack_oracle(d, f.target, cfg, f.synonyms, f.vocab);
    CHECK(oracle.flip_exists);
    CHECK(oracle.min_words_perturbed == 1);  // one swap: logit 0 -> tie -> class 0
    Document d2 = doc_of({"good", "good", "fine", "movie"}, f.vocab);
    OracleResult oracle2 = exhaustive_attack_oracle(d2, f.target, cfg, f.synonyms, f.vocab);
    CHECK(oracle2.flip_exists);
    CHECK(oracle2.min_words_perturbed == 2);
  }

  SUBCASE("bound violations raise") {
    Document wide =
        doc_of({"good", "good", "good", "good", "good", "good", "good", "good", "good"},
               f.vocab);
    CHECK_THROWS_AS(exhaustive_attack_oracle(wide, f.target, cfg, f.synonyms, f.vocab), Error);
  }
}

TEST_CASE("trace records round trip through jsonl") {
  Fixture f;
  QueryLedger ledger;
  RankingProvider provider;
  provider.kind = RankingKind::random_rank;
  AttackConfig cfg;
  cfg.max_perturb_fraction = 1.0;
  Document d = doc_of({"good", "movie"}, f.vocab);
  AttackOutcome out = greedy_attack(d, f.target, cfg, provider, f.synonyms, f.vocab, ledger, 4);

  const std::string path = "/tmp/selattack_trace_test.jsonl";
  {
    std::ofstream file(path);
    append_trace(out, file);
    append_trace(out, file);
  }
  auto loaded = load_traces(path, f.vocab);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].example_id == 4);
  CHECK(loaded[0].success == out.success);
  CHECK(loaded[0].perturbed.tokens == out.perturbed.tokens);
  CHECK(loaded[0].queries.substitution == out.queries.substitution);
  REQUIRE(loaded[0].trace.size() == out.trace.size());
  CHECK(loaded[0].trace[0].new_word == out.trace[0].new_word);
}

}  // TEST_SUITE
