#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "selattack/corpus.hpp"

namespace selattack {

// Desk-scale stand-in for a real review corpus: sentence labels are
// determined by planted polarity word counts, every polarity word has an
// opposite-polarity synonym above tau, and filler words pair up into
// label-neutral synonym clusters that cost attack queries without helping.
struct SyntheticSpec {
  int positive_words = 20;
  int negative_words = 20;
  int filler_words = 60;
  int embedding_dim = 24;
  int substitute_sentences = 400;
  int target_train_sentences = 400;
  int target_test_sentences = 250;
  int min_length = 6;
  int max_length = 12;
  double class_balance = 0.5;       // fraction of positive-label sentences
  double polarity_density = 0.35;   // fraction of tokens drawn from polarity words
  double pair_cosine = 0.9;         // planted polarity-pair cosine
  double filler_pair_cosine = 0.85; // planted filler-pair cosine
  double tau = 0.5;                 // all non-planted pairs stay below this
  uint64_t seed = 1;
};

struct SyntheticCorpus {
  EmbeddingTable embeddings;
  std::vector<LabeledExample> substitute;
  std::vector<LabeledExample> target_train;
  std::vector<LabeledExample> target_test;
  std::map<std::string, double> true_weights;  // +1 positive, -1 negative, 0 filler
  double true_bias = 0.0;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& spec);

// Writes <dir>/{substitute,target_train,target_test}.csv, embeddings.txt,
// and ground_truth.json.
void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::string& dir);

std::map<std::string, double> load_ground_truth_weights(const std::string& path,
                                                        double* bias_out = nullptr);

}  // namespace selattack
