#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "selattack/blackbox.hpp"
#include "selattack/corpus.hpp"
#include "selattack/neural.hpp"

namespace selattack {

// Per-token importance scorer: frozen embeddings -> conv1d -> relu -> dense
// score head. Scoring consumes zero target queries.
class SelectorModel {
 public:
  struct Config {
    int conv_filters = 16;
    int conv_width = 3;
  };

  SelectorModel(const EmbeddingTable& emb, Config cfg, uint64_t seed);

  // Pure inference; safe to call concurrently on a frozen model.
  std::vector<double> scores(const Document& doc) const;

  struct Fwd {
    Tensor embedded, conv_out, relu_out;
    std::vector<double> scores;
  };
  Fwd forward(const Document& doc) const;
  void backward(const Fwd& fwd, const std::vector<double>& gscores);

  std::vector<neural::ParamRef> params();
  const Config& config() const { return cfg_; }
  const EmbeddingTable& embeddings() const { return *emb_; }

 private:
  const EmbeddingTable* emb_;
  Config cfg_;
  neural::Embedding lookup_;
  neural::Conv1d conv_;
  neural::Dense score_head_;

  friend struct SelectorIo;
};

// Small classifier over mask-weighted embedded input; trained jointly with
// the selector and discarded after training.
class SubstituteClassifier {
 public:
  struct Config {
    int conv_filters = 32;
    int conv_width = 3;
  };

  SubstituteClassifier(const EmbeddingTable& emb, int classes, Config cfg, uint64_t seed);

  struct Fwd {
    Tensor embedded, masked, conv_out, relu_out, pooled, logits, probs;
  };
  Fwd forward(const Document& doc, std::span<const double> mask) const;
  // `grad` is wrt probs when grad_wrt_probs, else wrt logits.
  // Returns the gradient wrt the mask entries.
  std::vector<double> backward(const Fwd& fwd, const Tensor& grad, bool grad_wrt_probs);

  std::vector<neural::ParamRef> params();
  int num_classes() const { return classes_; }
  const Config& config() const { return cfg_; }

 private:
  const EmbeddingTable* emb_;
  int classes_;
  Config cfg_;
  neural::Embedding lookup_;
  neural::Conv1d conv_;
  neural::Dense head_;
};

std::vector<double> masked_forward(const SubstituteClassifier& fb, const Document& doc,
                                   std::span<const double> mask);

// Indices of the k largest scores, ascending index order; ties prefer the
// lower index. Throws if k exceeds the score count.
std::vector<int> hard_topk(std::span<const double> scores, int k);

// Differentiable k-subset relaxation. Gumbel-perturbed scores go through k
// softmax rounds; each round's mass is excluded from the next via an
// availability product, and the mask is the complement of what remains:
//
//   A^1 = 1;  p^j = softmax((scores+g)/t + log A^j);  A^{j+1} = A^j (1-p^j)
//   mask = 1 - A^{k+1}
//
// Entries stay in [0,1] by construction, the total mass is at most k, and
// as t -> 0 the mask converges to the k-hot vector of the perturbed scores.
struct RelaxedTopK {
  std::vector<double> mask;
  // forward caches for backward()
  std::vector<double> keys;
  double temperature = 1.0;
  std::vector<std::vector<double>> round_p;
  std::vector<double> round_lse;
  std::vector<std::vector<double>> round_avail;  // A^1 .. A^k
  std::vector<double> final_avail;               // A^{k+1}
};

RelaxedTopK relaxed_topk_forward(std::span<const double> scores, int k, double temperature,
                                 std::span<const double> noise);
std::vector<double> relaxed_topk_backward(const RelaxedTopK& fwd,
                                          std::span<const double> gmask);

std::vector<double> gumbel_noise(size_t n, std::mt19937_64& rng);
std::vector<double> sample_topk_relaxed(std::span<const double> scores, int k,
                                        double temperature, std::mt19937_64& rng);

// k per sentence: min(max_k, ceil(fraction * L)), clamped to [1, L].
struct KPolicy {
  int max_k = 10;
  double fraction = 0.3;
  int k_for(int length) const;
};

enum class LabelsSource {
  substitute_labels,
  target_on_substitute,
  target_on_test_paired,
  target_on_test_shuffled,
};
const char* labels_source_name(LabelsSource s);
LabelsSource labels_source_from_string(const std::string& s);

struct SelectionConfig {
  KPolicy k;
  double temperature_start = 1.0;
  double temperature_end = 0.1;
  LabelsSource labels_source = LabelsSource::target_on_substitute;
  int test_portion = 0;  // sentences of the target test split usable for distillation
};

struct TrainingConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
};

struct TrainingPair {
  Document doc;
  std::vector<double> target;  // probability vector (one-hot for gold labels)
  int label = -1;              // gold label when labels_source == substitute_labels
};

// Assembles (input, target) pairs per the configured labels source. All
// target queries happen here, through the cache, tagged as overhead.
std::vector<TrainingPair> build_training_pairs(const SelectionConfig& config,
                                               std::span<const LabeledExample> substitute_data,
                                               std::span<const LabeledExample> target_test_data,
                                               const TargetAdapter& target,
                                               DistillationCache& cache, QueryLedger& ledger,
                                               uint64_t seed);

struct TrainingLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_temperature;
};

// Jointly optimizes selector and substitute classifier. Distillation
// sources use the squared-error objective on probability vectors; the gold
// label source uses cross-entropy. Consumes zero target queries.
TrainingLog train_substitute(std::span<const TrainingPair> pairs, SelectorModel& selector,
                             SubstituteClassifier& fb, const SelectionConfig& config,
                             const TrainingConfig& training, uint64_t seed);

// Selector checkpoint: architecture + parameters + provenance metadata.
struct SelectorMetadata {
  std::string labels_source;
  int test_portion = 0;
  KPolicy k;
  uint64_t seed = 0;
  uint64_t overhead_queries = 0;
};
void save_selector(const SelectorModel& selector, const SelectorMetadata& meta,
                   const std::string& path);
std::unique_ptr<SelectorModel> load_selector(const std::string& path, const EmbeddingTable& emb,
                                             SelectorMetadata* meta_out = nullptr);

}  // namespace selattack
