#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "selattack/corpus.hpp"
#include "selattack/neural.hpp"

namespace selattack {

enum class Phase : int {
  distillation_overhead = 0,
  attack_ranking = 1,
  attack_substitution = 2,
  evaluation = 3,
};
constexpr int kNumPhases = 4;
const char* phase_name(Phase p);

// Exact, phase-tagged count of every target-classifier call. Phase counters
// are atomic; the optional per-example map tracks attack-phase attribution.
class QueryLedger {
 public:
  QueryLedger() = default;
  QueryLedger(const QueryLedger&) = delete;
  QueryLedger& operator=(const QueryLedger&) = delete;

  void add(Phase p, uint64_t n = 1) {
    counts_[static_cast<int>(p)].fetch_add(n, std::memory_order_relaxed);
  }
  uint64_t count(Phase p) const {
    return counts_[static_cast<int>(p)].load(std::memory_order_relaxed);
  }
  uint64_t total() const {
    uint64_t t = 0;
    for (const auto& c : counts_) t += c.load(std::memory_order_relaxed);
    return t;
  }

  void attribute(int64_t example_id, uint64_t attack_queries);
  std::map<int64_t, uint64_t> per_example() const;

  void merge(const QueryLedger& other);

 private:
  std::array<std::atomic<uint64_t>, kNumPhases> counts_{};
  mutable std::mutex mu_;
  std::map<int64_t, uint64_t> per_example_;
};

// The attacked black box. Only score() is observable; every call made
// through predict_proba/predict_label is a counted query.
class TargetAdapter {
 public:
  virtual ~TargetAdapter() = default;
  virtual int num_classes() const = 0;
  // One scoring of one text; must be deterministic for local kinds and
  // return a length-C probability vector.
  virtual std::vector<double> score(const Document& doc) const = 0;
};

std::vector<double> predict_proba(const TargetAdapter& target, const Document& doc,
                                  QueryLedger& ledger, Phase phase);
int predict_label(const TargetAdapter& target, const Document& doc, QueryLedger& ledger,
                  Phase phase);
// Lowest class index wins ties.
int argmax_label(std::span<const double> probs);

// Transparent bag-of-words logistic target: class-1 logit is exactly
// sum of token weights plus bias, which downstream oracle tests exploit.
class LinearBowTarget : public TargetAdapter {
 public:
  LinearBowTarget(std::map<std::string, double> weights, double bias);
  int num_classes() const override { return 2; }
  std::vector<double> score(const Document& doc) const override;
  double logit(const Document& doc) const;
  const std::map<std::string, double>& weights() const { return weights_; }
  double bias() const { return bias_; }

 private:
  std::map<std::string, double> weights_;
  double bias_ = 0.0;
};

// Small convolutional text classifier over frozen embeddings; the local
// stand-in for a full-scale trained target.
class LocalCnnTarget : public TargetAdapter {
 public:
  LocalCnnTarget(const EmbeddingTable& emb, int classes, int filters, int kernel_width,
                 uint64_t seed);
  int num_classes() const override { return classes_; }
  std::vector<double> score(const Document& doc) const override;

  // Training surface (cross-entropy on gold labels).
  struct TrainResult {
    std::vector<double> epoch_loss;
  };
  TrainResult train(std::span<const LabeledExample> data, int epochs, int batch_size, double lr,
                    uint64_t seed);
  double accuracy(std::span<const LabeledExample> data) const;

  // One example's cross-entropy; accumulates parameter gradients when asked.
  double example_loss(const Document& doc, int label, bool with_grad);

  std::vector<neural::ParamRef> params();
  Tensor forward_logits(const Document& doc) const;

  int filters() const { return conv_.out_ch; }
  int kernel_width() const { return conv_.width; }

 private:
  const EmbeddingTable* emb_;
  int classes_;
  neural::Embedding lookup_;
  neural::Conv1d conv_;
  neural::Dense head_;

  friend struct LocalCnnTargetIo;
};

// Soft-label cache keyed by exact token sequence; repeated sentences are
// never re-queried, so overhead counts unique sentences only.
class DistillationCache {
 public:
  const std::vector<double>& lookup_or_query(const TargetAdapter& target, const Document& doc,
                                             QueryLedger& ledger);
  std::vector<std::vector<double>> distill(const TargetAdapter& target,
                                           std::span<const Document> sentences,
                                           QueryLedger& ledger);
  size_t size() const { return cache_.size(); }

 private:
  std::map<std::string, std::vector<double>> cache_;
};

// Checkpoint io for local targets (JSON, parameter name -> shape + data).
void save_linear_bow(const LinearBowTarget& target, const std::string& path);
LinearBowTarget load_linear_bow(const std::string& path);
void save_local_cnn(LocalCnnTarget& target, const std::string& path);
std::unique_ptr<LocalCnnTarget> load_local_cnn(const std::string& path,
                                               const EmbeddingTable& emb);

}  // namespace selattack
