#include "selattack/blackbox.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "selattack/util.hpp"

namespace selattack {

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::distillation_overhead: return "distillation_overhead";
    case Phase::attack_ranking: return "attack_ranking";
    case Phase::attack_substitution: return "attack_substitution";
    case Phase::evaluation: return "evaluation";
  }
  return "?";
}

void QueryLedger::attribute(int64_t example_id, uint64_t attack_queries) {
  std::lock_guard<std::mutex> lock(mu_);
  per_example_[example_id] += attack_queries;
}

std::map<int64_t, uint64_t> QueryLedger::per_example() const {
  std::lock_guard<std::mutex> lock(mu_);
  return per_example_;
}

void QueryLedger::merge(const QueryLedger& other) {
  for (int i = 0; i < kNumPhases; ++i)
    counts_[i].fetch_add(other.counts_[i].load(std::memory_order_relaxed),
                         std::memory_order_relaxed);
  auto theirs = other.per_example();
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& [id, n] : theirs) per_example_[id] += n;
}

std::vector<double> predict_proba(const TargetAdapter& target, const Document& doc,
                                  QueryLedger& ledger, Phase phase) {
  std::vector<double> probs = target.score(doc);
  if (static_cast<int>(probs.size()) != target.num_classes())
    throw Error("target returned " + std::to_string(probs.size()) + " probabilities, expected " +
                std::to_string(target.num_classes()));
  ledger.add(phase);
  return probs;
}

int predict_label(const TargetAdapter& target, const Document& doc, QueryLedger& ledger,
                  Phase phase) {
  return argmax_label(predict_proba(target, doc, ledger, phase));
}

int argmax_label(std::span<const double> probs) {
  int best = 0;
  for (size_t c = 1; c < probs.size(); ++c)
    if (probs[c] > probs[best]) best = static_cast<int>(c);
  return best;
}

LinearBowTarget::LinearBowTarget(std::map<std::string, double> weights, double bias)
    : weights_(std::move(weights)), bias_(bias) {}

double LinearBowTarget::logit(const Document& doc) const {
  double acc = bias_;
  for (const std::string& tok : doc.tokens) {
    auto it = weights_.find(tok);
    if (it != weights_.end()) acc += it->second;
  }
  return acc;
}

std::vector<double> LinearBowTarget::score(const Document& doc) const {
  double z = logit(doc);
  double p1 = 1.0 / (1.0 + std::exp(-z));
  return {1.0 - p1, p1};
}

LocalCnnTarget::LocalCnnTarget(const EmbeddingTable& emb, int classes, int filters,
                               int kernel_width, uint64_t seed)
    : emb_(&emb),
      classes_(classes),
      conv_(kernel_width, emb.dim, filters, seed, "target.conv"),
      head_(filters, classes, seed, "target.head") {
  lookup_.table = &emb.vectors;
}

Tensor LocalCnnTarget::forward_logits(const Document& doc) const {
  // Empty input degenerates to a single UNK (all-zero) token, which yields
  // a fixed empty-input prior.
  std::vector<int> ids = doc.ids;
  if (ids.empty()) ids.push_back(emb_->unk_index);
  Tensor x = lookup_.forward(ids);
  Tensor c = conv_.forward(x);
  Tensor r = neural::relu(c);
  Tensor p = neural::mean_pool(r);
  return head_.forward(p);
}

std::vector<double> LocalCnnTarget::score(const Document& doc) const {
  Tensor probs = neural::softmax_rows(forward_logits(doc));
  return probs.data;
}

std::vector<neural::ParamRef> LocalCnnTarget::params() {
  std::vector<neural::ParamRef> out;
  conv_.collect_params("conv", out);
  head_.collect_params("head", out);
  return out;
}

double LocalCnnTarget::example_loss(const Document& doc, int label, bool with_grad) {
  std::vector<int> ids = doc.ids;
  if (ids.empty()) ids.push_back(emb_->unk_index);
  Tensor x = lookup_.forward(ids);
  Tensor c = conv_.forward(x);
  Tensor r = neural::relu(c);
  Tensor p = neural::mean_pool(r);
  Tensor logits = head_.forward(p);
  double loss = neural::cross_entropy_loss(logits, {label});
  if (with_grad) {
    Tensor glogits = neural::cross_entropy_grad(logits, {label});
    Tensor gp = head_.backward(p, glogits);
    Tensor gr = neural::mean_pool_backward(static_cast<int>(ids.size()), gp);
    Tensor gc = neural::relu_backward(c, gr);
    conv_.backward(x, gc);
  }
  return loss;
}

LocalCnnTarget::TrainResult LocalCnnTarget::train(std::span<const LabeledExample> data,
                                                  int epochs, int batch_size, double lr,
                                                  uint64_t seed) {
  if (data.empty()) throw Error("LocalCnnTarget::train: empty dataset");
  neural::OptimizerConfig ocfg;
  ocfg.lr = lr;
  neural::Optimizer opt(ocfg);
  auto order_rng = named_rng(seed, "target.shuffle");
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});

  TrainResult result;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += batch_size) {
      size_t end = std::min(order.size(), start + batch_size);
      const int B = static_cast<int>(end - start);
      double batch_loss = 0.0;
      for (size_t m = start; m < end; ++m) {
        const LabeledExample& ex = data[order[m]];
        batch_loss += example_loss(ex.doc, ex.label, /*with_grad=*/true);
      }
      batch_loss /= B;
      for (auto& pr : params())
        for (double& g : pr.grad->data) g /= B;  // mean over the batch
      if (!std::isfinite(batch_loss))
        throw Error("LocalCnnTarget::train: loss diverged (non-finite) at epoch " +
                    std::to_string(epoch));
      epoch_loss += batch_loss;
      ++batches;
      opt.step(params());
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  return result;
}

double LocalCnnTarget::accuracy(std::span<const LabeledExample> data) const {
  if (data.empty()) return 0.0;
  size_t hits = 0;
  for (const auto& ex : data) {
    std::vector<double> probs = score(ex.doc);
    if (argmax_label(probs) == ex.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

const std::vector<double>& DistillationCache::lookup_or_query(const TargetAdapter& target,
                                                              const Document& doc,
                                                              QueryLedger& ledger) {
  std::string key = doc.joined();
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  std::vector<double> probs = predict_proba(target, doc, ledger, Phase::distillation_overhead);
  return cache_.emplace(std::move(key), std::move(probs)).first->second;
}

std::vector<std::vector<double>> DistillationCache::distill(const TargetAdapter& target,
                                                            std::span<const Document> sentences,
                                                            QueryLedger& ledger) {
  std::vector<std::vector<double>> out;
  out.reserve(sentences.size());
  for (const Document& doc : sentences) out.push_back(lookup_or_query(target, doc, ledger));
  return out;
}

void save_linear_bow(const LinearBowTarget& target, const std::string& path) {
  nlohmann::ordered_json j;
  j["kind"] = "linear_bow";
  j["bias"] = target.bias();
  j["weights"] = nlohmann::ordered_json::object();
  for (const auto& [word, w] : target.weights()) j["weights"][word] = w;
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint: " + path);
  out << j.dump(2) << "\n";
}

LinearBowTarget load_linear_bow(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("kind", "") != "linear_bow")
    throw Error(path + ": not a linear_bow checkpoint");
  std::map<std::string, double> weights;
  for (const auto& [word, w] : j.at("weights").items()) weights[word] = w.get<double>();
  return LinearBowTarget(std::move(weights), j.at("bias").get<double>());
}

struct LocalCnnTargetIo {
  static void save(LocalCnnTarget& t, const std::string& path) {
    nlohmann::ordered_json j;
    j["kind"] = "local_cnn";
    j["classes"] = t.classes_;
    j["filters"] = t.conv_.out_ch;
    j["kernel_width"] = t.conv_.width;
    j["embedding_dim"] = t.emb_->dim;
    j["params"] = nlohmann::ordered_json::object();
    for (const auto& p : t.params()) {
      j["params"][p.name] = {{"shape", p.value->shape}, {"data", p.value->data}};
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint: " + path);
    out << j.dump() << "\n";
  }

  static std::unique_ptr<LocalCnnTarget> load(const std::string& path,
                                              const EmbeddingTable& emb) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("kind", "") != "local_cnn") throw Error(path + ": not a local_cnn checkpoint");
    if (j.at("embedding_dim").get<int>() != emb.dim)
      throw Error(path + ": checkpoint embedding dim " +
                  std::to_string(j.at("embedding_dim").get<int>()) +
                  " does not match table dim " + std::to_string(emb.dim));
    auto target = std::make_unique<LocalCnnTarget>(emb, j.at("classes").get<int>(),
                                                   j.at("filters").get<int>(),
                                                   j.at("kernel_width").get<int>(), 0);
    for (auto& p : target->params()) {
      const auto& rec = j.at("params").at(p.name);
      std::vector<int> shape = rec.at("shape").get<std::vector<int>>();
      if (shape != p.value->shape) throw Error(path + ": shape mismatch for " + p.name);
      p.value->data = rec.at("data").get<std::vector<double>>();
    }
    return target;
  }
};

void save_local_cnn(LocalCnnTarget& target, const std::string& path) {
  LocalCnnTargetIo::save(target, path);
}

std::unique_ptr<LocalCnnTarget> load_local_cnn(const std::string& path,
                                               const EmbeddingTable& emb) {
  return LocalCnnTargetIo::load(path, emb);
}

}  // namespace selattack
