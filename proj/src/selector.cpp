#include "selattack/selector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "selattack/util.hpp"

namespace selattack {

SelectorModel::SelectorModel(const EmbeddingTable& emb, Config cfg, uint64_t seed)
    : emb_(&emb),
      cfg_(cfg),
      conv_(cfg.conv_width, emb.dim, cfg.conv_filters, seed, "selector.conv"),
      score_head_(cfg.conv_filters, 1, seed, "selector.head") {
  lookup_.table = &emb.vectors;
}

SelectorModel::Fwd SelectorModel::forward(const Document& doc) const {
  if (doc.empty()) throw Error("selector: empty document");
  Fwd fwd;
  fwd.embedded = lookup_.forward(doc.ids);
  fwd.conv_out = conv_.forward(fwd.embedded);
  fwd.relu_out = neural::relu(fwd.conv_out);
  Tensor s = score_head_.forward(fwd.relu_out);  // {L, 1}
  fwd.scores = s.data;
  return fwd;
}

std::vector<double> SelectorModel::scores(const Document& doc) const {
  return forward(doc).scores;
}

void SelectorModel::backward(const Fwd& fwd, const std::vector<double>& gscores) {
  Tensor gs({static_cast<int>(gscores.size()), 1}, gscores);
  Tensor grelu = score_head_.backward(fwd.relu_out, gs);
  Tensor gconv = neural::relu_backward(fwd.conv_out, grelu);
  conv_.backward(fwd.embedded, gconv);  // embeddings are frozen
}

std::vector<neural::ParamRef> SelectorModel::params() {
  std::vector<neural::ParamRef> out;
  conv_.collect_params("selector.conv", out);
  score_head_.collect_params("selector.head", out);
  return out;
}

SubstituteClassifier::SubstituteClassifier(const EmbeddingTable& emb, int classes, Config cfg,
                                           uint64_t seed)
    : emb_(&emb),
      classes_(classes),
      cfg_(cfg),
      conv_(cfg.conv_width, emb.dim, cfg.conv_filters, seed, "fb.conv"),
      head_(cfg.conv_filters, classes, seed, "fb.head") {
  lookup_.table = &emb.vectors;
}

SubstituteClassifier::Fwd SubstituteClassifier::forward(const Document& doc,
                                                        std::span<const double> mask) const {
  if (doc.length() != static_cast<int>(mask.size()))
    throw Error("masked_forward: mask length " + std::to_string(mask.size()) +
                " does not match document length " + std::to_string(doc.length()));
  Fwd fwd;
  fwd.embedded = lookup_.forward(doc.ids);
  fwd.masked = fwd.embedded;
  const int d = fwd.masked.cols();
  for (int t = 0; t < fwd.masked.rows(); ++t)
    for (int c = 0; c < d; ++c) fwd.masked.at(t, c) *= mask[static_cast<size_t>(t)];
  fwd.conv_out = conv_.forward(fwd.masked);
  fwd.relu_out = neural::relu(fwd.conv_out);
  fwd.pooled = neural::mean_pool(fwd.relu_out);
  fwd.logits = head_.forward(fwd.pooled);
  fwd.probs = neural::softmax_rows(fwd.logits);
  return fwd;
}

std::vector<double> SubstituteClassifier::backward(const Fwd& fwd, const Tensor& grad,
                                                   bool grad_wrt_probs) {
  Tensor glogits = grad_wrt_probs ? neural::softmax_backward(fwd.probs, grad) : grad;
  Tensor gpooled = head_.backward(fwd.pooled, glogits);
  Tensor grelu = neural::mean_pool_backward(fwd.relu_out.rows(), gpooled);
  Tensor gconv = neural::relu_backward(fwd.conv_out, grelu);
  Tensor gmasked = conv_.backward(fwd.masked, gconv);
  // d(masked)/d(mask_t) = embedded row t
  const int d = gmasked.cols();
  std::vector<double> gmask(static_cast<size_t>(gmasked.rows()), 0.0);
  for (int t = 0; t < gmasked.rows(); ++t) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) acc += gmasked.at(t, c) * fwd.embedded.at(t, c);
    gmask[static_cast<size_t>(t)] = acc;
  }
  return gmask;
}

std::vector<neural::ParamRef> SubstituteClassifier::params() {
  std::vector<neural::ParamRef> out;
  conv_.collect_params("fb.conv", out);
  head_.collect_params("fb.head", out);
  return out;
}

std::vector<double> masked_forward(const SubstituteClassifier& fb, const Document& doc,
                                   std::span<const double> mask) {
  return fb.forward(doc, mask).probs.data;
}

std::vector<int> hard_topk(std::span<const double> scores, int k) {
  const int L = static_cast<int>(scores.size());
  if (k > L)
    throw Error("hard_topk: k=" + std::to_string(k) + " exceeds length " + std::to_string(L));
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(static_cast<size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

RelaxedTopK relaxed_topk_forward(std::span<const double> scores, int k, double temperature,
                                 std::span<const double> noise) {
  if (temperature <= 0.0) throw Error("relaxed_topk: temperature must be positive");
  const size_t L = scores.size();
  if (static_cast<size_t>(k) > L) throw Error("relaxed_topk: k exceeds length");
  if (noise.size() != L) throw Error("relaxed_topk: noise length mismatch");

  RelaxedTopK out;
  out.temperature = temperature;
  out.keys.resize(L);
  for (size_t i = 0; i < L; ++i) out.keys[i] = scores[i] + noise[i];

  // Round logits alpha start at the keys; a selected item is suppressed by
  // log(1-p) BEFORE the temperature division, so exclusion sharpens as the
  // softmax does and each round lands on the next-largest key.
  std::vector<double> alpha = out.keys;
  std::vector<double> avail(L, 1.0);
  for (int j = 0; j < k; ++j) {
    out.round_avail.push_back(avail);
    double zmax = -std::numeric_limits<double>::infinity();
    std::vector<double> z(L);
    for (size_t i = 0; i < L; ++i) {
      z[i] = avail[i] > 0.0 ? alpha[i] / temperature
                            : -std::numeric_limits<double>::infinity();
      zmax = std::max(zmax, z[i]);
    }
    if (!std::isfinite(zmax)) throw Error("relaxed_topk: all availability exhausted");
    double sum = 0.0;
    std::vector<double> p(L);
    for (size_t i = 0; i < L; ++i) {
      p[i] = std::exp(z[i] - zmax);
      sum += p[i];
    }
    for (size_t i = 0; i < L; ++i) p[i] /= sum;
    out.round_lse.push_back(zmax + std::log(sum));
    for (size_t i = 0; i < L; ++i) {
      alpha[i] += std::log1p(-p[i]);
      avail[i] *= (1.0 - p[i]);
    }
    out.round_p.push_back(std::move(p));
  }
  out.final_avail = avail;
  out.mask.resize(L);
  // union over rounds, never a plain sum: entries stay within [0, 1]
  for (size_t i = 0; i < L; ++i) out.mask[i] = 1.0 - avail[i];
  return out;
}

std::vector<double> relaxed_topk_backward(const RelaxedTopK& fwd, std::span<const double> gmask) {
  const size_t L = fwd.keys.size();
  const int k = static_cast<int>(fwd.round_p.size());
  const double t = fwd.temperature;
  std::vector<double> gkey(L, 0.0);
  // mask = 1 - A^{k+1}
  std::vector<double> gA(L);
  for (size_t i = 0; i < L; ++i) gA[i] = -gmask[i];
  for (int j = k - 1; j >= 0; --j) {
    const auto& p = fwd.round_p[static_cast<size_t>(j)];
    const auto& A = fwd.round_avail[static_cast<size_t>(j)];
    const double lse = fwd.round_lse[static_cast<size_t>(j)];
    // A^{j+1} = A^j (1 - p^j)
    std::vector<double> gp(L);
    std::vector<double> gA_prev(L);
    for (size_t i = 0; i < L; ++i) {
      gp[i] = -gA[i] * A[i];
      gA_prev[i] = gA[i] * (1.0 - p[i]);
    }
    // p = softmax(z) with z_i = (key_i + log A^j_i)/t
    double dot = 0.0;
    for (size_t i = 0; i < L; ++i) dot += p[i] * gp[i];
    for (size_t i = 0; i < L; ++i) {
      if (A[i] <= 0.0) continue;  // p_i is exactly 0: no z gradient
      const double gz = p[i] * (gp[i] - dot);
      gkey[i] += gz / t;
      // dz/dA = 1/(t A); the ratio p_i/A_i is formed in log space, where
      // exponent <= 0 holds for every temperature <= 1.
      const double ratio =
          std::exp(fwd.keys[i] / t + (1.0 / t - 1.0) * std::log(A[i]) - lse);
      gA_prev[i] += ratio * (gp[i] - dot) / t;
    }
    gA = std::move(gA_prev);
  }
  return gkey;  // dkey/dscore = 1
}

std::vector<double> gumbel_noise(size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> g(n);
  for (size_t i = 0; i < n; ++i) {
    double u = std::clamp(unif(rng), 1e-12, 1.0 - 1e-12);
    g[i] = -std::log(-std::log(u));
  }
  return g;
}

std::vector<double> sample_topk_relaxed(std::span<const double> scores, int k,
                                        double temperature, std::mt19937_64& rng) {
  std::vector<double> noise = gumbel_noise(scores.size(), rng);
  return relaxed_topk_forward(scores, k, temperature, noise).mask;
}

int KPolicy::k_for(int length) const {
  int k = static_cast<int>(std::ceil(fraction * length));
  k = std::min(k, max_k);
  k = std::max(k, 1);
  k = std::min(k, length);
  return k;
}

const char* labels_source_name(LabelsSource s) {
  switch (s) {
    case LabelsSource::substitute_labels: return "substitute_labels";
    case LabelsSource::target_on_substitute: return "target_on_substitute";
    case LabelsSource::target_on_test_paired: return "target_on_test_paired";
    case LabelsSource::target_on_test_shuffled: return "target_on_test_shuffled";
  }
  return "?";
}

LabelsSource labels_source_from_string(const std::string& s) {
  if (s == "substitute_labels") return LabelsSource::substitute_labels;
  if (s == "target_on_substitute") return LabelsSource::target_on_substitute;
  if (s == "target_on_test_paired") return LabelsSource::target_on_test_paired;
  if (s == "target_on_test_shuffled") return LabelsSource::target_on_test_shuffled;
  throw Error("unknown labels source '" + s + "'");
}

namespace {

std::vector<double> one_hot(int label, int classes) {
  std::vector<double> v(static_cast<size_t>(classes), 0.0);
  if (label < 0 || label >= classes)
    throw Error("one_hot: label " + std::to_string(label) + " out of range");
  v[static_cast<size_t>(label)] = 1.0;
  return v;
}

// Deterministic seeded choice of a test-set portion.
std::vector<size_t> portion_indices(size_t available, size_t portion, uint64_t seed) {
  std::vector<size_t> idx(available);
  std::iota(idx.begin(), idx.end(), size_t{0});
  auto rng = named_rng(seed, "test.portion");
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(portion);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<TrainingPair> build_training_pairs(const SelectionConfig& config,
                                               std::span<const LabeledExample> substitute_data,
                                               std::span<const LabeledExample> target_test_data,
                                               const TargetAdapter& target,
                                               DistillationCache& cache, QueryLedger& ledger,
                                               uint64_t seed) {
  std::vector<TrainingPair> pairs;
  const int C = target.num_classes();
  switch (config.labels_source) {
    case LabelsSource::substitute_labels: {
      for (const auto& ex : substitute_data)
        pairs.push_back({ex.doc, one_hot(ex.label, C), ex.label});
      break;
    }
    case LabelsSource::target_on_substitute: {
      for (const auto& ex : substitute_data)
        pairs.push_back({ex.doc, cache.lookup_or_query(target, ex.doc, ledger), -1});
      break;
    }
    case LabelsSource::target_on_test_paired:
    case LabelsSource::target_on_test_shuffled: {
      const size_t portion = static_cast<size_t>(config.test_portion);
      if (portion == 0 || portion > target_test_data.size())
        throw Error("test portion " + std::to_string(config.test_portion) +
                    " exceeds available target test size " +
                    std::to_string(target_test_data.size()));
      std::vector<size_t> chosen = portion_indices(target_test_data.size(), portion, seed);
      std::vector<std::vector<double>> distilled;
      distilled.reserve(chosen.size());
      for (size_t i : chosen)
        distilled.push_back(cache.lookup_or_query(target, target_test_data[i].doc, ledger));
      if (config.labels_source == LabelsSource::target_on_test_paired) {
        for (size_t m = 0; m < chosen.size(); ++m)
          pairs.push_back({target_test_data[chosen[m]].doc, distilled[m], -1});
      } else {
        // Literal reading: substitute sentences paired with target outputs
        // drawn uniformly from the distilled portion.
        auto rng = named_rng(seed, "test.shuffle");
        std::uniform_int_distribution<size_t> pick(0, distilled.size() - 1);
        for (const auto& ex : substitute_data)
          pairs.push_back({ex.doc, distilled[pick(rng)], -1});
      }
      break;
    }
  }
  return pairs;
}

TrainingLog train_substitute(std::span<const TrainingPair> pairs, SelectorModel& selector,
                             SubstituteClassifier& fb, const SelectionConfig& config,
                             const TrainingConfig& training, uint64_t seed) {
  if (pairs.empty()) throw Error("train_substitute: no training pairs");
  const bool use_cross_entropy = config.labels_source == LabelsSource::substitute_labels;

  std::vector<neural::ParamRef> params = selector.params();
  for (auto& p : fb.params()) params.push_back(p);
  neural::OptimizerConfig ocfg;
  ocfg.lr = training.lr;
  neural::Optimizer opt(ocfg);

  auto shuffle_rng = named_rng(seed, "train.shuffle");
  auto noise_rng = named_rng(seed, "train.gumbel");
  std::vector<size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), size_t{0});

  TrainingLog log;
  for (int epoch = 0; epoch < training.epochs; ++epoch) {
    const double frac = training.epochs > 1
                            ? static_cast<double>(epoch) / (training.epochs - 1)
                            : 1.0;
    const double temperature =
        config.temperature_start *
        std::pow(config.temperature_end / config.temperature_start, frac);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += training.batch_size) {
      const size_t end = std::min(order.size(), start + training.batch_size);
      const int B = static_cast<int>(end - start);
      double batch_loss = 0.0;
      for (size_t m = start; m < end; ++m) {
        const TrainingPair& pair = pairs[order[m]];
        const int L = pair.doc.length();
        if (L == 0) continue;
        const int k = config.k.k_for(L);

        SelectorModel::Fwd sel = selector.forward(pair.doc);
        std::vector<double> noise = gumbel_noise(sel.scores.size(), noise_rng);
        RelaxedTopK topk = relaxed_topk_forward(sel.scores, k, temperature, noise);
        SubstituteClassifier::Fwd out = fb.forward(pair.doc, topk.mask);

        std::vector<double> gmask;
        if (use_cross_entropy) {
          batch_loss += neural::cross_entropy_loss(out.logits, {pair.label});
          Tensor glogits = neural::cross_entropy_grad(out.logits, {pair.label});
          for (double& g : glogits.data) g /= B;
          gmask = fb.backward(out, glogits, /*grad_wrt_probs=*/false);
        } else {
          Tensor target({1, static_cast<int>(pair.target.size())}, pair.target);
          batch_loss += neural::mse_loss(out.probs, target);
          Tensor gprobs = neural::mse_loss_grad(out.probs, target);
          for (double& g : gprobs.data) g /= B;
          gmask = fb.backward(out, gprobs, /*grad_wrt_probs=*/true);
        }
        std::vector<double> gscores = relaxed_topk_backward(topk, gmask);
        selector.backward(sel, gscores);
      }
      batch_loss /= B;
      if (!std::isfinite(batch_loss))
        throw Error("train_substitute: loss diverged (non-finite) at epoch " +
                    std::to_string(epoch));
      epoch_loss += batch_loss;
      ++batches;
      opt.step(params);
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    log.epoch_temperature.push_back(temperature);
  }
  return log;
}

struct SelectorIo {
  static void save(const SelectorModel& s, const SelectorMetadata& meta,
                   const std::string& path) {
    nlohmann::ordered_json j;
    j["kind"] = "selector";
    j["arch"] = {{"conv_filters", s.cfg_.conv_filters},
                 {"conv_width", s.cfg_.conv_width},
                 {"embedding_dim", s.emb_->dim}};
    j["metadata"] = {{"labels_source", meta.labels_source},
                     {"test_portion", meta.test_portion},
                     {"k_max", meta.k.max_k},
                     {"k_fraction", meta.k.fraction},
                     {"seed", meta.seed},
                     {"overhead_queries", meta.overhead_queries}};
    j["params"] = nlohmann::ordered_json::object();
    auto& self = const_cast<SelectorModel&>(s);
    for (const auto& p : self.params())
      j["params"][p.name] = {{"shape", p.value->shape}, {"data", p.value->data}};
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint: " + path);
    out << j.dump() << "\n";
  }

  static std::unique_ptr<SelectorModel> load(const std::string& path, const EmbeddingTable& emb,
                                             SelectorMetadata* meta_out) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("kind", "") != "selector") throw Error(path + ": not a selector checkpoint");
    if (j.at("arch").at("embedding_dim").get<int>() != emb.dim)
      throw Error(path + ": embedding dim mismatch");
    SelectorModel::Config cfg;
    cfg.conv_filters = j.at("arch").at("conv_filters").get<int>();
    cfg.conv_width = j.at("arch").at("conv_width").get<int>();
    auto model = std::make_unique<SelectorModel>(emb, cfg, 0);
    for (auto& p : model->params()) {
      const auto& rec = j.at("params").at(p.name);
      std::vector<int> shape = rec.at("shape").get<std::vector<int>>();
      if (shape != p.value->shape) throw Error(path + ": shape mismatch for " + p.name);
      p.value->data = rec.at("data").get<std::vector<double>>();
    }
    if (meta_out) {
      const auto& m = j.at("metadata");
      meta_out->labels_source = m.at("labels_source").get<std::string>();
      meta_out->test_portion = m.at("test_portion").get<int>();
      meta_out->k.max_k = m.at("k_max").get<int>();
      meta_out->k.fraction = m.at("k_fraction").get<double>();
      meta_out->seed = m.at("seed").get<uint64_t>();
      meta_out->overhead_queries = m.at("overhead_queries").get<uint64_t>();
    }
    return model;
  }
};

void save_selector(const SelectorModel& selector, const SelectorMetadata& meta,
                   const std::string& path) {
  SelectorIo::save(selector, meta, path);
}

std::unique_ptr<SelectorModel> load_selector(const std::string& path, const EmbeddingTable& emb,
                                             SelectorMetadata* meta_out) {
  return SelectorIo::load(path, emb, meta_out);
}

}  // namespace selattack
