#include "selattack/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "selattack/util.hpp"

namespace selattack {

namespace {

using Vec = std::vector<double>;

Vec random_unit(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec v(static_cast<size_t>(dim));
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = gauss(rng);
      norm += x * x;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Unit vector at exactly `cos_target` cosine from `base`.
Vec rotate_from(const Vec& base, double cos_target, std::mt19937_64& rng) {
  const int dim = static_cast<int>(base.size());
  Vec ortho;
  double norm = 0.0;
  do {
    ortho = random_unit(dim, rng);
    double proj = dot(ortho, base);
    for (size_t i = 0; i < ortho.size(); ++i) ortho[i] -= proj * base[i];
    norm = std::sqrt(dot(ortho, ortho));
  } while (norm < 1e-6);
  for (double& x : ortho) x /= norm;
  const double sin_target = std::sqrt(1.0 - cos_target * cos_target);
  Vec out(static_cast<size_t>(dim));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = cos_target * base[i] + sin_target * ortho[i];
  return out;
}

// Base vectors kept mutually dispersed so that only planted pairs cross tau.
std::vector<Vec> dispersed_bases(int count, int dim, double limit, std::mt19937_64& rng) {
  std::vector<Vec> bases;
  bases.reserve(static_cast<size_t>(count));
  int attempts = 0;
  while (static_cast<int>(bases.size()) < count) {
    if (++attempts > count * 2000)
      throw Error("synthetic: cannot disperse " + std::to_string(count) +
                  " base vectors in dim " + std::to_string(dim) +
                  "; raise embedding_dim or lower tau");
    Vec v = random_unit(dim, rng);
    bool ok = true;
    for (const Vec& b : bases)
      if (std::fabs(dot(v, b)) > limit) {
        ok = false;
        break;
      }
    if (ok) bases.push_back(std::move(v));
  }
  return bases;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.positive_words < 1 || spec.negative_words < 1)
    throw Error("synthetic: need at least one positive and one negative word");
  if (spec.positive_words != spec.negative_words)
    throw Error("synthetic: polarity word counts must match so every word gets a planted "
                "opposite-polarity neighbor");
  if (spec.min_length < 2 || spec.max_length < spec.min_length)
    throw Error("synthetic: invalid sentence length range");
  if (spec.class_balance <= 0.0 || spec.class_balance >= 1.0)
    throw Error("synthetic: class_balance must lie in (0, 1)");
  if (spec.pair_cosine <= spec.tau || spec.filler_pair_cosine <= spec.tau)
    throw Error("synthetic: planted pair cosines must exceed tau");
  if (spec.filler_words < 2) throw Error("synthetic: need at least two filler words");

  std::vector<std::string> pos_words, neg_words, filler_words;
  for (int i = 0; i < spec.positive_words; ++i) pos_words.push_back("pos" + std::to_string(i));
  for (int i = 0; i < spec.negative_words; ++i) neg_words.push_back("neg" + std::to_string(i));
  for (int i = 0; i < spec.filler_words; ++i)
    filler_words.push_back("filler" + std::to_string(i));

  // One base vector per planted cluster: a polarity pair shares a base, as
  // does a filler pair. Cross-base cosines stay well under tau so the only
  // above-tau neighbors are the planted ones. Rotated partners can still
  // brush against foreign bases by chance, so construction is verified and
  // retried under a salted seed until the planted structure holds exactly.
  const int polarity_pairs = spec.positive_words;
  const int filler_clusters = (spec.filler_words + 1) / 2;
  const double base_limit = 0.5 * spec.tau;

  std::vector<std::string> words;
  std::vector<Vec> vectors;
  auto build_vectors = [&](uint64_t attempt) {
    words.clear();
    vectors.clear();
    auto rng = named_rng(mix_seed(spec.seed, attempt), "synthetic.embeddings");
    std::vector<Vec> bases =
        dispersed_bases(polarity_pairs + filler_clusters, spec.embedding_dim, base_limit, rng);
    auto add_word = [&](const std::string& w, Vec v) {
      words.push_back(w);
      vectors.push_back(std::move(v));
    };
    for (int i = 0; i < spec.positive_words; ++i)
      add_word(pos_words[static_cast<size_t>(i)], bases[static_cast<size_t>(i)]);
    for (int i = 0; i < spec.negative_words; ++i)
      add_word(neg_words[static_cast<size_t>(i)],
               rotate_from(bases[static_cast<size_t>(i)], spec.pair_cosine, rng));
    for (int i = 0; i < spec.filler_words; ++i) {
      const Vec& base = bases[static_cast<size_t>(polarity_pairs + i / 2)];
      if (i % 2 == 0)
        add_word(filler_words[static_cast<size_t>(i)], base);
      else
        add_word(filler_words[static_cast<size_t>(i)],
                 rotate_from(base, spec.filler_pair_cosine, rng));
    }
  };

  auto structure_ok = [&]() {
    const int V = static_cast<int>(words.size());
    for (int i = 0; i < V; ++i) {
      for (int j = i + 1; j < V; ++j) {
        const double c = dot(vectors[static_cast<size_t>(i)], vectors[static_cast<size_t>(j)]);
        const bool polarity_pair = i < spec.positive_words &&
                                   (j - spec.positive_words) == i &&
                                   j < spec.positive_words + spec.negative_words;
        const int fi = i - spec.positive_words - spec.negative_words;
        const int fj = j - spec.positive_words - spec.negative_words;
        const bool filler_pair = fi >= 0 && fj >= 0 && fi / 2 == fj / 2;
        if (polarity_pair || filler_pair) {
          if (c <= spec.tau) return false;
        } else if (c >= spec.tau) {
          return false;
        }
      }
    }
    return true;
  };

  bool built = false;
  for (uint64_t attempt = 0; attempt < 50; ++attempt) {
    build_vectors(attempt);
    if (structure_ok()) {
      built = true;
      break;
    }
  }
  if (!built)
    throw Error("synthetic: cannot realize the planted synonym structure; "
                "raise embedding_dim or lower tau");

  SyntheticCorpus corpus;
  corpus.embeddings.dim = spec.embedding_dim;
  const int V = static_cast<int>(words.size());
  corpus.embeddings.unk_index = V;
  corpus.embeddings.vocab.unk_index = V;
  corpus.embeddings.vocab.words = words;
  for (int i = 0; i < V; ++i) corpus.embeddings.vocab.index[words[static_cast<size_t>(i)]] = i;
  corpus.embeddings.vectors = Tensor::zeros({V + 1, spec.embedding_dim});
  for (int r = 0; r < V; ++r)
    for (int c = 0; c < spec.embedding_dim; ++c)
      corpus.embeddings.vectors.at(r, c) = vectors[static_cast<size_t>(r)][static_cast<size_t>(c)];

  for (const auto& w : pos_words) corpus.true_weights[w] = 1.0;
  for (const auto& w : neg_words) corpus.true_weights[w] = -1.0;
  for (const auto& w : filler_words) corpus.true_weights[w] = 0.0;
  corpus.true_bias = 0.0;

  // Sentence generation: pick the label, then plant a strict majority of
  // matching polarity words among the polarity slots.
  auto gen_split = [&](int count, Split split, std::string_view stream) {
    auto srng = named_rng(spec.seed, stream);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> length_dist(spec.min_length, spec.max_length);
    std::vector<LabeledExample> out;
    std::set<std::string> seen;
    int guard = 0;
    while (static_cast<int>(out.size()) < count) {
      if (++guard > count * 200)
        throw Error("synthetic: cannot generate enough distinct sentences; "
                    "widen the length range or vocabulary");
      const int label = unif(srng) < spec.class_balance ? 1 : 0;
      const int length = length_dist(srng);
      int polarity_slots =
          std::max(1, static_cast<int>(std::lround(spec.polarity_density * length)));
      polarity_slots = std::min(polarity_slots, length);
      // strict majority for the label class
      std::uniform_int_distribution<int> minority_dist(0, (polarity_slots - 1) / 2);
      const int minority = polarity_slots > 1 ? minority_dist(srng) : 0;
      const int majority = polarity_slots - minority;

      const auto& major_pool = label == 1 ? pos_words : neg_words;
      const auto& minor_pool = label == 1 ? neg_words : pos_words;
      std::vector<std::string> tokens;
      auto pick = [&](const std::vector<std::string>& pool) {
        std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
        return pool[d(srng)];
      };
      for (int i = 0; i < majority; ++i) tokens.push_back(pick(major_pool));
      for (int i = 0; i < minority; ++i) tokens.push_back(pick(minor_pool));
      for (int i = polarity_slots; i < length; ++i) tokens.push_back(pick(filler_words));
      std::shuffle(tokens.begin(), tokens.end(), srng);

      std::string text = join(tokens, ' ');
      if (!seen.insert(text).second) continue;
      LabeledExample ex;
      ex.doc = tokenize(text, corpus.embeddings.vocab);
      ex.label = label;
      ex.split = split;
      out.push_back(std::move(ex));
    }
    return out;
  };

  corpus.substitute = gen_split(spec.substitute_sentences, Split::substitute, "split.substitute");
  corpus.target_train =
      gen_split(spec.target_train_sentences, Split::target_train, "split.train");
  corpus.target_test = gen_split(spec.target_test_sentences, Split::target_test, "split.test");

  return corpus;
}

void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  auto write_split = [&](const std::vector<LabeledExample>& data, const std::string& name) {
    std::ofstream out(dir + "/" + name + ".csv");
    if (!out) throw Error("cannot write " + dir + "/" + name + ".csv");
    for (const auto& ex : data) out << ex.doc.joined() << "," << ex.label << "\n";
  };
  write_split(corpus.substitute, "substitute");
  write_split(corpus.target_train, "target_train");
  write_split(corpus.target_test, "target_test");

  {
    std::ofstream out(dir + "/embeddings.txt");
    if (!out) throw Error("cannot write " + dir + "/embeddings.txt");
    out.precision(17);
    const int V = corpus.embeddings.vocab.size();
    for (int i = 0; i < V; ++i) {
      out << corpus.embeddings.vocab.words[static_cast<size_t>(i)];
      for (int c = 0; c < corpus.embeddings.dim; ++c)
        out << " " << corpus.embeddings.vectors.at(i, c);
      out << "\n";
    }
  }

  {
    nlohmann::ordered_json j;
    j["bias"] = corpus.true_bias;
    j["weights"] = nlohmann::ordered_json::object();
    for (const auto& [w, v] : corpus.true_weights) j["weights"][w] = v;
    std::ofstream out(dir + "/ground_truth.json");
    if (!out) throw Error("cannot write " + dir + "/ground_truth.json");
    out << j.dump(2) << "\n";
  }
}

std::map<std::string, double> load_ground_truth_weights(const std::string& path,
                                                        double* bias_out) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open ground truth file: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  if (bias_out) *bias_out = j.at("bias").get<double>();
  std::map<std::string, double> weights;
  for (const auto& [w, v] : j.at("weights").items()) weights[w] = v.get<double>();
  return weights;
}

}  // namespace selattack
