#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "selattack/tensor.hpp"

namespace selattack {

struct Vocab {
  std::unordered_map<std::string, int> index;
  std::vector<std::string> words;  // id -> word
  int unk_index = 0;               // == words.size()

  int lookup(const std::string& w) const {
    auto it = index.find(w);
    return it == index.end() ? unk_index : it->second;
  }
  int size() const { return static_cast<int>(words.size()); }
};

struct Document {
  std::vector<std::string> tokens;
  std::vector<int> ids;
  std::string raw;

  int length() const { return static_cast<int>(tokens.size()); }
  bool empty() const { return tokens.empty(); }
  // Canonical text form; tokenizing it reproduces `tokens` exactly.
  std::string joined() const;
};

enum class Split { substitute, target_train, target_test };
const char* split_name(Split s);
Split split_from_string(const std::string& s);

struct LabeledExample {
  Document doc;
  int label = 0;
  Split split = Split::substitute;
};

struct EmbeddingTable {
  Vocab vocab;
  Tensor vectors;  // {V+1, d}; last row is the all-zero UNK vector
  int dim = 0;
  int unk_index = 0;

  std::span<const double> row(int id) const {
    return std::span<const double>(vectors.data).subspan(
        static_cast<size_t>(id) * dim, static_cast<size_t>(dim));
  }
};

// Lowercase, split on whitespace, strip leading/trailing non-alphanumeric
// ASCII from each token, drop empties. Bytes >= 0x80 pass through untouched.
Document tokenize(const std::string& text, const Vocab& vocab);

enum class DatasetFormat { csv, tsv, jsonl };
DatasetFormat format_from_string(const std::string& s);
const char* format_name(DatasetFormat f);

// csv/tsv rows are (text, label); jsonl records carry "text" and "label".
std::vector<LabeledExample> load_dataset(const std::string& path, DatasetFormat format,
                                         Split split, const Vocab& vocab);

struct DatasetStats {
  size_t count = 0;
  double mean_tokens = 0.0;
};
DatasetStats dataset_stats(std::span<const LabeledExample> examples);

// One record per line: word followed by d space-separated reals.
// Duplicate words keep the last occurrence (warning on stderr).
EmbeddingTable load_embeddings(const std::string& path);

double cosine(std::span<const double> u, std::span<const double> v);

struct SynonymIndex {
  // candidates[word] sorted by descending cosine, tie-broken by ascending id.
  std::vector<std::vector<std::pair<int, double>>> candidates;
  int max_candidates = 0;
  double min_cosine = 0.0;

  const std::vector<std::pair<int, double>>& candidates_for(int word) const {
    static const std::vector<std::pair<int, double>> kEmpty;
    if (word < 0 || word >= static_cast<int>(candidates.size())) return kEmpty;
    return candidates[word];
  }
};

SynonymIndex build_synonym_index(const EmbeddingTable& table, int max_candidates,
                                 double min_cosine);

// Re-expresses an index built over one vocabulary in another; words and
// candidates missing from `to` are dropped, candidate order is preserved.
SynonymIndex remap_synonym_index(const SynonymIndex& index, const Vocab& from, const Vocab& to);

// Binary sidecar cache keyed by (embedding file hash, N, tau); layout is
// documented in corpus.cpp. Loading with a mismatched key returns nullopt.
void save_synonym_index(const SynonymIndex& index, uint64_t embedding_hash,
                        const std::string& path);
std::optional<SynonymIndex> load_synonym_index(const std::string& path, uint64_t embedding_hash,
                                               int max_candidates, double min_cosine);
SynonymIndex build_or_load_synonym_index(const EmbeddingTable& table, int max_candidates,
                                         double min_cosine, uint64_t embedding_hash,
                                         const std::string& cache_path);

}  // namespace selattack
