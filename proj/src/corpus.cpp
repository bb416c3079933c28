#include "selattack/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "selattack/util.hpp"

namespace selattack {

std::string Document::joined() const { return join(tokens, ' '); }

const char* split_name(Split s) {
  switch (s) {
    case Split::substitute: return "substitute";
    case Split::target_train: return "target_train";
    case Split::target_test: return "target_test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "substitute") return Split::substitute;
  if (s == "target_train") return Split::target_train;
  if (s == "target_test") return Split::target_test;
  throw Error("unknown split '" + s + "'");
}

namespace {

bool ascii_alnum(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

// Keeps multi-byte UTF-8 sequences intact: only ASCII punctuation is stripped.
bool strippable(unsigned char c) { return c < 0x80 && !ascii_alnum(c); }

}  // namespace

Document tokenize(const std::string& text, const Vocab& vocab) {
  Document doc;
  doc.raw = text;
  size_t i = 0;
  const size_t n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    size_t start = i;
    while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == start) continue;
    size_t lo = start, hi = i;
    while (lo < hi && strippable(static_cast<unsigned char>(text[lo]))) ++lo;
    while (hi > lo && strippable(static_cast<unsigned char>(text[hi - 1]))) --hi;
    if (lo == hi) continue;
    std::string tok;
    tok.reserve(hi - lo);
    for (size_t p = lo; p < hi; ++p) {
      unsigned char c = static_cast<unsigned char>(text[p]);
      tok.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : text[p]);
    }
    doc.ids.push_back(vocab.lookup(tok));
    doc.tokens.push_back(std::move(tok));
  }
  return doc;
}

DatasetFormat format_from_string(const std::string& s) {
  if (s == "csv") return DatasetFormat::csv;
  if (s == "tsv") return DatasetFormat::tsv;
  if (s == "jsonl") return DatasetFormat::jsonl;
  throw Error("unknown dataset format '" + s + "'");
}

const char* format_name(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::csv: return "csv";
    case DatasetFormat::tsv: return "tsv";
    case DatasetFormat::jsonl: return "jsonl";
  }
  return "?";
}

namespace {

int parse_label(const std::string& field, const std::string& path, size_t line_no) {
  try {
    size_t pos = 0;
    int label = std::stoi(field, &pos);
    if (pos != field.size() || label < 0) throw std::invalid_argument(field);
    return label;
  } catch (const std::exception&) {
    throw Error(path + ":" + std::to_string(line_no) + ": label field '" + field +
                "' is not a non-negative integer");
  }
}

// Minimal RFC4180: quoted fields, doubled quotes inside quotes.
std::vector<std::string> split_delimited(const std::string& line, char sep,
                                         const std::string& path, size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == sep) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted)
    throw Error(path + ":" + std::to_string(line_no) + ": unterminated quoted field");
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

std::vector<LabeledExample> load_dataset(const std::string& path, DatasetFormat format,
                                         Split split, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file: " + path);
  std::vector<LabeledExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string text;
    int label = 0;
    if (format == DatasetFormat::jsonl) {
      nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded() || !rec.is_object() || !rec.contains("text") ||
          !rec.contains("label") || !rec["text"].is_string() ||
          !rec["label"].is_number_integer())
        throw Error(path + ":" + std::to_string(line_no) +
                    ": expected {\"text\": string, \"label\": integer}");
      text = rec["text"].get<std::string>();
      label = rec["label"].get<int>();
      if (label < 0)
        throw Error(path + ":" + std::to_string(line_no) + ": negative label");
    } else {
      const char sep = format == DatasetFormat::csv ? ',' : '\t';
      std::vector<std::string> fields = split_delimited(line, sep, path, line_no);
      if (fields.size() != 2)
        throw Error(path + ":" + std::to_string(line_no) + ": expected 2 fields, got " +
                    std::to_string(fields.size()));
      text = fields[0];
      label = parse_label(fields[1], path, line_no);
    }
    LabeledExample ex;
    ex.doc = tokenize(text, vocab);
    ex.label = label;
    ex.split = split;
    out.push_back(std::move(ex));
  }
  return out;
}

DatasetStats dataset_stats(std::span<const LabeledExample> examples) {
  DatasetStats st;
  st.count = examples.size();
  if (examples.empty()) return st;
  double total = 0.0;
  for (const auto& ex : examples) total += ex.doc.length();
  st.mean_tokens = total / static_cast<double>(examples.size());
  return st;
}

EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embedding file: " + path);
  std::vector<std::string> words;
  std::vector<std::vector<double>> rows;
  std::unordered_map<std::string, int> index;
  int dim = -1;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    std::vector<double> vec;
    std::string field;
    while (ss >> field) {
      try {
        size_t pos = 0;
        double v = std::stod(field, &pos);
        if (pos != field.size()) throw std::invalid_argument(field);
        vec.push_back(v);
      } catch (const std::exception&) {
        throw Error(path + ":" + std::to_string(line_no) + ": non-numeric field '" + field +
                    "'");
      }
    }
    if (word.empty() || vec.empty())
      throw Error(path + ":" + std::to_string(line_no) + ": empty record");
    if (dim < 0) dim = static_cast<int>(vec.size());
    if (static_cast<int>(vec.size()) != dim)
      throw Error(path + ":" + std::to_string(line_no) + ": dimension " +
                  std::to_string(vec.size()) + " does not match first record's " +
                  std::to_string(dim));
    auto it = index.find(word);
    if (it != index.end()) {
      std::cerr << "warning: " << path << ":" << line_no << ": duplicate word '" << word
                << "', keeping the last occurrence\n";
      rows[static_cast<size_t>(it->second)] = std::move(vec);
    } else {
      index.emplace(word, static_cast<int>(words.size()));
      words.push_back(word);
      rows.push_back(std::move(vec));
    }
  }
  if (dim < 0) throw Error(path + ": empty embedding file");

  EmbeddingTable table;
  table.dim = dim;
  const int V = static_cast<int>(words.size());
  table.unk_index = V;
  table.vocab.words = std::move(words);
  table.vocab.index = std::move(index);
  table.vocab.unk_index = V;
  table.vectors = Tensor::zeros({V + 1, dim});
  for (int r = 0; r < V; ++r)
    for (int c = 0; c < dim; ++c) table.vectors.at(r, c) = rows[static_cast<size_t>(r)][c];
  // UNK row stays all-zero.
  if (!table.vectors.all_finite()) throw Error(path + ": embedding contains non-finite values");
  return table;
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw Error("cosine: dimension mismatch");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw Error("cosine: zero-norm input");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

SynonymIndex build_synonym_index(const EmbeddingTable& table, int max_candidates,
                                 double min_cosine) {
  if (max_candidates < 1) throw Error("build_synonym_index: max_candidates must be >= 1");
  if (min_cosine <= 0.0 || min_cosine >= 1.0)
    throw Error("build_synonym_index: min_cosine must lie in (0, 1)");
  const int V = table.vocab.size();
  SynonymIndex index;
  index.max_candidates = max_candidates;
  index.min_cosine = min_cosine;
  index.candidates.resize(static_cast<size_t>(V) + 1);  // UNK entry stays empty
  for (int wi = 0; wi < V; ++wi) {
    std::vector<std::pair<int, double>> scored;
    for (int wj = 0; wj < V; ++wj) {
      if (wj == wi) continue;
      double c = cosine(table.row(wi), table.row(wj));
      if (c >= min_cosine) scored.emplace_back(wj, c);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (static_cast<int>(scored.size()) > max_candidates) scored.resize(max_candidates);
    index.candidates[static_cast<size_t>(wi)] = std::move(scored);
  }
  return index;
}

SynonymIndex remap_synonym_index(const SynonymIndex& index, const Vocab& from, const Vocab& to) {
  SynonymIndex out;
  out.max_candidates = index.max_candidates;
  out.min_cosine = index.min_cosine;
  out.candidates.resize(static_cast<size_t>(to.size()) + 1);
  for (int from_id = 0; from_id < from.size(); ++from_id) {
    int to_id = to.lookup(from.words[static_cast<size_t>(from_id)]);
    if (to_id == to.unk_index) continue;
    for (const auto& [cand_from, score] : index.candidates_for(from_id)) {
      int cand_to = to.lookup(from.words[static_cast<size_t>(cand_from)]);
      if (cand_to == to.unk_index) continue;
      out.candidates[static_cast<size_t>(to_id)].emplace_back(cand_to, score);
    }
  }
  return out;
}

// Sidecar layout (little-endian):
//   8 bytes magic "SYNIDX01"
//   u64 embedding_hash, i32 max_candidates, f64 min_cosine, u32 entry count
//   per entry: u32 candidate count, then (i32 word, f64 score) pairs
namespace {
constexpr char kMagic[8] = {'S', 'Y', 'N', 'I', 'D', 'X', '0', '1'};

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<bool>(in);
}
}  // namespace

void save_synonym_index(const SynonymIndex& index, uint64_t embedding_hash,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write synonym cache: " + path);
  out.write(kMagic, sizeof(kMagic));
  put(out, embedding_hash);
  put(out, static_cast<int32_t>(index.max_candidates));
  put(out, index.min_cosine);
  put(out, static_cast<uint32_t>(index.candidates.size()));
  for (const auto& list : index.candidates) {
    put(out, static_cast<uint32_t>(list.size()));
    for (const auto& [word, score] : list) {
      put(out, static_cast<int32_t>(word));
      put(out, score);
    }
  }
  if (!out) throw Error("short write to synonym cache: " + path);
}

std::optional<SynonymIndex> load_synonym_index(const std::string& path, uint64_t embedding_hash,
                                               int max_candidates, double min_cosine) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) return std::nullopt;
  uint64_t hash = 0;
  int32_t n = 0;
  double tau = 0.0;
  uint32_t entries = 0;
  if (!get(in, hash) || !get(in, n) || !get(in, tau) || !get(in, entries)) return std::nullopt;
  if (hash != embedding_hash || n != max_candidates || tau != min_cosine) return std::nullopt;
  SynonymIndex index;
  index.max_candidates = max_candidates;
  index.min_cosine = min_cosine;
  index.candidates.resize(entries);
  for (uint32_t e = 0; e < entries; ++e) {
    uint32_t count = 0;
    if (!get(in, count)) return std::nullopt;
    auto& list = index.candidates[e];
    list.resize(count);
    for (uint32_t c = 0; c < count; ++c) {
      int32_t word = 0;
      double score = 0.0;
      if (!get(in, word) || !get(in, score)) return std::nullopt;
      list[c] = {word, score};
    }
  }
  return index;
}

SynonymIndex build_or_load_synonym_index(const EmbeddingTable& table, int max_candidates,
                                         double min_cosine, uint64_t embedding_hash,
                                         const std::string& cache_path) {
  if (!cache_path.empty()) {
    if (auto cached = load_synonym_index(cache_path, embedding_hash, max_candidates, min_cosine))
      return std::move(*cached);
  }
  SynonymIndex index = build_synonym_index(table, max_candidates, min_cosine);
  if (!cache_path.empty()) save_synonym_index(index, embedding_hash, cache_path);
  return index;
}

}  // namespace selattack
