#include "selattack/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "selattack/remote.hpp"
#include "selattack/util.hpp"

namespace selattack {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

const char* target_kind_name(TargetSpec::Kind k) {
  switch (k) {
    case TargetSpec::Kind::linear_bow: return "linear_bow";
    case TargetSpec::Kind::local_cnn: return "local_cnn";
    case TargetSpec::Kind::remote: return "remote";
  }
  return "?";
}

TargetSpec::Kind target_kind_from_string(const std::string& s) {
  if (s == "linear_bow") return TargetSpec::Kind::linear_bow;
  if (s == "local_cnn") return TargetSpec::Kind::local_cnn;
  if (s == "remote") return TargetSpec::Kind::remote;
  throw Error("unknown target kind '" + s + "'");
}

std::string config_to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["datasets"] = {{"substitute", c.substitute_path},
                   {"target_train", c.target_train_path},
                   {"target_test", c.target_test_path},
                   {"format", format_name(c.format)}};
  j["embeddings"] = {{"path", c.embedding_path},
                     {"synonym_path", c.synonym_embedding_path},
                     {"synonym_cache", c.synonym_cache_path},
                     {"synonym_candidates", c.synonym_candidates},
                     {"synonym_min_cosine", c.synonym_min_cosine}};
  j["target"] = {{"kind", target_kind_name(c.target.kind)},
                 {"checkpoint", c.target.checkpoint},
                 {"url", c.target.url},
                 {"timeout_sec", c.target.timeout_sec},
                 {"max_retries", c.target.max_retries},
                 {"classes", c.target.classes}};
  j["selection"] = {{"k_max", c.selection.k.max_k},
                    {"k_fraction", c.selection.k.fraction},
                    {"temperature_start", c.selection.temperature_start},
                    {"temperature_end", c.selection.temperature_end},
                    {"labels_source", labels_source_name(c.selection.labels_source)},
                    {"test_portion", c.selection.test_portion}};
  j["training"] = {{"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},
                   {"lr", c.training.lr}};
  j["train_selector"] = c.train_selector;
  j["attack"] = {{"max_perturb_fraction", c.attack.max_perturb_fraction},
                 {"candidate_limit", c.attack.candidate_limit},
                 {"stopword_path", c.attack.stopword_path},
                 {"ranking", ranking_kind_name(c.attack.ranking)}};
  j["eval_count"] = c.eval_count;
  j["workers"] = c.workers;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

ExperimentConfig config_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ExperimentConfig c;
  const auto& d = j.at("datasets");
  c.substitute_path = d.at("substitute").get<std::string>();
  c.target_train_path = d.at("target_train").get<std::string>();
  c.target_test_path = d.at("target_test").get<std::string>();
  c.format = format_from_string(d.at("format").get<std::string>());
  const auto& e = j.at("embeddings");
  c.embedding_path = e.at("path").get<std::string>();
  c.synonym_embedding_path = e.value("synonym_path", "");
  c.synonym_cache_path = e.value("synonym_cache", "");
  c.synonym_candidates = e.value("synonym_candidates", 8);
  c.synonym_min_cosine = e.value("synonym_min_cosine", 0.5);
  const auto& t = j.at("target");
  c.target.kind = target_kind_from_string(t.at("kind").get<std::string>());
  c.target.checkpoint = t.value("checkpoint", "");
  c.target.url = t.value("url", "");
  c.target.timeout_sec = t.value("timeout_sec", 5.0);
  c.target.max_retries = t.value("max_retries", 2);
  c.target.classes = t.value("classes", 2);
  const auto& s = j.at("selection");
  c.selection.k.max_k = s.value("k_max", 10);
  c.selection.k.fraction = s.value("k_fraction", 0.3);
  c.selection.temperature_start = s.value("temperature_start", 1.0);
  c.selection.temperature_end = s.value("temperature_end", 0.1);
  c.selection.labels_source =
      labels_source_from_string(s.at("labels_source").get<std::string>());
  c.selection.test_portion = s.value("test_portion", 0);
  const auto& tr = j.at("training");
  c.training.epochs = tr.value("epochs", 30);
  c.training.batch_size = tr.value("batch_size", 32);
  c.training.lr = tr.value("lr", 1e-3);
  c.train_selector = j.value("train_selector", true);
  const auto& a = j.at("attack");
  c.attack.max_perturb_fraction = a.value("max_perturb_fraction", 0.4);
  c.attack.candidate_limit = a.value("candidate_limit", 8);
  c.attack.stopword_path = a.value("stopword_path", "");
  c.attack.ranking = ranking_kind_from_string(a.value("ranking", "selector_rank"));
  c.eval_count = j.value("eval_count", 200);
  c.workers = j.value("workers", 1);
  c.seed = j.value("seed", uint64_t{1});
  c.out_dir = j.value("out_dir", "out");
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return config_from_json(text);
}

void save_config(const ExperimentConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write config file: " + path);
  out << config_to_json(config) << "\n";
}

uint64_t config_hash(const ExperimentConfig& config) {
  // Output location and worker count cannot influence results, so they are
  // normalized away: serial and parallel runs must hash identically.
  ExperimentConfig canonical = config;
  canonical.out_dir.clear();
  canonical.workers = 1;
  return fnv1a64(config_to_json(canonical));
}

std::string report_to_json(const ExperimentReport& r) {
  ordered_json j;
  j["clean_acc"] = r.clean_acc;
  j["adv_acc"] = r.adv_acc;
  j["avg_queries"] = r.avg_queries;
  j["overhead_queries"] = r.overhead_queries;
  j["evaluation_queries"] = r.evaluation_queries;
  j["attack_ranking_queries"] = r.attack_ranking_queries;
  j["attack_substitution_queries"] = r.attack_substitution_queries;
  j["total_queries"] = r.total_queries;
  j["eval_count"] = r.eval_count;
  j["attacked"] = r.attacked;
  j["flipped"] = r.flipped;
  j["test_portion"] = r.test_portion;
  j["labels_source"] = r.labels_source;
  j["ranking"] = r.ranking;
  j["config_hash"] = r.config_hash_hex;
  j["wall_seconds"] = r.wall_seconds;
  return j.dump(2);
}

ExperimentReport report_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ExperimentReport r;
  r.clean_acc = j.at("clean_acc").get<double>();
  r.adv_acc = j.at("adv_acc").get<double>();
  r.avg_queries = j.at("avg_queries").get<double>();
  r.overhead_queries = j.at("overhead_queries").get<uint64_t>();
  r.evaluation_queries = j.at("evaluation_queries").get<uint64_t>();
  r.attack_ranking_queries = j.at("attack_ranking_queries").get<uint64_t>();
  r.attack_substitution_queries = j.at("attack_substitution_queries").get<uint64_t>();
  r.total_queries = j.at("total_queries").get<uint64_t>();
  r.eval_count = j.at("eval_count").get<int>();
  r.attacked = j.at("attacked").get<int>();
  r.flipped = j.at("flipped").get<int>();
  r.test_portion = j.at("test_portion").get<int>();
  r.labels_source = j.at("labels_source").get<std::string>();
  r.ranking = j.at("ranking").get<std::string>();
  r.config_hash_hex = j.at("config_hash").get<std::string>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

void save_report(const ExperimentReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write report: " + path);
  out << report_to_json(report) << "\n";
}

ExperimentReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open report: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return report_from_json(text);
}

ExperimentReport compute_metrics(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw Error("compute_metrics: no evaluation records");
  const int n = static_cast<int>(records.size());
  int clean_correct = 0, attacked = 0, flipped = 0;
  uint64_t attack_queries = 0;
  for (const auto& rec : records) {
    if (rec.predicted == rec.gold) ++clean_correct;
    if (rec.outcome) {
      ++attacked;
      attack_queries += rec.outcome->queries.attack_total();
      if (rec.outcome->success) ++flipped;
    }
  }
  ExperimentReport r;
  r.eval_count = n;
  r.attacked = attacked;
  r.flipped = flipped;
  r.clean_acc = 100.0 * clean_correct / n;
  r.adv_acc = 100.0 * (clean_correct - flipped) / n;
  r.avg_queries =
      attacked > 0 ? static_cast<double>(attack_queries) / attacked : 0.0;
  return r;
}

LinearBowTarget train_linear_bow(std::span<const LabeledExample> data, int epochs, double lr,
                                 uint64_t seed) {
  if (data.empty()) throw Error("train_linear_bow: empty dataset");
  for (const auto& ex : data)
    if (ex.label < 0 || ex.label > 1)
      throw Error("train_linear_bow: only binary labels are supported");
  std::map<std::string, double> w;
  double bias = 0.0;
  auto rng = named_rng(seed, "linear_bow.shuffle");
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t i : order) {
      const auto& ex = data[i];
      double z = bias;
      for (const auto& tok : ex.doc.tokens) {
        auto it = w.find(tok);
        if (it != w.end()) z += it->second;
      }
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double g = p - static_cast<double>(ex.label);
      bias -= lr * g;
      for (const auto& tok : ex.doc.tokens) w[tok] -= lr * g;
    }
  }
  return LinearBowTarget(std::move(w), bias);
}

namespace {

size_t count_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file: " + path);
  size_t n = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ++n;
  }
  return n;
}

[[noreturn]] void stage_fail(const std::string& stage, const std::exception& e) {
  throw Error("stage " + stage + ": " + e.what());
}

void build_state(const ExperimentConfig& config, ExperimentState& state) {
  try {
    state.embeddings = load_embeddings(config.embedding_path);
    const Vocab& vocab = state.embeddings.vocab;
    state.substitute =
        load_dataset(config.substitute_path, config.format, Split::substitute, vocab);
    state.target_train =
        load_dataset(config.target_train_path, config.format, Split::target_train, vocab);
    state.target_test =
        load_dataset(config.target_test_path, config.format, Split::target_test, vocab);

    if (config.synonym_embedding_path.empty() ||
        config.synonym_embedding_path == config.embedding_path) {
      state.synonyms = build_or_load_synonym_index(
          state.embeddings, config.synonym_candidates, config.synonym_min_cosine,
          fnv1a64_file(config.embedding_path), config.synonym_cache_path);
    } else {
      EmbeddingTable syn_table = load_embeddings(config.synonym_embedding_path);
      SynonymIndex raw = build_or_load_synonym_index(
          syn_table, config.synonym_candidates, config.synonym_min_cosine,
          fnv1a64_file(config.synonym_embedding_path), config.synonym_cache_path);
      state.synonyms = remap_synonym_index(raw, syn_table.vocab, vocab);
    }
  } catch (const Error& e) {
    stage_fail("ingest", e);
  }

  try {
    switch (config.target.kind) {
      case TargetSpec::Kind::linear_bow: {
        if (!config.target.checkpoint.empty() && fs::exists(config.target.checkpoint)) {
          state.target =
              std::make_unique<LinearBowTarget>(load_linear_bow(config.target.checkpoint));
        } else {
          auto trained = train_linear_bow(state.target_train, 40, 0.1, config.seed);
          fs::create_directories(config.out_dir);
          save_linear_bow(trained, config.out_dir + "/target_linear_bow.json");
          state.target = std::make_unique<LinearBowTarget>(std::move(trained));
        }
        break;
      }
      case TargetSpec::Kind::local_cnn: {
        if (!config.target.checkpoint.empty() && fs::exists(config.target.checkpoint)) {
          state.target = load_local_cnn(config.target.checkpoint, state.embeddings);
        } else {
          auto cnn = std::make_unique<LocalCnnTarget>(state.embeddings, config.target.classes,
                                                      32, 3, config.seed);
          cnn->train(state.target_train, 15, 32, 3e-3, config.seed);
          fs::create_directories(config.out_dir);
          save_local_cnn(*cnn, config.out_dir + "/target_local_cnn.json");
          state.target = std::move(cnn);
        }
        break;
      }
      case TargetSpec::Kind::remote: {
        RemoteConfig rc;
        rc.url = config.target.url;
        rc.timeout_sec = config.target.timeout_sec;
        rc.max_retries = config.target.max_retries;
        rc.classes = config.target.classes;
        state.target = std::make_unique<RemoteTarget>(rc);
        break;
      }
    }
  } catch (const Error& e) {
    stage_fail("target", e);
  }
}

}  // namespace

std::vector<EvalRecord> attack_evaluation_sample(const ExperimentConfig& config,
                                                 ExperimentState& state) {
  if (state.target_test.empty()) throw Error("attack: empty target test split");
  const size_t n =
      std::min<size_t>(static_cast<size_t>(std::max(1, config.eval_count)),
                       state.target_test.size());
  std::vector<size_t> sample(state.target_test.size());
  std::iota(sample.begin(), sample.end(), size_t{0});
  auto rng = named_rng(config.seed, "eval.sample");
  std::shuffle(sample.begin(), sample.end(), rng);
  sample.resize(n);
  std::sort(sample.begin(), sample.end());

  AttackConfig attack_cfg;
  attack_cfg.max_perturb_fraction = config.attack.max_perturb_fraction;
  attack_cfg.candidate_limit = config.attack.candidate_limit;
  attack_cfg.ranking = config.attack.ranking;
  if (!config.attack.stopword_path.empty())
    attack_cfg.stopwords = load_stopwords(config.attack.stopword_path);

  RankingProvider provider;
  provider.kind = config.attack.ranking;
  provider.selector = state.selector.get();
  provider.seed = config.seed;

  std::vector<EvalRecord> records(n);
  std::atomic<size_t> next{0};

  auto work = [&]() {
    QueryLedger local;
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= n) break;
      const LabeledExample& ex = state.target_test[sample[i]];
      EvalRecord rec;
      rec.gold = ex.label;
      std::vector<double> probs =
          predict_proba(*state.target, ex.doc, local, Phase::evaluation);
      rec.predicted = argmax_label(probs);
      if (rec.predicted == rec.gold && !ex.doc.empty()) {
        InitialPrediction init{probs};
        rec.outcome = greedy_attack(ex.doc, *state.target, attack_cfg, provider, state.synonyms,
                                    state.embeddings.vocab, local,
                                    static_cast<int64_t>(i), &init);
      }
      records[i] = std::move(rec);
    }
    state.ledger.merge(local);
  };

  const int workers = std::max(1, config.workers);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return records;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  ExperimentState state;
  return run_experiment(config, &state);
}

ExperimentReport run_experiment(const ExperimentConfig& config, ExperimentState* state_out) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentState local_state;
  ExperimentState& state = state_out ? *state_out : local_state;

  fs::create_directories(config.out_dir);
  save_config(config, config.out_dir + "/config.json");

  build_state(config, state);

  std::vector<TrainingPair> pairs;
  DistillationCache cache;
  try {
    pairs = build_training_pairs(config.selection, state.substitute, state.target_test,
                                 *state.target, cache, state.ledger, config.seed);
  } catch (const Error& e) {
    stage_fail("distill", e);
  }
  const uint64_t overhead = state.ledger.count(Phase::distillation_overhead);

  try {
    state.selector = std::make_unique<SelectorModel>(state.embeddings, SelectorModel::Config{},
                                                     config.seed);
    state.fb = std::make_unique<SubstituteClassifier>(
        state.embeddings, state.target->num_classes(), SubstituteClassifier::Config{},
        config.seed);
    if (config.train_selector) {
      const uint64_t before = state.ledger.total();
      state.training_log = train_substitute(pairs, *state.selector, *state.fb, config.selection,
                                            config.training, config.seed);
      if (state.ledger.total() != before)
        throw Error("selector training consumed target queries");
    }
  } catch (const Error& e) {
    stage_fail("train_selector", e);
  }

  std::vector<EvalRecord> records;
  try {
    records = attack_evaluation_sample(config, state);
  } catch (const Error& e) {
    stage_fail("attack", e);
  }

  ExperimentReport report;
  try {
    report = compute_metrics(records);
    report.overhead_queries = overhead;
    report.evaluation_queries = state.ledger.count(Phase::evaluation);
    report.attack_ranking_queries = state.ledger.count(Phase::attack_ranking);
    report.attack_substitution_queries = state.ledger.count(Phase::attack_substitution);
    report.total_queries = state.ledger.total();
    report.test_portion = config.selection.test_portion;
    report.labels_source = labels_source_name(config.selection.labels_source);
    report.ranking = ranking_kind_name(config.attack.ranking);
    report.config_hash_hex = to_hex(config_hash(config));

    // Reconciliation: per-outcome attribution must match the phase counters.
    uint64_t outcome_attack = 0, outcome_eval = 0;
    for (const auto& rec : records) {
      ++outcome_eval;
      if (rec.outcome) outcome_attack += rec.outcome->queries.attack_total();
    }
    if (outcome_attack !=
        report.attack_ranking_queries + report.attack_substitution_queries)
      throw Error("per-example attack queries do not reconcile with the ledger");
    if (outcome_eval != report.evaluation_queries)
      throw Error("evaluation queries do not reconcile with the ledger");
    if (report.total_queries != report.overhead_queries + report.evaluation_queries +
                                    report.attack_ranking_queries +
                                    report.attack_substitution_queries)
      throw Error("ledger total does not reconcile with phase counts");

    std::ofstream traces(config.out_dir + "/traces.jsonl");
    if (!traces) throw Error("cannot write traces: " + config.out_dir + "/traces.jsonl");
    for (const auto& rec : records)
      if (rec.outcome) append_trace(*rec.outcome, traces);

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_report(report, config.out_dir + "/report.json");
  } catch (const Error& e) {
    stage_fail("report", e);
  }
  return report;
}

std::vector<ExperimentReport> run_ablation(const ExperimentConfig& config,
                                           const std::vector<double>& portions,
                                           const std::string& csv_path) {
  if (portions.empty()) throw Error("run_ablation: no portions given");
  const size_t test_size = count_records(config.target_test_path);

  std::vector<ExperimentReport> reports;
  for (double p : portions) {
    int count = 0;
    if (p > 0.0 && p <= 1.0)
      count = static_cast<int>(std::lround(p * static_cast<double>(test_size)));
    else if (p > 1.0 && p == std::floor(p))
      count = static_cast<int>(p);
    else
      throw Error("run_ablation: portion must be a fraction in (0,1] or a whole count");
    if (count < 1 || count > static_cast<int>(test_size))
      throw Error("run_ablation: portion " + std::to_string(count) +
                  " exceeds target test size " + std::to_string(test_size));
    ExperimentConfig cfg = config;
    cfg.selection.test_portion = count;
    cfg.out_dir = config.out_dir + "/portion_" + std::to_string(count);
    reports.push_back(run_experiment(cfg));
  }

  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write ablation csv: " + csv_path);
    csv << "test_portion,overhead_queries,clean_acc,adv_acc,avg_queries,attacked,flipped\n";
    for (const auto& r : reports) {
      csv << r.test_portion << "," << r.overhead_queries << "," << r.clean_acc << ","
          << r.adv_acc << "," << r.avg_queries << "," << r.attacked << "," << r.flipped << "\n";
    }
  }
  return reports;
}

}  // namespace selattack
