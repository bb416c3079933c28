#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "selattack/attack.hpp"
#include "selattack/harness.hpp"
#include "selattack/remote.hpp"
#include "selattack/synthetic.hpp"
#include "selattack/util.hpp"

namespace fs = std::filesystem;
using namespace selattack;

namespace {

void print_report(const ExperimentReport& r) {
  std::cout << "clean_acc            " << r.clean_acc << "\n"
            << "adv_acc              " << r.adv_acc << "\n"
            << "avg_queries          " << r.avg_queries << "\n"
            << "overhead_queries     " << r.overhead_queries << "\n"
            << "evaluation_queries   " << r.evaluation_queries << "\n"
            << "attack_ranking       " << r.attack_ranking_queries << "\n"
            << "attack_substitution  " << r.attack_substitution_queries << "\n"
            << "total_queries        " << r.total_queries << "\n"
            << "eval/attacked/flipped " << r.eval_count << "/" << r.attacked << "/" << r.flipped
            << "\n"
            << "labels_source        " << r.labels_source << "\n"
            << "ranking              " << r.ranking << "\n"
            << "config_hash          " << r.config_hash_hex << "\n"
            << "wall_seconds         " << r.wall_seconds << "\n";
}

struct Overrides {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  int eval_count = 0;
  int workers = 0;
  std::string ranking;
  std::string labels_source;
  int portion = 0;
  bool no_train = false;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "experiment config file (json)")->required();
  cmd->add_option("--out", o.out_dir, "override output directory");
  cmd->add_option("--seed", o.seed, "override seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  cmd->add_option("--eval-count", o.eval_count, "override evaluation sample size");
  cmd->add_option("--workers", o.workers, "override attack worker count");
  cmd->add_option("--ranking", o.ranking,
                  "override ranking kind (selector_rank|deletion_rank|random_rank)");
  cmd->add_option("--labels-source", o.labels_source, "override selector labels source");
  cmd->add_option("--portion", o.portion, "override target-test portion (count)");
  cmd->add_flag("--no-train", o.no_train, "attack with the untrained selector");
}

ExperimentConfig apply_overrides(const Overrides& o) {
  ExperimentConfig cfg = load_config(o.config_path);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.seed_set) cfg.seed = o.seed;
  if (o.eval_count > 0) cfg.eval_count = o.eval_count;
  if (o.workers > 0) cfg.workers = o.workers;
  if (!o.ranking.empty()) cfg.attack.ranking = ranking_kind_from_string(o.ranking);
  if (!o.labels_source.empty())
    cfg.selection.labels_source = labels_source_from_string(o.labels_source);
  if (o.portion > 0) cfg.selection.test_portion = o.portion;
  if (o.no_train) cfg.train_selector = false;
  return cfg;
}

std::unique_ptr<TargetAdapter> open_target(const std::string& kind, const std::string& checkpoint,
                                           const EmbeddingTable& emb) {
  TargetSpec::Kind k = target_kind_from_string(kind);
  if (k == TargetSpec::Kind::linear_bow)
    return std::make_unique<LinearBowTarget>(load_linear_bow(checkpoint));
  if (k == TargetSpec::Kind::local_cnn) return load_local_cnn(checkpoint, emb);
  throw Error("serve/distill need a local target kind");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selattack: query-efficient black-box text attacks with a learned "
               "word-importance selector"};
  app.require_subcommand(1);

  // ingest
  std::string ingest_data, ingest_format = "csv", ingest_embeddings;
  auto* ingest = app.add_subcommand("ingest", "load a dataset and report its statistics");
  ingest->add_option("--data", ingest_data, "dataset file")->required();
  ingest->add_option("--format", ingest_format, "csv|tsv|jsonl");
  ingest->add_option("--embeddings", ingest_embeddings, "embedding file (for vocabulary)")
      ->required();

  // make-synthetic
  SyntheticSpec spec;
  std::string synth_out = "synthetic";
  auto* synth = app.add_subcommand("make-synthetic", "generate the synthetic benchmark corpus");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--positive-words", spec.positive_words);
  synth->add_option("--negative-words", spec.negative_words);
  synth->add_option("--filler-words", spec.filler_words);
  synth->add_option("--dim", spec.embedding_dim);
  synth->add_option("--substitute", spec.substitute_sentences);
  synth->add_option("--train", spec.target_train_sentences);
  synth->add_option("--test", spec.target_test_sentences);
  synth->add_option("--min-length", spec.min_length);
  synth->add_option("--max-length", spec.max_length);
  synth->add_option("--class-balance", spec.class_balance);
  synth->add_option("--polarity-density", spec.polarity_density);
  synth->add_option("--pair-cosine", spec.pair_cosine);
  synth->add_option("--filler-pair-cosine", spec.filler_pair_cosine);
  synth->add_option("--tau", spec.tau);
  synth->add_option("--seed", spec.seed);

  // train-target
  std::string tt_kind = "linear_bow", tt_train, tt_test, tt_format = "csv", tt_embeddings,
              tt_out = "target.json";
  int tt_epochs = 40, tt_classes = 2;
  double tt_lr = 0.1;
  uint64_t tt_seed = 1;
  auto* traint = app.add_subcommand("train-target", "train a local target classifier");
  traint->add_option("--kind", tt_kind, "linear_bow|local_cnn");
  traint->add_option("--train", tt_train, "training split")->required();
  traint->add_option("--test", tt_test, "held-out split for accuracy report");
  traint->add_option("--format", tt_format);
  traint->add_option("--embeddings", tt_embeddings)->required();
  traint->add_option("--out", tt_out, "checkpoint path");
  traint->add_option("--epochs", tt_epochs);
  traint->add_option("--lr", tt_lr);
  traint->add_option("--classes", tt_classes);
  traint->add_option("--seed", tt_seed);

  // distill
  Overrides distill_o;
  std::string distill_out = "pairs.jsonl";
  auto* distill = app.add_subcommand("distill", "cache target outputs as training pairs");
  add_override_flags(distill, distill_o);
  distill->add_option("--pairs-out", distill_out, "pairs file to write");

  // train-selector
  Overrides ts_o;
  std::string ts_out = "selector.json";
  auto* trains = app.add_subcommand("train-selector", "distill and train the selector");
  add_override_flags(trains, ts_o);
  trains->add_option("--selector-out", ts_out, "selector checkpoint to write");

  // attack
  Overrides attack_o;
  auto* attack = app.add_subcommand("attack", "run the full experiment pipeline");
  add_override_flags(attack, attack_o);

  // ablate
  Overrides ablate_o;
  std::vector<double> portions;
  std::string grid_csv;
  auto* ablate = app.add_subcommand("ablate", "sweep target-test portions");
  add_override_flags(ablate, ablate_o);
  ablate->add_option("--portions", portions, "fractions in (0,1] or counts")->required();
  ablate->add_option("--grid-csv", grid_csv, "combined csv path (default <out>/ablation.csv)");

  // report
  std::string report_dir;
  auto* report = app.add_subcommand("report", "print a saved report and audit its traces");
  report->add_option("--dir", report_dir, "experiment output directory")->required();

  // serve
  std::string serve_embeddings, serve_kind = "linear_bow", serve_checkpoint;
  int serve_port = 8080;
  auto* serve = app.add_subcommand("serve", "serve local targets over the wire protocol");
  serve->add_option("--embeddings", serve_embeddings)->required();
  serve->add_option("--kind", serve_kind, "linear_bow|local_cnn");
  serve->add_option("--checkpoint", serve_checkpoint)->required();
  serve->add_option("--port", serve_port);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      EmbeddingTable emb = load_embeddings(ingest_embeddings);
      auto data = load_dataset(ingest_data, format_from_string(ingest_format),
                               Split::target_train, emb.vocab);
      DatasetStats st = dataset_stats(data);
      std::cout << "records      " << st.count << "\n"
                << "mean_tokens  " << st.mean_tokens << "\n";
    } else if (*synth) {
      SyntheticCorpus corpus = make_synthetic_corpus(spec);
      write_synthetic_corpus(corpus, synth_out);
      std::cout << "wrote " << synth_out << "/{substitute,target_train,target_test}.csv, "
                << "embeddings.txt, ground_truth.json\n";
    } else if (*traint) {
      EmbeddingTable emb = load_embeddings(tt_embeddings);
      DatasetFormat fmt = format_from_string(tt_format);
      auto train = load_dataset(tt_train, fmt, Split::target_train, emb.vocab);
      std::unique_ptr<TargetAdapter> target;
      if (tt_kind == "linear_bow") {
        LinearBowTarget t = train_linear_bow(train, tt_epochs, tt_lr, tt_seed);
        save_linear_bow(t, tt_out);
        target = std::make_unique<LinearBowTarget>(std::move(t));
      } else if (tt_kind == "local_cnn") {
        auto t = std::make_unique<LocalCnnTarget>(emb, tt_classes, 32, 3, tt_seed);
        t->train(train, tt_epochs, 32, tt_lr, tt_seed);
        save_local_cnn(*t, tt_out);
        target = std::move(t);
      } else {
        throw Error("train-target: unknown kind '" + tt_kind + "'");
      }
      std::cout << "saved " << tt_out << "\n";
      if (!tt_test.empty()) {
        auto test = load_dataset(tt_test, fmt, Split::target_test, emb.vocab);
        size_t hits = 0;
        for (const auto& ex : test)
          if (argmax_label(target->score(ex.doc)) == ex.label) ++hits;
        std::cout << "test_accuracy " << 100.0 * hits / test.size() << "\n";
      }
    } else if (*distill) {
      ExperimentConfig cfg = apply_overrides(distill_o);
      ExperimentState state;
      // Stop after the distillation stage: reuse the pipeline pieces directly.
      cfg.train_selector = false;
      cfg.eval_count = 1;
      ExperimentState full;
      (void)full;
      // build state and pairs without attacking
      {
        // run only ingest + target + distill
        ExperimentConfig probe = cfg;
        probe.out_dir = cfg.out_dir;
        // reuse run_experiment internals via build_training_pairs
        state.embeddings = load_embeddings(cfg.embedding_path);
        state.substitute = load_dataset(cfg.substitute_path, cfg.format, Split::substitute,
                                        state.embeddings.vocab);
        state.target_test = load_dataset(cfg.target_test_path, cfg.format, Split::target_test,
                                         state.embeddings.vocab);
        std::unique_ptr<TargetAdapter> target;
        if (cfg.target.kind == TargetSpec::Kind::remote) {
          RemoteConfig rc;
          rc.url = cfg.target.url;
          rc.timeout_sec = cfg.target.timeout_sec;
          rc.max_retries = cfg.target.max_retries;
          rc.classes = cfg.target.classes;
          target = std::make_unique<RemoteTarget>(rc);
        } else {
          target = open_target(target_kind_name(cfg.target.kind), cfg.target.checkpoint,
                               state.embeddings);
        }
        DistillationCache cache;
        auto pairs = build_training_pairs(cfg.selection, state.substitute, state.target_test,
                                          *target, cache, state.ledger, cfg.seed);
        std::ofstream out(distill_out);
        if (!out) throw Error("cannot write " + distill_out);
        for (const auto& p : pairs) {
          nlohmann::ordered_json j;
          j["tokens"] = p.doc.tokens;
          j["target"] = p.target;
          j["label"] = p.label;
          out << j.dump() << "\n";
        }
        std::cout << "pairs             " << pairs.size() << "\n"
                  << "overhead_queries  " << state.ledger.count(Phase::distillation_overhead)
                  << "\n"
                  << "wrote             " << distill_out << "\n";
      }
    } else if (*trains) {
      ExperimentConfig cfg = apply_overrides(ts_o);
      ExperimentState state;
      cfg.eval_count = 1;  // training only; skip a meaningful attack
      run_experiment(cfg, &state);
      SelectorMetadata meta;
      meta.labels_source = labels_source_name(cfg.selection.labels_source);
      meta.test_portion = cfg.selection.test_portion;
      meta.k = cfg.selection.k;
      meta.seed = cfg.seed;
      meta.overhead_queries = state.ledger.count(Phase::distillation_overhead);
      save_selector(*state.selector, meta, ts_out);
      std::cout << "saved " << ts_out << "\n"
                << "overhead_queries " << meta.overhead_queries << "\n";
      if (!state.training_log.epoch_loss.empty())
        std::cout << "loss " << state.training_log.epoch_loss.front() << " -> "
                  << state.training_log.epoch_loss.back() << "\n";
    } else if (*attack) {
      ExperimentConfig cfg = apply_overrides(attack_o);
      ExperimentReport rep = run_experiment(cfg);
      print_report(rep);
      std::cout << "report " << cfg.out_dir << "/report.json\n"
                << "traces " << cfg.out_dir << "/traces.jsonl\n";
    } else if (*ablate) {
      ExperimentConfig cfg = apply_overrides(ablate_o);
      std::string csv = grid_csv.empty() ? cfg.out_dir + "/ablation.csv" : grid_csv;
      fs::create_directories(cfg.out_dir);
      auto reports = run_ablation(cfg, portions, csv);
      for (const auto& r : reports) {
        std::cout << "--- portion " << r.test_portion << " ---\n";
        print_report(r);
      }
      std::cout << "grid " << csv << "\n";
    } else if (*report) {
      ExperimentReport rep = load_report(report_dir + "/report.json");
      print_report(rep);
      const std::string traces_path = report_dir + "/traces.jsonl";
      if (fs::exists(traces_path)) {
        Vocab empty_vocab;
        auto outcomes = load_traces(traces_path, empty_vocab);
        uint64_t attack_total = 0;
        for (const auto& o : outcomes) attack_total += o.queries.attack_total();
        const bool ok = attack_total ==
                        rep.attack_ranking_queries + rep.attack_substitution_queries;
        std::cout << "trace_audit " << (ok ? "ok" : "MISMATCH") << " (" << outcomes.size()
                  << " outcomes, " << attack_total << " attack queries)\n";
        if (!ok) return 1;
      }
    } else if (*serve) {
      EmbeddingTable emb = load_embeddings(serve_embeddings);
      std::unique_ptr<TargetAdapter> target = open_target(serve_kind, serve_checkpoint, emb);
      StubServer server({{serve_kind, target.get()}}, emb.vocab);
      int port = server.start(serve_port);
      std::cout << "serving POST http://127.0.0.1:" << port << "/predict (ctrl-c to stop)\n";
      static std::atomic<bool> interrupted{false};
      std::signal(SIGINT, [](int) { interrupted.store(true); });
      std::signal(SIGTERM, [](int) { interrupted.store(true); });
      while (!interrupted.load())
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
      server.stop();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
