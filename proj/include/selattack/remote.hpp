#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "selattack/blackbox.hpp"

namespace selattack {

// Wire protocol (both directions, bit-exact):
//   POST /predict         {"texts": ["...", ...]}
//   200                   {"probs": [[p_0, ..., p_{C-1}], ...]}   rows align with texts
//   4xx/5xx               {"error": "message"}
// Additional named models are served at /predict/<name>.
struct RemoteConfig {
  std::string url;         // e.g. http://127.0.0.1:8080
  std::string path = "/predict";
  double timeout_sec = 5.0;
  int max_retries = 2;     // retries after the first attempt
  int classes = 2;
};

// HTTP adapter onto a remote target. Transport failures retry up to
// max_retries and then raise TransportError; malformed responses raise
// ProtocolError immediately.
class RemoteTarget : public TargetAdapter {
 public:
  explicit RemoteTarget(RemoteConfig config);
  ~RemoteTarget() override;
  int num_classes() const override { return config_.classes; }
  std::vector<double> score(const Document& doc) const override;
  std::vector<std::vector<double>> score_batch(const std::vector<std::string>& texts) const;

 private:
  RemoteConfig config_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// In-process stub serving local adapters over the wire protocol. Every
// scored text is logged so tests can reconcile client and server counts;
// malformed requests are rejected without touching any model.
class StubServer {
 public:
  // models[0] answers at /predict; others at /predict/<name>.
  StubServer(std::vector<std::pair<std::string, const TargetAdapter*>> models,
             const Vocab& vocab);
  ~StubServer();

  // Binds 127.0.0.1 on `port` (0 picks a free port) and serves on a
  // background thread. Returns the bound port. Throws on bind failure.
  int start(int port = 0);
  void stop();

  uint64_t texts_scored() const { return texts_scored_.load(); }
  uint64_t requests_rejected() const { return requests_rejected_.load(); }

 private:
  std::vector<std::pair<std::string, const TargetAdapter*>> models_;
  const Vocab* vocab_;
  std::atomic<uint64_t> texts_scored_{0};
  std::atomic<uint64_t> requests_rejected_{0};
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread serve_thread_;
};

}  // namespace selattack
