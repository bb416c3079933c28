#include "selattack/remote.hpp"

#include <chrono>
#include <cmath>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "selattack/util.hpp"

namespace selattack {

namespace {

std::pair<std::string, int> split_host_port(const std::string& url) {
  std::string rest = url;
  const std::string scheme = "http://";
  if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
  while (!rest.empty() && rest.back() == '/') rest.pop_back();
  auto colon = rest.rfind(':');
  if (colon == std::string::npos)
    throw Error("remote url must look like http://host:port, got '" + url + "'");
  int port = 0;
  try {
    port = std::stoi(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("remote url has a non-numeric port: '" + url + "'");
  }
  return {rest.substr(0, colon), port};
}

}  // namespace

struct RemoteTarget::Impl {
  std::string host;
  int port = 0;
};

RemoteTarget::RemoteTarget(RemoteConfig config)
    : config_(std::move(config)), impl_(std::make_unique<Impl>()) {
  auto [host, port] = split_host_port(config_.url);
  impl_->host = host;
  impl_->port = port;
}

RemoteTarget::~RemoteTarget() = default;

std::vector<std::vector<double>> RemoteTarget::score_batch(
    const std::vector<std::string>& texts) const {
  nlohmann::json body;
  body["texts"] = texts;
  const std::string payload = body.dump();

  httplib::Result res;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    httplib::Client client(impl_->host, impl_->port);
    const auto timeout = std::chrono::milliseconds(
        static_cast<int64_t>(config_.timeout_sec * 1000.0));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    res = client.Post(config_.path, payload, "application/json");
    if (res) break;
  }
  if (!res)
    throw TransportError("remote target unreachable at " + config_.url + config_.path +
                         " after " + std::to_string(config_.max_retries + 1) + " attempts");

  nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
  if (res->status != 200) {
    std::string message = "status " + std::to_string(res->status);
    if (!parsed.is_discarded() && parsed.contains("error"))
      message += ": " + parsed["error"].get<std::string>();
    throw ProtocolError("remote target error (" + message + ")");
  }
  if (parsed.is_discarded() || !parsed.contains("probs") || !parsed["probs"].is_array())
    throw ProtocolError("remote target response is not {\"probs\": [[...]]}");
  const auto& rows = parsed["probs"];
  if (rows.size() != texts.size())
    throw ProtocolError("remote target returned " + std::to_string(rows.size()) +
                        " rows for " + std::to_string(texts.size()) + " texts");
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    if (!row.is_array() || static_cast<int>(row.size()) != config_.classes)
      throw ProtocolError("remote target returned a row of wrong width");
    std::vector<double> probs = row.get<std::vector<double>>();
    for (double p : probs)
      if (!std::isfinite(p)) throw ProtocolError("remote target returned non-finite probability");
    out.push_back(std::move(probs));
  }
  return out;
}

std::vector<double> RemoteTarget::score(const Document& doc) const {
  return score_batch({doc.joined()})[0];
}

struct StubServer::Impl {
  httplib::Server server;
};

StubServer::StubServer(std::vector<std::pair<std::string, const TargetAdapter*>> models,
                       const Vocab& vocab)
    : models_(std::move(models)), vocab_(&vocab), impl_(std::make_unique<Impl>()) {
  if (models_.empty()) throw Error("stub server needs at least one model");

  auto handle = [this](const TargetAdapter* model, const httplib::Request& req,
                       httplib::Response& res) {
    nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("texts") ||
        !body["texts"].is_array()) {
      requests_rejected_.fetch_add(1);
      res.status = 400;
      res.set_content(nlohmann::json({{"error", "expected {\"texts\": [string, ...]}"}}).dump(),
                      "application/json");
      return;
    }
    for (const auto& t : body["texts"]) {
      if (!t.is_string()) {
        requests_rejected_.fetch_add(1);
        res.status = 400;
        res.set_content(nlohmann::json({{"error", "texts must be strings"}}).dump(),
                        "application/json");
        return;
      }
    }
    nlohmann::json probs = nlohmann::json::array();
    for (const auto& t : body["texts"]) {
      Document doc = tokenize(t.get<std::string>(), *vocab_);
      probs.push_back(model->score(doc));
      texts_scored_.fetch_add(1);  // query unit: one text scored once
    }
    res.status = 200;
    res.set_content(nlohmann::json({{"probs", probs}}).dump(), "application/json");
  };

  impl_->server.Post("/predict", [this, handle](const httplib::Request& req,
                                                httplib::Response& res) {
    handle(models_[0].second, req, res);
  });
  for (size_t m = 1; m < models_.size(); ++m) {
    const TargetAdapter* model = models_[m].second;
    impl_->server.Post("/predict/" + models_[m].first,
                       [handle, model](const httplib::Request& req, httplib::Response& res) {
                         handle(model, req, res);
                       });
  }
}

StubServer::~StubServer() { stop(); }

int StubServer::start(int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port("127.0.0.1");
    if (bound <= 0) throw Error("stub server: cannot bind any port on 127.0.0.1");
  } else {
    if (!impl_->server.bind_to_port("127.0.0.1", port))
      throw Error("stub server: cannot bind 127.0.0.1:" + std::to_string(port));
  }
  serve_thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void StubServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
  if (serve_thread_.joinable()) serve_thread_.join();
}

}  // namespace selattack
