#pragma once

// Chat-completions client and a small server that exposes any Backend over
// the same protocol (used for mock endpoints and the conformance suite).
//
// Prefix forcing: in "continue" mode the prefix travels as a trailing
// assistant message with "continue_final_message": true and the server
// answers with the continuation only; the client prepends the prefix (and a
// zero-cost logprob entry for it). In "emulate" mode the prefix is written
// into the user message and prepended to any output that lacks it.

#include <cstdlib>
#include <memory>
#include <string>
#include <thread>

#include <httplib.h>

#include "sgt/backend.hpp"

namespace sgt {

enum class PrefixMode { continuation, emulate };

struct HttpEndpointConfig {
  std::string base_url;  // scheme://host:port
  std::string model;
  PrefixMode prefix_mode = PrefixMode::continuation;
  std::string api_key_env;  // name of the env var holding a bearer token
  bool logprobs = true;
  std::chrono::seconds timeout{120};
  RetryPolicy retry;

  static HttpEndpointConfig from_json(const json& j) {
    HttpEndpointConfig c;
    c.base_url = j.at("url").get<std::string>();
    c.model = j.value("model", "default");
    auto mode = j.value("prefix_mode", "continue");
    if (mode == "continue") c.prefix_mode = PrefixMode::continuation;
    else if (mode == "emulate") c.prefix_mode = PrefixMode::emulate;
    else throw ConfigError("prefix_mode must be continue or emulate, got " + mode);
    c.api_key_env = j.value("api_key_env", "");
    c.logprobs = j.value("logprobs", true);
    c.timeout = std::chrono::seconds(j.value("timeout_s", 120));
    c.retry.attempts = j.value("retries", 3);
    return c;
  }
};

inline constexpr std::string_view kEmulatedPrefixNote = "\n\nBegin your response with exactly: ";

/// Request body for the wire protocol.
inline json wire_request(const GenRequest& r, const std::string& model, PrefixMode mode) {
  json msgs = json::array();
  for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  json body = {{"model", model}, {"n", r.n}, {"temperature", r.temperature}, {"seed", r.seed},
               {"max_tokens", r.max_tokens}};
  if (r.want_logprobs) {
    body["logprobs"] = true;
    body["top_logprobs"] = r.top_logprobs;
  }
  if (r.output_prefix) {
    if (mode == PrefixMode::continuation) {
      msgs.push_back({{"role", "assistant"}, {"content", *r.output_prefix}});
      body["continue_final_message"] = true;
      body["add_generation_prompt"] = false;
    } else {
      for (auto it = msgs.rbegin(); it != msgs.rend(); ++it)
        if ((*it)["role"] == "user") {
          (*it)["content"] = (*it)["content"].get<std::string>() + std::string(kEmulatedPrefixNote) + *r.output_prefix;
          break;
        }
    }
  }
  body["messages"] = msgs;
  return body;
}

/// Reads choices[] from a wire response. Token log-probabilities come from
/// choices[i].logprobs.content[].
inline std::vector<Completion> wire_choices(const json& resp) {
  std::vector<Completion> out;
  for (const auto& ch : resp.at("choices")) {
    Completion c;
    c.text = ch.at("message").at("content").get<std::string>();
    c.finish_reason = ch.value("finish_reason", "stop");
    if (ch.contains("logprobs") && ch["logprobs"].is_object() && ch["logprobs"].contains("content")) {
      std::vector<TokenLogprob> toks;
      for (const auto& t : ch["logprobs"]["content"]) {
        TokenLogprob tl{t.at("token").get<std::string>(), t.at("logprob").get<double>(), {}};
        for (const auto& a : t.value("top_logprobs", json::array()))
          tl.top.emplace_back(a.at("token").get<std::string>(), a.at("logprob").get<double>());
        toks.push_back(std::move(tl));
      }
      c.token_logprobs = std::move(toks);
    }
    out.push_back(std::move(c));
  }
  return out;
}

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpEndpointConfig cfg) : cfg_(std::move(cfg)) {
    if (!cfg_.api_key_env.empty()) {
      const char* v = std::getenv(cfg_.api_key_env.c_str());
      if (!v || !*v) throw ConfigError("environment variable " + cfg_.api_key_env + " is not set");
      token_ = v;
    }
  }

  std::vector<Completion> generate(const GenRequest& req) override {
    req.validate();
    ++calls_;
    const auto body = wire_request(req, cfg_.model, cfg_.prefix_mode).dump();
    BackendHealth local;
    local.endpoint = cfg_.base_url;
    auto choices = with_retries(cfg_.retry, local, req.seed ^ fnv1a64(body), [&] { return post(body); });
    if (choices.size() != static_cast<std::size_t>(req.n))
      throw ProtocolError(cfg_.base_url + " returned " + std::to_string(choices.size()) + " choices, expected " +
                          std::to_string(req.n));
    if (req.output_prefix) {
      const auto& p = *req.output_prefix;
      for (auto& c : choices) {
        if (cfg_.prefix_mode == PrefixMode::continuation || !starts_with(c.text, p)) {
          c.text = p + c.text;
          if (c.token_logprobs) c.token_logprobs->insert(c.token_logprobs->begin(), TokenLogprob{p, 0.0, {}});
        }
      }
    }
    if (req.want_logprobs)
      for (const auto& c : choices)
        if (!c.token_logprobs) throw UnsupportedCapability(cfg_.base_url + " returned no log-probabilities");
    return choices;
  }

  bool supports_logprobs() const override { return cfg_.logprobs; }
  std::string endpoint_id() const override { return cfg_.base_url + "/" + cfg_.model; }
  std::uint64_t call_count() const override { return calls_.load(); }

 private:
  std::vector<Completion> post(const std::string& body) const {
    httplib::Client cli(cfg_.base_url);
    cli.set_connection_timeout(cfg_.timeout);
    cli.set_read_timeout(cfg_.timeout);
    cli.set_write_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    auto res = cli.Post("/v1/chat/completions", headers, body, "application/json");
    if (!res) throw TransportError(cfg_.base_url + ": " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
      throw TransportError(cfg_.base_url + ": HTTP " + std::to_string(res->status));
    json resp;
    try {
      resp = json::parse(res->body);
    } catch (const json::exception& e) {
      throw ProtocolError(cfg_.base_url + ": response is not JSON: " + e.what());
    }
    if (res->status != 200) {
      auto type = resp.contains("error") ? resp["error"].value("type", "") : std::string{};
      auto msg = resp.contains("error") ? resp["error"].value("message", res->body) : res->body;
      if (type == "unsupported_capability") throw UnsupportedCapability(cfg_.base_url + ": " + msg);
      throw ProtocolError(cfg_.base_url + ": HTTP " + std::to_string(res->status) + ": " + msg);
    }
    try {
      return wire_choices(resp);
    } catch (const json::exception& e) {
      throw ProtocolError(cfg_.base_url + ": malformed response: " + e.what());
    }
  }

  HttpEndpointConfig cfg_;
  std::string token_;
  std::atomic<std::uint64_t> calls_{0};
};

/// Serves a Backend over the wire protocol on 127.0.0.1. start() binds and
/// returns the port; the server runs on its own thread until stop().
class BackendServer {
 public:
  explicit BackendServer(BackendPtr backend) : backend_(std::move(backend)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& rq, httplib::Response& rs) { handle(rq, rs); });
    server_.Get("/health", [](const httplib::Request&, httplib::Response& rs) {
      rs.set_content(R"({"status":"ok"})", "application/json");
    });
  }

  ~BackendServer() { stop(); }

  int start(int port = 0, const std::string& host = "127.0.0.1") {
    if (port == 0) port = server_.bind_to_any_port(host);
    else if (!server_.bind_to_port(host, port)) port = -1;
    if (port < 0) throw IoError("cannot bind " + host);
    port_ = port;
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Blocks serving until the process is stopped.
  void serve_forever(int port, const std::string& host = "127.0.0.1") {
    if (!server_.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    port_ = port;
    server_.listen_after_bind();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  static void fail(httplib::Response& rs, int status, std::string_view type, std::string_view msg) {
    rs.status = status;
    rs.set_content(json{{"error", {{"type", type}, {"message", msg}}}}.dump(), "application/json");
  }

  void handle(const httplib::Request& rq, httplib::Response& rs) {
    GenRequest req;
    bool emulated = false;
    try {
      auto body = json::parse(rq.body);
      req.model_ref = body.value("model", "");
      req.n = body.value("n", 1);
      req.temperature = body.value("temperature", 0.0);
      req.seed = body.value("seed", std::uint64_t{0});
      req.max_tokens = body.value("max_tokens", 512);
      req.want_logprobs = body.value("logprobs", false);
      req.top_logprobs = body.value("top_logprobs", 20);
      for (const auto& m : body.at("messages"))
        req.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
      if (body.value("continue_final_message", false) && !req.messages.empty() &&
          req.messages.back().role == "assistant") {
        req.output_prefix = req.messages.back().content;
        req.messages.pop_back();
      } else if (!req.messages.empty() && req.messages.back().role == "user") {
        auto& text = req.messages.back().content;
        if (auto at = text.rfind(kEmulatedPrefixNote); at != std::string::npos) {
          req.output_prefix = text.substr(at + kEmulatedPrefixNote.size());
          text.erase(at);
          emulated = true;
        }
      }
      req.validate();
    } catch (const std::exception& e) {
      return fail(rs, 400, "invalid_request", e.what());
    }
    if (req.want_logprobs && !backend_->supports_logprobs())
      return fail(rs, 400, "unsupported_capability", "log-probabilities are not available");

    std::vector<Completion> out;
    try {
      out = backend_->generate(req);
    } catch (const UsageError& e) {
      return fail(rs, 400, "invalid_request", e.what());
    } catch (const std::exception& e) {
      return fail(rs, 500, "server_error", e.what());
    }

    // Continuations omit the forced prefix; emulated prefixes are part of the reply.
    const std::size_t cut = req.output_prefix && !emulated ? req.output_prefix->size() : 0;
    json choices = json::array();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto& c = out[i];
      json ch = {{"index", i},
                 {"message", {{"role", "assistant"}, {"content", c.text.substr(std::min(cut, c.text.size()))}}},
                 {"finish_reason", c.finish_reason}};
      if (c.token_logprobs) {
        json content = json::array();
        std::size_t pos = 0;
        for (const auto& t : *c.token_logprobs) {
          const auto end = pos + t.token.size();
          if (end > cut) {
            json top = json::array();
            for (const auto& [tok, lp] : t.top) top.push_back({{"token", tok}, {"logprob", lp}});
            auto tok = pos < cut ? t.token.substr(cut - pos) : t.token;
            content.push_back({{"token", tok}, {"logprob", t.logprob}, {"top_logprobs", top}});
          }
          pos = end;
        }
        ch["logprobs"] = {{"content", content}};
      }
      choices.push_back(std::move(ch));
    }
    json resp = {{"object", "chat.completion"}, {"model", req.model_ref}, {"choices", choices}};
    rs.set_content(resp.dump(), "application/json");
  }

  BackendPtr backend_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace sgt
