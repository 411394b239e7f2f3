#pragma once

// Model endpoint abstraction shared by generator and actor calls, plus the
// decorators that give every endpoint the same retry, concurrency and
// caching behaviour.

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <spdlog/spdlog.h>

#include "sgt/common.hpp"
#include "sgt/supplement.hpp"
#include "sgt/task.hpp"

namespace sgt {

struct Message {
  std::string role;
  std::string content;
};

struct GenRequest {
  std::string model_ref;
  std::vector<Message> messages;
  int n = 1;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::string> output_prefix;
  bool want_logprobs = false;
  int top_logprobs = 20;
  int max_tokens = 512;

  void validate() const {
    if (n < 1) throw UsageError("GenRequest.n must be >= 1");
    if (temperature < 0) throw UsageError("GenRequest.temperature must be >= 0");
    if (messages.empty()) throw UsageError("GenRequest has no messages");
  }

  const std::string& last_user_text() const {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it)
      if (it->role == "user") return it->content;
    throw UsageError("GenRequest has no user message");
  }
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  std::vector<std::pair<std::string, double>> top;  // alternatives at this position
};

struct Completion {
  std::string text;  // includes the forced prefix when one was supplied
  std::optional<std::vector<TokenLogprob>> token_logprobs;
  std::string finish_reason = "stop";

  friend bool operator==(const Completion& a, const Completion& b) {
    if (a.text != b.text || a.finish_reason != b.finish_reason) return false;
    if (a.token_logprobs.has_value() != b.token_logprobs.has_value()) return false;
    if (!a.token_logprobs) return true;
    const auto& x = *a.token_logprobs;
    const auto& y = *b.token_logprobs;
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].token != y[i].token || x[i].logprob != y[i].logprob || x[i].top != y[i].top) return false;
    return true;
  }
};

struct BackendHealth {
  std::string endpoint;
  int consecutive_failures = 0;
  std::chrono::milliseconds last_latency{0};
};

// --- JSON ------------------------------------------------------------------

inline json to_json(const GenRequest& r) {
  json msgs = json::array();
  for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  json j = {{"model", r.model_ref}, {"messages", msgs},       {"n", r.n},
            {"temperature", r.temperature}, {"seed", r.seed}, {"logprobs", r.want_logprobs},
            {"top_logprobs", r.top_logprobs}, {"max_tokens", r.max_tokens}};
  if (r.output_prefix) j["output_prefix"] = *r.output_prefix;
  return j;
}

inline json to_json(const Completion& c) {
  json j = {{"text", c.text}, {"finish_reason", c.finish_reason}};
  if (c.token_logprobs) {
    json toks = json::array();
    for (const auto& t : *c.token_logprobs) {
      json top = json::array();
      for (const auto& [tok, lp] : t.top) top.push_back({{"token", tok}, {"logprob", lp}});
      toks.push_back({{"token", t.token}, {"logprob", t.logprob}, {"top_logprobs", top}});
    }
    j["logprobs"] = toks;
  }
  return j;
}

inline Completion completion_from_json(const json& j) {
  Completion c;
  c.text = j.at("text").get<std::string>();
  c.finish_reason = j.value("finish_reason", "stop");
  if (j.contains("logprobs") && !j["logprobs"].is_null()) {
    std::vector<TokenLogprob> toks;
    for (const auto& t : j["logprobs"]) {
      TokenLogprob tl{t.at("token").get<std::string>(), t.at("logprob").get<double>(), {}};
      for (const auto& a : t.value("top_logprobs", json::array()))
        tl.top.emplace_back(a.at("token").get<std::string>(), a.at("logprob").get<double>());
      toks.push_back(std::move(tl));
    }
    c.token_logprobs = std::move(toks);
  }
  return c;
}

/// Gold answers by query, for mock actors that need to know when to be right.
using AnswerKey = std::map<std::string, std::string>;

// --- Interface -----------------------------------------------------------

class Backend {
 public:
  virtual ~Backend() = default;

  /// Returns exactly req.n completions.
  virtual std::vector<Completion> generate(const GenRequest& req) = 0;

  virtual bool supports_logprobs() const { return false; }
  virtual std::string endpoint_id() const = 0;

  /// Only meaningful for the mock actor; real endpoints ignore it.
  virtual void bind_answer_key(std::shared_ptr<const AnswerKey>) {}

  virtual std::uint64_t call_count() const { return 0; }
};

using BackendPtr = std::shared_ptr<Backend>;

// --- Retries ---------------------------------------------------------------

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{500};
  double jitter = 0.25;  // +/- fraction of each delay
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

/// Runs fn, retrying TransportError with exponential backoff. ProtocolError
/// and everything else propagate at once.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, BackendHealth& health, std::uint64_t jitter_seed, Fn&& fn)
    -> decltype(fn()) {
  Rng rng(jitter_seed);
  for (int attempt = 1;; ++attempt) {
    auto t0 = std::chrono::steady_clock::now();
    try {
      auto result = fn();
      health.last_latency =
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
      health.consecutive_failures = 0;
      return result;
    } catch (const TransportError& e) {
      ++health.consecutive_failures;
      if (attempt >= policy.attempts)
        throw TransportError(health.endpoint + ": giving up after " + std::to_string(attempt) + " attempts: " + e.what());
      double scale = std::ldexp(1.0, attempt - 1) * (1.0 + policy.jitter * (2.0 * rng.unit() - 1.0));
      auto delay = std::chrono::milliseconds(static_cast<long long>(policy.base_delay.count() * scale));
      spdlog::warn("{}: transport error ({}), retry {} in {} ms", health.endpoint, e.what(), attempt, delay.count());
      policy.sleep(delay);
    } catch (...) {
      ++health.consecutive_failures;
      throw;
    }
  }
}

// --- Concurrency limit -------------------------------------------------------

/// Caps in-flight requests to the wrapped endpoint. max_observed() is the
/// test hook for the bound.
class ThrottledBackend final : public Backend {
 public:
  ThrottledBackend(BackendPtr inner, int max_in_flight)
      : inner_(std::move(inner)), slots_(std::max(1, max_in_flight)), limit_(std::max(1, max_in_flight)) {}

  std::vector<Completion> generate(const GenRequest& req) override {
    slots_.acquire();
    int now = ++in_flight_;
    int seen = max_seen_.load();
    while (now > seen && !max_seen_.compare_exchange_weak(seen, now)) {
    }
    struct Release {
      ThrottledBackend* self;
      ~Release() {
        --self->in_flight_;
        self->slots_.release();
      }
    } release{this};
    return inner_->generate(req);
  }

  bool supports_logprobs() const override { return inner_->supports_logprobs(); }
  std::string endpoint_id() const override { return inner_->endpoint_id(); }
  void bind_answer_key(std::shared_ptr<const AnswerKey> k) override { inner_->bind_answer_key(std::move(k)); }
  std::uint64_t call_count() const override { return inner_->call_count(); }

  int limit() const { return limit_; }
  int max_observed() const { return max_seen_.load(); }

 private:
  BackendPtr inner_;
  std::counting_semaphore<1024> slots_;
  int limit_;
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_seen_{0};
};

// --- Response cache ----------------------------------------------------------

/// Append-only request/response journal keyed by a hash of the canonical
/// request. A re-run with identical requests never reaches the endpoint.
class ResponseCache {
 public:
  explicit ResponseCache(fs::path dir) : file_(std::move(dir) / "responses.jsonl") {
    if (fs::exists(file_)) {
      for (const auto& row : read_jsonl(file_)) {
        std::vector<Completion> cs;
        for (const auto& c : row.at("response")) cs.push_back(completion_from_json(c));
        entries_[row.at("key").get<std::string>()] = std::move(cs);
      }
    }
  }

  static std::string key_for(const std::string& endpoint, const GenRequest& req) {
    return hex64(fnv1a64(to_json(req).dump(), fnv1a64(endpoint)));
  }

  std::optional<std::vector<Completion>> find(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& key, const GenRequest& req, const std::vector<Completion>& out) {
    std::lock_guard lock(mu_);
    if (entries_.count(key)) return;
    entries_[key] = out;
    json resp = json::array();
    for (const auto& c : out) resp.push_back(to_json(c));
    json row = {{"key", key}, {"request", to_json(req)}, {"response", resp}};
    fs::create_directories(file_.parent_path());
    std::ofstream f(file_, std::ios::app | std::ios::binary);
    f << row.dump() << '\n';
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  fs::path file_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::vector<Completion>> entries_;
};

class CachingBackend final : public Backend {
 public:
  CachingBackend(BackendPtr inner, std::shared_ptr<ResponseCache> cache)
      : inner_(std::move(inner)), cache_(std::move(cache)) {}

  std::vector<Completion> generate(const GenRequest& req) override {
    auto key = ResponseCache::key_for(inner_->endpoint_id(), req);
    if (auto hit = cache_->find(key)) return *hit;
    auto out = inner_->generate(req);
    cache_->put(key, req, out);
    return out;
  }

  bool supports_logprobs() const override { return inner_->supports_logprobs(); }
  std::string endpoint_id() const override { return inner_->endpoint_id(); }
  void bind_answer_key(std::shared_ptr<const AnswerKey> k) override { inner_->bind_answer_key(std::move(k)); }
  std::uint64_t call_count() const override { return inner_->call_count(); }

 private:
  BackendPtr inner_;
  std::shared_ptr<ResponseCache> cache_;
};

// --- Type probability estimate ------------------------------------------------

namespace detail {

/// Reads the indicator key that starts a completion made with prefix '{"'.
inline std::string key_from_continuation(std::string_view text, std::size_t prefix_len) {
  auto rest = text.substr(std::min(prefix_len, text.size()));
  auto q = rest.find('"');
  return std::string(rest.substr(0, q));
}

}  // namespace detail

/// Probability of each supplement type for a task, read from the alternative
/// token log-probabilities at the indicator position of a '{"'-prefixed
/// free-style generation. Keys split across tokens are scored by their first
/// token and completed greedily. Result is keyed by type key and sums to 1.
inline std::map<std::string, double> type_distribution(Backend& generator, const TaskInstance& task,
                                                       const PromptTemplates& templates, std::uint64_t seed) {
  if (!generator.supports_logprobs())
    throw UnsupportedCapability(generator.endpoint_id() + " does not return token log-probabilities");

  const std::string prefix = "{\"";
  GenRequest req;
  req.model_ref = generator.endpoint_id();
  req.messages = {{"user", render_prompt(task, SupplementType::free_style(), templates)}};
  req.temperature = 0.0;
  req.seed = seed;
  req.output_prefix = prefix;
  req.want_logprobs = true;
  req.max_tokens = 16;
  auto out = generator.generate(req);
  if (out.empty() || !out[0].token_logprobs)
    throw UnsupportedCapability(generator.endpoint_id() + " returned no log-probabilities");

  // Locate the first token that starts at or after the prefix.
  const auto& toks = *out[0].token_logprobs;
  std::size_t offset = 0;
  const TokenLogprob* at = nullptr;
  for (const auto& t : toks) {
    if (offset >= prefix.size()) {
      at = &t;
      break;
    }
    offset += t.token.size();
  }
  if (!at) throw ProtocolError("no token at the indicator position");

  std::vector<std::pair<std::string, double>> alts = at->top;
  if (alts.empty()) alts.emplace_back(at->token, at->logprob);

  std::map<std::string, double> mass;
  for (const auto& [tok, lp] : alts) {
    std::string indicator;
    if (auto q = tok.find('"'); q != std::string::npos) {
      indicator = tok.substr(0, q);
    } else {
      GenRequest greedy = req;
      greedy.output_prefix = prefix + tok;
      greedy.want_logprobs = false;
      auto c = generator.generate(greedy);
      indicator = detail::key_from_continuation(c.at(0).text, prefix.size());
    }
    std::string key;
    try {
      key = type_key_for_indicator(indicator);
    } catch (const Error&) {
      continue;  // not a usable key ("pairs" alone, empty, ...)
    }
    mass[key] += std::exp(lp);
  }
  double total = 0;
  for (const auto& [k, v] : mass) total += v;
  if (total <= 0) throw ProtocolError("indicator alternatives carry no probability mass");
  for (auto& [k, v] : mass) v /= total;
  return mass;
}

}  // namespace sgt
