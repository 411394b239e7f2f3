#include <gtest/gtest.h>

#include <httplib.h>

#include <cmath>
#include <thread>

#include "sgt/sgt.hpp"
#include "support.hpp"

using namespace sgt;
using sgt::testing::make_task;

namespace {

MockScenario three_way() {
  MockScenario s;
  s.seed = 3;
  s.type_distribution = {{"summary", 0.4}, {"hint", 0.3}, {"background", 0.3}};
  return s;
}

GenRequest request(const std::string& prompt, int n, double temperature, std::uint64_t seed = 1,
                   std::optional<std::string> prefix = std::nullopt) {
  GenRequest r;
  r.model_ref = "m";
  r.messages = {{"user", prompt}};
  r.n = n;
  r.temperature = temperature;
  r.seed = seed;
  r.output_prefix = std::move(prefix);
  return r;
}

enum class Transport { direct, http_continue, http_emulate };

std::string transport_name(const ::testing::TestParamInfo<Transport>& info) {
  switch (info.param) {
    case Transport::direct: return "Direct";
    case Transport::http_continue: return "HttpContinue";
    case Transport::http_emulate: return "HttpEmulate";
  }
  return "?";
}

void PrintTo(Transport t, std::ostream* os) { *os << transport_name(::testing::TestParamInfo<Transport>(t, 0)); }

/// The same mock reached either directly or through the wire protocol.
class Conformance : public ::testing::TestWithParam<Transport> {
 protected:
  BackendPtr connect(const MockScenario& scenario) {
    auto mock = std::make_shared<MockBackend>(scenario, MockBackend::Role::generator, "mock");
    if (GetParam() == Transport::direct) return mock;
    servers_.push_back(std::make_unique<BackendServer>(mock));
    servers_.back()->start();
    HttpEndpointConfig cfg;
    cfg.base_url = servers_.back()->url();
    cfg.model = "mock";
    cfg.prefix_mode = GetParam() == Transport::http_continue ? PrefixMode::continuation : PrefixMode::emulate;
    cfg.logprobs = true;
    cfg.timeout = std::chrono::seconds(10);
    return std::make_shared<HttpBackend>(cfg);
  }

  std::vector<std::unique_ptr<BackendServer>> servers_;
};

}  // namespace

TEST_P(Conformance, GreedyCompletionsAreIdentical) {
  auto b = connect(three_way());
  auto out = b->generate(request("Explain joins.", 3, 0.0));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].text, out[1].text);
  EXPECT_EQ(out[1].text, out[2].text);
}

TEST_P(Conformance, PrefixInvariant) {
  auto b = connect(three_way());
  for (std::string prefix : {R"({"summary": ")", R"({")", R"({"hint": ")", R"({"correct_answer": ")"}) {
    for (double temp : {0.0, 1.0}) {
      auto out = b->generate(request("Q?", 4, temp, 9, prefix));
      ASSERT_EQ(out.size(), 4u);
      for (const auto& c : out) {
        EXPECT_TRUE(starts_with(c.text, prefix)) << c.text;
        EXPECT_NO_THROW(parse_supplement(c.text)) << c.text;
      }
    }
  }
}

TEST_P(Conformance, ForcedPrefixFixesTheType) {
  auto b = connect(three_way());
  auto out = b->generate(request("Q?", 5, 1.0, 4, output_prefix(SupplementType::predefined(Predefined::mistakes))));
  for (const auto& c : out) EXPECT_TRUE(parse_supplement(c.text).stype.is_predefined(Predefined::mistakes));
}

TEST_P(Conformance, ReplayIsDeterministic) {
  auto b = connect(three_way());
  auto r = request("Replay me", 4, 1.0, 1234);
  r.want_logprobs = true;
  EXPECT_EQ(b->generate(r), b->generate(r));
  auto other = r;
  other.seed = 1235;
  EXPECT_NE(b->generate(r)[0].text + b->generate(r)[1].text,
            b->generate(other)[0].text + b->generate(other)[1].text);
}

TEST_P(Conformance, LogprobTokensConcatenateToText) {
  auto b = connect(three_way());
  auto r = request("Tokens", 2, 1.0, 8, std::string(R"({")"));
  r.want_logprobs = true;
  for (const auto& c : b->generate(r)) {
    ASSERT_TRUE(c.token_logprobs.has_value());
    std::string joined;
    for (const auto& t : *c.token_logprobs) joined += t.token;
    EXPECT_EQ(joined, c.text);
  }
}

TEST_P(Conformance, TypeDistributionEchoesScenario) {
  auto b = connect(three_way());
  auto task = make_task("t#0", "Which singers?", "x");
  auto d = type_distribution(*b, task, PromptTemplates::defaults(), 5);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_NEAR(d["summary"], 0.4, 1e-9);
  EXPECT_NEAR(d["hint"], 0.3, 1e-9);
  EXPECT_NEAR(d["background"], 0.3, 1e-9);
  double sum = 0;
  for (const auto& [k, v] : d) {
    EXPECT_GE(v, 0.0);
    sum += v;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST_P(Conformance, TypeDistributionTopMatchesGreedy) {
  Rng rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    MockScenario s;
    s.seed = trial;
    s.split_key_tokens = trial % 2 == 1;
    for (std::string k : {"summary", "hint", "cot", "background", "key_formula"})
      s.type_distribution[k] = 0.05 + rng.unit();
    auto b = connect(s);
    auto task = make_task("t#" + std::to_string(trial), "Query " + std::to_string(trial), "x");
    auto d = type_distribution(*b, task, PromptTemplates::defaults(), 1);
    double sum = 0;
    for (const auto& [k, v] : d) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    auto top = std::max_element(d.begin(), d.end(), [](auto& x, auto& y) { return x.second < y.second; })->first;
    auto greedy = b->generate(
        request(render_prompt(task, SupplementType::free_style()), 1, 0.0, 1, std::string(R"({")")));
    EXPECT_EQ(parse_supplement(greedy[0].text).stype.key(), top);
  }
}

TEST_P(Conformance, NoLogprobsIsUnsupported) {
  auto s = three_way();
  s.supports_logprobs = false;
  auto b = connect(s);
  auto task = make_task("t#0", "q", "x");
  EXPECT_THROW(type_distribution(*b, task, PromptTemplates::defaults(), 1), UnsupportedCapability);
}

INSTANTIATE_TEST_SUITE_P(Backends, Conformance,
                         ::testing::Values(Transport::direct, Transport::http_continue, Transport::http_emulate),
                         transport_name);

TEST(MockBackend, TypeDistributionSumsToOneForRandomScenarios) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    MockScenario s;
    s.seed = trial;
    s.exploration = rng.unit() * 0.5;
    auto all = sgt::testing::uniform_types({"hint", "worked_example"});
    for (auto& [k, v] : all)
      if (rng.below(3) != 0) s.type_distribution[k] = rng.unit();
    if (s.type_distribution.empty()) s.type_distribution["summary"] = 1;
    MockBackend b(s, MockBackend::Role::generator);
    auto d = type_distribution(b, make_task("t", "q" + std::to_string(trial), "g"), PromptTemplates::defaults(), 1);
    double sum = 0;
    for (const auto& [k, v] : d) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(MockActor, GoldInSupplementIsAnswered) {
  TriggerRule rule;
  auto s = make_supplement(SupplementType::predefined(Predefined::answer), "it is 42");
  EXPECT_EQ(mock_actor_judge(format_actor_input("6*7?", &s), "42", rule).text, "42");
}

TEST(MockActor, NoSupplementIsWrong) {
  TriggerRule rule;
  auto c = mock_actor_judge("6*7? 42", "42", rule);
  EXPECT_NE(c.text, "42");
  EXPECT_EQ(c.text, mock_actor_judge("6*7? 42", "42", rule).text);
}

TEST(MockActor, FlippingTheTriggerFlipsSuccess) {
  TriggerRule rule;
  const std::string filler = "abcdefghij";
  for (std::size_t at = 0; at <= filler.size(); ++at) {
    std::string text = filler.substr(0, at) + "42" + filler.substr(at);
    auto s = make_supplement(SupplementType::predefined(Predefined::summary), text);
    EXPECT_EQ(mock_actor_judge(format_actor_input("q", &s), "42", rule).text, "42");
    for (std::size_t k = 0; k < 2; ++k) {
      std::string broken = text;
      broken[at + k] = 'z';
      auto b = make_supplement(SupplementType::predefined(Predefined::summary), broken);
      EXPECT_NE(mock_actor_judge(format_actor_input("q", &b), "42", rule).text, "42") << broken;
    }
  }
}

TEST(MockActor, TypeTrigger) {
  TriggerRule rule;
  rule.mode = TriggerRule::Mode::type;
  rule.values = {"summary"};
  auto yes = make_supplement(SupplementType::predefined(Predefined::summary), "nothing useful");
  auto no = make_supplement(SupplementType::predefined(Predefined::cot), "gold is 42");
  EXPECT_EQ(mock_actor_judge(format_actor_input("q", &yes), "42", rule).text, "42");
  EXPECT_NE(mock_actor_judge(format_actor_input("q", &no), "42", rule).text, "42");
}

TEST(MockActor, BoundAnswerKey) {
  MockScenario sc;
  sc.trigger.mode = TriggerRule::Mode::always;
  MockBackend actor(sc, MockBackend::Role::actor);
  auto key = std::make_shared<AnswerKey>(AnswerKey{{"Capital of France?", "Paris"}});
  actor.bind_answer_key(key);
  EXPECT_EQ(actor.generate(request("Capital of France?", 1, 0.0))[0].text, "Paris");
  EXPECT_NE(actor.generate(request("Unknown question", 1, 0.0))[0].text, "Paris");
}

namespace {

class SlowBackend final : public Backend {
 public:
  std::vector<Completion> generate(const GenRequest& req) override {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    ++calls_;
    return std::vector<Completion>(static_cast<std::size_t>(req.n), Completion{"ok", std::nullopt, "stop"});
  }
  std::string endpoint_id() const override { return "slow"; }
  std::uint64_t call_count() const override { return calls_.load(); }

 private:
  std::atomic<std::uint64_t> calls_{0};
};

}  // namespace

TEST(ThrottledBackend, NeverExceedsLimit) {
  auto inner = std::make_shared<SlowBackend>();
  ThrottledBackend t(inner, 3);
  std::vector<std::jthread> pool;
  for (int i = 0; i < 12; ++i)
    pool.emplace_back([&] {
      for (int j = 0; j < 5; ++j) t.generate(request("x", 1, 0.0));
    });
  pool.clear();
  EXPECT_EQ(inner->call_count(), 60u);
  EXPECT_LE(t.max_observed(), 3);
  EXPECT_GE(t.max_observed(), 1);
}

TEST(Retries, BacksOffThenSucceeds) {
  RetryPolicy p;
  std::vector<long long> slept;
  p.sleep = [&](std::chrono::milliseconds d) { slept.push_back(d.count()); };
  BackendHealth h;
  int calls = 0;
  auto v = with_retries(p, h, 1, [&] {
    if (++calls < 3) throw TransportError("down");
    return 7;
  });
  EXPECT_EQ(v, 7);
  EXPECT_EQ(calls, 3);
  ASSERT_EQ(slept.size(), 2u);
  EXPECT_GE(slept[0], 375);
  EXPECT_LE(slept[0], 625);
  EXPECT_GE(slept[1], 750);
  EXPECT_LE(slept[1], 1250);
  EXPECT_EQ(h.consecutive_failures, 0);
}

TEST(Retries, GivesUpAfterCap) {
  RetryPolicy p;
  p.sleep = [](std::chrono::milliseconds) {};
  BackendHealth h;
  int calls = 0;
  EXPECT_THROW(with_retries(p, h, 1, [&]() -> int { ++calls; throw TransportError("down"); }), TransportError);
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(h.consecutive_failures, 3);
}

TEST(Retries, ProtocolErrorsAreNotRetried) {
  RetryPolicy p;
  p.sleep = [](std::chrono::milliseconds) {};
  BackendHealth h;
  int calls = 0;
  EXPECT_THROW(with_retries(p, h, 1, [&]() -> int { ++calls; throw ProtocolError("bad"); }), ProtocolError);
  EXPECT_EQ(calls, 1);
}

TEST(HttpBackend, RetriesServerErrorsAndReportsProtocolErrors) {
  httplib::Server srv;
  std::atomic<int> hits{0};
  std::atomic<int> fail_first{2};
  std::atomic<bool> two_choices{false};
  srv.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& rs) {
    ++hits;
    if (two_choices) {
      rs.set_content(R"({"choices":[{"message":{"content":"a"}},{"message":{"content":"b"}}]})", "application/json");
      return;
    }
    if (fail_first-- > 0) {
      rs.status = 503;
      rs.set_content("{}", "application/json");
      return;
    }
    rs.set_content(R"({"choices":[{"message":{"role":"assistant","content":"hi"},"finish_reason":"stop"}]})",
                   "application/json");
  });
  int port = srv.bind_to_any_port("127.0.0.1");
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  HttpEndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  cfg.retry.sleep = [](std::chrono::milliseconds) {};
  HttpBackend b(cfg);
  auto out = b.generate(request("x", 1, 0.0));
  EXPECT_EQ(out.at(0).text, "hi");
  EXPECT_EQ(hits.load(), 3);

  // two choices for n = 1 is malformed
  two_choices = true;
  EXPECT_THROW(b.generate(request("x", 1, 0.0)), ProtocolError);

  srv.stop();
  th.join();

  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  HttpBackend gone(cfg);
  EXPECT_THROW(gone.generate(request("x", 1, 0.0)), TransportError);
}

TEST(HttpBackend, WireRequestShapes) {
  auto r = request("Q", 2, 0.5, 3, std::string(R"({"summary": ")"));
  auto cont = wire_request(r, "m", PrefixMode::continuation);
  ASSERT_EQ(cont["messages"].size(), 2u);
  EXPECT_EQ(cont["messages"][1]["role"], "assistant");
  EXPECT_EQ(cont["messages"][1]["content"], R"({"summary": ")");
  EXPECT_TRUE(cont["continue_final_message"].get<bool>());
  auto emu = wire_request(r, "m", PrefixMode::emulate);
  ASSERT_EQ(emu["messages"].size(), 1u);
  EXPECT_EQ(emu["messages"][0]["content"], "Q\n\nBegin your response with exactly: {\"summary\": \"");
  EXPECT_FALSE(emu.contains("continue_final_message"));
}

TEST(HttpBackend, MissingApiKeyIsConfigError) {
  HttpEndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.api_key_env = "SGT_TEST_SURELY_UNSET_KEY";
  EXPECT_THROW(HttpBackend{cfg}, ConfigError);
}

TEST(CachingBackend, SecondRequestNeverReachesEndpoint) {
  sgt::testing::TempDir dir;
  auto mock = std::make_shared<MockBackend>(three_way(), MockBackend::Role::generator, "g");
  auto cache = std::make_shared<ResponseCache>(dir.path());
  CachingBackend b(mock, cache);
  auto r = request("cache me", 2, 1.0, 5);
  auto first = b.generate(r);
  auto second = b.generate(r);
  EXPECT_EQ(first, second);
  EXPECT_EQ(mock->call_count(), 1u);

  auto reloaded = std::make_shared<ResponseCache>(dir.path());
  EXPECT_EQ(reloaded->size(), 1u);
  CachingBackend c(mock, reloaded);
  EXPECT_EQ(c.generate(r), first);
  EXPECT_EQ(mock->call_count(), 1u);
}

TEST(MockScenario, JsonRoundTrip) {
  auto s = three_way();
  s.trigger.mode = TriggerRule::Mode::substring;
  s.trigger.values = {"abc"};
  auto back = MockScenario::from_json(s.to_json());
  EXPECT_EQ(back.to_json(), s.to_json());
  EXPECT_THROW(MockScenario::from_json(json{{"trigger", {{"mode", "sometimes"}}}}), ConfigError);
}
