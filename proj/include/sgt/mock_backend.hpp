#pragma once

// Deterministic stand-in for both the supplement generator and the actor.
// Everything it returns is a pure function of (scenario, request).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sgt/backend.hpp"
#include "sgt/supplement.hpp"

namespace sgt {

struct TriggerRule {
  enum class Mode { gold_token, substring, type, always, never };
  Mode mode = Mode::gold_token;
  std::vector<std::string> values;  // substrings or type keys
};

inline std::string_view to_string(TriggerRule::Mode m) {
  switch (m) {
    case TriggerRule::Mode::gold_token: return "gold_token";
    case TriggerRule::Mode::substring: return "substring";
    case TriggerRule::Mode::type: return "type";
    case TriggerRule::Mode::always: return "always";
    case TriggerRule::Mode::never: return "never";
  }
  return "?";
}

inline TriggerRule::Mode trigger_mode_from_string(std::string_view s) {
  if (s == "gold_token") return TriggerRule::Mode::gold_token;
  if (s == "substring") return TriggerRule::Mode::substring;
  if (s == "type") return TriggerRule::Mode::type;
  if (s == "always") return TriggerRule::Mode::always;
  if (s == "never") return TriggerRule::Mode::never;
  throw ConfigError("unknown trigger mode '" + std::string(s) + "'");
}

/// Scenario file contents. type_distribution is the generator's preference
/// over type keys; exploration mixes in a uniform floor over the same keys.
struct MockScenario {
  std::uint64_t seed = 0;
  std::map<std::string, double> type_distribution;
  double exploration = 0.0;
  bool supports_logprobs = true;
  bool split_key_tokens = false;
  TriggerRule trigger;
  std::string delimiter = std::string(kDefaultDelimiter);

  /// Sampling distribution after the exploration floor, normalised.
  std::map<std::string, double> effective_distribution() const {
    std::map<std::string, double> out;
    double total = 0;
    for (const auto& [k, v] : type_distribution) total += std::max(0.0, v);
    if (type_distribution.empty() || total <= 0) return out;
    const double uniform = 1.0 / static_cast<double>(type_distribution.size());
    for (const auto& [k, v] : type_distribution)
      out[k] = (1.0 - exploration) * std::max(0.0, v) / total + exploration * uniform;
    return out;
  }

  json to_json() const {
    json dist = json::object();
    for (const auto& [k, v] : type_distribution) dist[k] = v;
    return json{{"seed", seed},
                {"type_distribution", dist},
                {"exploration", exploration},
                {"supports_logprobs", supports_logprobs},
                {"split_key_tokens", split_key_tokens},
                {"trigger", {{"mode", to_string(trigger.mode)}, {"values", trigger.values}}},
                {"delimiter", delimiter}};
  }

  static MockScenario from_json(const json& j) {
    MockScenario s;
    s.seed = j.value("seed", std::uint64_t{0});
    const auto dist = j.value("type_distribution", json::object());
    for (auto& [k, v] : dist.items()) {
      // validates the key
      auto key = SupplementType::from_key(k).key();
      s.type_distribution[key] = v.get<double>();
    }
    s.exploration = j.value("exploration", 0.0);
    if (s.exploration < 0 || s.exploration > 1) throw ConfigError("mock exploration must be in [0,1]");
    s.supports_logprobs = j.value("supports_logprobs", true);
    s.split_key_tokens = j.value("split_key_tokens", false);
    if (j.contains("trigger")) {
      const auto& t = j["trigger"];
      s.trigger.mode = trigger_mode_from_string(t.value("mode", "gold_token"));
      s.trigger.values = t.value("values", std::vector<std::string>{});
    }
    s.delimiter = j.value("delimiter", std::string(kDefaultDelimiter));
    return s;
  }

  static MockScenario load(const fs::path& path) { return from_json(read_json_file(path)); }
  void save(const fs::path& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }
};

/// Wrong answers are derived from the input so they are stable and never
/// accidentally equal to the gold answer.
inline std::string mock_wrong_answer(std::string_view input, std::string_view gold) {
  std::string w = "wrong-" + hex64(fnv1a64(input)).substr(0, 8);
  if (w == gold) w += "x";
  return w;
}

inline bool trigger_fires(const TriggerRule& rule, std::string_view input, std::string_view gold,
                          std::string_view delimiter) {
  using M = TriggerRule::Mode;
  if (rule.mode == M::always) return true;
  if (rule.mode == M::never) return false;
  auto section = supplement_section(input, delimiter);
  if (!section) return false;
  switch (rule.mode) {
    case M::gold_token: {
      auto lower = [](std::string_view s) {
        std::string o(s);
        for (auto& c : o) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return o;
      };
      const auto hay = lower(*section);
      for (const auto& tok : split_whitespace(gold))
        if (hay.find(lower(tok)) != std::string::npos) return true;
      return false;
    }
    case M::substring:
      for (const auto& v : rule.values)
        if (section->find(v) != std::string_view::npos) return true;
      return false;
    case M::type: {
      try {
        auto key = parse_supplement(*section).stype.key();
        return std::find(rule.values.begin(), rule.values.end(), key) != rule.values.end();
      } catch (const ParseFailure&) {
        return false;
      }
    }
    default: return false;
  }
}

/// Mock actor: answers with gold exactly when the supplement section of the
/// input fires the trigger, otherwise with a hash-derived wrong answer.
inline Completion mock_actor_judge(std::string_view input, std::string_view gold, const TriggerRule& rule,
                                   std::string_view delimiter = kDefaultDelimiter) {
  Completion c;
  c.text = trigger_fires(rule, input, gold, delimiter) ? std::string(gold) : mock_wrong_answer(input, gold);
  return c;
}

class MockBackend final : public Backend {
 public:
  enum class Role { generator, actor };

  MockBackend(MockScenario scenario, Role role, std::string id = "mock")
      : scenario_(std::move(scenario)), role_(role), id_(std::move(id)) {}

  std::vector<Completion> generate(const GenRequest& req) override {
    req.validate();
    ++calls_;
    return role_ == Role::actor ? act(req) : sample(req);
  }

  bool supports_logprobs() const override { return role_ == Role::generator && scenario_.supports_logprobs; }
  std::string endpoint_id() const override { return id_; }
  std::uint64_t call_count() const override { return calls_.load(); }

  void bind_answer_key(std::shared_ptr<const AnswerKey> key) override { answers_ = std::move(key); }

  const MockScenario& scenario() const { return scenario_; }
  Role role() const { return role_; }

 private:
  std::vector<Completion> act(const GenRequest& req) const {
    const auto& input = req.last_user_text();
    std::string gold;
    if (answers_) {
      std::size_t best = 0;
      for (const auto& [q, g] : *answers_) {
        if (q.size() >= best && starts_with(input, q)) {
          best = q.size();
          gold = g;
        }
      }
    }
    Completion c;
    if (gold.empty()) c.text = mock_wrong_answer(input, "");
    else c = mock_actor_judge(input, gold, scenario_.trigger, scenario_.delimiter);
    return std::vector<Completion>(static_cast<std::size_t>(req.n), c);
  }

  std::string choose_key(const std::map<std::string, double>& dist, double temperature, Rng& rng) const {
    if (dist.empty()) return std::string(kFreeStyleKey);
    if (temperature <= 0) {
      auto best = dist.begin();
      for (auto it = dist.begin(); it != dist.end(); ++it)
        if (it->second > best->second) best = it;
      return best->first;
    }
    std::vector<std::pair<std::string, double>> w;
    double total = 0;
    for (const auto& [k, p] : dist) {
      double x = p > 0 ? std::pow(p, 1.0 / temperature) : 0.0;
      w.emplace_back(k, x);
      total += x;
    }
    double r = rng.unit() * total;
    for (const auto& [k, x] : w) {
      if (r < x) return k;
      r -= x;
    }
    for (auto it = w.rbegin(); it != w.rend(); ++it)
      if (it->second > 0) return it->first;
    return w.back().first;
  }

  static SupplementContent content_for(const SupplementType& t, std::string_view tag, const std::string& variant) {
    SupplementContent content;
    for (const auto& ind : t.indicators()) {
      std::string text;
      if (ind == kCorrectAnswerKey) text = "correct answer for " + std::string(tag);
      else if (ind == kIncorrectAnswerKey) text = "incorrect answer for " + std::string(tag);
      else text = ind + " note for " + std::string(tag);
      content.emplace_back(ind, text + variant);
    }
    return content;
  }

  std::string sample_one(const std::string& prompt, const std::optional<std::string>& prefix, double temperature,
                         Rng& rng) const {
    const auto dist = scenario_.effective_distribution();
    const std::string tag = hex64(fnv1a64(prompt)).substr(0, 8);
    const std::string variant = temperature > 0 ? " #" + std::to_string(rng.below(1000000)) : "";
    const std::string p = prefix.value_or("");

    SupplementType type;
    std::string first_value_head;
    if (starts_with(p, "{\"")) {
      std::string rest = p.substr(2);
      auto q = rest.find('"');
      if (q == std::string::npos) {
        std::map<std::string, double> cands;
        for (const auto& [k, v] : dist)
          if (starts_with(SupplementType::from_key(k).indicators().front(), rest)) cands[k] = v;
        if (cands.empty() && rest.empty()) cands = dist;
        type = cands.empty() ? SupplementType::from_key(type_key_for_indicator(rest))
                             : SupplementType::from_key(choose_key(cands, temperature, rng));
      } else {
        std::string indicator = rest.substr(0, q);
        type = SupplementType::from_key(type_key_for_indicator(indicator));
        const std::string head = "{\"" + indicator + "\": \"";
        if (starts_with(p, head)) first_value_head = p.substr(head.size());
      }
    } else {
      type = SupplementType::from_key(choose_key(dist, temperature, rng));
    }

    auto content = content_for(type, tag, variant);
    if (!first_value_head.empty()) content.front().second = first_value_head + content.front().second;
    std::string text = serialize_content(content);
    if (!starts_with(text, p)) text = p + text;
    return text;
  }

  /// Token view of a completion. The forced prefix is one zero-cost token;
  /// the indicator key gets the alternatives of the type distribution.
  std::vector<TokenLogprob> tokenize(const std::string& text, const std::string& prefix) const {
    std::vector<TokenLogprob> toks;
    std::size_t pos = 0;
    if (!prefix.empty()) {
      toks.push_back({prefix, 0.0, {}});
      pos = prefix.size();
    }
    const std::size_t key_pos = 2;
    if (pos <= key_pos && starts_with(text, "{\"")) {
      if (pos < key_pos) {
        toks.push_back({text.substr(pos, key_pos - pos), 0.0, {}});
        pos = key_pos;
      }
      auto close = text.find('"', key_pos);
      std::string key = text.substr(key_pos, close - key_pos);
      std::string head = scenario_.split_key_tokens && key.size() > 3 ? key.substr(0, 3) : key;

      std::map<std::string, double> groups;
      for (const auto& [k, v] : scenario_.effective_distribution()) {
        auto ind = SupplementType::from_key(k).indicators().front();
        groups[scenario_.split_key_tokens && ind.size() > 3 ? ind.substr(0, 3) : ind] += v;
      }
      std::vector<std::pair<std::string, double>> top;
      for (const auto& [tok, p] : groups)
        if (p > 0) top.emplace_back(tok, std::log(p));
      std::stable_sort(top.begin(), top.end(), [](auto& a, auto& b) { return a.second > b.second; });
      double lp = groups.count(head) && groups[head] > 0 ? std::log(groups[head]) : -30.0;
      toks.push_back({head, lp, top});
      pos += head.size();
    }
    while (pos < text.size()) {
      auto next = text.find(' ', pos + 1);
      if (next == std::string::npos) next = text.size();
      toks.push_back({text.substr(pos, next - pos), 0.0, {}});
      pos = next;
    }
    return toks;
  }

  std::vector<Completion> sample(const GenRequest& req) const {
    const auto& prompt = req.last_user_text();
    const std::string prefix = req.output_prefix.value_or("");
    const auto base = derive_seed(scenario_.seed, {hex64(req.seed), prompt, prefix});
    std::vector<Completion> out;
    for (int i = 0; i < req.n; ++i) {
      Rng rng(req.temperature > 0 ? derive_seed(base, {std::to_string(i)}) : base);
      Completion c;
      c.text = sample_one(prompt, req.output_prefix, req.temperature, rng);
      if (req.want_logprobs && scenario_.supports_logprobs) c.token_logprobs = tokenize(c.text, prefix);
      out.push_back(std::move(c));
    }
    return out;
  }

  MockScenario scenario_;
  Role role_;
  std::string id_;
  std::shared_ptr<const AnswerKey> answers_;
  std::atomic<std::uint64_t> calls_{0};
};

}  // namespace sgt
