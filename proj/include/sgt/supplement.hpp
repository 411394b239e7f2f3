#pragma once

// Supplement types, the generation prompts for each type, the single-object
// output format, and the actor input layout.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "sgt/common.hpp"
#include "sgt/task.hpp"

namespace sgt {

enum class Predefined { answer, background, cot, rephrase, summary, mistakes, one_shot, pairs };

inline constexpr std::array<Predefined, 8> kAllPredefined = {
    Predefined::answer,  Predefined::background, Predefined::cot,      Predefined::rephrase,
    Predefined::summary, Predefined::mistakes,   Predefined::one_shot, Predefined::pairs};

inline constexpr std::string_view kFreeStyleKey = "free_style";
inline constexpr std::string_view kFreeStyleIndicator = "supplementary_text";
inline constexpr std::string_view kCorrectAnswerKey = "correct_answer";
inline constexpr std::string_view kIncorrectAnswerKey = "incorrect_answer";

inline std::string_view type_name(Predefined p) {
  switch (p) {
    case Predefined::answer: return "answer";
    case Predefined::background: return "background";
    case Predefined::cot: return "cot";
    case Predefined::rephrase: return "rephrase";
    case Predefined::summary: return "summary";
    case Predefined::mistakes: return "mistakes";
    case Predefined::one_shot: return "one_shot";
    case Predefined::pairs: return "pairs";
  }
  return "?";
}

/// The keys a predefined type writes into its output object.
inline std::vector<std::string_view> indicator_keys(Predefined p) {
  switch (p) {
    case Predefined::answer: return {"answer"};
    case Predefined::background: return {"background_knowledge"};
    case Predefined::cot: return {"step_by_step_reasoning"};
    case Predefined::rephrase: return {"rephrasing"};
    case Predefined::summary: return {"summary"};
    case Predefined::mistakes: return {"mistakes"};
    case Predefined::one_shot: return {"one_shot_example"};
    case Predefined::pairs: return {kCorrectAnswerKey, kIncorrectAnswerKey};
  }
  return {};
}

inline std::optional<Predefined> predefined_from_name(std::string_view name) {
  for (auto p : kAllPredefined)
    if (type_name(p) == name) return p;
  return std::nullopt;
}

/// A non-composite type: one of the eight predefined types, free style, or an
/// out-of-distribution key the generator came up with.
struct AtomicType {
  enum class Kind { predefined, free_style, named };
  Kind kind = Kind::free_style;
  Predefined id = Predefined::answer;
  std::string named_key;

  std::string key() const {
    switch (kind) {
      case Kind::predefined: return std::string(type_name(id));
      case Kind::free_style: return std::string(kFreeStyleKey);
      case Kind::named: return named_key;
    }
    return {};
  }

  std::vector<std::string> indicators() const {
    switch (kind) {
      case Kind::predefined: {
        std::vector<std::string> out;
        for (auto k : indicator_keys(id)) out.emplace_back(k);
        return out;
      }
      case Kind::free_style: return {std::string(kFreeStyleIndicator)};
      case Kind::named: return {named_key};
    }
    return {};
  }

  friend bool operator==(const AtomicType& a, const AtomicType& b) {
    if (a.kind != b.kind) return false;
    if (a.kind == Kind::predefined) return a.id == b.id;
    if (a.kind == Kind::named) return a.named_key == b.named_key;
    return true;
  }
};

/// Key names that can never be used as an out-of-distribution type key: the
/// indicator keys, the predefined type names, and the free-style names.
inline bool is_reserved_key(std::string_view key) {
  if (key == kFreeStyleKey || key == kFreeStyleIndicator) return true;
  for (auto p : kAllPredefined) {
    if (type_name(p) == key) return true;
    for (auto k : indicator_keys(p))
      if (k == key) return true;
  }
  return false;
}

/// Either one atomic type or the concatenation of two distinct atomic types.
/// Nesting is impossible by construction.
class SupplementType {
 public:
  SupplementType() : members_{AtomicType{}} {}

  static SupplementType predefined(Predefined p) {
    AtomicType a;
    a.kind = AtomicType::Kind::predefined;
    a.id = p;
    return SupplementType(std::vector<AtomicType>{a});
  }

  static SupplementType free_style() { return SupplementType(std::vector<AtomicType>{AtomicType{}}); }

  static SupplementType named(std::string_view key) {
    std::string k = snake_case(key);
    if (k.empty()) throw UsageError("empty supplement type key");
    if (is_reserved_key(k)) throw UsageError("'" + k + "' collides with a predefined supplement key");
    AtomicType a;
    a.kind = AtomicType::Kind::named;
    a.named_key = std::move(k);
    return SupplementType(std::vector<AtomicType>{a});
  }

  static SupplementType concat(const SupplementType& left, const SupplementType& right) {
    if (left.is_concat() || right.is_concat()) throw UsageError("concat members cannot themselves be concat");
    if (left.members_[0] == right.members_[0]) throw UsageError("concat members must differ: " + left.key());
    return SupplementType(std::vector<AtomicType>{left.members_[0], right.members_[0]});
  }

  /// Inverse of key(). Predefined names, "free_style", "a+b" composites, and
  /// anything else as a named type.
  static SupplementType from_key(std::string_view key) {
    if (auto plus = key.find('+'); plus != std::string_view::npos)
      return concat(from_key(key.substr(0, plus)), from_key(key.substr(plus + 1)));
    if (key == kFreeStyleKey) return free_style();
    if (auto p = predefined_from_name(key)) return predefined(*p);
    return named(key);
  }

  bool is_concat() const { return members_.size() == 2; }
  const std::vector<AtomicType>& members() const { return members_; }
  SupplementType member(std::size_t i) const { return SupplementType(std::vector<AtomicType>{members_.at(i)}); }

  bool is_predefined(Predefined p) const {
    return !is_concat() && members_[0].kind == AtomicType::Kind::predefined && members_[0].id == p;
  }
  bool is_free_style() const { return !is_concat() && members_[0].kind == AtomicType::Kind::free_style; }
  bool is_named() const { return !is_concat() && members_[0].kind == AtomicType::Kind::named; }

  /// Stable identity used by datasets and reports. Composite keys list their
  /// members in ascending order so a+b and b+a compare equal.
  std::string key() const {
    if (!is_concat()) return members_[0].key();
    auto a = members_[0].key();
    auto b = members_[1].key();
    if (b < a) std::swap(a, b);
    return a + "+" + b;
  }

  /// Indicator keys in emission order.
  std::vector<std::string> indicators() const {
    std::vector<std::string> out;
    for (const auto& m : members_)
      for (auto& k : m.indicators()) out.push_back(std::move(k));
    return out;
  }

  friend bool operator==(const SupplementType& a, const SupplementType& b) { return a.members_ == b.members_; }

 private:
  explicit SupplementType(std::vector<AtomicType> members) : members_(std::move(members)) {}
  std::vector<AtomicType> members_;
};

using SupplementContent = std::vector<std::pair<std::string, std::string>>;

struct Supplement {
  SupplementType stype;
  SupplementContent content;  // indicator key -> text, in emission order
  std::string raw;            // exact text as emitted
};

namespace detail {

inline std::string quote(std::string_view s) { return json(std::string(s)).dump(); }

}  // namespace detail

/// Renders the single-object form: {"k": "v", "k2": "v2"}.
inline std::string serialize_content(const SupplementContent& content) {
  std::string out = "{";
  bool first = true;
  for (const auto& [k, v] : content) {
    if (!first) out += ", ";
    first = false;
    out += detail::quote(k);
    out += ": ";
    out += detail::quote(v);
  }
  out += "}";
  return out;
}

/// Builds a supplement from per-indicator values, validating that the keys are
/// exactly the type's indicator keys.
inline Supplement make_supplement(const SupplementType& stype, const SupplementContent& content) {
  auto expected = stype.indicators();
  if (content.size() != expected.size()) throw UsageError("content does not match type " + stype.key());
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (content[i].first != expected[i]) throw UsageError("unexpected key '" + content[i].first + "' for type " + stype.key());
  return Supplement{stype, content, serialize_content(content)};
}

/// Convenience for single-indicator types.
inline Supplement make_supplement(const SupplementType& stype, std::string_view text) {
  auto keys = stype.indicators();
  if (keys.size() != 1) throw UsageError("type " + stype.key() + " needs more than one value");
  return make_supplement(stype, SupplementContent{{keys[0], std::string(text)}});
}

// ---------------------------------------------------------------------------
// Prompts

struct PromptTemplate {
  SupplementType stype;
  std::string instruction;
  std::string output_prefix;
};

/// Forced opening of the output object, up to and including the first
/// indicator key and the opening quote of its value.
inline std::string output_prefix(const SupplementType& stype) {
  if (stype.is_concat()) throw UsageError("concat supplements are assembled, not prompted");
  return "{" + detail::quote(stype.indicators().front()) + ": \"";
}

/// Per-type generation instructions, keyed by type name. Defaults reproduce
/// the original prompts; a template file may override any subset.
class PromptTemplates {
 public:
  static PromptTemplates defaults() {
    PromptTemplates t;
    t.by_type_ = {
        {"free_style", "Based on the task above, please provide supplementary text that can assist in completing the task."},
        {"answer", ""},
        {"background", "Based on the task above, please provide background knowledge that does not exist in the task."},
        {"cot", "Based on the task above, please provide a step by step reasoning that can assist in completing the task."},
        {"rephrase", "Based on the task above, please rephrase the task to make it clearer and more understandable."},
        {"summary", "Based on the task above, please first provide a summary of context (excluding the specific question)."},
        {"mistakes", "Based on the task above, please provide common mistakes in completing the task."},
        {"one_shot", "Based on the task above, please provide one different question+answer example"},
        {"pairs", "Following the answer format above, please provide a correct answer and an incorrect answer to this task that illustrates common mistakes."},
    };
    return t;
  }

  /// JSON object {"<type name>": "<instruction>", ...} layered over defaults.
  static PromptTemplates load(const fs::path& path) {
    auto t = defaults();
    auto j = read_json_file(path);
    if (!j.is_object()) throw ConfigError(path.string() + ": template file must be an object");
    for (auto& [k, v] : j.items()) {
      if (!v.is_string()) throw ConfigError(path.string() + ": template '" + k + "' is not a string");
      if (k != kFreeStyleKey && !predefined_from_name(k))
        throw ConfigError(path.string() + ": unknown supplement type '" + k + "'");
      t.by_type_[k] = v.get<std::string>();
    }
    return t;
  }

  /// Out-of-distribution types have no dedicated instruction and reuse the
  /// free-style one; their identity comes from the forced output prefix.
  const std::string& instruction(const SupplementType& stype) const {
    if (stype.is_concat()) throw UsageError("concat supplements are assembled, not prompted");
    const auto& m = stype.members()[0];
    if (m.kind == AtomicType::Kind::predefined) return by_type_.at(std::string(type_name(m.id)));
    return by_type_.at(std::string(kFreeStyleKey));
  }

  PromptTemplate for_type(const SupplementType& stype) const {
    return PromptTemplate{stype, instruction(stype), output_prefix(stype)};
  }

 private:
  std::map<std::string, std::string> by_type_;
};

/// Generator prompt for one (task, type): the query, then the instruction on
/// its own paragraph. An empty instruction (answer) leaves the query as is.
inline std::string render_prompt(const TaskInstance& task, const SupplementType& stype,
                                 const PromptTemplates& templates = PromptTemplates::defaults()) {
  const auto& instr = templates.instruction(stype);
  if (instr.empty()) return task.query;
  return task.query + "\n\n" + instr;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

/// Returns [begin, end) of every balanced top-level {...} span, honouring JSON
/// string quoting.
inline std::vector<std::pair<std::size_t, std::size_t>> object_spans(std::string_view s) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] != '{') {
      ++i;
      continue;
    }
    int depth = 0;
    bool in_str = false;
    bool esc = false;
    std::size_t j = i;
    for (; j < s.size(); ++j) {
      char c = s[j];
      if (in_str) {
        if (esc) esc = false;
        else if (c == '\\') esc = true;
        else if (c == '"') in_str = false;
        continue;
      }
      if (c == '"') in_str = true;
      else if (c == '{') ++depth;
      else if (c == '}' && --depth == 0) break;
    }
    if (j >= s.size()) break;  // unbalanced tail
    spans.emplace_back(i, j + 1);
    i = j + 1;
  }
  return spans;
}

struct KeyClass {
  enum class Role { atomic, pairs_correct, pairs_incorrect };
  Role role = Role::atomic;
  AtomicType atom;
  std::string canonical;  // canonical indicator key
};

inline KeyClass classify_key(std::string_view raw_key) {
  const std::string k = snake_case(raw_key);
  KeyClass kc;
  if (k.empty()) throw ParseFailure("empty key", std::string(raw_key));
  if (k == kCorrectAnswerKey || k == kIncorrectAnswerKey) {
    kc.role = k == kCorrectAnswerKey ? KeyClass::Role::pairs_correct : KeyClass::Role::pairs_incorrect;
    kc.atom = SupplementType::predefined(Predefined::pairs).members()[0];
    kc.canonical = k;
    return kc;
  }
  if (k == kFreeStyleIndicator || k == kFreeStyleKey) {
    kc.atom = AtomicType{};
    kc.canonical = std::string(kFreeStyleIndicator);
    return kc;
  }
  for (auto p : kAllPredefined) {
    if (p == Predefined::pairs) continue;
    auto ind = indicator_keys(p).front();
    if (k == ind || k == type_name(p)) {
      kc.atom = SupplementType::predefined(p).members()[0];
      kc.canonical = std::string(ind);
      return kc;
    }
  }
  kc.atom = SupplementType::named(k).members()[0];
  kc.canonical = k;
  return kc;
}

}  // namespace detail

/// Maps any indicator key (or type name) to the type key it stands for.
/// "background_knowledge" -> "background", "correct_answer" -> "pairs",
/// unknown keys -> their snake-case form.
inline std::string type_key_for_indicator(std::string_view indicator) {
  return detail::classify_key(indicator).atom.key();
}

/// Parses the first top-level object in generator output. Type is decided by
/// the key set; keys are normalised to lowercase snake-case.
inline Supplement parse_supplement(std::string_view raw) {
  const auto spans = detail::object_spans(raw);
  std::optional<ordered_json> obj;
  std::size_t used = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    auto text = raw.substr(spans[i].first, spans[i].second - spans[i].first);
    std::set<std::string> top_keys;
    bool repeated = false;
    auto parsed = ordered_json::parse(
        text.begin(), text.end(),
        [&](int depth, ordered_json::parse_event_t ev, ordered_json& v) {
          if (ev == ordered_json::parse_event_t::key && depth == 1 && !top_keys.insert(v.get<std::string>()).second)
            repeated = true;
          return true;
        },
        false);
    if (!parsed.is_discarded() && parsed.is_object()) {
      if (repeated) throw ParseFailure("repeated key in supplement object", std::string(raw));
      obj = std::move(parsed);
      used = i;
      break;
    }
  }
  if (!obj) throw ParseFailure("no parseable object in generator output", std::string(raw));
  if (spans.size() > used + 1)
    spdlog::debug("supplement output has {} trailing object(s); using the first", spans.size() - used - 1);

  struct Group {
    AtomicType atom;
    std::vector<std::pair<std::string, std::string>> values;
  };
  std::vector<Group> groups;
  std::optional<std::string> correct, incorrect;
  std::optional<std::size_t> pairs_group;

  for (auto it = obj->begin(); it != obj->end(); ++it) {
    if (!it.value().is_string()) throw ParseFailure("value of '" + it.key() + "' is not a string", std::string(raw));
    std::string value = it.value().get<std::string>();
    if (trim_view(value).empty()) throw ParseFailure("empty value for '" + it.key() + "'", std::string(raw));

    detail::KeyClass kc;
    try {
      kc = detail::classify_key(it.key());
    } catch (const UsageError& e) {
      throw ParseFailure(e.what(), std::string(raw));
    }
    if (kc.role != detail::KeyClass::Role::atomic) {
      auto& slot = kc.role == detail::KeyClass::Role::pairs_correct ? correct : incorrect;
      if (slot) throw ParseFailure("duplicate key '" + kc.canonical + "'", std::string(raw));
      slot = std::move(value);
      if (!pairs_group) {
        pairs_group = groups.size();
        groups.push_back(Group{kc.atom, {}});
      }
      continue;
    }
    for (const auto& g : groups)
      if (g.atom == kc.atom) throw ParseFailure("type '" + kc.atom.key() + "' appears twice", std::string(raw));
    groups.push_back(Group{kc.atom, {{kc.canonical, std::move(value)}}});
  }

  if (pairs_group) {
    if (!correct || !incorrect)
      throw ParseFailure("pairs supplement needs both correct_answer and incorrect_answer", std::string(raw));
    groups[*pairs_group].values = {{std::string(kCorrectAnswerKey), *correct},
                                   {std::string(kIncorrectAnswerKey), *incorrect}};
  }
  if (groups.empty()) throw ParseFailure("empty object", std::string(raw));
  if (groups.size() > 2) throw ParseFailure("more than two supplement types in one object", std::string(raw));

  auto single = [](const AtomicType& a) {
    switch (a.kind) {
      case AtomicType::Kind::predefined: return SupplementType::predefined(a.id);
      case AtomicType::Kind::free_style: return SupplementType::free_style();
      case AtomicType::Kind::named: return SupplementType::named(a.named_key);
    }
    return SupplementType{};
  };

  Supplement s;
  s.stype = groups.size() == 1 ? single(groups[0].atom)
                               : SupplementType::concat(single(groups[0].atom), single(groups[1].atom));
  for (auto& g : groups)
    for (auto& kv : g.values) s.content.push_back(std::move(kv));
  s.raw = std::string(raw);
  return s;
}

/// Merges two supplements of different, non-composite types into one object.
inline Supplement make_concat(const Supplement& a, const Supplement& b) {
  auto stype = SupplementType::concat(a.stype, b.stype);
  SupplementContent content = a.content;
  content.insert(content.end(), b.content.begin(), b.content.end());
  return Supplement{std::move(stype), content, serialize_content(content)};
}

// ---------------------------------------------------------------------------
// Actor input

inline constexpr std::string_view kDefaultDelimiter = "[Supplement]";

/// query, or query + blank line + delimiter line + supplement text.
inline std::string format_actor_input(std::string_view query, const Supplement* s,
                                      std::string_view delimiter = kDefaultDelimiter) {
  std::string out(query);
  if (!s) return out;
  out += "\n\n";
  out += delimiter;
  out += "\n";
  out += s->raw;
  return out;
}

inline std::string format_actor_input(const TaskInstance& task, const std::optional<Supplement>& s,
                                      std::string_view delimiter = kDefaultDelimiter) {
  return format_actor_input(task.query, s ? &*s : nullptr, delimiter);
}

/// Text after the last delimiter line, if the input carries a supplement.
inline std::optional<std::string_view> supplement_section(std::string_view input,
                                                          std::string_view delimiter = kDefaultDelimiter) {
  std::string marker = "\n\n" + std::string(delimiter) + "\n";
  auto pos = input.rfind(marker);
  if (pos == std::string_view::npos) return std::nullopt;
  return input.substr(pos + marker.size());
}

}  // namespace sgt
