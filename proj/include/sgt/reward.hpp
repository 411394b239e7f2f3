#pragma once

// Binary task-outcome reward and the positive/negative split of a task's
// scored supplements.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "sgt/common.hpp"
#include "sgt/subprocess.hpp"
#include "sgt/task.hpp"

namespace sgt {

// ---------------------------------------------------------------------------
// Scored samples

enum class SampleSource { predefined, ood, concat, free, gold, none };

inline std::string_view to_string(SampleSource s) {
  switch (s) {
    case SampleSource::predefined: return "predefined";
    case SampleSource::ood: return "ood";
    case SampleSource::concat: return "concat";
    case SampleSource::free: return "free";
    case SampleSource::gold: return "gold";
    case SampleSource::none: return "none";
  }
  return "?";
}

inline SampleSource sample_source_from_string(std::string_view s) {
  if (s == "predefined") return SampleSource::predefined;
  if (s == "ood") return SampleSource::ood;
  if (s == "concat") return SampleSource::concat;
  if (s == "free") return SampleSource::free;
  if (s == "gold") return SampleSource::gold;
  if (s == "none") return SampleSource::none;
  throw IoError("unknown sample source '" + std::string(s) + "'");
}

/// One actor call and its outcome, the unit of the sample journal.
struct ScoredSample {
  std::string task_id;
  std::string benchmark;
  Split split = Split::unassigned;
  std::string stage;       // "sft", "dpo_<t>", "eval_<method>"
  SampleSource source = SampleSource::none;
  std::string stype_key;   // empty when no supplement was used
  std::string raw;         // supplement text as emitted
  std::string prompt;      // generator prompt that produced raw
  std::string actor_output;
  int reward = 0;
  bool flagged = false;    // evaluator failed; reward forced to 0
  std::string error;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  int sample_index = 0;

  /// Identity within a run; also the stable sort key inside datasets.
  std::string sample_hash() const {
    auto h = fnv1a64(task_id);
    for (std::string_view part : {std::string_view(stage), to_string(source), std::string_view(stype_key),
                                  std::string_view(raw)})
      h = fnv1a64(part, fnv1a64("\x1f", h));
    h = fnv1a64(std::to_string(seed) + "/" + std::to_string(sample_index), h);
    return hex64(h);
  }

  json to_json() const {
    if (reward != 0 && reward != 1) throw UsageError("reward must be 0 or 1");
    return json{{"task_id", task_id},
                {"benchmark", benchmark},
                {"split", to_string(split)},
                {"stage", stage},
                {"source", to_string(source)},
                {"stype_key", stype_key},
                {"raw", raw},
                {"prompt", prompt},
                {"actor_output", actor_output},
                {"reward", reward},
                {"flagged", flagged},
                {"error", error},
                {"temperature", temperature},
                {"seed", seed},
                {"sample_index", sample_index},
                {"sample_hash", sample_hash()}};
  }

  static ScoredSample from_json(const json& j) {
    ScoredSample s;
    s.task_id = j.at("task_id").get<std::string>();
    s.benchmark = j.value("benchmark", "");
    s.split = split_from_string(j.value("split", "unassigned"));
    s.stage = j.at("stage").get<std::string>();
    s.source = sample_source_from_string(j.value("source", "none"));
    s.stype_key = j.value("stype_key", "");
    s.raw = j.value("raw", "");
    s.prompt = j.value("prompt", "");
    s.actor_output = j.value("actor_output", "");
    s.reward = j.at("reward").get<int>();
    if (s.reward != 0 && s.reward != 1) throw IoError("journal reward outside {0,1} for " + s.task_id);
    s.flagged = j.value("flagged", false);
    s.error = j.value("error", "");
    s.temperature = j.value("temperature", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    s.sample_index = j.value("sample_index", 0);
    return s;
  }
};

struct Partition {
  std::vector<ScoredSample> positive;
  std::vector<ScoredSample> negative;
};

/// S+ = reward 1, S- = reward 0, input order kept on both sides.
inline Partition partition(std::string_view task_id, const std::vector<ScoredSample>& samples) {
  Partition p;
  for (const auto& s : samples) {
    if (s.task_id != task_id) throw UsageError("sample for " + s.task_id + " passed to partition of " + std::string(task_id));
    (s.reward == 1 ? p.positive : p.negative).push_back(s);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Normalisation and extraction

namespace detail {

inline std::string nfkc_casefold(std::string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* norm = icu::Normalizer2::getNFKCCasefoldInstance(status);
  if (U_FAILURE(status)) throw EvaluatorError("ICU normaliser unavailable");
  auto in = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  auto out = norm->normalize(in, status);
  if (U_FAILURE(status)) throw EvaluatorError("unicode normalisation failed");
  std::string utf8;
  out.toUTF8String(utf8);
  return utf8;
}

}  // namespace detail

/// NFKC + case fold, trim, collapse whitespace, drop trailing punctuation.
inline std::string normalize_answer(std::string_view s) {
  std::string folded = detail::nfkc_casefold(s);
  std::string out;
  for (const auto& tok : split_whitespace(folded)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  while (!out.empty() && std::string_view(".,;:!?'\"").find(out.back()) != std::string_view::npos) out.pop_back();
  return trim(out);
}

inline constexpr const char* kAnswerLetterPattern =
    R"(answer\s*(?:is\s*)?[:\-]?\s*\(?\s*([A-Ea-e])\s*\)?(?![A-Za-z0-9]))";
inline constexpr const char* kStandaloneLetterPattern = R"((?:^|[^A-Za-z0-9])\(?([A-E])\)?(?![A-Za-z0-9]))";

/// Final option letter: the last "answer: X" style mention, else the last
/// standalone capital A-E. A custom pattern (one capture group, last match
/// wins) replaces both.
inline std::optional<char> extract_choice(std::string_view text, const std::optional<std::string>& custom = std::nullopt) {
  auto last_match = [&](const std::regex& re) -> std::optional<char> {
    std::optional<char> found;
    std::string s(text);
    for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
      auto g = (*it)[1].str();
      if (!g.empty()) found = static_cast<char>(std::toupper(static_cast<unsigned char>(g[0])));
    }
    return found;
  };
  if (custom) return last_match(std::regex(*custom, std::regex::ECMAScript | std::regex::icase));
  static const std::regex answer_re(kAnswerLetterPattern, std::regex::ECMAScript | std::regex::icase);
  static const std::regex standalone_re(kStandaloneLetterPattern, std::regex::ECMAScript);
  if (auto c = last_match(answer_re)) return c;
  return last_match(standalone_re);
}

// ---------------------------------------------------------------------------
// Executors

/// Runs a program (SQL, code) and returns its result rows.
class Executor {
 public:
  virtual ~Executor() = default;
  virtual std::vector<std::string> run(std::string_view program) = 0;
};

namespace detail {

class TempFile {
 public:
  explicit TempFile(std::string_view content) {
    std::string tmpl = (fs::temp_directory_path() / "sgt-XXXXXX").string();
    int fd = mkstemp(tmpl.data());
    if (fd < 0) throw EvaluatorError("cannot create payload file");
    path_ = tmpl;
    std::size_t off = 0;
    while (off < content.size()) {
      auto n = ::write(fd, content.data() + off, content.size() - off);
      if (n <= 0) break;
      off += static_cast<std::size_t>(n);
    }
    ::close(fd);
  }
  TempFile(const TempFile&) = delete;
  TempFile& operator=(const TempFile&) = delete;
  ~TempFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline std::vector<std::string> split_lines(std::string_view s) {
  std::vector<std::string> rows;
  std::size_t start = 0;
  while (start < s.size()) {
    auto nl = s.find('\n', start);
    if (nl == std::string_view::npos) nl = s.size();
    auto line = s.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    rows.emplace_back(line);
    start = nl + 1;
  }
  while (!rows.empty() && rows.back().empty()) rows.pop_back();
  return rows;
}

}  // namespace detail

/// Shell command with a {program} placeholder replaced by a payload file path.
/// Exit 0 means the rows on stdout are the result; anything else is an error.
class CommandExecutor final : public Executor {
 public:
  CommandExecutor(std::string command_template, std::chrono::milliseconds timeout)
      : template_(std::move(command_template)), timeout_(timeout) {}

  std::vector<std::string> run(std::string_view program) override {
    detail::TempFile payload(program);
    auto cmd = replace_all(template_, "{program}", shell_quote(payload.path().string()));
    auto res = run_shell(cmd, program, timeout_);
    if (res.timed_out) throw EvaluatorError("executor timed out: " + template_);
    if (res.exit_code != 0)
      throw EvaluatorError("executor exited with " + std::to_string(res.exit_code) + ": " + trim(res.err));
    return detail::split_lines(res.out);
  }

 private:
  std::string template_;
  std::chrono::milliseconds timeout_;
};

// ---------------------------------------------------------------------------
// Evaluator

struct EvaluatorConfig {
  RewardKind kind = RewardKind::exact_match;
  std::optional<std::string> choice_pattern;   // multiple_choice override
  std::optional<std::string> answer_extract;   // applied to y before scoring
  std::string command;                         // executor / external command template
  std::chrono::milliseconds timeout{30000};
  bool reentrant = false;

  static EvaluatorConfig from_json(const json& j, RewardKind default_kind) {
    EvaluatorConfig c;
    c.kind = j.contains("kind") ? reward_kind_from_string(j["kind"].get<std::string>()) : default_kind;
    if (j.contains("choice_pattern")) c.choice_pattern = j["choice_pattern"].get<std::string>();
    if (j.contains("answer_extract")) c.answer_extract = j["answer_extract"].get<std::string>();
    c.command = j.value("command", "");
    c.timeout = std::chrono::milliseconds(j.value("timeout_ms", 30000));
    c.reentrant = j.value("reentrant", false);
    return c;
  }
};

struct RewardOutcome {
  int reward = 0;
  bool flagged = false;
  std::string error;
};

class Evaluator {
 public:
  explicit Evaluator(EvaluatorConfig cfg, std::shared_ptr<Executor> executor = nullptr)
      : cfg_(std::move(cfg)), executor_(std::move(executor)) {
    if (cfg_.answer_extract) extract_re_ = std::regex(*cfg_.answer_extract, std::regex::ECMAScript);
    if (cfg_.kind == RewardKind::execution_equivalence && !executor_) {
      if (cfg_.command.empty()) throw ConfigError("execution_equivalence needs an executor command");
      executor_ = std::make_shared<CommandExecutor>(cfg_.command, cfg_.timeout);
    }
    if (cfg_.kind == RewardKind::external_command && cfg_.command.empty())
      throw ConfigError("external_command needs a command template");
  }

  const EvaluatorConfig& config() const { return cfg_; }

  /// 1 when y solves the task. Throws EvaluatorError when the outcome cannot
  /// be determined.
  int evaluate(std::string_view y, const TaskInstance& task) const {
    std::string answer = extract(y);
    switch (cfg_.kind) {
      case RewardKind::exact_match:
        return normalize_answer(answer) == normalize_answer(task.gold) ? 1 : 0;
      case RewardKind::multiple_choice: {
        auto want = extract_choice(task.gold, cfg_.choice_pattern);
        if (!want) want = extract_choice(task.gold);
        if (!want) throw EvaluatorError("gold answer of " + task.id + " has no option letter");
        auto got = extract_choice(answer, cfg_.choice_pattern);
        return got && *got == *want ? 1 : 0;
      }
      case RewardKind::execution_equivalence: {
        auto guard = lock();
        auto a = executor_->run(answer);
        auto b = executor_->run(task.gold);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        return a == b ? 1 : 0;
      }
      case RewardKind::external_command: {
        auto guard = lock();
        detail::TempFile cand(answer), gold(task.gold);
        auto cmd = replace_all(cfg_.command, "{candidate}", shell_quote(cand.path().string()));
        cmd = replace_all(cmd, "{gold}", shell_quote(gold.path().string()));
        auto stdin_payload = json{{"candidate", answer}, {"gold", task.gold}}.dump();
        auto res = run_shell(cmd, stdin_payload, cfg_.timeout);
        if (res.timed_out) throw EvaluatorError("external evaluator timed out");
        if (res.exit_code == 0) return 1;
        if (res.exit_code == 1) return 0;
        throw EvaluatorError("external evaluator exited with " + std::to_string(res.exit_code));
      }
    }
    throw EvaluatorError("unknown reward kind");
  }

  /// Never throws on evaluator failure: the sample scores 0 and is flagged.
  RewardOutcome score(std::string_view y, const TaskInstance& task) const {
    try {
      return RewardOutcome{evaluate(y, task), false, {}};
    } catch (const EvaluatorError& e) {
      return RewardOutcome{0, true, e.what()};
    } catch (const IoError& e) {
      return RewardOutcome{0, true, e.what()};
    }
  }

 private:
  std::string extract(std::string_view y) const {
    if (!extract_re_) return std::string(y);
    std::string s(y);
    std::smatch m;
    if (std::regex_search(s, m, *extract_re_)) return m.size() > 1 ? m[1].str() : m[0].str();
    return s;
  }

  std::unique_lock<std::mutex> lock() const {
    if (cfg_.reentrant) return {};
    return std::unique_lock<std::mutex>(mu_);
  }

  EvaluatorConfig cfg_;
  std::shared_ptr<Executor> executor_;
  std::optional<std::regex> extract_re_;
  mutable std::mutex mu_;
};

}  // namespace sgt
