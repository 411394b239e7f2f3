#pragma once

// Checkpoint production. The orchestrator only ever sees checkpoint refs
// (endpoint strings); the trainer behind them is either an external
// `sgt-train`-style command or, for mock runs, the reference type trainer.

#include <cmath>
#include <map>
#include <memory>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "sgt/common.hpp"
#include "sgt/mock_backend.hpp"
#include "sgt/reward.hpp"
#include "sgt/subprocess.hpp"

namespace sgt {

struct TrainHyper {
  double alpha = 1.0;
  double beta = 0.1;
  json extra = json::object();  // forwarded untouched
};

class Trainer {
 public:
  virtual ~Trainer() = default;
  virtual std::string train_sft(const fs::path& data, const std::string& base, const std::string& out_id) = 0;
  virtual std::string train_dpo(const fs::path& data, const std::string& base, const std::string& reference,
                                const std::string& out_id) = 0;
};

inline constexpr std::string_view kMockRefPrefix = "mock:";

inline bool is_mock_ref(std::string_view ref) { return starts_with(ref, kMockRefPrefix); }

inline fs::path mock_ref_path(std::string_view ref) {
  if (!is_mock_ref(ref)) throw ConfigError("not a mock checkpoint ref: " + std::string(ref));
  return fs::path(std::string(ref.substr(kMockRefPrefix.size())));
}

/// Multiplicative-weights update: w(type) *= exp(eta * (chosen - rejected)),
/// then renormalise. Computed in log space. Types absent from the
/// distribution stay absent.
inline std::map<std::string, double> multiplicative_update(const std::map<std::string, double>& dist,
                                                           const std::map<std::string, long>& net, double eta) {
  std::map<std::string, double> logw;
  double hi = -INFINITY;
  for (const auto& [k, w] : dist) {
    if (w <= 0) continue;
    auto it = net.find(k);
    double lw = std::log(w) + eta * static_cast<double>(it == net.end() ? 0 : it->second);
    logw[k] = lw;
    hi = std::max(hi, lw);
  }
  std::map<std::string, double> out;
  double total = 0;
  for (const auto& [k, lw] : logw) total += std::exp(lw - hi);
  for (const auto& [k, w] : dist) out[k] = logw.count(k) ? std::exp(logw[k] - hi) / total : 0.0;
  return out;
}

/// chosen_count - rejected_count per type over a DPO dataset file.
inline std::map<std::string, long> net_preference_counts(const fs::path& dpo_data) {
  std::map<std::string, long> net;
  for (const auto& row : read_jsonl(dpo_data)) {
    net[row.at("chosen_type").get<std::string>()] += 1;
    net[row.at("rejected_type").get<std::string>()] -= 1;
  }
  return net;
}

/// Mock-mode stand-in for the trainer. SFT returns the base scenario as is;
/// DPO applies multiplicative_update with eta to the scenario's type
/// distribution. Checkpoints are scenario files under `dir`.
class ReferenceTypeTrainer final : public Trainer {
 public:
  explicit ReferenceTypeTrainer(fs::path dir, double eta = 0.5) : dir_(std::move(dir)), eta_(eta) {}

  std::string train_sft(const fs::path& data, const std::string& base, const std::string& out_id) override {
    if (!fs::exists(data)) throw IoError("missing SFT dataset " + data.string());
    return save(MockScenario::load(mock_ref_path(base)), out_id);
  }

  std::string train_dpo(const fs::path& data, const std::string& base, const std::string& /*reference*/,
                        const std::string& out_id) override {
    auto scenario = MockScenario::load(mock_ref_path(base));
    auto net = net_preference_counts(data);
    if (!net.empty()) scenario.type_distribution = multiplicative_update(scenario.type_distribution, net, eta_);
    return save(scenario, out_id);
  }

 private:
  std::string save(const MockScenario& s, const std::string& out_id) const {
    auto path = dir_ / (out_id + ".json");
    s.save(path);
    return std::string(kMockRefPrefix) + path.string();
  }

  fs::path dir_;
  double eta_;
};

/// External trainer driven through shell templates. Placeholders: {data},
/// {base}, {ref}, {out}, {alpha}, {beta}. The last non-empty stdout line is
/// the checkpoint ref. Exit 127 (command not found) means no trainer.
class CommandTrainer final : public Trainer {
 public:
  CommandTrainer(std::string sft_template, std::string dpo_template, fs::path out_dir, TrainHyper hyper = {},
                 std::chrono::seconds timeout = std::chrono::hours(24))
      : sft_(std::move(sft_template)),
        dpo_(std::move(dpo_template)),
        dir_(std::move(out_dir)),
        hyper_(std::move(hyper)),
        timeout_(timeout) {}

  std::string train_sft(const fs::path& data, const std::string& base, const std::string& out_id) override {
    return run(sft_, data, base, "", out_id);
  }

  std::string train_dpo(const fs::path& data, const std::string& base, const std::string& reference,
                        const std::string& out_id) override {
    return run(dpo_, data, base, reference, out_id);
  }

 private:
  std::string run(const std::string& tmpl, const fs::path& data, const std::string& base, const std::string& ref,
                  const std::string& out_id) const {
    if (tmpl.empty()) throw TrainerUnavailable("no trainer command configured");
    auto num = [](double v) {
      std::ostringstream o;
      o << v;
      return o.str();
    };
    std::string cmd = tmpl;
    cmd = replace_all(cmd, "{data}", shell_quote(data.string()));
    cmd = replace_all(cmd, "{base}", shell_quote(base));
    cmd = replace_all(cmd, "{ref}", shell_quote(ref));
    cmd = replace_all(cmd, "{out}", shell_quote((dir_ / out_id).string()));
    cmd = replace_all(cmd, "{alpha}", num(hyper_.alpha));
    cmd = replace_all(cmd, "{beta}", num(hyper_.beta));
    spdlog::info("trainer: {}", cmd);
    auto r = run_shell(cmd, "", timeout_);
    if (r.timed_out) throw Error("trainer timed out: " + cmd);
    if (r.exit_code == 127) throw TrainerUnavailable("trainer command not found: " + cmd);
    if (r.exit_code != 0)
      throw Error("trainer exited with " + std::to_string(r.exit_code) + ": " + trim(r.err));
    std::string last;
    for (auto& line : detail::split_lines(r.out))
      if (!trim_view(line).empty()) last = trim(line);
    if (last.empty()) throw Error("trainer printed no checkpoint ref");
    return last;
  }

  std::string sft_, dpo_;
  fs::path dir_;
  TrainHyper hyper_;
  std::chrono::seconds timeout_;
};

/// Trainer that is never available; the pipeline stops after emitting data.
class NoTrainer final : public Trainer {
 public:
  std::string train_sft(const fs::path&, const std::string&, const std::string&) override {
    throw TrainerUnavailable("no trainer configured");
  }
  std::string train_dpo(const fs::path&, const std::string&, const std::string&, const std::string&) override {
    throw TrainerUnavailable("no trainer configured");
  }
};

}  // namespace sgt
