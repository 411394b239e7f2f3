// sgt: command-line front end for the supplement-generation pipeline.
//
// Exit codes: 0 ok, 2 config/usage error, 3 stage failure.

#include <csignal>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>

#include "sgt/sgt.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStageFailure = 3;

struct Options {
  std::string config;
  std::string out;
  int iter = 1;
  std::string mode = "supplement";
  std::string checkpoint;
  int stop_after = -1;
  std::string scenario;
  std::string role = "generator";
  std::string manifest;
  int port = 8089;
  std::string level = "info";
};

sgt::RunConfig load_config(const Options& o) {
  auto cfg = sgt::RunConfig::load(o.config);
  if (!o.out.empty()) cfg.output = o.out;
  return cfg;
}

/// Generator for DPO iteration t: explicit checkpoint, else the state's
/// checkpoint for t-1, else (t = 1 only) the configured base generator.
std::string dpo_generator(const sgt::Pipeline& p, const Options& o) {
  if (!o.checkpoint.empty()) return o.checkpoint;
  auto s = p.state();
  if (auto ck = s.checkpoint_for(o.iter - 1)) return *ck;
  if (o.iter == 1) {
    spdlog::warn("no SFT checkpoint in state; sampling iteration 1 from the base generator");
    return s.checkpoints.at("base");
  }
  throw sgt::UsageError("no checkpoint for iteration " + std::to_string(o.iter - 1) + "; pass --checkpoint");
}

void print_files(const sgt::DatasetFiles& f) {
  std::cout << f.data.string() << "\n" << f.stats.string() << "\n";
}

int serve_mock(const Options& o) {
  auto scenario = sgt::MockScenario::load(o.scenario);
  auto role = o.role == "actor" ? sgt::MockBackend::Role::actor : sgt::MockBackend::Role::generator;
  auto backend = std::make_shared<sgt::MockBackend>(scenario, role, "mock:" + o.scenario);
  if (!o.manifest.empty()) {
    auto key = std::make_shared<sgt::AnswerKey>();
    for (const auto& m : sgt::load_manifest_file(o.manifest))
      for (const auto& t : sgt::load_benchmark(m)) (*key)[t.query] = t.gold;
    backend->bind_answer_key(key);
  }
  sgt::BackendServer server(backend);
  spdlog::info("serving mock {} on 127.0.0.1:{}", o.role, o.port);
  server.serve_forever(o.port);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("sgt"));

  Options o;
  CLI::App app{"Supplement generation training pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--log-level", o.level, "trace|debug|info|warn|error")->capture_default_str();

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", o.out, "override the output root");
    return sub;
  };

  auto* validate = with_config(app.add_subcommand("validate-config", "check a run config"));
  auto* split = with_config(app.add_subcommand("split", "assign train/val/test and write splits.json"));
  auto* sft = with_config(app.add_subcommand("sft-data", "sample, score and emit the SFT dataset"));
  sft->add_option("--checkpoint", o.checkpoint, "generator ref (default: configured generator)");
  auto* dpo = with_config(app.add_subcommand("dpo-data", "sample, score and emit a DPO dataset"));
  dpo->add_option("--iter", o.iter, "iteration t >= 1")->required()->check(CLI::PositiveNumber);
  dpo->add_option("--checkpoint", o.checkpoint, "generator ref (default: from state)");
  auto* eval = with_config(app.add_subcommand("eval", "score a checkpoint or baseline on the test split"));
  eval->add_option("--mode", o.mode, "baseline|its|prompt|supplement")->capture_default_str();
  eval->add_option("--checkpoint", o.checkpoint, "generator ref for supplement mode");
  eval->add_option("--iter", o.iter, "iteration tag for the journal")->default_val(0);
  auto* run = with_config(app.add_subcommand("run", "run or resume the whole pipeline"));
  run->add_option("--stop-after", o.stop_after, "stop once this stage rank is persisted");
  auto* report = with_config(app.add_subcommand("report", "write report files from state and journal"));
  auto* serve = app.add_subcommand("serve-mock", "serve a mock scenario over HTTP");
  serve->add_option("--scenario", o.scenario)->required()->check(CLI::ExistingFile);
  serve->add_option("--role", o.role)->check(CLI::IsMember({"generator", "actor"}))->capture_default_str();
  serve->add_option("--manifest", o.manifest, "benchmarks whose gold answers the mock actor knows");
  serve->add_option("--port", o.port)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }
  spdlog::set_level(spdlog::level::from_str(o.level));

  try {
    if (serve->parsed()) return serve_mock(o);

    auto cfg = load_config(o);
    if (validate->parsed()) {
      std::cout << "ok\n";
      return kOk;
    }
    sgt::Pipeline p(cfg);

    if (split->parsed()) {
      p.write_splits();
      for (auto s : {sgt::Split::train, sgt::Split::val, sgt::Split::test})
        std::cout << sgt::to_string(s) << "\t" << p.split(s).size() << "\n";
      return kOk;
    }
    if (sft->parsed()) {
      print_files(p.sft_data(o.checkpoint.empty() ? p.state().checkpoints.at("base") : o.checkpoint));
      return kOk;
    }
    if (dpo->parsed()) {
      print_files(p.dpo_data(o.iter, dpo_generator(p, o)));
      return kOk;
    }
    if (eval->parsed()) {
      auto mode = sgt::eval_mode_from_string(o.mode);
      std::optional<std::string> ck;
      if (!o.checkpoint.empty()) ck = o.checkpoint;
      else if (mode == sgt::EvalMode::supplement) ck = p.state().checkpoint_for(o.iter);
      std::cout << sgt::json(p.eval(mode, o.iter, ck)).dump(2) << "\n";
      return kOk;
    }
    if (run->parsed()) {
      auto s = p.run(o.stop_after >= 0 ? std::optional<int>(o.stop_after) : std::nullopt);
      std::cout << s.to_json().dump(2) << "\n";
      return s.status == "halted" ? kStageFailure : kOk;
    }
    if (report->parsed()) {
      sgt::write_report(p.journal(), p.state().to_json(), p.report_dir());
      std::cout << p.report_dir().string() << "\n";
      return kOk;
    }
  } catch (const sgt::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const sgt::UsageError& e) {
    spdlog::error("{}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    spdlog::error("stage failed: {}", e.what());
    return kStageFailure;
  }
  return kOk;
}
