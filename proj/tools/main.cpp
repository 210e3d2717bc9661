// condpoison: condition-triggered poisoning pipeline CLI.
//
// Subcommands mirror the pipeline stages; each reads its predecessor's
// artifact from the run directory and writes its own:
//   collect -> sample -> generate -> match -> assemble -> evaluate ->
//   defend -> report        (project is a side export at any point after
//   collect)
//
// Exit codes: 0 success, 2 config error, 3 missing predecessor artifact,
// 4 backend failure, 5 integrity error, 6 precondition violation,
// 7 I/O error, 1 anything else.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "condpoison/config.hpp"
#include "condpoison/pipeline.hpp"

namespace {

int dispatch(const std::string& stage_name, const std::string& config_path,
             const condpoison::ConfigOverrides& overrides) {
  using namespace condpoison;
  RunConfig config = load_run_config(config_path, overrides);
  Stage stage = stage_from_string(stage_name);
  StageOutput out = run_stage(stage, config);
  std::printf("%s: wrote %s\n", stage_name.c_str(), out.artifact.c_str());
  for (const auto& extra : out.extras)
    std::printf("%s: wrote %s\n", stage_name.c_str(), extra.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"condition-triggered poisoning pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  condpoison::ConfigOverrides overrides;
  std::uint64_t seed_flag = 0;
  std::string run_dir_flag, backend_flag, condition_flag;
  double ratio_flag = 0.0;

  const std::vector<std::string> stages = {
      "collect", "sample",   "generate", "match",  "assemble",
      "evaluate", "defend",  "report",   "project"};
  std::vector<CLI::App*> subs;
  for (const auto& name : stages) {
    CLI::App* sub = app.add_subcommand(name, name + " stage");
    sub->add_option("--config", config_path, "run config file (JSON)")
        ->required();
    sub->add_option("--seed", seed_flag, "override global seed");
    sub->add_option("--run-dir", run_dir_flag, "override run directory");
    sub->add_option("--backend", backend_flag, "mock or remote")
        ->check(CLI::IsMember({"mock", "remote"}));
    sub->add_option("--condition", condition_flag, "active condition id");
    sub->add_option("--ratio", ratio_flag, "override poisoning ratio");
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  std::string stage_name;
  CLI::App* parsed_sub = nullptr;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (subs[i]->parsed()) {
      stage_name = stages[i];
      parsed_sub = subs[i];
    }
  }
  if (parsed_sub) {
    if (parsed_sub->count("--seed")) overrides.seed = seed_flag;
    if (parsed_sub->count("--run-dir")) overrides.run_dir = run_dir_flag;
    if (parsed_sub->count("--backend")) overrides.backend = backend_flag;
    if (parsed_sub->count("--condition")) overrides.condition = condition_flag;
    if (parsed_sub->count("--ratio")) overrides.ratio = ratio_flag;
  }

  try {
    return dispatch(stage_name, config_path, overrides);
  } catch (const condpoison::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const condpoison::MissingArtifactError& e) {
    std::fprintf(stderr, "pipeline error: %s\n", e.what());
    return 3;
  } catch (const condpoison::BackendError& e) {
    std::fprintf(stderr, "backend error: %s\n", e.what());
    return 4;
  } catch (const condpoison::IntegrityError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return 5;
  } catch (const condpoison::PreconditionError& e) {
    std::fprintf(stderr, "precondition violated: %s\n", e.what());
    return 6;
  } catch (const condpoison::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 7;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
