// Command-line front end: resdis <command> [--config FILE] [--seed N]
// [--threads N] [--output DIR]

#include "resdis/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

int main(int argc, char** argv) {
  CLI::App app{"Residual disentanglement pipeline"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> threads;
  std::optional<std::string> output;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--threads", threads, "Worker threads (0 = all cores)");
  app.add_option("--output", output, "Override paths.output_dir");

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"synth", "Generate planted synthetic inputs"},
      {"probe", "Layer-wise probing and saturation layers"},
      {"residualize", "Fit ridge maps and write residual embeddings"},
      {"validate", "Cosine, sample-axis and cross-probe diagnostics"},
      {"encode", "Cross-validated encoding fits per feature"},
      {"null", "Shuffle nulls and responsiveness"},
      {"report", "Figure and table datasets"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    resdis::RunConfig cfg = config_path.empty() ? resdis::RunConfig{} : resdis::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (output) cfg.paths.output_dir = *output;
    resdis::validate_config(cfg);
    const std::string name = app.get_subcommands().front()->get_name();
    resdis::run_command(name, cfg);
    std::cout << name << ": wrote " << (std::filesystem::path(cfg.paths.output_dir) / name).string() << '\n';
    return 0;
  } catch (const resdis::DependencyError& e) {
    std::cerr << "dependency error (run `" << e.producer() << "`): " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return resdis::exit_code_for(e);
  }
}
