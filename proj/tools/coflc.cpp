#include <iostream>

#include "CLI11.hpp"
#include "cofl/corpus.hpp"

namespace {

void add_engine_options(CLI::App* cmd, cofl::SessionConfig& cfg) {
  cmd->add_option("--budget", cfg.step_budget, "derivation step budget")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--answers", cfg.max_answers, "answers to report")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--trace", cfg.trace, "print the derivation behind each answer");
  cmd->add_flag("--full-memory", cfg.full_memory,
                "record every call for circularity detection, not only "
                "guess-rule heads");
  cmd->add_option("--workers", cfg.workers, "frontier worker threads")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("!--no-dedupe", cfg.dedupe_answers,
                "report repeated answers instead of collapsing them");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coflc: functional logic evaluation over cyclic data"};
  app.require_subcommand(1);

  cofl::SessionConfig cfg;
  std::string query;
  std::string manifest;

  CLI::App* run = app.add_subcommand("run", "evaluate one query");
  run->add_option("program", cfg.program_paths, "program files")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("-e,--eval", query, "query to evaluate")->required();
  add_engine_options(run, cfg);

  CLI::App* repl = app.add_subcommand("repl", "interactive session");
  repl->add_option("program", cfg.program_paths, "program files")
      ->check(CLI::ExistingFile);
  add_engine_options(repl, cfg);

  CLI::App* corpus = app.add_subcommand("corpus", "run a query manifest");
  corpus->add_option("manifest", manifest, "manifest file")
      ->required()
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      cofl::Session ses(cfg);
      return ses.run_query(std::cout, query);
    }
    if (repl->parsed()) {
      cofl::Session ses(cfg);
      return ses.repl(std::cin, std::cout);
    }
    return cofl::corpus::run_manifest(manifest, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
