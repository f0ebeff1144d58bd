// gloss: command-line runner for the toy study, descriptor training,
// evaluation, gradient checks and architecture parsing.

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gloss/experiments.hpp"

namespace {

struct Flags {
  std::string config;
  std::map<std::string, std::string> values;  // config key -> text
  std::vector<std::string> params;            // key=value
  bool oracle = false;
};

// Flags mapped one-to-one onto config keys.
const std::vector<std::pair<std::string, std::string>> kKeyFlags = {
    {"--seed", "seed"},         {"--out", "out"},           {"--set", "set"},
    {"--arch", "arch"},         {"--loss", "loss"},         {"--checkpoint", "checkpoint"},
    {"--pairs", "pairs"},       {"--network", "network"},   {"--data-dir", "data_dir"},
    {"--epochs", "epochs"},     {"--filter", "filter"},     {"--corrupt", "corrupt"},
    {"--input", "input"},       {"--init-from", "init_from"}};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Flags& f) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  for (const auto& [flag, key] : kKeyFlags) {
    const auto defaults = gloss::ExperimentConfig::defaults(name).values();
    if (!defaults.contains(key)) continue;
    sub->add_option_function<std::string>(
        flag, [&f, key = key](const std::string& v) { f.values[key] = v; }, "sets config key '" + key + "'");
  }
  sub->add_option("--param", f.params, "override any config key: KEY=VALUE (repeatable)");
  if (name == "eval") sub->add_flag("--oracle-scores", f.oracle, "debug: score pairs by their labels");
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Metric learning with triplet, siamese and global losses"};
  app.require_subcommand(1);
  Flags flags;
  std::map<std::string, CLI::App*> subs;
  subs["toy"] = add_command(app, "toy", "toy outlier study: label maps for three losses", flags);
  subs["train"] = add_command(app, "train", "train a descriptor network", flags);
  subs["eval"] = add_command(app, "eval", "ROC and FPR95 of a checkpoint on a pair set", flags);
  subs["gradcheck"] = add_command(app, "gradcheck", "finite-difference gradient suite", flags);
  subs["parse-arch"] = add_command(app, "parse-arch", "parse an architecture string and print its shapes", flags);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }
  try {
    auto cfg = gloss::ExperimentConfig::defaults(command);
    if (!flags.config.empty()) cfg.merge_file(flags.config);
    for (const auto& [key, text] : flags.values) cfg.set_from_text(key, text);
    for (const auto& p : flags.params) {
      const auto eq = p.find('=');
      if (eq == std::string::npos || eq == 0) throw gloss::ConfigError("--param expects KEY=VALUE, got '" + p + "'");
      cfg.set_from_text(p.substr(0, eq), p.substr(eq + 1));
    }
    if (flags.oracle) cfg.merge({{"oracle_scores", true}}, "--oracle-scores");
    return gloss::run_command(cfg);
  } catch (const std::exception& e) {
    std::cerr << "gloss " << command << ": " << e.what() << '\n';
    return gloss::exit_code_for(e);
  }
}
