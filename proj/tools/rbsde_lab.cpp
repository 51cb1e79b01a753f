// rbsde_lab: run or validate experiment specs.

#include "rbsde/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>

namespace lab = rbsde::lab;

namespace {

void print_error(const rbsde::Error& e) {
  std::cerr << "error (" << rbsde::to_string(e.code()) << "):\n";
  for (const auto& d : e.details()) std::cerr << "  " << d << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backward stochastic difference equations on finite scenario trees"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string out_dir = "out";
  double tolerance = 1e-9;
  lab::OracleMode oracle = lab::OracleMode::Auto;
  const std::map<std::string, lab::OracleMode> oracle_modes{
      {"on", lab::OracleMode::On}, {"off", lab::OracleMode::Off}, {"auto", lab::OracleMode::Auto}};

  auto* solve = app.add_subcommand("solve", "Run every experiment in a spec and write reports");
  solve->add_option("spec", spec_path, "Experiment or batch JSON")->required();
  solve->add_option("--out", out_dir, "Output directory")->capture_default_str();
  solve->add_option("--tolerance", tolerance, "Oracle comparison tolerance")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  solve->add_option("--oracle", oracle, "Oracle checks: on, off or auto")
      ->transform(CLI::CheckedTransformer(oracle_modes, CLI::ignore_case));

  auto* validate = app.add_subcommand("validate", "Load and validate a spec without solving");
  validate->add_option("spec", spec_path, "Experiment or batch JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : lab::kValidation;
  }

  std::vector<lab::ExperimentSpec> specs;
  try {
    specs = lab::load_spec(spec_path);
  } catch (const rbsde::Error& e) {
    print_error(e);
    return lab::kValidation;
  }

  if (*validate) {
    std::cout << "valid: " << specs.size() << " experiment(s)\n";
    for (const auto& s : specs) std::cout << "  " << s.name << " (" << s.task_name << ")\n";
    return lab::kOk;
  }

  const lab::RunOptions opt{tolerance, oracle};
  const auto outcomes = lab::run_batch(specs, opt, out_dir);
  for (const auto& o : outcomes) {
    std::ostream& os = o.code == lab::kOk ? std::cout : std::cerr;
    os << o.name << ": " << o.message << '\n';
  }
  return lab::combined_exit_code(outcomes);
}
