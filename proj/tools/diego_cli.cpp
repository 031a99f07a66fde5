#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "diego/commands.hpp"

namespace {

int dispatch(CLI::App& app, const CLI::App* sim, const CLI::App* train_cmd,
             const CLI::App* retrieve_cmd, const CLI::App* evaluate_cmd,
             const CLI::App* gradcheck_cmd, diego::RunConfig cfg,
             const std::vector<std::string>& dbs, const std::string& bundle,
             const std::string& input, const std::string& fuse_bundle, bool debias,
             const std::string& pred, const std::string& truth, bool inject_fault) {
  if (app.got_subcommand(sim)) return diego::cmd_simulate(cfg);
  if (app.got_subcommand(train_cmd)) {
    std::vector<std::filesystem::path> paths(dbs.begin(), dbs.end());
    return diego::cmd_train(cfg, paths);
  }
  if (app.got_subcommand(retrieve_cmd)) {
    diego::RetrieveOptions opt;
    if (!fuse_bundle.empty()) opt.fuse_bundle = fuse_bundle;
    opt.debias_zonal = debias;
    return diego::cmd_retrieve(cfg, bundle, input, opt);
  }
  if (app.got_subcommand(evaluate_cmd)) return diego::cmd_evaluate(cfg, pred, truth);
  if (app.got_subcommand(gradcheck_cmd)) return diego::cmd_gradcheck(cfg, inject_fault);
  throw diego::ConfigError("no subcommand given");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diego: passive-microwave precipitation retrieval experiments"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "master seed (overrides config seeds)");
  std::string out_dir;
  auto* out_opt = app.add_option("--out", out_dir, "output directory (overrides config)");

  auto* sim = app.add_subcommand("simulate", "generate synthetic coincidence databases");

  auto* train_cmd = app.add_subcommand("train", "train retrieval suites from databases");
  std::vector<std::string> dbs;
  train_cmd->add_option("db", dbs, "stratified database files")
      ->required()
      ->check(CLI::ExistingFile);

  auto* retrieve_cmd = app.add_subcommand("retrieve", "run retrievals with a trained suite");
  std::string bundle, input;
  retrieve_cmd->add_option("bundle", bundle, "suite bundle directory")->required();
  retrieve_cmd->add_option("input", input, "input database file")
      ->required()
      ->check(CLI::ExistingFile);
  std::string fuse_bundle;
  retrieve_cmd->add_option("--fuse", fuse_bundle,
                           "second suite bundle; fuse the two retrievals per pixel");
  bool debias = false;
  retrieve_cmd->add_flag("--debias-zonal", debias,
                         "fit and apply a latitude-band snowfall correction");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a retrieval CSV against truth");
  std::string pred, truth;
  evaluate_cmd->add_option("pred", pred, "retrieval CSV")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("truth", truth, "truth database file")
      ->required()
      ->check(CLI::ExistingFile);
  double trim = 97.5;
  auto* trim_opt = evaluate_cmd->add_option(
      "--trim", trim, "drop pairs whose truth exceeds this truth percentile");
  double grid_res = 0.1;
  auto* grid_opt = evaluate_cmd->add_option("--grid-res", grid_res, "grid resolution, degrees");
  double occ = diego::kOccurrenceThreshold;
  auto* occ_opt =
      evaluate_cmd->add_option("--occ-threshold", occ, "occurrence threshold, mm/hr");

  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference verification of backpropagation");
  bool inject_fault = false;
  gradcheck_cmd->add_flag("--inject-fault", inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return 0;
  }

  try {
    diego::RunConfig cfg =
        config_path.empty() ? diego::RunConfig{} : diego::load_config(config_path);
    if (seed_opt->count() > 0) {
      cfg.seed = seed;
      cfg.synthetic.seed = seed;
    }
    if (out_opt->count() > 0) cfg.out_dir = out_dir;
    if (trim_opt->count() > 0) cfg.evaluate.trim = trim;
    if (grid_opt->count() > 0) cfg.evaluate.grid_res = grid_res;
    if (occ_opt->count() > 0) cfg.evaluate.occ_threshold = occ;

    return dispatch(app, sim, train_cmd, retrieve_cmd, evaluate_cmd, gradcheck_cmd, std::move(cfg),
                    dbs, bundle, input, fuse_bundle, debias, pred, truth, inject_fault);
  } catch (const diego::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const diego::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 3;
  } catch (const diego::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return 3;
  } catch (const diego::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 3;
  } catch (const diego::QueryError& e) {
    std::cerr << "query error: " << e.what() << '\n';
    return 3;
  } catch (const diego::RoutingError& e) {
    std::cerr << "routing error: " << e.what() << '\n';
    return 3;
  } catch (const diego::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const diego::TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return 4;
  } catch (const diego::EstimationError& e) {
    std::cerr << "estimation error: " << e.what() << '\n';
    return 4;
  } catch (const diego::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
