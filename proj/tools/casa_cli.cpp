// Command-line front end: train one run, sweep the grid, or run the
// self-check suites. Failures print a JSON object on stderr and exit nonzero.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "casa/checks.hpp"
#include "casa/harness.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace casa;

namespace {

constexpr int kExitError = 2;
constexpr int kExitAborted = 3;
constexpr int kExitCheckFailed = 4;

int report_error(const std::string& kind, const std::string& message, int code,
                 json extra = json::object()) {
  extra["error"] = kind;
  extra["message"] = message;
  std::cerr << extra.dump() << "\n";
  return code;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw std::invalid_argument("empty entry in list '" + text + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

TrainConfig load_config(const std::string& path) {
  return path.empty() ? TrainConfig{} : TrainConfig::from_file(path);
}

struct TrainArgs {
  std::string config, out = "casa_run", method, alpha;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = load_config(a.config);
  if (!a.method.empty()) cfg.method = parse_method(a.method);
  if (!a.alpha.empty()) cfg.alpha = parse_alpha(a.alpha);
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  const DomainPair data = grid_domains(cfg, cfg.alpha, cfg.seed);
  TrainResult r = train(cfg, data);
  fs::create_directories(a.out);
  write_file(fs::path(a.out) / "config.kv", cfg.to_kv());
  write_file(fs::path(a.out) / "run.json", run_to_json(r.record));
  emit_plot_data({r.record}, {r.features}, a.out);
  save_checkpoint(r.model, fs::path(a.out) / "model.ckpt");

  if (r.record.aborted) {
    return report_error("run_aborted", r.record.abort_reason, kExitAborted,
                        {{"run_id", r.record.run_id()}, {"step", r.record.abort_step}});
  }
  std::cout << json{{"run_id", r.record.run_id()},
                    {"per_class_acc", r.record.final_per_class_acc},
                    {"cssd", r.record.final_divergence.cssd},
                    {"wall_time_s", r.record.wall_time_s},
                    {"out", a.out}}
                   .dump()
            << "\n";
  return 0;
}

struct GridArgs {
  std::string config, out = "casa_grid", methods, alphas, seeds;
  std::size_t workers = 1;
  bool quiet = false;
};

int run_grid_cmd(const GridArgs& a) {
  GridSpec spec;
  spec.base = load_config(a.config);
  spec.workers = a.workers;
  if (!a.methods.empty()) {
    spec.methods.clear();
    for (const auto& m : split_list(a.methods)) spec.methods.push_back(parse_method(m));
  }
  if (!a.alphas.empty()) {
    spec.alphas.clear();
    for (const auto& s : split_list(a.alphas)) spec.alphas.push_back(parse_alpha(s));
  }
  if (!a.seeds.empty()) {
    spec.seeds.clear();
    for (const auto& s : split_list(a.seeds)) spec.seeds.push_back(std::stoull(s));
  }

  const GridReport rep = run_grid(spec, [&](const RunRecord& r) {
    if (a.quiet) return;
    std::cerr << json{{"run_id", r.run_id()},
                      {"per_class_acc", r.aborted ? json(nullptr) : json(r.final_per_class_acc)},
                      {"aborted", r.aborted}}
                     .dump()
              << "\n";
  });

  const fs::path out(a.out);
  fs::create_directories(out / "runs");
  write_file(out / "config.kv", spec.base.to_kv());
  write_file(out / "grid.csv", grid_csv(rep));
  write_file(out / "grid.md", grid_table(rep));
  std::vector<RunRecord> done;
  std::vector<FeatureDump> feats;
  for (std::size_t i = 0; i < rep.runs.size(); ++i) {
    write_file(out / "runs" / (rep.runs[i].run_id() + ".json"), run_to_json(rep.runs[i]));
    if (!rep.runs[i].aborted) {
      done.push_back(rep.runs[i]);
      feats.push_back(rep.features[i]);
    }
  }
  if (!done.empty()) emit_plot_data(done, feats, out);
  std::cout << grid_table(rep);
  return 0;
}

struct SuiteArgs {
  std::uint64_t seed = 0;
  std::size_t instances = 0;
  std::string out;
};

int run_suite(const SuiteReport& rep, const SuiteArgs& a) {
  const std::string text = rep.to_json();
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file(fs::path(a.out) / (rep.suite + ".json"), text);
  }
  std::cout << text << "\n";
  if (!rep.passed()) {
    json failed = json::array();
    for (const CheckResult& c : rep.checks) {
      if (!c.passed()) failed.push_back(c.name);
    }
    return report_error("check_failed", rep.suite + " suite has failing checks", kExitCheckFailed,
                        {{"failed", failed}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"casa: conditional support alignment workbench"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train one run and write run.json plus plot data");
  train_cmd->add_option("--config", ta.config, "key=value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--method", ta.method, "casa | asa_baseline | dann_baseline | source_only");
  train_cmd->add_option("--alpha", ta.alpha, "Dirichlet concentration or 'none'");
  train_cmd->add_option("--seed", ta.seed, "run seed (data, initialisation, minibatches)");
  train_cmd->add_option("--out", ta.out, "output directory");

  GridArgs ga;
  auto* grid_cmd = app.add_subcommand("grid", "sweep methods x alphas x seeds");
  grid_cmd->add_option("--config", ga.config, "base config file")->check(CLI::ExistingFile);
  grid_cmd->add_option("--methods", ga.methods, "comma-separated methods");
  grid_cmd->add_option("--alphas", ga.alphas, "comma-separated alphas, 'none' for uniform");
  grid_cmd->add_option("--seeds", ga.seeds, "comma-separated seeds");
  grid_cmd->add_option("--workers", ga.workers, "concurrent runs")->check(CLI::PositiveNumber);
  grid_cmd->add_option("--out", ga.out, "output directory");
  grid_cmd->add_flag("--quiet", ga.quiet, "no per-run progress on stderr");

  SuiteArgs oa{0, 100, ""};
  auto* oracle_cmd = app.add_subcommand("oracle", "discrepancy-bound and support oracle suites");
  oracle_cmd->add_option("--seed", oa.seed);
  oracle_cmd->add_option("--instances", oa.instances)->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--out", oa.out, "directory for oracle.json");

  SuiteArgs ca{0, 20, ""};
  auto* check_cmd = app.add_subcommand("check", "gradient and training-invariant suites");
  check_cmd->add_option("--seed", ca.seed);
  check_cmd->add_option("--instances", ca.instances)->check(CLI::PositiveNumber);
  check_cmd->add_option("--out", ca.out, "directory for check.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), kExitError);
  }

  try {
    if (*train_cmd) return run_train(ta);
    if (*grid_cmd) return run_grid_cmd(ga);
    if (*oracle_cmd) return run_suite(oracle_suite(oa.seed, oa.instances), oa);
    if (*check_cmd) return run_suite(gradient_suite(ca.seed, ca.instances), ca);
  } catch (const std::invalid_argument& e) {
    return report_error("invalid_argument", e.what(), kExitError);
  } catch (const std::exception& e) {
    return report_error("runtime_error", e.what(), kExitError);
  }
  return kExitError;
}
