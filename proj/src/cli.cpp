#include "metagpt/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "metagpt/coefficients.hpp"
#include "metagpt/error.hpp"
#include "metagpt/json_io.hpp"
#include "metagpt/merge_engine.hpp"
#include "metagpt/task_vectors.hpp"
#include "metagpt/tensor_store.hpp"
#include "metagpt/theory_lab.hpp"

namespace metagpt::cli {
namespace {

struct Args {
  std::string inspect_path;

  std::vector<std::string> stats_paths;
  bool stats_gram = false;
  bool stats_strict = false;

  std::string coeffs_stats;
  std::vector<std::string> coeffs_paths;
  std::string coeffs_method = "metagpt";
  double coeffs_lambda = 0.3;
  bool coeffs_strict = false;

  std::string merge_recipe;
  std::string merge_report;
  bool merge_timing = false;

  std::string verify_suite;
  std::size_t verify_trials = 100;
  std::uint64_t verify_seed = 0;
  std::size_t verify_dim = 0;
  std::size_t verify_tasks = 0;
  bool verify_legacy = false;
};

void emit(std::ostream& out, const Json& doc) {
  write_json(out, doc);
  out << '\n';
}

std::vector<CheckpointHandle> open_models(std::span<const std::string> paths) {
  std::vector<CheckpointHandle> out;
  for (const auto& p : paths) out.push_back(open_checkpoint(p));
  return out;
}

int cmd_inspect(const Args& a, std::ostream& out) {
  if (a.inspect_path.empty()) throw_usage("inspect: empty path");
  const auto handle = open_checkpoint(a.inspect_path);
  Json doc;
  doc["path"] = a.inspect_path;
  doc["total_params"] = handle.total_params();
  doc["tensor_count"] = handle.index().size();
  doc["metadata"] = handle.metadata();
  doc["tensors"] = Json::array();
  for (const auto& [name, meta] : handle.index()) {
    doc["tensors"].push_back({{"name", name},
                              {"dtype", dtype_name(meta.dtype)},
                              {"shape", meta.shape},
                              {"params", meta.element_count()}});
  }
  emit(out, doc);
  return kSuccess;
}

int cmd_stats(const Args& a, std::ostream& out) {
  if (a.stats_paths.size() < 2) throw_usage("stats: need BASE and at least one MODEL");
  const auto base = open_checkpoint(a.stats_paths.front());
  const auto models = open_models(std::span(a.stats_paths).subspan(1));
  StatsOptions options;
  options.want_gram = a.stats_gram;
  options.strict = a.stats_strict;
  const auto stats = compute_stats(base, models, options);
  std::optional<CosineMatrix> cosine;
  if (a.stats_gram) cosine = cosine_matrix(stats);
  emit(out, stats_to_json(stats, cosine));
  return kSuccess;
}

int cmd_coeffs(const Args& a, std::ostream& out) {
  const bool from_file = !a.coeffs_stats.empty();
  if (from_file == !a.coeffs_paths.empty()) throw_usage("coeffs: give either --stats FILE or BASE MODEL...");
  const auto method = parse_coefficient_method(a.coeffs_method);

  TaskVectorStats stats;
  if (from_file) {
    std::ifstream in(a.coeffs_stats);
    if (!in) throw_usage("coeffs: cannot read '" + a.coeffs_stats + "'");
    try {
      stats = stats_from_json(Json::parse(in));
    } catch (const Json::exception& e) {
      throw_usage(std::string("coeffs: stats file is not valid JSON: ") + e.what());
    }
  } else {
    if (a.coeffs_paths.size() < 2) throw_usage("coeffs: need BASE and at least one MODEL");
    const auto base = open_checkpoint(a.coeffs_paths.front());
    const auto models = open_models(std::span(a.coeffs_paths).subspan(1));
    StatsOptions options;
    options.strict = a.coeffs_strict;
    stats = compute_stats(base, models, options);
  }

  CoefficientSet coeffs;
  switch (method) {
    case CoefficientMethod::metagpt:
      coeffs = metagpt_coefficients(stats);
      break;
    case CoefficientMethod::fixed:
      coeffs = fixed_coefficients(stats.task_ids, a.coeffs_lambda);
      break;
    case CoefficientMethod::weight_average:
      coeffs = weight_average_coefficients(stats.task_ids);
      break;
    case CoefficientMethod::external:
      throw_usage("coeffs: method 'external' cannot be computed");
  }
  emit(out, coefficients_to_json(coeffs));
  return kSuccess;
}

int cmd_merge(const Args& a, std::ostream& out, std::ostream& err) {
  const MergeRecipe recipe = load_recipe(a.merge_recipe);
  const auto result = run_recipe(recipe);
  const Json doc = result.report.to_json(a.merge_timing);
  if (a.merge_report.empty()) {
    emit(out, doc);
  } else {
    std::ofstream file(a.merge_report, std::ios::trunc);
    if (!file) throw_io("cannot write report '" + a.merge_report + "'");
    emit(file, doc);
    if (!file) throw_io("write failed on '" + a.merge_report + "'");
  }
  err << "merged " << result.report.tensor_count << " tensors into " << recipe.output.string() << '\n';
  return kSuccess;
}

int cmd_verify(const Args& a, std::ostream& out, std::ostream& err) {
  std::vector<lab::Suite> suites;
  if (a.verify_suite == "all") {
    suites = lab::all_suites();
  } else {
    suites.push_back(lab::parse_suite(a.verify_suite));
  }
  lab::SuiteConfig config;
  config.trials = a.verify_trials;
  config.seed = a.verify_seed;
  config.dim = a.verify_dim;
  config.tasks = a.verify_tasks;
  config.indicator = a.verify_legacy ? lab::Indicator::literal : lab::Indicator::squared_complement;
  if (config.trials == 0) throw_usage("verify: --trials must be at least 1");
  if (config.dim && config.tasks && config.tasks > config.dim) throw_usage("verify: --tasks cannot exceed --dim");

  Json doc;
  doc["seed"] = config.seed;
  doc["indicator"] = a.verify_legacy ? "literal" : "squared_complement";
  doc["suites"] = Json::array();
  std::size_t failures = 0;
  for (lab::Suite s : suites) {
    const auto report = lab::run_suite(s, config);
    if (report.failed()) {
      ++failures;
      err << "suite " << report.theorem << ": " << report.violations << " violations\n";
    }
    doc["suites"].push_back(report.to_json());
  }
  doc["failed_suites"] = failures;
  emit(out, doc);
  return failures ? kInvariantViolation : kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Model merging with closed-form task-arithmetic coefficients", "metagpt"};
  app.require_subcommand(1);
  Args a;

  auto* inspect = app.add_subcommand("inspect", "List tensors and metadata of a checkpoint");
  inspect->add_option("path", a.inspect_path, "Checkpoint file")->required();

  auto* stats = app.add_subcommand("stats", "Task-vector norms (and optionally cosines)");
  stats->add_option("paths", a.stats_paths, "BASE MODEL...")->required()->expected(2, -1);
  stats->add_flag("--gram", a.stats_gram, "Also compute inner products and the cosine matrix");
  stats->add_flag("--strict", a.stats_strict, "Fail when a tensor is missing from some model");

  auto* coeffs = app.add_subcommand("coeffs", "Scaling coefficients from stats or checkpoints");
  coeffs->add_option("--stats", a.coeffs_stats, "Stats JSON produced by the stats command");
  coeffs->add_option("paths", a.coeffs_paths, "BASE MODEL...");
  coeffs->add_option("--method", a.coeffs_method, "metagpt | fixed | weight-average")
      ->check(CLI::IsMember({"metagpt", "fixed", "weight-average", "weight_average"}));
  coeffs->add_option("--lambda", a.coeffs_lambda, "Value for the fixed method");
  coeffs->add_flag("--strict", a.coeffs_strict, "Fail when a tensor is missing from some model");

  auto* merge = app.add_subcommand("merge", "Run a merge recipe");
  merge->add_option("--recipe", a.merge_recipe, "Recipe JSON")->required();
  merge->add_option("--report", a.merge_report, "Write the report here instead of stdout");
  merge->add_flag("--timing", a.merge_timing, "Include wall time in the report");

  auto* verify = app.add_subcommand("verify", "Numerical verification suites on synthetic ensembles");
  verify->add_option("--suite", a.verify_suite, "lemma1 | thm1 | thm2 | thm3 | thm4 | hessian | all")->required();
  verify->add_option("--trials", a.verify_trials, "Randomized trials per suite");
  verify->add_option("--seed", a.verify_seed, "Root seed");
  verify->add_option("--dim", a.verify_dim, "Parameter dimension (default: random 8..128)");
  verify->add_option("--tasks", a.verify_tasks, "Task count (default: random 2..8)");
  verify->add_flag("--legacy-indicator", a.verify_legacy, "Use the literal (1 - lambda^2) own-task weight");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*inspect) return cmd_inspect(a, out);
    if (*stats) return cmd_stats(a, out);
    if (*coeffs) return cmd_coeffs(a, out);
    if (*merge) return cmd_merge(a, out, err);
    if (*verify) return cmd_verify(a, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::usage ? kUsage : kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace metagpt::cli
