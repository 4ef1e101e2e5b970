#include "metagpt/coefficients.hpp"

#include <cmath>

#include "metagpt/error.hpp"

namespace metagpt {
namespace {

std::vector<std::string> default_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t t = 0; t < n; ++t) ids.push_back("task" + std::to_string(t));
  return ids;
}

}  // namespace

std::string_view method_name(CoefficientMethod method) noexcept {
  switch (method) {
    case CoefficientMethod::metagpt:
      return "metagpt";
    case CoefficientMethod::fixed:
      return "fixed";
    case CoefficientMethod::weight_average:
      return "weight_average";
    case CoefficientMethod::external:
      return "external";
  }
  return "?";
}

CoefficientMethod parse_coefficient_method(std::string_view name) {
  if (name == "metagpt") return CoefficientMethod::metagpt;
  if (name == "fixed") return CoefficientMethod::fixed;
  if (name == "weight_average" || name == "weight-average") return CoefficientMethod::weight_average;
  if (name == "external") return CoefficientMethod::external;
  throw_usage("unknown coefficient method '" + std::string(name) + "'");
}

CoefficientSet metagpt_coefficients(const TaskVectorStats& stats) {
  const std::size_t T = stats.sq_norms.size();
  if (T == 0) throw_usage("no task vectors to weight");
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double sq = stats.sq_norms[t];
    if (!std::isfinite(sq) || sq < 0.0) throw_data("invalid squared norm for task '" + stats.task_ids.at(t) + "'");
    if (sq == 0.0) throw_data("degenerate task vector '" + stats.task_ids.at(t) + "': zero norm");
    total += sq;
  }
  CoefficientSet out{stats.task_ids, std::vector<double>(T), CoefficientMethod::metagpt, stats.digest()};
  for (std::size_t t = 0; t < T; ++t) out.lambdas[t] = stats.sq_norms[t] / total;
  return out;
}

CoefficientSet fixed_coefficients(std::vector<std::string> task_ids, double value) {
  if (task_ids.empty()) throw_usage("at least one task is required");
  if (!std::isfinite(value)) throw_usage("fixed lambda must be finite");
  const std::size_t T = task_ids.size();
  return {std::move(task_ids), std::vector<double>(T, value), CoefficientMethod::fixed, std::nullopt};
}

CoefficientSet fixed_coefficients(std::size_t task_count, double value) {
  return fixed_coefficients(default_ids(task_count), value);
}

CoefficientSet weight_average_coefficients(std::vector<std::string> task_ids) {
  if (task_ids.empty()) throw_usage("at least one task is required");
  const std::size_t T = task_ids.size();
  return {std::move(task_ids), std::vector<double>(T, 1.0 / static_cast<double>(T)), CoefficientMethod::weight_average,
          std::nullopt};
}

CoefficientSet weight_average_coefficients(std::size_t task_count) {
  return weight_average_coefficients(default_ids(task_count));
}

Json coefficients_to_json(const CoefficientSet& coeffs) {
  Json doc;
  doc["method"] = method_name(coeffs.method);
  doc["tasks"] = coeffs.task_ids;
  doc["lambdas"] = coeffs.lambdas;
  if (coeffs.source_stats_digest) doc["source_stats_digest"] = *coeffs.source_stats_digest;
  return doc;
}

CoefficientSet coefficients_from_json(const Json& doc) {
  CoefficientSet out;
  try {
    out.method = parse_coefficient_method(doc.at("method").get<std::string>());
    out.task_ids = doc.at("tasks").get<std::vector<std::string>>();
    out.lambdas = doc.at("lambdas").get<std::vector<double>>();
    if (doc.contains("source_stats_digest")) out.source_stats_digest = doc.at("source_stats_digest").get<std::string>();
  } catch (const Json::exception& e) {
    throw_usage(std::string("coefficients: ") + e.what());
  }
  if (out.lambdas.empty() || out.lambdas.size() != out.task_ids.size()) {
    throw_usage("coefficients: tasks and lambdas must be non-empty and equally long");
  }
  for (double v : out.lambdas) {
    if (!std::isfinite(v)) throw_usage("coefficients: non-finite lambda");
  }
  return out;
}

}  // namespace metagpt
