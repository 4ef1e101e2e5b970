#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metagpt/json_io.hpp"
#include "metagpt/task_vectors.hpp"

namespace metagpt {

enum class CoefficientMethod { metagpt, fixed, weight_average, external };

std::string_view method_name(CoefficientMethod method) noexcept;
CoefficientMethod parse_coefficient_method(std::string_view name);

struct CoefficientSet {
  std::vector<std::string> task_ids;
  std::vector<double> lambdas;
  CoefficientMethod method = CoefficientMethod::external;
  std::optional<std::string> source_stats_digest;

  std::size_t size() const noexcept { return lambdas.size(); }
};

/// lambda_t = |tau_t|^2 / sum_k |tau_k|^2, the minimizer of the decoupled
/// per-task loss-difference bound. Needs only parameter norms, no data.
/// Throws Error(data) "degenerate task vector" if any norm is zero.
CoefficientSet metagpt_coefficients(const TaskVectorStats& stats);

/// Every lambda equal to `value` (0.3 is the customary dataless default).
CoefficientSet fixed_coefficients(std::size_t task_count, double value);
CoefficientSet fixed_coefficients(std::vector<std::string> task_ids, double value);

/// lambda_t = 1/T.
CoefficientSet weight_average_coefficients(std::size_t task_count);
CoefficientSet weight_average_coefficients(std::vector<std::string> task_ids);

Json coefficients_to_json(const CoefficientSet& coeffs);
/// Imported sets keep the declared method tag; lambdas are validated finite.
CoefficientSet coefficients_from_json(const Json& doc);

}  // namespace metagpt
