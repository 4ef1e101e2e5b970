#pragma once

// Synthetic multi-task instances in the linearized (NTK) regime.
//
// Each task t has a scalar linear model f_t(theta) = g_t . (theta - theta_t) + y
// and loss L_t(theta) = 1/2 (f_t(theta) - y)^2, minimized at its fine-tuned
// weights theta_t. The gradient direction is tied to the task vector by
// g_t = delta_t * tau_t, and task vectors are mutually orthogonal. On such
// instances the task loss difference, its upper bounds and the per-lambda
// decomposition are all computable exactly, which lets the closed-form
// coefficients be checked against brute force.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metagpt/json_io.hpp"
#include "metagpt/task_vectors.hpp"

namespace metagpt::lab {

using Vector = std::vector<double>;

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct QuadraticTask {
  Vector theta;     // fine-tuned weights
  Vector tau;       // theta - theta0
  double delta = 1.0;
  Vector gradient;  // delta * tau
};

struct QuadraticEnsemble {
  Vector theta0;
  std::vector<QuadraticTask> tasks;
  double delta0 = 0.0;  // max_t delta_t

  std::size_t dim() const noexcept { return theta0.size(); }
  std::size_t task_count() const noexcept { return tasks.size(); }
};

/// How the k = t coefficient enters the bounds: (1 - lambda)^2, consistent
/// with expanding |h_t|^2 and with the closed form, or the literal
/// (1 - lambda^2) kept for comparison runs.
enum class Indicator { squared_complement, literal };

struct EnsembleOptions {
  Range delta_range{0.5, 2.0};
  Range norm_range{0.5, 2.0};
};

/// Random theta0, Gram-Schmidt orthogonal task vectors rescaled to norms drawn
/// from norm_range, deltas drawn from delta_range. Deterministic in `seed`.
/// Throws Error(usage) if T > m or T == 0.
QuadraticEnsemble make_ensemble(std::size_t tasks, std::size_t dim, std::uint64_t seed,
                                const EnsembleOptions& options = {});

/// Builds tasks whose unit directions share a common pairwise cosine, used to
/// probe what happens when orthogonality is violated. Needs dim > tasks.
QuadraticEnsemble make_correlated_ensemble(std::size_t tasks, std::size_t dim, std::uint64_t seed, double cosine,
                                           const EnsembleOptions& options = {});

/// Assembles an ensemble from explicit parts (gradient = delta * tau).
QuadraticEnsemble ensemble_from(Vector theta0, const std::vector<Vector>& taus, const std::vector<double>& deltas);

double exact_loss(const QuadraticEnsemble& e, std::size_t t, std::span<const double> theta);
Vector loss_gradient(const QuadraticEnsemble& e, std::size_t t, std::span<const double> theta);

Vector merged_theta(const QuadraticEnsemble& e, std::span<const double> lambdas);
/// sum_{k != t} lambda_k tau_k - (1 - lambda_t) tau_t; equals merged - theta_t.
Vector h_vector(const QuadraticEnsemble& e, std::size_t t, std::span<const double> lambdas);

/// L_t(merged) - L_t(theta_t), evaluated through the loss.
double exact_tld(const QuadraticEnsemble& e, std::size_t t, std::span<const double> lambdas);
/// 1/2 h_t^T H_t h_t with the constant Hessian H_t = g_t g_t^T.
double quadratic_form_tld(const QuadraticEnsemble& e, std::size_t t, std::span<const double> lambdas);

/// (delta_t^2 / 2) |tau_t|^2 sum_k w_k |tau_k|^2 with w_k = lambda_k^2 for
/// k != t and the indicator-selected weight for k = t.
double tld_bound(const QuadraticEnsemble& e, std::size_t t, std::span<const double> lambdas,
                 Indicator indicator = Indicator::squared_complement);

double ald(const QuadraticEnsemble& e, std::span<const double> lambdas);
/// sum_t delta_t^2 |tau_t|^2 sum_k w_k |tau_k|^2, the decoupled bound with the
/// 1/2 and 1/T prefactors dropped.
double ald_bound(const QuadraticEnsemble& e, std::span<const double> lambdas,
                 Indicator indicator = Indicator::squared_complement);
/// (1/T) sum_t tld_bound(t): the tightest bound implied by the per-task one.
double ald_bound_averaged(const QuadraticEnsemble& e, std::span<const double> lambdas,
                          Indicator indicator = Indicator::squared_complement);

/// (delta0^2 / 2) |tau_t|^2 [w_t |tau_t|^2 + lambda_t^2 sum_{j != t} |tau_j|^2],
/// a quadratic in lambda_t alone.
double ald_lambda_term(const QuadraticEnsemble& e, std::size_t t, double lambda_t,
                       Indicator indicator = Indicator::squared_complement);

/// Independently for each t, the grid point in {0, step, ..., 1} minimizing
/// ald_lambda_term; ties go to the smaller lambda.
Vector grid_search_lambda(const QuadraticEnsemble& e, double step,
                          Indicator indicator = Indicator::squared_complement);

/// Task-vector statistics of the ensemble (sq_norms and gram of the taus).
TaskVectorStats ensemble_stats(const QuadraticEnsemble& e);

struct HessianResidual {
  double hessian_max_abs = 0.0;    // max |FD Hessian - g g^T| over checked pairs
  double gradient_identity = 0.0;  // |delta tau - g|
  double gradient_max_rel = 0.0;   // analytic vs central-difference gradient
  std::size_t pairs_checked = 0;
};

/// Central finite differences (step `fd_step`) around a random point near
/// theta_t. All pairs are checked when dim <= 16, otherwise `sampled_pairs`
/// random pairs plus the diagonal of a random coordinate subset.
HessianResidual verify_hessian_identity(const QuadraticEnsemble& e, std::size_t t, std::uint64_t seed = 0,
                                        double fd_step = 1e-4, std::size_t sampled_pairs = 64);

// ---- verification suites ---------------------------------------------------

enum class Suite { lemma1, thm1, thm2, thm3, thm4, hessian };

std::string_view suite_name(Suite suite) noexcept;
/// Throws Error(usage) for unknown names.
Suite parse_suite(std::string_view name);
std::vector<Suite> all_suites();

struct SuiteConfig {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  std::size_t dim = 0;    // 0: random in [8, 128]
  std::size_t tasks = 0;  // 0: random in [2, 8]
  Indicator indicator = Indicator::squared_complement;
  double grid_step = 1e-4;
};

struct SuiteReport {
  std::string theorem;
  std::size_t trials = 0;
  std::size_t checks = 0;
  std::size_t violations = 0;
  double max_gap = 0.0;
  double tolerance = 0.0;
  bool asserted = true;  // false for comparison-only runs
  Json extra = Json::object();

  bool failed() const noexcept { return asserted && violations > 0; }
  Json to_json() const;
};

SuiteReport run_suite(Suite suite, const SuiteConfig& config);

}  // namespace metagpt::lab
