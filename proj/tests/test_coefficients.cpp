#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "metagpt/coefficients.hpp"
#include "metagpt/error.hpp"

using namespace metagpt;

namespace {

TaskVectorStats norms(std::vector<double> sq) {
  TaskVectorStats s;
  for (std::size_t t = 0; t < sq.size(); ++t) s.task_ids.push_back("t" + std::to_string(t));
  s.sq_norms = std::move(sq);
  return s;
}

}  // namespace

TEST_CASE("closed-form coefficients on small cases") {
  CHECK(metagpt_coefficients(norms({4.0, 4.0})).lambdas == std::vector<double>{0.5, 0.5});

  const auto c = metagpt_coefficients(norms({1.0, 2.0, 3.0}));
  CHECK(c.method == CoefficientMethod::metagpt);
  CHECK(c.lambdas[0] == 1.0 / 6.0);
  CHECK(c.lambdas[1] == 2.0 / 6.0);
  CHECK(c.lambdas[2] == 3.0 / 6.0);
  CHECK(c.lambdas[1] == 1.0 / 3.0);
  CHECK(c.source_stats_digest == norms({1.0, 2.0, 3.0}).digest());
}

TEST_CASE("degenerate inputs are rejected") {
  CHECK_THROWS_WITH_AS(metagpt_coefficients(norms({1.0, 0.0})), doctest::Contains("degenerate task vector"), Error);
  CHECK_THROWS_AS(metagpt_coefficients(norms({})), Error);
  CHECK_THROWS_AS(fixed_coefficients(0, 0.3), Error);
  CHECK_THROWS_AS(fixed_coefficients(2, std::nan("")), Error);
  CHECK_THROWS_AS(weight_average_coefficients(0), Error);
}

TEST_CASE("fixed and weight-average baselines") {
  CHECK(fixed_coefficients(3, 0.3).lambdas == std::vector<double>{0.3, 0.3, 0.3});
  CHECK(fixed_coefficients(3, 0.3).method == CoefficientMethod::fixed);
  CHECK(weight_average_coefficients(4).lambdas == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  CHECK(fixed_coefficients(1, 1.0).lambdas == std::vector<double>{1.0});
  const auto w = weight_average_coefficients(7);
  for (double v : w.lambdas) CHECK(v == 1.0 / 7.0);
}

TEST_CASE("closed-form coefficient properties on random norms") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(1e-3, 1e3);
  std::uniform_int_distribution<int> count(1, 12);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> sq(static_cast<std::size_t>(count(rng)));
    for (double& v : sq) v = unit(rng);
    const auto lambdas = metagpt_coefficients(norms(sq)).lambdas;

    const double sum = std::accumulate(lambdas.begin(), lambdas.end(), 0.0);
    REQUIRE(std::fabs(sum - 1.0) <= 1e-12);
    for (std::size_t i = 0; i < sq.size(); ++i) {
      REQUIRE(lambdas[i] > 0.0);
      REQUIRE(lambdas[i] <= 1.0);
      for (std::size_t j = 0; j < sq.size(); ++j) {
        if (sq[i] > sq[j]) REQUIRE(lambdas[i] > lambdas[j]);
      }
    }

    // Homogeneous of degree zero in the norms.
    const double c = unit(rng);
    std::vector<double> scaled = sq;
    for (double& v : scaled) v *= c;
    const auto again = metagpt_coefficients(norms(scaled)).lambdas;
    for (std::size_t i = 0; i < sq.size(); ++i) REQUIRE(std::fabs(again[i] - lambdas[i]) <= 1e-15 * lambdas[i] * 4);

    // Equal norms collapse to weight averaging.
    std::vector<double> equal(sq.size(), sq[0]);
    for (double v : metagpt_coefficients(norms(equal)).lambdas) {
      REQUIRE(std::fabs(v - 1.0 / static_cast<double>(sq.size())) <= 1e-15);
    }
  }
}

TEST_CASE("coefficient JSON round-trip") {
  const auto c = metagpt_coefficients(norms({1.0, 3.0}));
  const auto text = dump_json(coefficients_to_json(c));
  const auto back = coefficients_from_json(Json::parse(text));
  CHECK(back.lambdas == c.lambdas);
  CHECK(back.task_ids == c.task_ids);
  CHECK(back.method == CoefficientMethod::metagpt);
  CHECK(back.source_stats_digest == c.source_stats_digest);

  CHECK_THROWS_AS(coefficients_from_json(Json::parse(R"({"method":"metagpt","tasks":["a"],"lambdas":[]})")), Error);
  CHECK_THROWS_AS(coefficients_from_json(Json::parse(R"({"method":"magic","tasks":["a"],"lambdas":[1]})")), Error);
  const auto ext = coefficients_from_json(Json::parse(R"({"method":"external","tasks":["a","b"],"lambdas":[0.2,0.9]})"));
  CHECK(ext.method == CoefficientMethod::external);
}
