#include <bit>
#include <cmath>

#include "dense_reference.hpp"
#include "doctest.h"
#include "metagpt/error.hpp"
#include "metagpt/task_vectors.hpp"
#include "test_support.hpp"

using namespace metagpt;
using testing::TempDir;

namespace {

std::vector<CheckpointHandle> open_set(const testing::WrittenSet& w) {
  std::vector<CheckpointHandle> out{open_checkpoint(w.base)};
  for (const auto& m : w.models) out.push_back(open_checkpoint(m));
  return out;
}

double rel(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-300}); }

}  // namespace

TEST_CASE("task_vector_tensor subtracts element-wise in double") {
  const TensorBuffer fine{"w", {2}, {3.0, 4.0}};
  const TensorBuffer base{"w", {2}, {1.0, 1.0}};
  CHECK(task_vector_tensor(fine, base).values == std::vector<double>{2.0, 3.0});
  CHECK(task_vector_tensor(base, base).values == std::vector<double>{0.0, 0.0});
  CHECK(task_vector_tensor({"w", {1}, {1e8 + 1}}, {"w", {1}, {1e8}}).values == std::vector<double>{1.0});
  CHECK_THROWS_AS(task_vector_tensor({"w", {1}, {1.0}}, base), Error);
}

TEST_CASE("compute_stats on hand-sized checkpoints") {
  TempDir dir;
  write_checkpoint(dir / "base", std::vector<TensorBuffer>{{"w", {2}, {0.0, 0.0}}}, DType::f32);
  write_checkpoint(dir / "model", std::vector<TensorBuffer>{{"w", {2}, {3.0, 4.0}}}, DType::f32);
  const auto base = open_checkpoint(dir / "base");
  const std::vector<CheckpointHandle> models = {open_checkpoint(dir / "model")};
  CHECK(compute_stats(base, models).sq_norms == std::vector<double>{25.0});

  const std::vector<CheckpointHandle> same = {base};
  CHECK(compute_stats(base, same).sq_norms == std::vector<double>{0.0});
}

TEST_CASE("streaming stats match the flat in-memory oracle") {
  TempDir dir;
  struct Case {
    std::size_t tasks, tensors, max_dim;
  };
  const Case cases[] = {{3, 2, 40}, {1, 5, 30}, {8, 6, 64}, {4, 3, 700}};
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    const auto set = testing::random_model_set(c.tasks, testing::layout_of(c.tensors, seed, c.max_dim), seed);
    const auto written = testing::write_model_set(dir, set, "s" + std::to_string(seed));
    const auto handles = open_set(written);
    const std::vector<CheckpointHandle> models(handles.begin() + 1, handles.end());
    const auto stats = compute_stats(handles[0], models, {.want_gram = true});
    const auto oracle = testing::reference::flat_stats(handles);
    for (std::size_t i = 0; i < c.tasks; ++i) {
      CHECK(rel(stats.sq_norms[i], oracle.sq_norms[i]) <= 1e-10);
      CHECK(stats.sq_norms[i] > 0.0);
      // diagonal of the gram is the very same sum
      CHECK((*stats.gram)[i][i] == stats.sq_norms[i]);
      for (std::size_t j = 0; j < c.tasks; ++j) {
        CHECK(std::fabs((*stats.gram)[i][j] - oracle.gram[i][j]) <= 1e-10 * std::sqrt(oracle.sq_norms[i] * oracle.sq_norms[j]));
        CHECK((*stats.gram)[i][j] == (*stats.gram)[j][i]);
        CHECK(std::fabs((*stats.gram)[i][j]) <= std::sqrt(stats.sq_norms[i] * stats.sq_norms[j]) + 1e-9);
      }
    }
    // A second pass over the same files gives identical bits.
    const auto again = compute_stats(handles[0], models);
    for (std::size_t i = 0; i < c.tasks; ++i) {
      CHECK(std::bit_cast<std::uint64_t>(again.sq_norms[i]) == std::bit_cast<std::uint64_t>(stats.sq_norms[i]));
    }
    ++seed;
  }
}

TEST_CASE("missing tensors: lenient counts zero, strict fails") {
  TempDir dir;
  write_checkpoint(dir / "base", std::vector<TensorBuffer>{{"a", {1}, {0.0}}, {"b", {1}, {0.0}}}, DType::f32);
  write_checkpoint(dir / "full", std::vector<TensorBuffer>{{"a", {1}, {1.0}}, {"b", {1}, {2.0}}}, DType::f32);
  write_checkpoint(dir / "partial", std::vector<TensorBuffer>{{"a", {1}, {3.0}}}, DType::f32);
  const auto base = open_checkpoint(dir / "base");
  const std::vector<CheckpointHandle> models = {open_checkpoint(dir / "full"), open_checkpoint(dir / "partial")};
  const auto stats = compute_stats(base, models, {.want_gram = true, .per_tensor = true});
  CHECK(stats.sq_norms == std::vector<double>{5.0, 9.0});
  CHECK(stats.missing == std::vector<std::string>{"b"});
  CHECK((*stats.per_tensor).at("b") == std::vector<double>{4.0, 0.0});
  CHECK_THROWS_AS(compute_stats(base, models, {.strict = true}), Error);
}

TEST_CASE("cosine matrix on constructed vectors") {
  TaskVectorStats axes{{"x", "y"}, {1.0, 1.0}, Matrix{{1.0, 0.0}, {0.0, 1.0}}, std::nullopt, {}};
  const auto c = cosine_matrix(axes);
  CHECK(c.values[0][1] == 0.0);
  CHECK(c.values[0][0] == doctest::Approx(1.0).epsilon(1e-12));

  // t2 = 2 t1 with t1 = (1, 2)
  TaskVectorStats collinear{{"a", "b"}, {5.0, 20.0}, Matrix{{5.0, 10.0}, {10.0, 20.0}}, std::nullopt, {}};
  CHECK(cosine_matrix(collinear).values[0][1] == doctest::Approx(1.0).epsilon(1e-12));

  TaskVectorStats zero{{"a", "b"}, {0.0, 1.0}, Matrix{{0.0, 0.0}, {0.0, 1.0}}, std::nullopt, {}};
  CHECK_THROWS_WITH_AS(cosine_matrix(zero), doctest::Contains("degenerate task vector"), Error);

  TaskVectorStats no_gram{{"a"}, {1.0}, std::nullopt, std::nullopt, {}};
  CHECK_THROWS_AS(cosine_matrix(no_gram), Error);
}

TEST_CASE("random high-dimensional directions are nearly orthogonal") {
  // Spread of the cosine is about 1/sqrt(m) = 1e-3; 0.005 is five sigma.
  constexpr std::size_t m = 1'000'000;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::vector<double> a(m), b(m);
    for (auto& x : a) x = normal(rng);
    for (auto& x : b) x = normal(rng);
    const std::vector<const std::vector<double>*> refs = {&a, &b};
    StatsAccumulator acc({"a", "b"}, true);
    acc.add("v", tensor_partial(refs, true));
    const auto cos = cosine_matrix(std::move(acc).finish());
    CHECK(std::fabs(cos.values[0][1]) < 0.005);
    CHECK(std::fabs(cos.values[0][0] - 1.0) <= 1e-9);
  }
}

TEST_CASE("stats JSON carries 17 significant digits and parses back") {
  TaskVectorStats stats{{"a", "b"}, {1.0 / 3.0, 25.0}, Matrix{{1.0 / 3.0, 0.0}, {0.0, 25.0}}, std::nullopt, {}};
  const auto text = dump_json(stats_to_json(stats, cosine_matrix(stats)));
  CHECK(text.find("0.33333333333333331") != std::string::npos);
  CHECK(text.find("25.0") != std::string::npos);
  CHECK(text.find("\"cosine\"") != std::string::npos);
  const auto back = stats_from_json(Json::parse(text));
  CHECK(back.sq_norms == stats.sq_norms);
  CHECK(back.task_ids == stats.task_ids);
  CHECK(back.digest() == stats.digest());
}
