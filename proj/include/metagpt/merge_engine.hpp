#pragma once

// Streaming task-arithmetic merge: theta_final = theta_0 + sum_t lambda_t * tau_t,
// optionally with TIES (trim / elect sign / disjoint merge) or DARE
// (drop and rescale) applied to each task vector first.
//
// Work proceeds one tensor name at a time. For a given name the engine keeps
// at most T + 2 tensor buffers alive (base, T task vectors, elected signs), so
// memory scales with the largest tensor rather than the model.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metagpt/coefficients.hpp"
#include "metagpt/json_io.hpp"
#include "metagpt/tensor_store.hpp"

namespace metagpt {

enum class MergeMethod { weight_average, task_arithmetic_fixed, metagpt };
enum class Transform { none, ties, dare };
enum class NormSource { raw, transformed };
enum class OutputDType { base, f32 };

std::string_view to_string(MergeMethod v) noexcept;
std::string_view to_string(Transform v) noexcept;
std::string_view to_string(NormSource v) noexcept;
std::string_view to_string(OutputDType v) noexcept;

struct TaskEntry {
  std::string id;
  std::filesystem::path path;
};

struct MergeRecipe {
  std::filesystem::path base;
  std::vector<TaskEntry> tasks;
  MergeMethod method = MergeMethod::metagpt;
  Transform transform = Transform::none;
  double ties_density = 0.55;
  double dare_p = 0.5;
  double fixed_lambda = 0.3;
  std::uint64_t seed = 0;
  bool strict_keys = true;
  NormSource norm_source = NormSource::transformed;
  std::filesystem::path output;
  OutputDType output_dtype = OutputDType::base;

  /// Throws Error(usage) describing the first violated constraint.
  void validate() const;
};

/// Parses a recipe document. Keys are exactly the MergeRecipe field names;
/// unknown keys, wrong types and out-of-range knobs throw Error(usage).
MergeRecipe recipe_from_json(const Json& doc);
MergeRecipe load_recipe(const std::filesystem::path& path);
Json recipe_to_json(const MergeRecipe& recipe);

/// Counts live tensor buffers so the streaming memory bound can be asserted.
class BufferMeter {
 public:
  class Lease {
   public:
    Lease() = default;
    explicit Lease(BufferMeter* meter) : meter_(meter) {}
    Lease(Lease&& other) noexcept : meter_(std::exchange(other.meter_, nullptr)) {}
    Lease& operator=(Lease&& other) noexcept {
      if (this != &other) {
        release();
        meter_ = std::exchange(other.meter_, nullptr);
      }
      return *this;
    }
    Lease(const Lease&) = delete;
    Lease& operator=(const Lease&) = delete;
    ~Lease() { release(); }

    void release() noexcept {
      if (meter_) meter_->drop();
      meter_ = nullptr;
    }

   private:
    BufferMeter* meter_ = nullptr;
  };

  Lease acquire();
  std::size_t live() const noexcept { return live_.load(); }
  std::size_t peak() const noexcept { return peak_.load(); }

 private:
  void drop() noexcept { live_.fetch_sub(1); }

  std::atomic<std::size_t> live_{0};
  std::atomic<std::size_t> peak_{0};
};

// ---- per-tensor transforms ------------------------------------------------

/// k = ceil(density * n), computed with a 1e-9 guard so that products such as
/// 0.55 * 100 are not pushed past an integer by representation error.
std::size_t ties_keep_count(std::size_t element_count, double density);

/// Keeps the k largest-magnitude elements and zeroes the rest. Equal
/// magnitudes at the cut favour the lower flat index.
TensorBuffer ties_trim(const TensorBuffer& tv, double density);
void ties_trim_inplace(std::vector<double>& values, double density);

/// Per element: sign(sum_t lambda_t * v_t), 0 on an exact zero sum.
TensorBuffer ties_elect_sign(std::span<const TensorBuffer> trimmed, std::span<const double> lambdas);

/// Per element: sum of lambda_t * v_t over tasks whose sign matches the
/// elected one; elements with elected sign 0 merge to 0.
TensorBuffer ties_disjoint_merge(std::span<const TensorBuffer> trimmed, const TensorBuffer& signs,
                                 std::span<const double> lambdas);

struct DareKey {
  std::uint64_t seed = 0;
  std::uint64_t task_index = 0;
  std::string_view tensor_name;
};

/// seed ^ fnv1a64(tensor_name) ^ (task_index * 0x9E3779B97F4A7C15).
std::uint64_t dare_stream_seed(const DareKey& key) noexcept;

/// Element e survives iff u_e >= p, where u_e is the e-th unit draw of the
/// SplitMix64 stream for `key`; survivors are scaled by 1 / (1 - p).
TensorBuffer dare_transform(const TensorBuffer& tv, double p, const DareKey& key);
void dare_transform_inplace(std::vector<double>& values, double p, const DareKey& key);

// ---- whole-model merges ---------------------------------------------------

struct MergeOptions {
  std::filesystem::path output;
  OutputDType output_dtype = OutputDType::base;
  bool strict_keys = true;
  BufferMeter* meter = nullptr;
};

/// Plain task arithmetic with caller-supplied coefficients.
CheckpointHandle task_arithmetic_merge(const CheckpointHandle& base, std::span<const CheckpointHandle> models,
                                       const CoefficientSet& coeffs, const MergeOptions& options);

struct MissingTensor {
  std::string name;
  std::vector<std::string> absent_from;  // task ids (or "base")
};

struct MergeReport {
  MergeRecipe recipe;
  CoefficientSet coefficients;
  std::vector<double> raw_sq_norms;
  std::optional<std::vector<double>> transformed_sq_norms;
  std::size_t tensor_count = 0;
  std::vector<std::string> skipped;  // present in some model but not mergeable
  std::vector<MissingTensor> missing;
  std::size_t peak_live_buffers = 0;
  std::size_t buffer_budget = 0;
  double wall_time_ms = 0.0;

  /// Wall time is excluded by default so reports of identical runs are
  /// byte-identical.
  Json to_json(bool include_timing = false) const;
};

struct MergeResult {
  CheckpointHandle output;
  MergeReport report;
};

struct RunOptions {
  BufferMeter* meter = nullptr;
};

/// Transform, measure, weight, combine and write. Any failure leaves no file
/// at recipe.output.
MergeResult run_recipe(const MergeRecipe& recipe, const RunOptions& options = {});

}  // namespace metagpt
