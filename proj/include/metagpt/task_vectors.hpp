#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metagpt/json_io.hpp"
#include "metagpt/tensor_store.hpp"

namespace metagpt {

using Matrix = std::vector<std::vector<double>>;

/// Sufficient statistics of a set of task vectors (fine-tuned minus base).
struct TaskVectorStats {
  std::vector<std::string> task_ids;
  std::vector<double> sq_norms;
  std::optional<Matrix> gram;
  std::optional<std::map<std::string, std::vector<double>>> per_tensor;
  /// Names skipped or zero-filled under the lenient key policy.
  std::vector<std::string> missing;

  std::size_t task_count() const noexcept { return task_ids.size(); }
  /// FNV-1a over task ids and the bit patterns of sq_norms.
  std::string digest() const;
};

struct CosineMatrix {
  std::vector<std::string> task_ids;
  Matrix values;
};

/// Element-wise fine - base. Throws Error(data) on shape mismatch.
TensorBuffer task_vector_tensor(const TensorBuffer& fine, const TensorBuffer& base);

/// Per-tensor partial sums. Reduction within a tensor is sequential in element
/// order; a null entry stands for an all-zero task vector.
struct TensorPartial {
  std::vector<double> sq_norms;
  std::optional<Matrix> gram;
};
TensorPartial tensor_partial(std::span<const std::vector<double>* const> task_vectors, bool want_gram);

/// Folds per-tensor partials in call order. Callers feed tensors in sorted
/// name order so the result is reproducible bit for bit.
class StatsAccumulator {
 public:
  StatsAccumulator(std::vector<std::string> task_ids, bool want_gram, bool keep_per_tensor = false);

  void add(const std::string& tensor_name, const TensorPartial& partial);
  void note_missing(std::string name) { stats_.missing.push_back(std::move(name)); }
  TaskVectorStats finish() &&;

 private:
  TaskVectorStats stats_;
};

struct StatsOptions {
  bool want_gram = false;
  /// Strict: any name absent from some model is an error. Lenient: it counts
  /// as zero for that model and is reported.
  bool strict = false;
  bool per_tensor = false;
};

/// Streams over the base and model checkpoints tensor by tensor. At most the
/// base plus one model tensor (plus all T task vectors when the gram matrix is
/// requested) are resident at once.
TaskVectorStats compute_stats(const CheckpointHandle& base, std::span<const CheckpointHandle> models,
                              std::span<const std::string> task_ids, const StatsOptions& options = {});
TaskVectorStats compute_stats(const CheckpointHandle& base, std::span<const CheckpointHandle> models,
                              const StatsOptions& options = {});

/// Throws Error(data) "degenerate task vector" for a zero norm and
/// Error(usage) when the gram matrix is absent.
CosineMatrix cosine_matrix(const TaskVectorStats& stats);

Json stats_to_json(const TaskVectorStats& stats, const std::optional<CosineMatrix>& cosine = std::nullopt);
TaskVectorStats stats_from_json(const Json& doc);

}  // namespace metagpt
