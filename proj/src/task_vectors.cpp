#include "metagpt/task_vectors.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <set>

#include "metagpt/error.hpp"
#include "metagpt/hashing.hpp"

namespace metagpt {

std::string TaskVectorStats::digest() const {
  Fnv1a64 h;
  for (const auto& id : task_ids) {
    h.update(id);
    h.update_byte(0);
  }
  for (double v : sq_norms) h.update_u64(std::bit_cast<std::uint64_t>(v));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h.value()));
  return buf;
}

TensorBuffer task_vector_tensor(const TensorBuffer& fine, const TensorBuffer& base) {
  if (fine.shape != base.shape || fine.values.size() != base.values.size()) {
    throw_data("shape mismatch for '" + fine.name + "': " + shape_string(fine.shape) + " vs base " +
               shape_string(base.shape));
  }
  TensorBuffer out(fine.name, fine.shape, fine.values);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= base.values[i];
  return out;
}

TensorPartial tensor_partial(std::span<const std::vector<double>* const> task_vectors, bool want_gram) {
  const std::size_t T = task_vectors.size();
  TensorPartial partial;
  partial.sq_norms.assign(T, 0.0);
  const auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  };
  if (!want_gram) {
    for (std::size_t t = 0; t < T; ++t) {
      if (task_vectors[t]) partial.sq_norms[t] = dot(*task_vectors[t], *task_vectors[t]);
    }
    return partial;
  }
  Matrix gram(T, std::vector<double>(T, 0.0));
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = i; j < T; ++j) {
      if (!task_vectors[i] || !task_vectors[j]) continue;
      if (task_vectors[i]->size() != task_vectors[j]->size()) throw_data("task vectors differ in length");
      gram[i][j] = gram[j][i] = dot(*task_vectors[i], *task_vectors[j]);
    }
    partial.sq_norms[i] = gram[i][i];
  }
  partial.gram = std::move(gram);
  return partial;
}

StatsAccumulator::StatsAccumulator(std::vector<std::string> task_ids, bool want_gram, bool keep_per_tensor) {
  const std::size_t T = task_ids.size();
  stats_.task_ids = std::move(task_ids);
  stats_.sq_norms.assign(T, 0.0);
  if (want_gram) stats_.gram = Matrix(T, std::vector<double>(T, 0.0));
  if (keep_per_tensor) stats_.per_tensor.emplace();
}

void StatsAccumulator::add(const std::string& tensor_name, const TensorPartial& partial) {
  const std::size_t T = stats_.task_ids.size();
  if (partial.sq_norms.size() != T) throw_usage("partial sums cover the wrong number of tasks");
  for (std::size_t t = 0; t < T; ++t) stats_.sq_norms[t] += partial.sq_norms[t];
  if (stats_.gram) {
    if (!partial.gram) throw_usage("gram requested but partial lacks it");
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) (*stats_.gram)[i][j] += (*partial.gram)[i][j];
    }
  }
  if (stats_.per_tensor) (*stats_.per_tensor)[tensor_name] = partial.sq_norms;
}

TaskVectorStats StatsAccumulator::finish() && { return std::move(stats_); }

TaskVectorStats compute_stats(const CheckpointHandle& base, std::span<const CheckpointHandle> models,
                              std::span<const std::string> task_ids, const StatsOptions& options) {
  if (models.empty()) throw_usage("at least one model is required");
  if (task_ids.size() != models.size()) throw_usage("one task id per model is required");

  std::vector<CheckpointHandle> all{base};
  all.insert(all.end(), models.begin(), models.end());
  const KeyReport keys = validate_compatibility(all);
  if (!keys.shape_mismatch.empty()) {
    throw_data("shape mismatch on tensor '" + keys.shape_mismatch.front() + "'");
  }
  if (options.strict && !keys.missing.empty()) {
    throw_data("tensor '" + keys.missing.front().name + "' is missing from some checkpoints (strict mode)");
  }

  StatsAccumulator acc({task_ids.begin(), task_ids.end()}, options.want_gram, options.per_tensor);
  for (const auto& m : keys.missing) acc.note_missing(m.name);

  const std::size_t T = models.size();
  for (const auto& [name, meta] : base.index()) {
    const TensorBuffer base_tensor = base.read(name);
    if (options.want_gram) {
      std::vector<std::vector<double>> vectors(T);
      std::vector<const std::vector<double>*> refs(T, nullptr);
      for (std::size_t t = 0; t < T; ++t) {
        if (!models[t].contains(name)) continue;
        vectors[t] = task_vector_tensor(models[t].read(name), base_tensor).values;
        refs[t] = &vectors[t];
      }
      acc.add(name, tensor_partial(refs, true));
      continue;
    }
    TensorPartial partial;
    partial.sq_norms.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      if (!models[t].contains(name)) continue;
      const auto tv = task_vector_tensor(models[t].read(name), base_tensor);
      const std::vector<double>* ref = &tv.values;
      partial.sq_norms[t] = tensor_partial(std::span(&ref, 1), false).sq_norms[0];
    }
    acc.add(name, partial);
  }
  return std::move(acc).finish();
}

TaskVectorStats compute_stats(const CheckpointHandle& base, std::span<const CheckpointHandle> models,
                              const StatsOptions& options) {
  std::vector<std::string> ids;
  for (const auto& m : models) ids.push_back(m.path().stem().string());
  std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) {
    for (std::size_t t = 0; t < ids.size(); ++t) ids[t] = "task" + std::to_string(t);
  }
  return compute_stats(base, models, ids, options);
}

CosineMatrix cosine_matrix(const TaskVectorStats& stats) {
  if (!stats.gram) throw_usage("cosine matrix needs the gram matrix (compute stats with gram enabled)");
  const std::size_t T = stats.task_count();
  for (std::size_t t = 0; t < T; ++t) {
    if (!(stats.sq_norms[t] > 0.0)) throw_data("degenerate task vector '" + stats.task_ids[t] + "'");
  }
  CosineMatrix out{stats.task_ids, Matrix(T, std::vector<double>(T, 0.0))};
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      out.values[i][j] = (*stats.gram)[i][j] / std::sqrt(stats.sq_norms[i] * stats.sq_norms[j]);
    }
  }
  return out;
}

Json stats_to_json(const TaskVectorStats& stats, const std::optional<CosineMatrix>& cosine) {
  Json doc;
  doc["tasks"] = stats.task_ids;
  doc["sq_norms"] = stats.sq_norms;
  if (cosine) doc["cosine"] = cosine->values;
  if (stats.gram) doc["gram"] = *stats.gram;
  doc["missing"] = stats.missing;
  doc["digest"] = stats.digest();
  return doc;
}

TaskVectorStats stats_from_json(const Json& doc) {
  try {
    TaskVectorStats stats;
    stats.task_ids = doc.at("tasks").get<std::vector<std::string>>();
    stats.sq_norms = doc.at("sq_norms").get<std::vector<double>>();
    if (doc.contains("gram")) stats.gram = doc.at("gram").get<Matrix>();
    if (doc.contains("missing")) stats.missing = doc.at("missing").get<std::vector<std::string>>();
    if (stats.task_ids.size() != stats.sq_norms.size()) throw_usage("stats: tasks and sq_norms differ in length");
    return stats;
  } catch (const Json::exception& e) {
    throw_usage(std::string("stats file: ") + e.what());
  }
}

}  // namespace metagpt
