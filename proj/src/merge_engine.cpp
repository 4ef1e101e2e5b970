#include "metagpt/merge_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "metagpt/error.hpp"
#include "metagpt/hashing.hpp"
#include "metagpt/task_vectors.hpp"

namespace metagpt {

std::string_view to_string(MergeMethod v) noexcept {
  switch (v) {
    case MergeMethod::weight_average:
      return "weight_average";
    case MergeMethod::task_arithmetic_fixed:
      return "task_arithmetic_fixed";
    case MergeMethod::metagpt:
      return "metagpt";
  }
  return "?";
}

std::string_view to_string(Transform v) noexcept {
  switch (v) {
    case Transform::none:
      return "none";
    case Transform::ties:
      return "ties";
    case Transform::dare:
      return "dare";
  }
  return "?";
}

std::string_view to_string(NormSource v) noexcept { return v == NormSource::raw ? "raw" : "transformed"; }
std::string_view to_string(OutputDType v) noexcept { return v == OutputDType::base ? "base" : "F32"; }

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view field, std::string_view text, const std::array<Enum, N>& options) {
  for (Enum e : options) {
    if (to_string(e) == text) return e;
  }
  std::string allowed;
  for (Enum e : options) allowed += (allowed.empty() ? "" : ", ") + std::string(to_string(e));
  throw_usage(std::string(field) + ": unknown value '" + std::string(text) + "' (expected one of " + allowed + ")");
}

}  // namespace

// ---------------------------------------------------------------------------
// Recipe

void MergeRecipe::validate() const {
  if (base.empty()) throw_usage("recipe: base path is empty");
  if (output.empty()) throw_usage("recipe: output path is empty");
  if (tasks.empty()) throw_usage("recipe: tasks must be non-empty");
  std::set<std::string> ids;
  for (const auto& task : tasks) {
    if (task.id.empty()) throw_usage("recipe: task id is empty");
    if (task.path.empty()) throw_usage("recipe: task '" + task.id + "' has no path");
    if (!ids.insert(task.id).second) throw_usage("recipe: duplicate task id '" + task.id + "'");
    if (task.path == output) throw_usage("recipe: output would overwrite task '" + task.id + "'");
  }
  if (base == output) throw_usage("recipe: output would overwrite the base checkpoint");
  if (!(ties_density > 0.0 && ties_density <= 1.0)) throw_usage("recipe: ties_density out of range (0, 1]");
  if (!(dare_p >= 0.0 && dare_p < 1.0)) throw_usage("recipe: dare_p out of range [0, 1)");
  if (!std::isfinite(fixed_lambda)) throw_usage("recipe: fixed_lambda must be finite");
}

MergeRecipe recipe_from_json(const Json& doc) {
  static const std::set<std::string> known = {"base",   "tasks",        "method",      "transform",
                                              "ties_density", "dare_p", "fixed_lambda", "seed",
                                              "strict_keys",  "norm_source", "output",   "output_dtype"};
  if (!doc.is_object()) throw_usage("recipe: top level must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) throw_usage("recipe: unknown key '" + key + "'");
  }
  MergeRecipe r;
  try {
    r.base = doc.at("base").get<std::string>();
    r.output = doc.at("output").get<std::string>();
    r.method = parse_enum("method", doc.at("method").get<std::string>(),
                          std::array{MergeMethod::weight_average, MergeMethod::task_arithmetic_fixed, MergeMethod::metagpt});
    const auto& tasks = doc.at("tasks");
    if (!tasks.is_array()) throw_usage("recipe: tasks must be an array");
    for (const auto& t : tasks) {
      if (!t.is_object() || t.size() != 2) throw_usage("recipe: each task must be {\"id\", \"path\"}");
      r.tasks.push_back({t.at("id").get<std::string>(), t.at("path").get<std::string>()});
    }
    if (doc.contains("transform")) {
      r.transform = parse_enum("transform", doc.at("transform").get<std::string>(),
                               std::array{Transform::none, Transform::ties, Transform::dare});
    }
    if (doc.contains("ties_density")) r.ties_density = doc.at("ties_density").get<double>();
    if (doc.contains("dare_p")) r.dare_p = doc.at("dare_p").get<double>();
    if (doc.contains("fixed_lambda")) r.fixed_lambda = doc.at("fixed_lambda").get<double>();
    if (doc.contains("seed")) {
      const auto& s = doc.at("seed");
      if (!s.is_number_unsigned()) throw_usage("recipe: seed must be a non-negative integer");
      r.seed = s.get<std::uint64_t>();
    }
    if (doc.contains("strict_keys")) {
      if (!doc.at("strict_keys").is_boolean()) throw_usage("recipe: strict_keys must be a boolean");
      r.strict_keys = doc.at("strict_keys").get<bool>();
    }
    if (doc.contains("norm_source")) {
      r.norm_source = parse_enum("norm_source", doc.at("norm_source").get<std::string>(),
                                 std::array{NormSource::raw, NormSource::transformed});
    }
    if (doc.contains("output_dtype")) {
      r.output_dtype = parse_enum("output_dtype", doc.at("output_dtype").get<std::string>(),
                                  std::array{OutputDType::base, OutputDType::f32});
    }
  } catch (const Json::exception& e) {
    throw_usage(std::string("recipe: ") + e.what());
  }
  r.validate();
  return r;
}

MergeRecipe load_recipe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw_usage("cannot read recipe '" + path.string() + "'");
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::exception& e) {
    throw_usage("recipe '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return recipe_from_json(doc);
}

Json recipe_to_json(const MergeRecipe& r) {
  Json doc;
  doc["base"] = r.base.string();
  doc["tasks"] = Json::array();
  for (const auto& t : r.tasks) doc["tasks"].push_back({{"id", t.id}, {"path", t.path.string()}});
  doc["method"] = to_string(r.method);
  doc["transform"] = to_string(r.transform);
  doc["ties_density"] = r.ties_density;
  doc["dare_p"] = r.dare_p;
  doc["fixed_lambda"] = r.fixed_lambda;
  doc["seed"] = r.seed;
  doc["strict_keys"] = r.strict_keys;
  doc["norm_source"] = to_string(r.norm_source);
  doc["output"] = r.output.string();
  doc["output_dtype"] = to_string(r.output_dtype);
  return doc;
}

// ---------------------------------------------------------------------------
// Buffer accounting

BufferMeter::Lease BufferMeter::acquire() {
  const std::size_t now = live_.fetch_add(1) + 1;
  std::size_t prev = peak_.load();
  while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
  }
  return Lease(this);
}

// ---------------------------------------------------------------------------
// TIES

std::size_t ties_keep_count(std::size_t element_count, double density) {
  if (!(density > 0.0 && density <= 1.0)) throw_usage("density out of range (0, 1]");
  if (element_count == 0) return 0;
  const double raw = std::ceil(density * static_cast<double>(element_count) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 1.0)), 1, element_count);
}

void ties_trim_inplace(std::vector<double>& values, double density) {
  const std::size_t n = values.size();
  const std::size_t k = ties_keep_count(n, density);
  if (k >= n) return;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto ranks_before = [&](std::size_t a, std::size_t b) {
    const double ma = std::fabs(values[a]);
    const double mb = std::fabs(values[b]);
    return ma > mb || (ma == mb && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), ranks_before);
  for (std::size_t i = k; i < n; ++i) values[order[i]] = 0.0;
}

TensorBuffer ties_trim(const TensorBuffer& tv, double density) {
  TensorBuffer out = tv;
  ties_trim_inplace(out.values, density);
  return out;
}

namespace {

void check_aligned(std::span<const TensorBuffer> trimmed, std::span<const double> lambdas) {
  if (trimmed.empty()) throw_usage("TIES needs at least one task vector");
  if (trimmed.size() != lambdas.size()) throw_usage("TIES: one coefficient per task vector is required");
  for (const auto& tv : trimmed) {
    if (tv.shape != trimmed.front().shape) throw_data("TIES: task vectors for '" + tv.name + "' differ in shape");
  }
}

int sign_of(double v) noexcept { return (v > 0.0) - (v < 0.0); }

// Elected signs in `inout` are replaced by the merged values.
void disjoint_merge_into(std::span<const TensorBuffer* const> trimmed, std::span<const double> lambdas,
                         std::vector<double>& inout) {
  for (std::size_t e = 0; e < inout.size(); ++e) {
    const int elected = sign_of(inout[e]);
    double acc = 0.0;
    if (elected != 0) {
      for (std::size_t t = 0; t < trimmed.size(); ++t) {
        if (!trimmed[t]) continue;
        const double v = trimmed[t]->values[e];
        if (sign_of(v) == elected) acc += lambdas[t] * v;
      }
    }
    inout[e] = acc;
  }
}

void elect_sign_into(std::span<const TensorBuffer* const> trimmed, std::span<const double> lambdas,
                     std::vector<double>& out) {
  for (std::size_t e = 0; e < out.size(); ++e) {
    double sum = 0.0;
    for (std::size_t t = 0; t < trimmed.size(); ++t) {
      if (trimmed[t]) sum += lambdas[t] * trimmed[t]->values[e];
    }
    out[e] = static_cast<double>(sign_of(sum));
  }
}

std::vector<const TensorBuffer*> pointers(std::span<const TensorBuffer> buffers) {
  std::vector<const TensorBuffer*> out;
  for (const auto& b : buffers) out.push_back(&b);
  return out;
}

}  // namespace

TensorBuffer ties_elect_sign(std::span<const TensorBuffer> trimmed, std::span<const double> lambdas) {
  check_aligned(trimmed, lambdas);
  TensorBuffer signs(trimmed.front().name, trimmed.front().shape);
  elect_sign_into(pointers(trimmed), lambdas, signs.values);
  return signs;
}

TensorBuffer ties_disjoint_merge(std::span<const TensorBuffer> trimmed, const TensorBuffer& signs,
                                 std::span<const double> lambdas) {
  check_aligned(trimmed, lambdas);
  if (signs.shape != trimmed.front().shape) throw_data("TIES: sign tensor shape does not match task vectors");
  TensorBuffer out = signs;
  disjoint_merge_into(pointers(trimmed), lambdas, out.values);
  return out;
}

// ---------------------------------------------------------------------------
// DARE

std::uint64_t dare_stream_seed(const DareKey& key) noexcept {
  return key.seed ^ fnv1a64(key.tensor_name) ^ (key.task_index * SplitMix64::kGamma);
}

void dare_transform_inplace(std::vector<double>& values, double p, const DareKey& key) {
  if (!(p >= 0.0 && p < 1.0)) throw_usage("dare_p out of range [0, 1)");
  if (p == 0.0) return;
  const double scale = 1.0 / (1.0 - p);
  SplitMix64 stream(dare_stream_seed(key));
  for (double& v : values) {
    v = stream.next_unit() >= p ? v * scale : 0.0;
  }
}

TensorBuffer dare_transform(const TensorBuffer& tv, double p, const DareKey& key) {
  TensorBuffer out = tv;
  dare_transform_inplace(out.values, p, key);
  return out;
}

// ---------------------------------------------------------------------------
// Streaming engine

namespace {

struct EngineConfig {
  Transform transform = Transform::none;
  double ties_density = 1.0;
  double dare_p = 0.0;
  std::uint64_t seed = 0;
  bool strict = true;
  std::filesystem::path output;
  OutputDType output_dtype = OutputDType::base;
  Metadata metadata;
};

struct Leased {
  BufferMeter::Lease lease;
  TensorBuffer tensor;
};

class MergeSession {
 public:
  MergeSession(CheckpointHandle base, std::vector<CheckpointHandle> models, std::vector<std::string> ids,
               EngineConfig config, BufferMeter& meter)
      : base_(std::move(base)),
        models_(std::move(models)),
        ids_(std::move(ids)),
        config_(std::move(config)),
        meter_(meter),
        raw_(ids_, false),
        transformed_(ids_, false) {
    std::vector<CheckpointHandle> all{base_};
    all.insert(all.end(), models_.begin(), models_.end());
    const KeyReport keys = validate_compatibility(all);
    if (config_.strict) {
      if (!keys.missing.empty()) {
        throw_data("tensor '" + keys.missing.front().name + "' is not present in every checkpoint (strict_keys)");
      }
      if (!keys.shape_mismatch.empty()) throw_data("shape mismatch on tensor '" + keys.shape_mismatch.front() + "'");
    }
    for (const auto& m : keys.missing) {
      if (!base_.contains(m.name)) {
        skipped_.push_back(m.name);
        continue;
      }
      MissingTensor entry{m.name, {}};
      for (std::size_t pos : m.absent_from) entry.absent_from.push_back(ids_[pos - 1]);
      missing_.push_back(std::move(entry));
    }
    for (const auto& name : keys.shape_mismatch) skipped_.push_back(name + " (shape mismatch)");
  }

  /// Norm pass without writing anything.
  void measure() {
    for (const auto& [name, _] : base_.index()) {
      Leased base_tensor = load_base(name);
      TensorPartial raw_part = zero_partial();
      TensorPartial tr_part = zero_partial();
      for (std::size_t t = 0; t < models_.size(); ++t) {
        auto tv = prepare(base_tensor.tensor, t, name, raw_part, tr_part);
      }
      raw_.add(name, raw_part);
      transformed_.add(name, tr_part);
    }
    measured_ = true;
  }

  void merge(std::span<const double> lambdas) {
    std::vector<TensorSpec> specs;
    for (const auto& [name, meta] : base_.index()) {
      specs.push_back({name, config_.output_dtype == OutputDType::f32 ? DType::f32 : meta.dtype, meta.shape});
    }
    CheckpointWriter writer(config_.output, std::move(specs), config_.metadata);
    const std::size_t T = models_.size();
    for (const auto& [name, _] : base_.index()) {
      Leased out = load_base(name);
      TensorPartial raw_part = zero_partial();
      TensorPartial tr_part = zero_partial();
      if (config_.transform == Transform::ties) {
        std::vector<std::optional<Leased>> tvs(T);
        std::vector<const TensorBuffer*> refs(T, nullptr);
        for (std::size_t t = 0; t < T; ++t) {
          tvs[t] = prepare(out.tensor, t, name, raw_part, tr_part);
          if (tvs[t]) refs[t] = &tvs[t]->tensor;
        }
        Leased merged{meter_.acquire(), TensorBuffer(name, out.tensor.shape)};
        elect_sign_into(refs, lambdas, merged.tensor.values);
        disjoint_merge_into(refs, lambdas, merged.tensor.values);
        tvs.clear();
        for (std::size_t e = 0; e < out.tensor.values.size(); ++e) out.tensor.values[e] += merged.tensor.values[e];
      } else {
        Leased acc{meter_.acquire(), TensorBuffer(name, out.tensor.shape)};
        for (std::size_t t = 0; t < T; ++t) {
          auto tv = prepare(out.tensor, t, name, raw_part, tr_part);
          if (!tv) continue;
          const auto& v = tv->tensor.values;
          for (std::size_t e = 0; e < v.size(); ++e) acc.tensor.values[e] += lambdas[t] * v[e];
        }
        for (std::size_t e = 0; e < out.tensor.values.size(); ++e) out.tensor.values[e] += acc.tensor.values[e];
      }
      if (!measured_) {
        raw_.add(name, raw_part);
        transformed_.add(name, tr_part);
      }
      writer.write(out.tensor);
    }
    writer.commit();
    measured_ = true;
  }

  TaskVectorStats raw_stats() { return finish(raw_); }
  TaskVectorStats transformed_stats() { return finish(transformed_); }
  const std::vector<std::string>& skipped() const { return skipped_; }
  const std::vector<MissingTensor>& missing() const { return missing_; }
  std::size_t tensor_count() const { return base_.index().size(); }

 private:
  TaskVectorStats finish(const StatsAccumulator& acc) {
    StatsAccumulator copy = acc;
    auto stats = std::move(copy).finish();
    for (const auto& m : missing_) stats.missing.push_back(m.name);
    return stats;
  }

  TensorPartial zero_partial() const {
    TensorPartial p;
    p.sq_norms.assign(models_.size(), 0.0);
    return p;
  }

  Leased load_base(const std::string& name) { return {meter_.acquire(), base_.read(name)}; }

  // Loads model t's tensor, turns it into its (transformed) task vector in
  // place and records both squared norms. nullopt means a zero task vector.
  std::optional<Leased> prepare(const TensorBuffer& base_tensor, std::size_t t, const std::string& name,
                                TensorPartial& raw_part, TensorPartial& tr_part) {
    const CheckpointHandle& model = models_[t];
    if (!model.contains(name) || model.meta(name).shape != base_tensor.shape) return std::nullopt;
    Leased tv{meter_.acquire(), model.read(name)};
    auto& v = tv.tensor.values;
    double raw_sq = 0.0;
    for (std::size_t e = 0; e < v.size(); ++e) {
      v[e] -= base_tensor.values[e];
      raw_sq += v[e] * v[e];
    }
    raw_part.sq_norms[t] = raw_sq;
    switch (config_.transform) {
      case Transform::none:
        tr_part.sq_norms[t] = raw_sq;
        return tv;
      case Transform::ties:
        ties_trim_inplace(v, config_.ties_density);
        break;
      case Transform::dare:
        dare_transform_inplace(v, config_.dare_p, {config_.seed, t, name});
        break;
    }
    double tr_sq = 0.0;
    for (double x : v) tr_sq += x * x;
    tr_part.sq_norms[t] = tr_sq;
    return tv;
  }

  CheckpointHandle base_;
  std::vector<CheckpointHandle> models_;
  std::vector<std::string> ids_;
  EngineConfig config_;
  BufferMeter& meter_;
  StatsAccumulator raw_;
  StatsAccumulator transformed_;
  std::vector<std::string> skipped_;
  std::vector<MissingTensor> missing_;
  bool measured_ = false;
};

std::vector<CheckpointHandle> open_all(std::span<const TaskEntry> tasks) {
  std::vector<CheckpointHandle> out;
  for (const auto& t : tasks) out.push_back(open_checkpoint(t.path));
  return out;
}

}  // namespace

CheckpointHandle task_arithmetic_merge(const CheckpointHandle& base, std::span<const CheckpointHandle> models,
                                       const CoefficientSet& coeffs, const MergeOptions& options) {
  if (models.empty()) throw_usage("at least one model is required");
  if (coeffs.size() != models.size()) throw_usage("one coefficient per model is required");
  if (options.output.empty()) throw_usage("output path is empty");
  std::vector<std::string> ids = coeffs.task_ids;
  if (ids.size() != models.size()) ids = fixed_coefficients(models.size(), 0.0).task_ids;
  BufferMeter local;
  EngineConfig config;
  config.strict = options.strict_keys;
  config.output = options.output;
  config.output_dtype = options.output_dtype;
  MergeSession session(base, {models.begin(), models.end()}, std::move(ids), std::move(config),
                       options.meter ? *options.meter : local);
  session.merge(coeffs.lambdas);
  return open_checkpoint(options.output);
}

MergeResult run_recipe(const MergeRecipe& recipe, const RunOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  recipe.validate();
  std::vector<std::string> ids;
  for (const auto& t : recipe.tasks) ids.push_back(t.id);

  EngineConfig config;
  config.transform = recipe.transform;
  config.ties_density = recipe.ties_density;
  config.dare_p = recipe.dare_p;
  config.seed = recipe.seed;
  config.strict = recipe.strict_keys;
  config.output = recipe.output;
  config.output_dtype = recipe.output_dtype;
  config.metadata = {{"merge_method", std::string(to_string(recipe.method))},
                     {"transform", std::string(to_string(recipe.transform))}};

  BufferMeter local;
  BufferMeter& meter = options.meter ? *options.meter : local;
  MergeSession session(open_checkpoint(recipe.base), open_all(recipe.tasks), ids, std::move(config), meter);

  CoefficientSet coeffs;
  switch (recipe.method) {
    case MergeMethod::metagpt: {
      session.measure();
      const auto stats = recipe.norm_source == NormSource::raw || recipe.transform == Transform::none
                             ? session.raw_stats()
                             : session.transformed_stats();
      coeffs = metagpt_coefficients(stats);
      break;
    }
    case MergeMethod::task_arithmetic_fixed:
      coeffs = fixed_coefficients(ids, recipe.fixed_lambda);
      break;
    case MergeMethod::weight_average:
      coeffs = weight_average_coefficients(ids);
      break;
  }
  session.merge(coeffs.lambdas);

  MergeReport report;
  report.recipe = recipe;
  report.coefficients = coeffs;
  report.raw_sq_norms = session.raw_stats().sq_norms;
  if (recipe.transform != Transform::none) report.transformed_sq_norms = session.transformed_stats().sq_norms;
  report.tensor_count = session.tensor_count();
  report.skipped = session.skipped();
  report.missing = session.missing();
  report.peak_live_buffers = meter.peak();
  report.buffer_budget = recipe.tasks.size() + 2;
  report.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return {open_checkpoint(recipe.output), std::move(report)};
}

Json MergeReport::to_json(bool include_timing) const {
  Json doc;
  doc["recipe"] = recipe_to_json(recipe);
  doc["coefficients"] = coefficients_to_json(coefficients);
  doc["sq_norms"]["raw"] = raw_sq_norms;
  if (transformed_sq_norms) doc["sq_norms"]["transformed"] = *transformed_sq_norms;
  doc["tensor_count"] = tensor_count;
  doc["skipped"] = skipped;
  doc["missing"] = Json::array();
  for (const auto& m : missing) doc["missing"].push_back({{"name", m.name}, {"absent_from", m.absent_from}});
  doc["peak_live_buffers"] = peak_live_buffers;
  doc["buffer_budget"] = buffer_budget;
  if (include_timing) doc["wall_time_ms"] = wall_time_ms;
  return doc;
}

}  // namespace metagpt
