#pragma once

// Checkpoint container I/O.
//
// Layout: an 8-byte little-endian header length N, N bytes of UTF-8 JSON that
// maps each tensor name to {"dtype", "shape", "data_offsets"} (plus an optional
// "__metadata__" string map), then the raw little-endian data section. Offsets
// are relative to the start of the data section.
//
// Opening a checkpoint reads only the header. Tensor payloads are decoded on
// demand by read_tensor() and widened to double.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace metagpt {

enum class DType { f32, f16, bf16 };

std::size_t dtype_size(DType dtype) noexcept;
std::string_view dtype_name(DType dtype) noexcept;
/// Throws Error(data) "unsupported dtype" for anything but F32/F16/BF16.
DType parse_dtype(std::string_view tag);

using Shape = std::vector<std::uint64_t>;
std::uint64_t element_count(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

struct ByteRange {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::uint64_t size() const noexcept { return end - begin; }
  friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

struct TensorMeta {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  ByteRange range;

  std::uint64_t element_count() const noexcept { return metagpt::element_count(shape); }
};

struct TensorBuffer {
  std::string name;
  Shape shape;
  std::vector<double> values;

  TensorBuffer() = default;
  TensorBuffer(std::string name_, Shape shape_, std::vector<double> values_);
  /// Zero-filled buffer of the given shape.
  TensorBuffer(std::string name_, Shape shape_);

  std::size_t size() const noexcept { return values.size(); }
};

using Metadata = std::map<std::string, std::string>;

// Element codecs. Encoding rounds to nearest-even; overflow past the largest
// finite value of the target type throws Error(data) "overflow for dtype".
double decode_f16(std::uint16_t bits) noexcept;
double decode_bf16(std::uint16_t bits) noexcept;
std::uint16_t encode_f16(double value);
std::uint16_t encode_bf16(double value);
float encode_f32(double value);

/// Immutable view of a checkpoint on disk. Copies share the same index and
/// byte counter; concurrent read_tensor() calls are safe.
class CheckpointHandle {
 public:
  static CheckpointHandle open(const std::filesystem::path& path);

  const std::filesystem::path& path() const noexcept { return state_->path; }
  /// Sorted by name.
  const std::map<std::string, TensorMeta, std::less<>>& index() const noexcept { return state_->index; }
  const Metadata& metadata() const noexcept { return state_->metadata; }
  std::uint64_t total_params() const noexcept { return state_->total_params; }
  std::uint64_t data_offset() const noexcept { return state_->data_offset; }

  bool contains(std::string_view name) const { return state_->index.find(name) != state_->index.end(); }
  /// Throws Error(usage) for unknown names.
  const TensorMeta& meta(std::string_view name) const;
  std::vector<std::string> names() const;

  TensorBuffer read(std::string_view name) const;

  /// Bytes pulled from disk through this handle so far (header + payloads).
  std::uint64_t bytes_read() const noexcept { return state_->bytes_read.load(); }

 private:
  struct State {
    std::filesystem::path path;
    std::map<std::string, TensorMeta, std::less<>> index;
    Metadata metadata;
    std::uint64_t total_params = 0;
    std::uint64_t data_offset = 0;
    mutable std::atomic<std::uint64_t> bytes_read{0};
  };

  explicit CheckpointHandle(std::shared_ptr<State> state) : state_(std::move(state)) {}

  std::shared_ptr<State> state_;
};

CheckpointHandle open_checkpoint(const std::filesystem::path& path);
TensorBuffer read_tensor(const CheckpointHandle& handle, std::string_view name);

struct TensorSpec {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
};

/// Streams a checkpoint to disk one tensor at a time.
///
/// The full header is known up front (names, dtypes, shapes), so payloads can
/// be appended in sorted-name order without holding the model in memory. The
/// file is staged under a temporary name and only renamed into place by
/// commit(); destroying an uncommitted writer removes the staging file.
class CheckpointWriter {
 public:
  CheckpointWriter(std::filesystem::path path, std::vector<TensorSpec> specs, Metadata metadata = {});
  ~CheckpointWriter();

  CheckpointWriter(const CheckpointWriter&) = delete;
  CheckpointWriter& operator=(const CheckpointWriter&) = delete;

  /// Name of the next tensor expected by write(), or nullopt when complete.
  std::optional<std::string_view> next_name() const;
  void write(const TensorBuffer& tensor);
  void commit();

  const std::filesystem::path& staging_path() const noexcept { return staging_; }

 private:
  std::filesystem::path path_;
  std::filesystem::path staging_;
  std::vector<TensorSpec> specs_;
  std::size_t next_ = 0;
  bool committed_ = false;
  struct File;
  std::unique_ptr<File> file_;
};

/// Writes all tensors with a single storage dtype. Names must be unique and
/// values finite; the header is serialized deterministically.
void write_checkpoint(const std::filesystem::path& path, std::span<const TensorBuffer> tensors, DType dtype,
                      const Metadata& metadata = {});

/// Serialized header bytes (JSON, space-padded to a multiple of 8).
std::string serialize_header(std::span<const TensorSpec> sorted_specs, const Metadata& metadata);

struct MissingKey {
  std::string name;
  std::vector<std::size_t> absent_from;  // handle positions lacking the name
};

struct KeyReport {
  std::vector<std::string> common;          // present in every handle
  std::vector<MissingKey> missing;          // present somewhere, absent elsewhere
  std::vector<std::string> shape_mismatch;  // common names with differing shapes
  std::vector<std::string> dtype_mismatch;  // common names with differing dtypes

  bool keys_match() const noexcept { return missing.empty() && shape_mismatch.empty(); }
};

/// Report-only comparison of tensor indices. Requires at least two handles.
KeyReport validate_compatibility(std::span<const CheckpointHandle> handles);

}  // namespace metagpt
