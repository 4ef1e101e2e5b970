#include "metagpt/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "json.hpp"
#include "metagpt/error.hpp"

namespace metagpt {
namespace {

constexpr std::string_view kMetadataKey = "__metadata__";

template <int ExpBits, int MantBits>
double decode_minifloat(std::uint32_t bits) noexcept {
  constexpr std::uint32_t exp_mask = (1u << ExpBits) - 1;
  constexpr std::uint32_t mant_mask = (1u << MantBits) - 1;
  constexpr int bias = (1 << (ExpBits - 1)) - 1;
  const bool negative = (bits >> (ExpBits + MantBits)) & 1u;
  const std::uint32_t exponent = (bits >> MantBits) & exp_mask;
  const std::uint32_t mantissa = bits & mant_mask;
  double magnitude;
  if (exponent == 0) {
    magnitude = std::ldexp(static_cast<double>(mantissa), 1 - bias - MantBits);
  } else if (exponent == exp_mask) {
    magnitude = mantissa == 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
  } else {
    magnitude = std::ldexp(static_cast<double>(mantissa | (1u << MantBits)), static_cast<int>(exponent) - bias - MantBits);
  }
  return negative ? -magnitude : magnitude;
}

template <int ExpBits, int MantBits>
std::uint16_t encode_minifloat(double value, std::string_view dtype) {
  constexpr int bias = (1 << (ExpBits - 1)) - 1;
  constexpr std::uint32_t exp_max = (1u << ExpBits) - 1;
  if (!std::isfinite(value)) throw_data("non-finite value cannot be stored");
  const std::uint32_t sign = std::signbit(value) ? (1u << (ExpBits + MantBits)) : 0u;
  const double magnitude = std::fabs(value);
  if (magnitude == 0.0) return static_cast<std::uint16_t>(sign);

  int exp2 = 0;
  std::frexp(magnitude, &exp2);
  int unbiased = exp2 - 1;
  if (unbiased < 1 - bias) {
    // Subnormal; a carry into 1 << MantBits lands on the smallest normal.
    const auto scaled = static_cast<std::uint32_t>(std::nearbyint(std::ldexp(magnitude, bias - 1 + MantBits)));
    return static_cast<std::uint16_t>(sign | scaled);
  }
  auto scaled = static_cast<std::uint32_t>(std::nearbyint(std::ldexp(magnitude, MantBits - unbiased)));
  if (scaled == (2u << MantBits)) {
    scaled = 1u << MantBits;
    ++unbiased;
  }
  const auto field = static_cast<std::uint32_t>(unbiased + bias);
  if (field >= exp_max) throw_data("overflow for dtype " + std::string(dtype));
  return static_cast<std::uint16_t>(sign | (field << MantBits) | (scaled - (1u << MantBits)));
}

std::uint64_t load_le(const unsigned char* p, std::size_t width) noexcept {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void store_le(unsigned char* p, std::uint64_t v, std::size_t width) noexcept {
  for (std::size_t i = 0; i < width; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

double decode_element(const unsigned char* p, DType dtype) noexcept {
  switch (dtype) {
    case DType::f32:
      return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(load_le(p, 4))));
    case DType::f16:
      return decode_f16(static_cast<std::uint16_t>(load_le(p, 2)));
    case DType::bf16:
      return decode_bf16(static_cast<std::uint16_t>(load_le(p, 2)));
  }
  return 0.0;
}

void encode_element(unsigned char* p, double value, DType dtype) {
  switch (dtype) {
    case DType::f32:
      store_le(p, std::bit_cast<std::uint32_t>(encode_f32(value)), 4);
      return;
    case DType::f16:
      store_le(p, encode_f16(value), 2);
      return;
    case DType::bf16:
      store_le(p, encode_bf16(value), 2);
      return;
  }
}

std::uint64_t as_u64(const nlohmann::json& v, const std::string& what) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw_data("malformed header: " + what + " must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

TensorMeta parse_entry(const std::string& name, const nlohmann::json& entry) {
  if (!entry.is_object()) throw_data("malformed header: entry '" + name + "' is not an object");
  const auto dtype = entry.find("dtype");
  const auto shape = entry.find("shape");
  const auto offsets = entry.find("data_offsets");
  if (dtype == entry.end() || shape == entry.end() || offsets == entry.end()) {
    throw_data("malformed header: entry '" + name + "' lacks dtype, shape or data_offsets");
  }
  if (!dtype->is_string()) throw_data("malformed header: dtype of '" + name + "' is not a string");
  if (!shape->is_array()) throw_data("malformed header: shape of '" + name + "' is not an array");
  if (!offsets->is_array() || offsets->size() != 2) {
    throw_data("malformed header: data_offsets of '" + name + "' must hold two integers");
  }
  TensorMeta meta;
  meta.name = name;
  meta.dtype = parse_dtype(dtype->get<std::string>());
  for (const auto& dim : *shape) meta.shape.push_back(as_u64(dim, "shape of '" + name + "'"));
  meta.range = {as_u64((*offsets)[0], "data_offsets"), as_u64((*offsets)[1], "data_offsets")};
  if (meta.range.end < meta.range.begin) throw_data("malformed header: inverted data_offsets for '" + name + "'");
  if (meta.range.size() != meta.element_count() * dtype_size(meta.dtype)) {
    throw_data("malformed header: byte length of '" + name + "' does not match shape " + shape_string(meta.shape));
  }
  return meta;
}

}  // namespace

std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::f32 ? 4 : 2; }

std::string_view dtype_name(DType dtype) noexcept {
  switch (dtype) {
    case DType::f32:
      return "F32";
    case DType::f16:
      return "F16";
    case DType::bf16:
      return "BF16";
  }
  return "?";
}

DType parse_dtype(std::string_view tag) {
  if (tag == "F32") return DType::f32;
  if (tag == "F16") return DType::f16;
  if (tag == "BF16") return DType::bf16;
  throw_data("unsupported dtype '" + std::string(tag) + "'");
}

std::uint64_t element_count(const Shape& shape) noexcept {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

TensorBuffer::TensorBuffer(std::string name_, Shape shape_, std::vector<double> values_)
    : name(std::move(name_)), shape(std::move(shape_)), values(std::move(values_)) {
  if (values.size() != element_count(shape)) {
    throw_usage("tensor '" + name + "': " + std::to_string(values.size()) + " values for shape " +
                shape_string(shape));
  }
}

TensorBuffer::TensorBuffer(std::string name_, Shape shape_)
    : name(std::move(name_)), shape(std::move(shape_)), values(element_count(shape), 0.0) {}

double decode_f16(std::uint16_t bits) noexcept { return decode_minifloat<5, 10>(bits); }
double decode_bf16(std::uint16_t bits) noexcept { return decode_minifloat<8, 7>(bits); }
std::uint16_t encode_f16(double value) { return encode_minifloat<5, 10>(value, "F16"); }
std::uint16_t encode_bf16(double value) { return encode_minifloat<8, 7>(value, "BF16"); }

float encode_f32(double value) {
  if (!std::isfinite(value)) throw_data("non-finite value cannot be stored");
  const auto narrowed = static_cast<float>(value);
  if (std::isinf(narrowed)) throw_data("overflow for dtype F32");
  return narrowed;
}

// ---------------------------------------------------------------------------
// Reading

CheckpointHandle CheckpointHandle::open(const std::filesystem::path& path) {
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec) throw_io("cannot open checkpoint '" + path.string() + "': " + ec.message());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_io("cannot open checkpoint '" + path.string() + "'");

  unsigned char prefix[8];
  if (file_size < 8 || !in.read(reinterpret_cast<char*>(prefix), 8)) {
    throw_data("malformed header: '" + path.string() + "' is shorter than the 8-byte length prefix");
  }
  const std::uint64_t header_len = load_le(prefix, 8);
  if (header_len > file_size - 8) throw_data("malformed header: declared header length exceeds file size");

  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
    throw_io("short read on header of '" + path.string() + "'");
  }

  auto state = std::make_shared<State>();
  state->path = path;
  state->data_offset = 8 + header_len;
  state->bytes_read = 8 + header_len;
  const std::uint64_t data_len = file_size - state->data_offset;

  std::set<std::string> seen;
  std::string duplicate;
  const auto watch_keys = [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key && depth == 1) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = std::move(key);
    }
    return true;
  };
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(header, watch_keys);
  } catch (const nlohmann::json::exception& e) {
    throw_data(std::string("malformed header: ") + e.what());
  }
  if (!duplicate.empty()) throw_data("duplicate tensor name '" + duplicate + "'");
  if (!doc.is_object()) throw_data("malformed header: top level is not an object");

  for (const auto& [key, entry] : doc.items()) {
    if (key == kMetadataKey) {
      if (!entry.is_object()) throw_data("malformed header: __metadata__ is not an object");
      for (const auto& [mk, mv] : entry.items()) {
        if (!mv.is_string()) throw_data("malformed header: __metadata__ value '" + mk + "' is not a string");
        state->metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    auto meta = parse_entry(key, entry);
    if (meta.range.end > data_len) throw_data("truncated payload: tensor '" + key + "' extends past end of file");
    state->total_params += meta.element_count();
    state->index.emplace(key, std::move(meta));
  }
  if (state->index.empty()) throw_data("malformed header: checkpoint holds no tensors");

  std::vector<const TensorMeta*> by_offset;
  for (const auto& [_, meta] : state->index) {
    if (meta.range.size() > 0) by_offset.push_back(&meta);
  }
  std::sort(by_offset.begin(), by_offset.end(),
            [](const TensorMeta* a, const TensorMeta* b) { return a->range.begin < b->range.begin; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i]->range.begin < by_offset[i - 1]->range.end) {
      throw_data("overlapping ranges: '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "'");
    }
  }
  return CheckpointHandle(std::move(state));
}

const TensorMeta& CheckpointHandle::meta(std::string_view name) const {
  const auto it = state_->index.find(name);
  if (it == state_->index.end()) throw_usage("unknown tensor '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> CheckpointHandle::names() const {
  std::vector<std::string> out;
  out.reserve(state_->index.size());
  for (const auto& [name, _] : state_->index) out.push_back(name);
  return out;
}

TensorBuffer CheckpointHandle::read(std::string_view name) const {
  const TensorMeta& m = meta(name);
  std::vector<unsigned char> raw(m.range.size());
  if (!raw.empty()) {
    std::ifstream in(state_->path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(state_->data_offset + m.range.begin));
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw_io("short read on tensor '" + m.name + "' in '" + state_->path.string() + "'");
    }
    state_->bytes_read += raw.size();
  }
  const std::size_t width = dtype_size(m.dtype);
  const std::size_t n = m.element_count();
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = decode_element(raw.data() + i * width, m.dtype);
    if (!std::isfinite(values[i])) {
      throw_data("non-finite value in tensor '" + m.name + "' at element " + std::to_string(i) + " of '" +
                 state_->path.string() + "'");
    }
  }
  return TensorBuffer(m.name, m.shape, std::move(values));
}

CheckpointHandle open_checkpoint(const std::filesystem::path& path) { return CheckpointHandle::open(path); }

TensorBuffer read_tensor(const CheckpointHandle& handle, std::string_view name) { return handle.read(name); }

// ---------------------------------------------------------------------------
// Writing

std::string serialize_header(std::span<const TensorSpec> sorted_specs, const Metadata& metadata) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  if (!metadata.empty()) doc[std::string(kMetadataKey)] = metadata;
  std::uint64_t offset = 0;
  for (const auto& spec : sorted_specs) {
    const std::uint64_t bytes = element_count(spec.shape) * dtype_size(spec.dtype);
    nlohmann::ordered_json entry;
    entry["dtype"] = dtype_name(spec.dtype);
    entry["shape"] = spec.shape;
    entry["data_offsets"] = {offset, offset + bytes};
    doc[spec.name] = std::move(entry);
    offset += bytes;
  }
  std::string text = doc.dump();
  text.append((8 - text.size() % 8) % 8, ' ');
  return text;
}

struct CheckpointWriter::File {
  std::ofstream out;
};

CheckpointWriter::CheckpointWriter(std::filesystem::path path, std::vector<TensorSpec> specs, Metadata metadata)
    : path_(std::move(path)), specs_(std::move(specs)) {
  if (specs_.empty()) throw_usage("cannot write a checkpoint without tensors");
  std::sort(specs_.begin(), specs_.end(), [](const TensorSpec& a, const TensorSpec& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < specs_.size(); ++i) {
    if (specs_[i].name == specs_[i - 1].name) throw_usage("duplicate tensor name '" + specs_[i].name + "'");
  }
  if (std::any_of(specs_.begin(), specs_.end(), [](const auto& s) { return s.name == kMetadataKey; })) {
    throw_usage("tensor name __metadata__ is reserved");
  }

  staging_ = path_;
  staging_ += ".partial";
  file_ = std::make_unique<File>();
  file_->out.open(staging_, std::ios::binary | std::ios::trunc);
  if (!file_->out) throw_io("cannot create '" + staging_.string() + "'");

  const std::string header = serialize_header(specs_, metadata);
  unsigned char prefix[8];
  store_le(prefix, header.size(), 8);
  file_->out.write(reinterpret_cast<const char*>(prefix), 8);
  file_->out.write(header.data(), static_cast<std::streamsize>(header.size()));
  if (!file_->out) throw_io("write failed on '" + staging_.string() + "'");
}

CheckpointWriter::~CheckpointWriter() {
  if (committed_) return;
  file_.reset();
  std::error_code ec;
  std::filesystem::remove(staging_, ec);
}

std::optional<std::string_view> CheckpointWriter::next_name() const {
  if (next_ >= specs_.size()) return std::nullopt;
  return specs_[next_].name;
}

void CheckpointWriter::write(const TensorBuffer& tensor) {
  if (next_ >= specs_.size()) throw_usage("all declared tensors have already been written");
  const TensorSpec& spec = specs_[next_];
  if (tensor.name != spec.name) {
    throw_usage("expected tensor '" + spec.name + "' but got '" + tensor.name + "'");
  }
  if (tensor.shape != spec.shape || tensor.values.size() != element_count(spec.shape)) {
    throw_usage("tensor '" + spec.name + "' has shape " + shape_string(tensor.shape) + ", declared " +
                shape_string(spec.shape));
  }
  const std::size_t width = dtype_size(spec.dtype);
  std::vector<unsigned char> raw(tensor.values.size() * width);
  try {
    for (std::size_t i = 0; i < tensor.values.size(); ++i) encode_element(raw.data() + i * width, tensor.values[i], spec.dtype);
  } catch (const Error& e) {
    throw Error(e.kind(), "tensor '" + spec.name + "': " + e.what());
  }
  file_->out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!file_->out) throw_io("write failed on '" + staging_.string() + "'");
  ++next_;
}

void CheckpointWriter::commit() {
  if (committed_) return;
  if (next_ != specs_.size()) {
    throw_usage("checkpoint incomplete: " + std::to_string(specs_.size() - next_) + " tensors not written");
  }
  file_->out.close();
  if (!file_->out) throw_io("flush failed on '" + staging_.string() + "'");
  std::error_code ec;
  std::filesystem::rename(staging_, path_, ec);
  if (ec) throw_io("cannot move '" + staging_.string() + "' into place: " + ec.message());
  committed_ = true;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const TensorBuffer> tensors, DType dtype,
                      const Metadata& metadata) {
  std::vector<const TensorBuffer*> sorted;
  std::vector<TensorSpec> specs;
  for (const auto& t : tensors) {
    sorted.push_back(&t);
    specs.push_back({t.name, dtype, t.shape});
  }
  std::sort(sorted.begin(), sorted.end(), [](const TensorBuffer* a, const TensorBuffer* b) { return a->name < b->name; });
  CheckpointWriter writer(path, std::move(specs), metadata);
  for (const TensorBuffer* t : sorted) writer.write(*t);
  writer.commit();
}

// ---------------------------------------------------------------------------

KeyReport validate_compatibility(std::span<const CheckpointHandle> handles) {
  if (handles.size() < 2) throw_usage("compatibility check needs at least two checkpoints");
  std::set<std::string, std::less<>> all;
  for (const auto& h : handles) {
    for (const auto& [name, _] : h.index()) all.insert(name);
  }
  KeyReport report;
  for (const auto& name : all) {
    MissingKey missing{name, {}};
    for (std::size_t i = 0; i < handles.size(); ++i) {
      if (!handles[i].contains(name)) missing.absent_from.push_back(i);
    }
    if (!missing.absent_from.empty()) {
      report.missing.push_back(std::move(missing));
      continue;
    }
    report.common.push_back(name);
    const TensorMeta& ref = handles[0].meta(name);
    bool shape_ok = true;
    bool dtype_ok = true;
    for (std::size_t i = 1; i < handles.size(); ++i) {
      const TensorMeta& m = handles[i].meta(name);
      shape_ok = shape_ok && m.shape == ref.shape;
      dtype_ok = dtype_ok && m.dtype == ref.dtype;
    }
    if (!shape_ok) report.shape_mismatch.push_back(name);
    if (!dtype_ok) report.dtype_mismatch.push_back(name);
  }
  return report;
}

}  // namespace metagpt
