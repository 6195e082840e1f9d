#pragma once

// Named dense tensors in the safetensors layout:
//
//   [u64 little-endian header length N][N bytes of UTF-8 JSON][body bytes]
//
// The JSON header maps each tensor name to {"dtype", "shape", "data_offsets"}
// with offsets relative to the start of the body. An optional "__metadata__"
// entry holds a string-to-string map. Offsets are ascending and gap-free in
// header order and the last end offset equals the body size.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gblm/common.hpp"

namespace gblm {

enum class DType : std::uint8_t { F32, F64, U8 };

std::string_view dtype_name(DType dtype) noexcept;
std::optional<DType> parse_dtype(std::string_view name) noexcept;
std::size_t dtype_size(DType dtype) noexcept;

struct TensorRecord {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> data;

  /// Product of the shape; throws ShapeError on overflow.
  std::uint64_t element_count() const;

  static TensorRecord from_f64(std::string name, std::vector<std::uint64_t> shape,
                               std::span<const double> values);
  static TensorRecord from_f32(std::string name, std::vector<std::uint64_t> shape,
                               std::span<const float> values);
  static TensorRecord from_u8(std::string name, std::vector<std::uint64_t> shape,
                              std::span<const std::uint8_t> values);
  static TensorRecord from_matrix(std::string name, const MatrixD& m);
  static TensorRecord from_mask(std::string name, const MaskMatrix& mask);

  /// Element values widened to double (F32/F64/U8 all accepted).
  std::vector<double> to_f64() const;
  /// Two-dimensional record as a row-major double matrix.
  MatrixD to_matrix() const;
  /// Two-dimensional U8 record as a mask (nonzero = pruned).
  MaskMatrix to_mask() const;

  bool operator==(const TensorRecord&) const = default;
};

/// Ordered collection of uniquely named records plus optional metadata.
/// Iteration order is insertion order, which is also on-disk header order.
class Container {
 public:
  /// Appends a record. Throws InputError on an empty or duplicate name,
  /// ShapeError when the byte length disagrees with dtype and shape.
  void add(TensorRecord record);
  /// Replaces an existing record or appends a new one.
  void put(TensorRecord record);

  const TensorRecord* find(std::string_view name) const;
  const TensorRecord& at(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  const std::vector<TensorRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }

  std::map<std::string, std::string>& metadata() noexcept { return metadata_; }
  const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }

  bool operator==(const Container& other) const {
    return records_ == other.records_ && metadata_ == other.metadata_;
  }

 private:
  std::vector<TensorRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, std::string> metadata_;
};

/// Serializes to the exact on-disk byte sequence.
std::vector<std::uint8_t> encode_container(const Container& c);
/// Parses and validates a complete file image. Throws FormatError.
Container decode_container(std::span<const std::uint8_t> bytes);

Container read_container(const std::filesystem::path& path);
void write_container(const Container& c, const std::filesystem::path& path);

}  // namespace gblm
