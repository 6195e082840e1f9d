#include "gblm/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace gblm {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are memcpy'd and assume a little-endian host");

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kMetadataKey = "__metadata__";
constexpr std::uint64_t kHeaderPrefix = 8;

std::uint64_t checked_product(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw ShapeError("tensor shape product overflows 64 bits");
    }
    n *= d;
  }
  return n;
}

bool has_control_char(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char ch) {
    auto c = static_cast<unsigned char>(ch);
    return c < 0x20 || c == 0x7f;
  });
}

template <typename T>
std::vector<std::uint8_t> to_bytes(std::span<const T> values) {
  std::vector<std::uint8_t> out(values.size_bytes());
  if (!out.empty()) std::memcpy(out.data(), values.data(), out.size());
  return out;
}

void check_byte_length(const TensorRecord& r) {
  const auto expected = checked_product(r.shape);
  const auto elem = dtype_size(r.dtype);
  if (expected > std::numeric_limits<std::uint64_t>::max() / elem ||
      expected * elem != r.data.size()) {
    throw ShapeError("record '" + r.name + "': data holds " + std::to_string(r.data.size()) +
                     " bytes, dtype and shape require " + std::to_string(expected * elem));
  }
}

// Byte offset of a record's key inside the file, for error reporting.
std::uint64_t key_offset(std::string_view header, const std::string& name,
                         std::size_t occurrence = 0) {
  const std::string quoted = ordered_json(name).dump();
  std::size_t pos = 0;
  for (std::size_t k = 0;; ++k) {
    pos = header.find(quoted, pos);
    if (pos == std::string_view::npos) return kHeaderPrefix;
    if (k == occurrence) return kHeaderPrefix + pos;
    pos += quoted.size();
  }
}

}  // namespace

std::string_view dtype_name(DType dtype) noexcept {
  switch (dtype) {
    case DType::F32: return "F32";
    case DType::F64: return "F64";
    case DType::U8: return "U8";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view name) noexcept {
  if (name == "F32") return DType::F32;
  if (name == "F64") return DType::F64;
  if (name == "U8") return DType::U8;
  return std::nullopt;
}

std::size_t dtype_size(DType dtype) noexcept {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U8: return 1;
  }
  return 1;
}

std::uint64_t TensorRecord::element_count() const { return checked_product(shape); }

TensorRecord TensorRecord::from_f64(std::string name, std::vector<std::uint64_t> shape,
                                    std::span<const double> values) {
  TensorRecord r{std::move(name), DType::F64, std::move(shape), to_bytes(values)};
  check_byte_length(r);
  return r;
}

TensorRecord TensorRecord::from_f32(std::string name, std::vector<std::uint64_t> shape,
                                    std::span<const float> values) {
  TensorRecord r{std::move(name), DType::F32, std::move(shape), to_bytes(values)};
  check_byte_length(r);
  return r;
}

TensorRecord TensorRecord::from_u8(std::string name, std::vector<std::uint64_t> shape,
                                   std::span<const std::uint8_t> values) {
  TensorRecord r{std::move(name), DType::U8, std::move(shape),
                 std::vector<std::uint8_t>(values.begin(), values.end())};
  check_byte_length(r);
  return r;
}

TensorRecord TensorRecord::from_matrix(std::string name, const MatrixD& m) {
  return from_f64(std::move(name),
                  {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                  std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

TensorRecord TensorRecord::from_mask(std::string name, const MaskMatrix& mask) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(mask.size()));
  for (Index k = 0; k < mask.size(); ++k) bytes[static_cast<std::size_t>(k)] = mask.data()[k] ? 1 : 0;
  return from_u8(std::move(name),
                 {static_cast<std::uint64_t>(mask.rows()), static_cast<std::uint64_t>(mask.cols())},
                 bytes);
}

std::vector<double> TensorRecord::to_f64() const {
  const auto n = static_cast<std::size_t>(element_count());
  std::vector<double> out(n);
  switch (dtype) {
    case DType::F64:
      if (n) std::memcpy(out.data(), data.data(), n * sizeof(double));
      break;
    case DType::F32:
      for (std::size_t k = 0; k < n; ++k) {
        float v;
        std::memcpy(&v, data.data() + k * sizeof(float), sizeof(float));
        out[k] = v;
      }
      break;
    case DType::U8:
      for (std::size_t k = 0; k < n; ++k) out[k] = data[k];
      break;
  }
  return out;
}

MatrixD TensorRecord::to_matrix() const {
  if (shape.size() != 2) {
    throw ShapeError("record '" + name + "' is " + std::to_string(shape.size()) +
                     "-dimensional, expected a matrix");
  }
  const auto values = to_f64();
  MatrixD m(static_cast<Index>(shape[0]), static_cast<Index>(shape[1]));
  if (!values.empty()) std::memcpy(m.data(), values.data(), values.size() * sizeof(double));
  return m;
}

MaskMatrix TensorRecord::to_mask() const {
  if (dtype != DType::U8 || shape.size() != 2) {
    throw ShapeError("record '" + name + "' is not a two-dimensional U8 mask");
  }
  MaskMatrix m(static_cast<Index>(shape[0]), static_cast<Index>(shape[1]));
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = data[static_cast<std::size_t>(k)] != 0;
  return m;
}

void Container::add(TensorRecord record) {
  if (record.name.empty()) throw InputError("tensor name must be nonempty");
  if (record.name == kMetadataKey) throw InputError("tensor name '__metadata__' is reserved");
  if (index_.contains(record.name)) throw InputError("duplicate tensor name '" + record.name + "'");
  check_byte_length(record);
  index_.emplace(record.name, records_.size());
  records_.push_back(std::move(record));
}

void Container::put(TensorRecord record) {
  if (auto it = index_.find(record.name); it != index_.end()) {
    check_byte_length(record);
    records_[it->second] = std::move(record);
    return;
  }
  add(std::move(record));
}

const TensorRecord* Container::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &records_[it->second];
}

const TensorRecord& Container::at(std::string_view name) const {
  if (const auto* r = find(name)) return *r;
  throw InputError("container has no tensor named '" + std::string(name) + "'");
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  ordered_json header = ordered_json::object();
  if (!c.metadata().empty()) {
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : c.metadata()) meta[k] = v;
    header[std::string(kMetadataKey)] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto& r : c.records()) {
    if (has_control_char(r.name)) {
      throw InputError("tensor name contains control characters: " + ordered_json(r.name).dump());
    }
    check_byte_length(r);
    const std::uint64_t end = offset + r.data.size();
    header[r.name] = {{"dtype", dtype_name(r.dtype)},
                      {"shape", r.shape},
                      {"data_offsets", {offset, end}}};
    offset = end;
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderPrefix + text.size() + offset);
  const std::uint64_t n = text.size();
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(n >> (8 * b)));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& r : c.records()) out.insert(out.end(), r.data.begin(), r.data.end());
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderPrefix) {
    throw FormatError("file shorter than the 8-byte header length prefix", bytes.size());
  }
  std::uint64_t header_len = 0;
  for (int b = 0; b < 8; ++b) header_len |= std::uint64_t{bytes[b]} << (8 * b);
  if (header_len > bytes.size() - kHeaderPrefix) {
    throw FormatError("header length " + std::to_string(header_len) + " exceeds file size " +
                          std::to_string(bytes.size()),
                      0);
  }
  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + kHeaderPrefix),
                              header_len);

  std::unordered_set<std::string> seen;
  std::optional<std::string> duplicate;
  auto on_event = [&](int depth, nlohmann::json::parse_event_t event, ordered_json& parsed) {
    if (depth == 1 && event == nlohmann::json::parse_event_t::key && !duplicate) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second) duplicate = std::move(key);
    }
    return true;
  };

  ordered_json header;
  try {
    header = ordered_json::parse(text.begin(), text.end(), on_event);
  } catch (const nlohmann::json::parse_error& e) {
    const std::uint64_t at = e.byte > 0 ? e.byte - 1 : 0;
    throw FormatError(std::string("malformed JSON header: ") + e.what(), kHeaderPrefix + at);
  }
  if (duplicate) {
    throw FormatError("duplicate tensor name '" + *duplicate + "'", key_offset(text, *duplicate, 1));
  }
  if (!header.is_object()) throw FormatError("header is not a JSON object", kHeaderPrefix);

  const std::uint64_t body_start = kHeaderPrefix + header_len;
  const std::uint64_t body_size = bytes.size() - body_start;

  Container c;
  std::uint64_t expected_begin = 0;
  for (const auto& [name, entry] : header.items()) {
    const auto where = key_offset(text, name);
    if (name == kMetadataKey) {
      if (!entry.is_object()) throw FormatError("__metadata__ must be an object", where);
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw FormatError("__metadata__ value for '" + k + "' is not a string", where);
        c.metadata()[k] = v.get<std::string>();
      }
      continue;
    }
    if (name.empty()) throw FormatError("empty tensor name", where);
    if (!entry.is_object() || entry.size() != 3 || !entry.contains("dtype") ||
        !entry.contains("shape") || !entry.contains("data_offsets")) {
      throw FormatError("record '" + name + "' must hold exactly dtype, shape, data_offsets", where);
    }
    const auto& jdtype = entry["dtype"];
    if (!jdtype.is_string()) throw FormatError("record '" + name + "': dtype is not a string", where);
    const auto dtype = parse_dtype(jdtype.get<std::string>());
    if (!dtype) {
      throw FormatError("record '" + name + "': unsupported dtype '" + jdtype.get<std::string>() + "'",
                        where);
    }
    const auto& jshape = entry["shape"];
    if (!jshape.is_array()) throw FormatError("record '" + name + "': shape is not an array", where);
    std::vector<std::uint64_t> shape;
    for (const auto& d : jshape) {
      if (!d.is_number_unsigned()) {
        throw FormatError("record '" + name + "': shape entries must be nonnegative integers", where);
      }
      shape.push_back(d.get<std::uint64_t>());
    }
    const auto& joff = entry["data_offsets"];
    if (!joff.is_array() || joff.size() != 2 || !joff[0].is_number_unsigned() ||
        !joff[1].is_number_unsigned()) {
      throw FormatError("record '" + name + "': data_offsets must be two nonnegative integers", where);
    }
    const auto begin = joff[0].get<std::uint64_t>();
    const auto end = joff[1].get<std::uint64_t>();
    if (begin != expected_begin) {
      throw FormatError("record '" + name + "': data_offsets begin " + std::to_string(begin) +
                            " is not contiguous with previous end " + std::to_string(expected_begin),
                        where);
    }
    if (end < begin) throw FormatError("record '" + name + "': data_offsets end precedes begin", where);
    if (end > body_size) {
      throw FormatError("record '" + name + "': data section truncated (needs " + std::to_string(end) +
                            " bytes, body has " + std::to_string(body_size) + ")",
                        bytes.size());
    }
    std::uint64_t count = 0;
    try {
      count = checked_product(shape);
    } catch (const ShapeError&) {
      throw FormatError("record '" + name + "': shape product overflows", where);
    }
    const auto elem = dtype_size(*dtype);
    if (count > std::numeric_limits<std::uint64_t>::max() / elem || count * elem != end - begin) {
      throw FormatError("record '" + name + "': byte length " + std::to_string(end - begin) +
                            " disagrees with dtype and shape",
                        where);
    }
    TensorRecord r;
    r.name = name;
    r.dtype = *dtype;
    r.shape = std::move(shape);
    r.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(body_start + begin),
                  bytes.begin() + static_cast<std::ptrdiff_t>(body_start + end));
    c.add(std::move(r));
    expected_begin = end;
  }
  if (expected_begin != body_size) {
    throw FormatError("body has " + std::to_string(body_size - expected_begin) +
                          " trailing bytes not covered by any record",
                      body_start + expected_begin);
  }
  return c;
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open container '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

void write_container(const Container& c, const std::filesystem::path& path) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

}  // namespace gblm
