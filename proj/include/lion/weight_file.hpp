// Copyright (C) 2026 The lion authors
// SPDX-License-Identifier: Apache-2.0
//
// "LIONWT01" tensor container shared by model checkpoints, adapters, scaling
// embedders and rendered clips.
//
//   bytes 0..7    magic "LIONWT01" (the last two characters are the version)
//   u32 LE        header length H
//   H bytes       UTF-8 JSON header:
//                   {"format":"LIONWT","version":1,"sections":[
//                     {"name":..., "meta":{...}, "tensors":[
//                       {"name","shape","dtype","byte_offset","byte_len"}]}]}
//   payload       raw little-endian tensor data; offsets are payload-relative
//   u32 LE        CRC-32 over header bytes followed by payload bytes
//
// A file is validated completely (magic, length, checksum, header schema,
// tensor extents) before anything is handed back to the caller.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <boost/crc.hpp>
#include <json.hpp>

#include "lion/tensor.hpp"

namespace lion {

inline constexpr char kWeightMagic[8] = {'L', 'I', 'O', 'N', 'W', 'T', '0', '1'};
inline constexpr int kWeightVersion = 1;

enum class ParseErrorKind { bad_magic, version_mismatch, truncated, checksum, malformed_header };

inline const char* parse_error_name(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::bad_magic: return "bad magic";
    case ParseErrorKind::version_mismatch: return "version mismatch";
    case ParseErrorKind::truncated: return "truncated file";
    case ParseErrorKind::checksum: return "checksum mismatch";
    case ParseErrorKind::malformed_header: return "malformed header";
  }
  return "parse error";
}

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(parse_error_name(kind)) + ": " + detail), kind_(kind) {}
  ParseErrorKind kind() const { return kind_; }

 private:
  ParseErrorKind kind_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct NamedTensor {
  std::string name;
  AnyTensor tensor;
};

struct Section {
  std::string name;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  template <class T>
  void add(std::string tensor_name, Tensor<T> t) {
    tensors.push_back({std::move(tensor_name), AnyTensor(std::move(t))});
  }

  const AnyTensor* find(const std::string& tensor_name) const {
    for (const auto& t : tensors)
      if (t.name == tensor_name) return &t.tensor;
    return nullptr;
  }

  /// Tensor by name; the stored dtype must be T.
  template <class T>
  const Tensor<T>& get(const std::string& tensor_name) const {
    const AnyTensor* t = find(tensor_name);
    if (!t) throw ParseError(ParseErrorKind::malformed_header,
                             "section '" + name + "' has no tensor '" + tensor_name + "'");
    if (!std::holds_alternative<Tensor<T>>(*t))
      throw ParseError(ParseErrorKind::malformed_header,
                       "tensor '" + tensor_name + "' is not " + dtype_name(dtype_of<T>()));
    return std::get<Tensor<T>>(*t);
  }
};

struct WeightFile {
  std::vector<Section> sections;

  Section& add_section(std::string name, nlohmann::json meta = nlohmann::json::object()) {
    sections.push_back(Section{std::move(name), std::move(meta), {}});
    return sections.back();
  }
  const Section* find(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
  /// All sections whose name starts with prefix.
  std::vector<const Section*> with_prefix(const std::string& prefix) const {
    std::vector<const Section*> out;
    for (const auto& s : sections)
      if (s.name.rfind(prefix, 0) == 0) out.push_back(&s);
    return out;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

/// Payload size implied by an unverified header, if it parses at all.
inline std::optional<std::size_t> promised_payload(std::span<const std::uint8_t> header_bytes) {
  const auto header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end(), nullptr, false);
  if (header.is_discarded()) return std::nullopt;
  try {
    std::size_t end = 0;
    for (const auto& js : header.at("sections"))
      for (const auto& jt : js.at("tensors"))
        end = std::max(end, jt.at("byte_offset").get<std::size_t>() + jt.at("byte_len").get<std::size_t>());
    return end;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

template <class T>
void put_values(std::vector<std::uint8_t>& out, std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) {
    const U bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(std::uint8_t(bits >> (8 * i)));
  }
}

template <class T>
std::vector<T> get_values(const std::uint8_t* p, std::size_t count) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<T> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= U(p[k * sizeof(U) + i]) << (8 * i);
    out[k] = std::bit_cast<T>(bits);
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_weight_file(const WeightFile& wf) {
  nlohmann::json header = {{"format", "LIONWT"}, {"version", kWeightVersion}};
  nlohmann::json sections = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& s : wf.sections) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& nt : s.tensors) {
      const std::size_t offset = payload.size();
      std::visit(
          [&](const auto& t) {
            using T = typename std::decay_t<decltype(t)>::value_type;
            detail::put_values<T>(payload, t.data());
            tensors.push_back({{"name", nt.name},
                               {"shape", t.shape()},
                               {"dtype", dtype_name(dtype_of<T>())},
                               {"byte_offset", offset},
                               {"byte_len", payload.size() - offset}});
          },
          nt.tensor);
    }
    sections.push_back({{"name", s.name}, {"meta", s.meta}, {"tensors", tensors}});
  }
  header["sections"] = sections;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kWeightMagic), std::end(kWeightMagic));
  detail::put_u32(out, std::uint32_t(text.size()));
  const std::size_t body_start = out.size();
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  detail::put_u32(out, crc32(std::span(out).subspan(body_start)));
  return out;
}

inline WeightFile decode_weight_file(std::span<const std::uint8_t> bytes) {
  using K = ParseErrorKind;
  if (bytes.size() < 8) throw ParseError(K::truncated, "shorter than the magic");
  if (std::memcmp(bytes.data(), kWeightMagic, 6) != 0)
    throw ParseError(K::bad_magic, "expected LIONWT");
  if (std::memcmp(bytes.data() + 6, kWeightMagic + 6, 2) != 0)
    throw ParseError(K::version_mismatch,
                     "container version '" + std::string(bytes.begin() + 6, bytes.begin() + 8) +
                         "', expected '01'");
  if (bytes.size() < 16) throw ParseError(K::truncated, "missing header length or checksum");
  const std::size_t header_len = detail::get_u32(bytes.data() + 8);
  if (12 + header_len + 4 > bytes.size())
    throw ParseError(K::truncated, "header length " + std::to_string(header_len) +
                                       " exceeds file size " + std::to_string(bytes.size()));
  const auto body = bytes.subspan(12, bytes.size() - 16);
  const std::uint32_t stored = detail::get_u32(bytes.data() + bytes.size() - 4);
  if (crc32(body) != stored) {
    // A readable header that promises more payload than is present means the
    // file was cut short rather than altered.
    const auto promised = detail::promised_payload(body.first(header_len));
    if (promised && *promised > body.size() - header_len)
      throw ParseError(K::truncated, "payload shorter than the header describes");
    throw ParseError(K::checksum, "CRC-32 does not match contents");
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(body.begin(), body.begin() + std::ptrdiff_t(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(K::malformed_header, e.what());
  }
  const auto payload = body.subspan(header_len);

  WeightFile wf;
  try {
    if (header.at("format") != "LIONWT") throw ParseError(K::malformed_header, "format field");
    if (header.at("version").get<int>() != kWeightVersion)
      throw ParseError(K::version_mismatch,
                       "header version " + header.at("version").dump() + ", expected 1");
    for (const auto& js : header.at("sections")) {
      Section s{js.at("name").get<std::string>(), js.value("meta", nlohmann::json::object()), {}};
      for (const auto& jt : js.at("tensors")) {
        const auto shape = jt.at("shape").get<Shape>();
        const auto dtype = jt.at("dtype").get<std::string>();
        const auto offset = jt.at("byte_offset").get<std::size_t>();
        const auto len = jt.at("byte_len").get<std::size_t>();
        const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
        if (width == 0) throw ParseError(K::malformed_header, "unknown dtype " + dtype);
        if (shape_numel(shape) * width != len)
          throw ParseError(K::malformed_header, "byte_len disagrees with shape for " +
                                                    jt.at("name").get<std::string>());
        if (offset > payload.size() || len > payload.size() - offset)
          throw ParseError(K::truncated, "tensor " + jt.at("name").get<std::string>() +
                                             " runs past the payload");
        const auto* p = payload.data() + offset;
        const std::size_t count = len / width;
        if (width == 4)
          s.add(jt.at("name").get<std::string>(), Tensor<float>(shape, detail::get_values<float>(p, count)));
        else
          s.add(jt.at("name").get<std::string>(), Tensor<double>(shape, detail::get_values<double>(p, count)));
      }
      wf.sections.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(K::malformed_header, e.what());
  } catch (const DimensionError& e) {
    throw ParseError(K::malformed_header, e.what());
  }
  return wf;
}

/// Writes via a sibling temporary and a rename so readers never observe a
/// half-written file.
inline void write_weight_file(const std::filesystem::path& path, const WeightFile& wf) {
  const auto bytes = encode_weight_file(wf);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline WeightFile read_weight_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_weight_file(bytes);
}

}  // namespace lion
