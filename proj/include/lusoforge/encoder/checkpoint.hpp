#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lusoforge/core/error.hpp"
#include "lusoforge/core/io.hpp"
#include "lusoforge/core/parameters.hpp"
#include "lusoforge/encoder/config.hpp"

namespace lusoforge::encoder {

inline constexpr const char* checkpoint_format = "lusoforge-encoder";
inline constexpr int checkpoint_format_version = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Encoder configuration plus named float32 tensors.
/// Layout: u64 LE header length, JSON header, then LE float32 payloads in
/// directory order.
struct Checkpoint {
  EncoderConfig config;
  std::vector<NamedTensor> tensors;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t.value;
    }
    throw data_error("checkpoint has no tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

template <class T>
Checkpoint make_checkpoint(const EncoderConfig& config, const ParameterSet<T>& params,
                           nlohmann::ordered_json metadata = nlohmann::ordered_json::object()) {
  Checkpoint c{config, {}, std::move(metadata)};
  for (const auto& p : params) c.tensors.push_back({p.name, p.value.template cast<float>()});
  return c;
}

/// Copies checkpoint tensors into same-named parameters. Every parameter must be
/// present unless `allow_missing`; extra tensors in the checkpoint are ignored.
template <class T>
void load_parameters(ParameterSet<T>& params, const Checkpoint& c, bool allow_missing = false) {
  for (auto& p : params) {
    if (!c.contains(p.name)) {
      if (allow_missing) continue;
      throw data_error("checkpoint is missing tensor '" + p.name + "'");
    }
    const auto& src = c.tensor(p.name);
    if (src.shape() != p.value.shape()) {
      throw data_error("checkpoint tensor '" + p.name + "' has shape " + to_string(src.shape()) + ", expected " +
                       to_string(p.value.shape()));
    }
    for (std::size_t i = 0; i < src.size(); ++i) p.value[i] = static_cast<T>(src[i]);
  }
}

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    const std::size_t nbytes = t.value.size() * 4;
    dir.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  nlohmann::ordered_json header{{"format", checkpoint_format},
                                {"format_version", checkpoint_format_version},
                                {"config", c.config},
                                {"tensors", std::move(dir)},
                                {"metadata", c.metadata}};
  const std::string h = header.dump();
  std::string out;
  out.reserve(8 + h.size() + offset);
  const auto hl = static_cast<std::uint64_t>(h.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((hl >> (8 * i)) & 0xFF));
  out += h;
  for (const auto& t : c.tensors) {
    for (float f : t.value.data()) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  auto fail = [](const std::string& why) -> Checkpoint { throw data_error("corrupt checkpoint: " + why); };
  if (bytes.size() < 8) return fail("shorter than its header length field");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hl = detail::get_le(p, 8);
  if (hl > bytes.size() - 8) return fail("header length exceeds file size");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(8, hl));
  } catch (const nlohmann::json::exception& e) {
    return fail(std::string("header is not JSON: ") + e.what());
  }
  Checkpoint c;
  try {
    if (header.at("format") != checkpoint_format) return fail("unknown format");
    if (header.at("format_version").get<int>() != checkpoint_format_version) {
      return fail("unsupported format_version " + header.at("format_version").dump());
    }
    c.config = header.at("config").get<EncoderConfig>();
    c.metadata = header.value("metadata", nlohmann::ordered_json::object());
    const std::size_t base = 8 + hl;
    const std::size_t payload = bytes.size() - base;
    std::size_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      if (nbytes != numel(shape) * 4) return fail("tensor '" + t.name + "' byte count does not match its shape");
      if (offset != expected_offset || offset + nbytes > payload) return fail("tensor '" + t.name + "' out of bounds");
      expected_offset += nbytes;
      std::vector<float> data(numel(shape));
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p + base + offset + 4 * i, 4)));
      }
      t.value = Tensor<float>(shape, std::move(data));
      c.tensors.push_back(std::move(t));
    }
    if (expected_offset != payload) return fail("trailing bytes after the last tensor");
  } catch (const nlohmann::json::exception& e) {
    return fail(std::string("bad header field: ") + e.what());
  } catch (const contract_error& e) {
    return fail(e.what());
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace lusoforge::encoder
