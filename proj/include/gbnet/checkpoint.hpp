#pragma once

// Binary checkpoint:
//   "GBNET1" | u32 tensor count | per tensor: u16 name length, name bytes,
//   u8 rank, u32 dims[rank], f32 data (row-major) | u32 CRC32
// All integers and floats little-endian. The CRC covers everything between
// the magic and the CRC itself.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "gbnet/errors.hpp"
#include "gbnet/tensor.hpp"

namespace gbnet {

inline constexpr char kCheckpointMagic[] = "GBNET1";

struct NamedTensor {
  std::string name;
  Matrix value;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get(const char* what) {
    if (data_.size() - pos_ < sizeof(T)) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view s) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string body;
  detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name);
    detail::put<std::uint16_t>(body, static_cast<std::uint16_t>(t.name.size()));
    body += t.name;
    detail::put<std::uint8_t>(body, 2);
    detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(t.value.rows()));
    detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(t.value.cols()));
    for (Index i = 0; i < t.value.size(); ++i) detail::put<float>(body, static_cast<float>(t.value.data()[i]));
  }
  std::string out(kCheckpointMagic, 6);
  out += body;
  detail::put<std::uint32_t>(out, detail::crc32_of(body));
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view data) {
  if (data.size() < 6 || data.substr(0, 6) != std::string_view(kCheckpointMagic, 6)) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  if (data.size() < 6 + 4 + 4) throw FormatError("checkpoint truncated");
  const std::string_view body = data.substr(6, data.size() - 6 - 4);
  detail::Reader tail(data.substr(data.size() - 4));
  detail::Reader r(body);
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>("name length");
    t.name = std::string(r.bytes(len, "name"));
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank > 2) throw FormatError("tensor " + t.name + " has unsupported rank " + std::to_string(rank));
    std::uint32_t dims[2] = {1, 1};
    for (int d = 0; d < rank; ++d) dims[2 - rank + d] = r.get<std::uint32_t>("dims");
    const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1];
    if (r.remaining() < n * sizeof(float)) throw FormatError("checkpoint truncated in tensor " + t.name);
    t.value = Matrix(dims[0], dims[1]);
    for (std::size_t k = 0; k < n; ++k) t.value.data()[k] = r.get<float>("data");
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes before checkpoint CRC");
  if (tail.get<std::uint32_t>("crc") != detail::crc32_of(body)) throw FormatError("checkpoint CRC mismatch");
  return out;
}

inline void write_checkpoint_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  const std::string bytes = encode_checkpoint(tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for '" + path + "'");
}

inline std::vector<NamedTensor> read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// Copies tensors into `params` by name; every parameter must be present with
// its exact shape, and no unknown tensor may remain.
inline void assign_tensors(ParameterSet& params, const std::vector<NamedTensor>& tensors, std::string_view prefix = "") {
  std::map<std::string, const Matrix*> by_name;
  for (const NamedTensor& t : tensors) {
    if (t.name.compare(0, prefix.size(), prefix) != 0) continue;
    by_name[t.name.substr(prefix.size())] = &t.value;
  }
  std::vector<const Matrix*> found;
  for (const Parameter& p : params.items()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ShapeError("checkpoint lacks tensor " + std::string(prefix) + p.name);
    const Matrix& v = *it->second;
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw ShapeError("tensor " + std::string(prefix) + p.name + " is " + shape_str(v) +
                       " in the checkpoint, model expects " + shape_str(p.value));
    }
    found.push_back(&v);
    by_name.erase(it);
  }
  if (prefix.empty()) {
    for (const auto& [name, _] : by_name) {
      if (name.rfind("adam.", 0) != 0) throw ShapeError("checkpoint tensor " + name + " has no model parameter");
    }
  }
  for (std::size_t i = 0; i < found.size(); ++i) params[i].value = *found[i];
}

}  // namespace gbnet
