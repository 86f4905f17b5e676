#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cascade/cascade.hpp"
#include "cascade/errors.hpp"
#include "cascade/tensor.hpp"

// Named-tensor container:
//
//   "CSCD" | u8 version | u32 header length | header text
//   u32 tensor count | per tensor: u32 name length, name,
//                                  u32 rank, u32 extents..., f32 payload
//
// Integers and floats are little-endian. The header is `key=value` lines
// holding the model configuration and training metadata.
namespace cascade::checkpoint {

inline constexpr char kMagic[4] = {'C', 'S', 'C', 'D'};
inline constexpr std::uint8_t kVersion = 1;

struct Checkpoint {
  EncoderConfig encoder;
  CascadeConfig cascade;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  void take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    take(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    take(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::string text(std::size_t n) {
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

inline std::string float_text(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace detail

inline std::map<std::string, std::string> config_entries(const EncoderConfig& e,
                                                          const CascadeConfig& c) {
  return {
      {"encoder.n_layers", std::to_string(e.n_layers)},
      {"encoder.d_model", std::to_string(e.d_model)},
      {"encoder.n_heads", std::to_string(e.n_heads)},
      {"encoder.d_ff", std::to_string(e.d_ff)},
      {"encoder.max_seq_len", std::to_string(e.max_seq_len)},
      {"encoder.vocab_size", std::to_string(e.vocab_size)},
      {"encoder.dropout_rate", detail::float_text(e.dropout_rate)},
      {"cascade.layer_schedule", detail::join(c.layer_schedule)},
      {"cascade.head_hidden", std::to_string(c.head_hidden)},
      {"cascade.head_depth", std::to_string(c.head_depth)},
      {"cascade.final_pooling", to_string(c.final_pooling)},
  };
}

inline std::string serialize(const Checkpoint& ck) {
  std::string header;
  for (const auto& [k, v] : config_entries(ck.encoder, ck.cascade)) header += k + "=" + v + "\n";
  for (const auto& [k, v] : ck.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw UsageError("checkpoint metadata key/value not representable: " + k);
    }
    header += "meta." + k + "=" + v + "\n";
  }
  std::string out(kMagic, kMagic + 4);
  out.push_back(static_cast<char>(kVersion));
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint deserialize(std::string bytes) {
  detail::Reader in(std::move(bytes));
  char magic[4];
  in.take(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a checkpoint (bad magic)");
  const std::uint8_t version = in.u8();
  if (version != kVersion) {
    throw DataError("unsupported checkpoint format version " + std::to_string(version) +
                    " (this build reads version " + std::to_string(kVersion) + ")");
  }
  Checkpoint ck;
  std::map<std::string, std::string> header;
  {
    std::stringstream ss(in.text(in.u32()));
    std::string line;
    while (std::getline(ss, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("malformed checkpoint header line: " + line);
      header[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  const auto get = [&](const std::string& key) {
    const auto it = header.find(key);
    if (it == header.end()) throw DataError("checkpoint header lacks " + key);
    return it->second;
  };
  try {
    ck.encoder.n_layers = std::stoul(get("encoder.n_layers"));
    ck.encoder.d_model = std::stoul(get("encoder.d_model"));
    ck.encoder.n_heads = std::stoul(get("encoder.n_heads"));
    ck.encoder.d_ff = std::stoul(get("encoder.d_ff"));
    ck.encoder.max_seq_len = std::stoul(get("encoder.max_seq_len"));
    ck.encoder.vocab_size = std::stoul(get("encoder.vocab_size"));
    ck.encoder.dropout_rate = std::stof(get("encoder.dropout_rate"));
    ck.cascade.layer_schedule = detail::split_sizes(get("cascade.layer_schedule"));
    ck.cascade.head_hidden = std::stoul(get("cascade.head_hidden"));
    ck.cascade.head_depth = std::stoul(get("cascade.head_depth"));
    ck.cascade.final_pooling = parse_pooling(get("cascade.final_pooling"));
  } catch (const std::logic_error& e) {
    throw DataError(std::string("bad checkpoint header value: ") + e.what());
  }
  for (const auto& [k, v] : header) {
    if (k.rfind("meta.", 0) == 0) ck.metadata[k.substr(5)] = v;
  }
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.text(in.u32());
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    std::vector<float> values(shape_size(shape));
    for (float& v : values) v = std::bit_cast<float>(in.u32());
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw DataError("trailing bytes after checkpoint payload");
  return ck;
}

inline void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("short write to " + path);
}

inline std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Snapshot of a model's parameters (copied, not aliased).
inline Checkpoint capture(CascadeModel& model, std::map<std::string, std::string> metadata = {}) {
  Checkpoint ck;
  ck.encoder = model.encoder_config();
  ck.cascade = model.cascade_config();
  ck.metadata = std::move(metadata);
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    ck.tensors.emplace_back(name, t.detached_copy());
  });
  return ck;
}

/// Rebuilds a model; every parameter must be present with matching shape.
inline CascadeModel restore(const Checkpoint& ck) {
  Rng scratch(0);
  CascadeModel model(ck.encoder, ck.cascade, scratch);
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    const Tensor* src = ck.find(name);
    if (src == nullptr) throw DataError("checkpoint lacks parameter " + name);
    if (src->shape() != t.shape()) {
      throw DataError("parameter " + name + " has shape " + shape_string(src->shape()) +
                      ", model expects " + shape_string(t.shape()));
    }
    std::copy(src->data().begin(), src->data().end(), t.mutable_data().begin());
  });
  return model;
}

inline void save(const std::string& path, const Checkpoint& ck) { write_bytes(path, serialize(ck)); }
inline Checkpoint load(const std::string& path) { return deserialize(read_bytes(path)); }

inline CascadeModel load_model(const std::string& path) { return restore(load(path)); }

}  // namespace cascade::checkpoint
