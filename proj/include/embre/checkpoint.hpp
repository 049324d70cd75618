#ifndef EMBRE_CHECKPOINT_HPP
#define EMBRE_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "embre/common.hpp"
#include "embre/model.hpp"

namespace embre {

// Binary layout (all integers little-endian):
//   8 bytes   magic "EMBRECKP"
//   u32       format version
//   u64       header length H
//   H bytes   UTF-8 JSON header: config, vocab digest, tensor table,
//             payload size and checksum
//   payload   raw little-endian tensor values in stored precision
inline constexpr std::string_view kCheckpointMagic = "EMBRECKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  num::Shape shape;
  std::vector<double> values;  // exact images of the stored-precision values

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Provenance {
  std::string phase;  // "pretrain" or "finetune"
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::optional<double> dev_metric;
  std::string selection_metric;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  EncoderConfig encoder;
  Pooling pooling = Pooling::Cls;
  std::string vocab_digest;
  Provenance provenance;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  /// Throws unless the checkpoint was written against `digest`.
  void require_vocab(const std::string& digest) const {
    if (digest != vocab_digest)
      throw CheckpointError("checkpoint vocabulary digest " + vocab_digest +
                            " does not match vocabulary " + digest);
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class U>
U get_le(std::string_view in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::size_t element_bytes(Precision p) { return p == Precision::F32 ? 4 : 8; }

inline std::string pooling_name(Pooling p) {
  return p == Pooling::Cls ? "cls" : "entity_markers";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "cls") return Pooling::Cls;
  if (s == "entity_markers") return Pooling::EntityMarkers;
  throw std::invalid_argument("unknown pooling '" + s + "'");
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto precision = ck.encoder.precision;
  std::string payload;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& t : ck.tensors) {
    if (num::numel(t.shape) != t.values.size())
      throw CheckpointError("tensor " + t.name + " has inconsistent shape");
    table.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"offset", payload.size()},
                     {"count", t.values.size()}});
    for (double v : t.values) {
      if (precision == Precision::F32)
        detail::put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        detail::put_le(payload, std::bit_cast<std::uint64_t>(v));
    }
  }
  nlohmann::json header;
  header["format"] = "embre-checkpoint";
  header["encoder"] = ck.encoder.to_json();
  header["pooling"] = detail::pooling_name(ck.pooling);
  header["vocab_digest"] = ck.vocab_digest;
  header["provenance"] = {{"phase", ck.provenance.phase},
                          {"seed", ck.provenance.seed},
                          {"epoch", ck.provenance.epoch},
                          {"selection_metric", ck.provenance.selection_metric}};
  if (ck.provenance.dev_metric)
    header["provenance"]["dev_metric"] = *ck.provenance.dev_metric;
  header["tensors"] = table;
  header["payload_bytes"] = payload.size();
  header["payload_checksum"] = hex64(fnv1a64(payload));
  const std::string h = header.dump();

  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, ck.version);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  out += payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  constexpr std::size_t fixed = 8 + 4 + 8;
  if (bytes.size() < fixed) throw CheckpointError("checkpoint truncated: missing preamble");
  if (bytes.substr(0, 8) != kCheckpointMagic)
    throw CheckpointError("not a checkpoint file (bad magic)");
  Checkpoint ck;
  ck.version = detail::get_le<std::uint32_t>(bytes, 8);
  if (ck.version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ck.version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, 12);
  if (hlen > bytes.size() - fixed) throw CheckpointError("checkpoint truncated: header");
  const auto payload = bytes.substr(fixed + hlen);
  try {
    const auto header = nlohmann::json::parse(bytes.substr(fixed, hlen));
    if (header.at("format") != "embre-checkpoint")
      throw CheckpointError("unexpected checkpoint format tag");
    const auto expected = header.at("payload_bytes").get<std::size_t>();
    if (payload.size() < expected) throw CheckpointError("checkpoint truncated: payload");
    if (payload.size() > expected) throw CheckpointError("checkpoint has trailing bytes");
    if (header.at("payload_checksum").get<std::string>() != hex64(fnv1a64(payload)))
      throw CheckpointError("checkpoint payload checksum mismatch");
    ck.encoder = EncoderConfig::from_json(header.at("encoder"));
    ck.pooling = detail::parse_pooling(header.at("pooling").get<std::string>());
    ck.vocab_digest = header.at("vocab_digest").get<std::string>();
    const auto& prov = header.at("provenance");
    ck.provenance.phase = prov.at("phase").get<std::string>();
    ck.provenance.seed = prov.at("seed").get<std::uint64_t>();
    ck.provenance.epoch = prov.at("epoch").get<std::size_t>();
    ck.provenance.selection_metric = prov.at("selection_metric").get<std::string>();
    if (prov.contains("dev_metric")) ck.provenance.dev_metric = prov["dev_metric"].get<double>();

    const auto width = detail::element_bytes(ck.encoder.precision);
    for (const auto& entry : header.at("tensors")) {
      StoredTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<num::Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (count != num::numel(t.shape) || offset + count * width > payload.size())
        throw CheckpointError("tensor " + t.name + " table entry out of range");
      t.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto pos = offset + i * width;
        t.values[i] = ck.encoder.precision == Precision::F32
                          ? static_cast<double>(std::bit_cast<float>(
                                detail::get_le<std::uint32_t>(payload, pos)))
                          : std::bit_cast<double>(detail::get_le<std::uint64_t>(payload, pos));
      }
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

/// Copies parameter values into stored tensors (rounded to `precision`).
template <class T>
std::vector<StoredTensor> snapshot(const NamedParameters<T>& params) {
  std::vector<StoredTensor> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params)
    out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  return out;
}

/// Writes stored values into the matching parameters. With `prefix`, only
/// parameters whose name starts with it are loaded; all of them must exist.
template <class T>
void restore(const NamedParameters<T>& params, const Checkpoint& ck,
             std::string_view prefix = {}) {
  for (const auto& [name, tensor] : params) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    const auto* stored = ck.find(name);
    if (!stored) throw CheckpointError("checkpoint lacks parameter " + name);
    if (stored->shape != tensor.shape())
      throw CheckpointError("parameter " + name + " has shape " + num::to_string(stored->shape) +
                            ", model expects " + num::to_string(tensor.shape()));
    num::Tensor<T> handle = tensor;  // shares storage with the model
    auto dst = handle.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(stored->values[i]);
  }
}

}  // namespace embre

#endif  // EMBRE_CHECKPOINT_HPP
