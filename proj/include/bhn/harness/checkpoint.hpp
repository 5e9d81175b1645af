#pragma once

// Versioned binary container for a training state:
//
//   "BHNCKPT\0"  magic, 8 bytes
//   u32          format version
//   u64          manifest length, then the manifest (JSON, UTF-8)
//   u64          payload length, then the payload (little-endian doubles)
//   u64          FNV-1a hash of every preceding byte
//
// The manifest lists each tensor (name, shape, payload offset) plus the model
// description, optimizer step count, RNG state, epoch and a config echo.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "bhn/bhn.hpp"
#include "bhn/error.hpp"

namespace bhn::harness {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[8] = {'B', 'H', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

struct Checkpoint {
  TrainState state;
  json config;  // echo of the experiment configuration
};

namespace detail {
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& off, const char* what) {
  if (off + sizeof(T) > in.size()) throw FormatError(std::string("checkpoint truncated in ") + what);
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

inline void append_tensors(const std::string& prefix, const ParameterSet& set, json& index, std::string& payload) {
  for (const auto& [name, t] : set) {
    index.push_back({{"name", prefix + name}, {"shape", t.shape()}, {"offset", payload.size() / sizeof(double)}});
    payload.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
}
}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  const auto& st = ck.state;
  json index = json::array();
  std::string payload;
  detail::append_tensors("param/", st.model.params, index, payload);
  detail::append_tensors("adam/", st.optimizer.moments(), index, payload);
  const auto& a = st.optimizer.config();
  json manifest = {{"tensors", index},
                   {"model", st.model.describe()},
                   {"adam", {{"steps", st.optimizer.steps()}, {"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2},
                             {"eps", a.eps}}},
                   {"rng", st.rng.state()},
                   {"epoch", st.epoch},
                   {"config", ck.config}};
  const std::string m = manifest.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, m.size());
  out += m;
  detail::put<std::uint64_t>(out, payload.size());
  out += payload;
  detail::put<std::uint64_t>(out, detail::fnv1a(out));
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint file (bad magic)");
  std::size_t off = 8;
  const auto version = detail::take<std::uint32_t>(bytes, off, "header");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < off + 8) throw FormatError("checkpoint truncated in header");
  std::size_t tail = bytes.size() - 8;
  std::size_t hoff = tail;
  if (detail::take<std::uint64_t>(bytes, hoff, "hash") != detail::fnv1a(bytes.substr(0, tail)))
    throw FormatError("checkpoint is corrupt (hash mismatch)");
  const auto mlen = detail::take<std::uint64_t>(bytes, off, "header");
  if (off + mlen > tail) throw FormatError("checkpoint truncated in manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(off, mlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is malformed: ") + e.what());
  }
  off += mlen;
  const auto plen = detail::take<std::uint64_t>(bytes, off, "payload header");
  if (off + plen != tail || plen % sizeof(double) != 0) throw FormatError("checkpoint payload has the wrong length");
  const char* payload = bytes.data() + off;
  const std::size_t nvals = plen / sizeof(double);

  try {
    Model model = Model::from_description(manifest.at("model"));
    ParameterSet params, moments;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto o = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (o + n > nvals) throw FormatError("tensor '" + name + "' lies outside the payload");
      std::vector<double> v(n);
      std::memcpy(v.data(), payload + o * sizeof(double), n * sizeof(double));
      if (name.rfind("param/", 0) == 0)
        params.set(name.substr(6), Tensor(shape, std::move(v)));
      else if (name.rfind("adam/", 0) == 0)
        moments.set(name.substr(5), Tensor(shape, std::move(v)));
      else
        throw FormatError("unknown tensor group in '" + name + "'");
    }
    model.params = std::move(params);
    const auto& a = manifest.at("adam");
    TrainConfig tc;
    tc.lr = a.at("lr").get<double>();
    tc.beta1 = a.at("beta1").get<double>();
    tc.beta2 = a.at("beta2").get<double>();
    tc.adam_eps = a.at("eps").get<double>();
    Checkpoint ck{TrainState(std::move(model), tc), manifest.at("config")};
    ck.state.optimizer.restore(a.at("steps").get<std::uint64_t>(), std::move(moments));
    ck.state.rng.set_state(manifest.at("rng").get<std::string>());
    ck.state.epoch = manifest.at("epoch").get<std::size_t>();
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is incomplete: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  return deserialize({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

/// Manifest without the payload, for inspection.
inline json checkpoint_summary(const Checkpoint& ck) {
  const auto& st = ck.state;
  json tensors = json::object();
  for (const auto& [name, t] : st.model.params) tensors[name] = t.shape();
  return {{"format_version", kCheckpointVersion},
          {"model", st.model.describe()},
          {"parameters", tensors},
          {"parameter_count", st.model.params.total_size()},
          {"optimizer_steps", st.optimizer.steps()},
          {"epoch", st.epoch},
          {"config", ck.config}};
}

}  // namespace bhn::harness
