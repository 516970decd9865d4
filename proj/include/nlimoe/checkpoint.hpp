#pragma once

// Checkpoint file:
//
//   "NLIMOECK"            8 bytes
//   format version        u32, little endian
//   manifest length       u64, little endian
//   manifest              JSON (config text, step, metrics, vocabulary, entries)
//   payload length        u64, little endian
//   payload               parameter values as little-endian float64
//
// Each manifest entry carries the parameter name, shape, byte offset into the
// payload and a CRC-32 of its bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "nlimoe/config.hpp"
#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/model.hpp"

namespace nlimoe {

inline constexpr char kCheckpointMagic[8] = {'N', 'L', 'I', 'M', 'O', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline ModelConfig model_config(const RunConfig& c) { return {c.encoder, c.router}; }

struct Checkpoint {
  RunConfig config;
  Vocab vocab;
  NliMoeModel model;
  std::uint64_t step = 0;
  nlohmann::json metrics;
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const std::string& in, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

inline std::uint32_t crc_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace detail

inline std::string serialize_checkpoint(const NliMoeModel& model, const Vocab& vocab, const RunConfig& config,
                                        std::uint64_t step, const nlohmann::json& metrics = nlohmann::json::object()) {
  if (vocab.size() != model.vocab_size()) {
    throw ContractError("checkpoint: vocabulary has " + std::to_string(vocab.size()) + " tokens, model embeds " +
                        std::to_string(model.vocab_size()));
  }
  std::string payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& p : model.named_parameters()) {
    const std::size_t offset = payload.size();
    for (double v : p.tensor.values()) detail::put_le(payload, std::bit_cast<std::uint64_t>(v));
    entries.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"offset", offset},
                       {"crc32", detail::crc_of(payload.data() + offset, payload.size() - offset)}});
  }
  std::vector<std::string> tokens(vocab.tokens().begin() + static_cast<std::ptrdiff_t>(Vocab::kReserved.size()), vocab.tokens().end());
  nlohmann::json manifest = {{"format_version", kCheckpointVersion},
                             {"config", to_config_text(config)},
                             {"step", step},
                             {"metrics", metrics},
                             {"vocabulary", tokens},
                             {"parameters", entries}};
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  detail::put_le(out, static_cast<std::uint64_t>(payload.size()));
  out += payload;
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "<checkpoint>") {
  auto fail = [&](const std::string& why) { return IntegrityError(source + ": " + why); };
  const std::size_t header = sizeof kCheckpointMagic + 4 + 8;
  if (bytes.size() < header) throw fail("file too short for a checkpoint header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) throw fail("not a checkpoint file");
  const auto version = detail::get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError(source + ": checkpoint format version " + std::to_string(version) +
                                  " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto manifest_len = detail::get_le<std::uint64_t>(bytes, 12);
  if (manifest_len > bytes.size() - header || bytes.size() - header - manifest_len < 8) {
    throw fail("truncated manifest");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("unreadable manifest: ") + e.what());
  }
  const std::size_t payload_at = header + manifest_len + 8;
  const auto payload_len = detail::get_le<std::uint64_t>(bytes, header + manifest_len);
  if (payload_len != bytes.size() - payload_at) {
    throw fail("payload holds " + std::to_string(bytes.size() - payload_at) + " bytes, manifest declares " +
               std::to_string(payload_len));
  }

  Checkpoint ck{RunConfig{}, Vocab{}, NliMoeModel(ModelConfig{}, Vocab::kReserved.size() + 1, 0), 0, {}};
  std::vector<nlohmann::json> entries;
  try {
    if (manifest.at("format_version").get<std::uint32_t>() != version) throw fail("manifest version differs from header");
    ck.config = parse_config_text(manifest.at("config").get<std::string>(), RunConfig{}, source + " (config snapshot)");
    ck.step = manifest.at("step").get<std::uint64_t>();
    ck.metrics = manifest.at("metrics");
    ck.vocab = Vocab::from_tokens(manifest.at("vocabulary").get<std::vector<std::string>>());
    entries = manifest.at("parameters").get<std::vector<nlohmann::json>>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed manifest: ") + e.what());
  }

  ck.model = NliMoeModel(model_config(ck.config), ck.vocab.size(), ck.config.seed);
  auto params = ck.model.named_parameters();
  if (entries.size() != params.size()) {
    throw fail("manifest lists " + std::to_string(entries.size()) + " parameters, model has " +
               std::to_string(params.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    std::uint32_t crc = 0;
    try {
      name = entries[i].at("name").get<std::string>();
      shape = entries[i].at("shape").get<Shape>();
      offset = entries[i].at("offset").get<std::uint64_t>();
      crc = entries[i].at("crc32").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
      throw fail("malformed parameter entry " + std::to_string(i) + ": " + e.what());
    }
    if (name != p.name) throw fail("entry " + std::to_string(i) + " is \"" + name + "\", expected \"" + p.name + "\"");
    if (shape != p.tensor.shape()) {
      throw fail("parameter " + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(p.tensor.shape()));
    }
    if (offset != expected_offset) throw fail("parameter " + name + " offset overlaps or leaves a gap");
    const std::size_t nbytes = p.tensor.numel() * 8;
    if (offset + nbytes > payload_len) throw fail("parameter " + name + " extends past the payload");
    if (detail::crc_of(bytes.data() + payload_at + offset, nbytes) != crc) throw fail("checksum mismatch in " + name);
    auto dst = p.tensor.mutable_values();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      dst[k] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, payload_at + offset + 8 * k));
    }
    expected_offset = offset + nbytes;
  }
  if (expected_offset != payload_len) throw fail("payload has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const NliMoeModel& model, const Vocab& vocab,
                            const RunConfig& config, std::uint64_t step,
                            const nlohmann::json& metrics = nlohmann::json::object()) {
  const std::string bytes = serialize_checkpoint(model, vocab, config, step, metrics);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str(), path);
}

}  // namespace nlimoe
