// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ipa {
namespace {

constexpr std::string_view kMagic = "IPA1";

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
    const std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint16_t u16() {
    const std::string_view b = take(2);
    return static_cast<std::uint16_t>(static_cast<unsigned char>(b[0]) | (static_cast<unsigned char>(b[1]) << 8));
  }
  std::uint32_t u32() {
    const std::string_view b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

Metadata parse_metadata(std::string_view text) {
  Metadata meta;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) throw FormatError("metadata line without newline");
    const std::string_view line = text.substr(start, end - start);
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError("metadata line without '='");
    meta.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    start = end + 1;
  }
  return meta;
}

const std::string& require(const Metadata& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

std::size_t to_size(const std::string& v) {
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::exception&) {
    throw FormatError("bad integer '" + v + "' in checkpoint metadata");
  }
}

Metadata model_metadata(const PolicyHandle& handle, bool with_policy) {
  const ModelConfig& c = handle.config();
  const Vocab& v = handle.vocab();
  Metadata meta;
  meta["model.vocab_size"] = std::to_string(c.vocab_size);
  meta["model.width"] = std::to_string(c.width);
  meta["model.heads"] = std::to_string(c.heads);
  meta["model.layers"] = std::to_string(c.layers);
  meta["model.context"] = std::to_string(c.context);
  meta["model.tie_embeddings"] = c.tie_embeddings ? "1" : "0";
  std::ostringstream std_text;
  std_text.precision(17);
  std_text << c.init_std;
  meta["model.init_std"] = std_text.str();
  if (with_policy) {
    meta["policy.role"] = std::string(role_name(handle.role()));
    meta["policy.frozen"] = handle.frozen() ? "1" : "0";
    meta["policy.seed"] = std::to_string(handle.seed());
  }
  meta["vocab.num_control"] = std::to_string(v.num_control());
  const std::vector<std::string> symbols = v.symbols();
  meta["vocab.num_symbols"] = std::to_string(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) meta["vocab.symbol." + std::to_string(i)] = symbols[i];
  return meta;
}

std::string serialize(const PolicyHandle& handle, const Metadata& extra, bool with_policy) {
  Metadata meta = model_metadata(handle, with_policy);
  for (const auto& [k, v] : extra) {
    if (k.rfind("model.", 0) == 0 || k.rfind("policy.", 0) == 0 || k.rfind("vocab.", 0) == 0) {
      throw FormatError("metadata key '" + k + "' uses a reserved prefix");
    }
    meta[k] = v;
  }
  std::string text;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("metadata entry '" + k + "' contains a reserved character");
    }
    text += k + "=" + v + "\n";
  }

  const LanguageModel& model = handle.model();
  for (const Tensor<float>& p : model.params()) {
    if (!p.all_finite()) throw NumericalError("refusing to save non-finite parameters");
  }

  std::string out(kMagic);
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  put_u32(out, static_cast<std::uint32_t>(model.params().size()));
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const std::string& name = model.param_names()[i];
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const Shape& shape = model.params()[i].shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const Tensor<float>& p : model.params()) {
    for (float v : p.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

}  // namespace

std::string serialize_checkpoint(const PolicyHandle& handle, const Metadata& extra) {
  return serialize(handle, extra, true);
}

LoadedCheckpoint deserialize_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (bytes.size() < kMagic.size() || in.take(kMagic.size()) != kMagic) throw FormatError("bad checkpoint magic");
  const std::uint16_t version = in.u16();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Metadata meta = parse_metadata(in.take(in.u32()));

  ModelConfig config;
  config.vocab_size = to_size(require(meta, "model.vocab_size"));
  config.width = to_size(require(meta, "model.width"));
  config.heads = to_size(require(meta, "model.heads"));
  config.layers = to_size(require(meta, "model.layers"));
  config.context = to_size(require(meta, "model.context"));
  config.tie_embeddings = require(meta, "model.tie_embeddings") == "1";
  config.init_std = std::stod(require(meta, "model.init_std"));
  std::vector<std::string> symbols;
  const std::size_t n_symbols = to_size(require(meta, "vocab.num_symbols"));
  for (std::size_t i = 0; i < n_symbols; ++i) symbols.push_back(require(meta, "vocab.symbol." + std::to_string(i)));
  Vocab vocab(std::move(symbols), static_cast<int>(to_size(require(meta, "vocab.num_control"))));

  const std::uint32_t count = in.u32();
  std::vector<Shape> shapes(count);
  std::vector<std::string> names(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    names[i] = std::string(in.take(in.u32()));
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw FormatError("implausible tensor rank");
    for (std::uint32_t r = 0; r < rank; ++r) shapes[i].push_back(in.u32());
  }
  std::vector<Tensor<float>> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor<float> t(shapes[i]);
    for (float& v : t.data()) v = std::bit_cast<float>(in.u32());
    params.push_back(std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint data");

  const std::vector<ParamSpec> layout = param_layout(config);
  if (layout.size() != names.size()) throw FormatError("checkpoint array count does not match its config");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] != layout[i].name) throw FormatError("unexpected array '" + names[i] + "'");
  }

  auto model = std::make_shared<LanguageModel>(config, std::move(vocab), std::move(params));
  PolicyHandle handle(std::move(model), parse_role(require(meta, "policy.role")),
                      std::stoull(require(meta, "policy.seed")), require(meta, "policy.frozen") == "1");
  Metadata extra;
  for (auto& [k, v] : meta) {
    if (k.rfind("model.", 0) != 0 && k.rfind("policy.", 0) != 0 && k.rfind("vocab.", 0) != 0) extra[k] = v;
  }
  return LoadedCheckpoint{std::move(handle), std::move(extra)};
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write to '" + path.string() + "' failed");
}

void save_checkpoint(const PolicyHandle& handle, const std::filesystem::path& path, const Metadata& extra) {
  write_file(path, serialize_checkpoint(handle, extra));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint '" + path.string() + "' does not exist");
  return deserialize_checkpoint(read_file(path));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  LoadedCheckpoint ckpt = load_checkpoint(path);
  ModelConfig want = expected;
  want.vocab_size = ckpt.handle.config().vocab_size;
  if (!(ckpt.handle.config() == want) || (expected.vocab_size != 0 && expected.vocab_size != want.vocab_size)) {
    throw ConfigMismatch("checkpoint '" + path.string() + "' was saved with a different model config");
  }
  return ckpt;
}

std::string digest_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Role and frozen flag are excluded so that freezing a model keeps its digest.
std::string policy_digest(const PolicyHandle& handle) { return digest_hex(serialize(handle, {}, false)); }

}  // namespace ipa
