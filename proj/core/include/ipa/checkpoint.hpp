// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//   "IPA1"  u16 version
//   u32 metadata length, UTF-8 "key=value\n" lines (model config, vocab,
//       role, caller-supplied entries such as the variant manifest)
//   u32 array count, then per array: u32 name length, name bytes,
//       u32 rank, rank x u32 dims
//   raw f32 data for every array, in name-table order

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "ipa/policy.hpp"

namespace ipa {

inline constexpr std::uint16_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

struct LoadedCheckpoint {
  PolicyHandle handle;
  Metadata metadata;  // caller-supplied entries only
};

std::string serialize_checkpoint(const PolicyHandle& handle, const Metadata& extra = {});
/// FormatError on bad magic, version, truncation or trailing bytes.
LoadedCheckpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const PolicyHandle& handle, const std::filesystem::path& path, const Metadata& extra = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
/// As above, but ConfigMismatch unless the stored model config equals `expected`.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

/// 64-bit FNV-1a of `bytes`, as 16 hex digits.
std::string digest_hex(std::string_view bytes);
/// Digest of the handle's checkpoint bytes without caller metadata.
std::string policy_digest(const PolicyHandle& handle);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ipa
