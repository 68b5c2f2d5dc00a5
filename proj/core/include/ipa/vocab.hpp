// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ipa {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Character-level vocabulary. Layout: BOS, EOS, PAD, UNK, then K control
/// tokens (reward-bin conditioning for adapters), then the task alphabet.
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kPad = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr int kNumSpecial = 4;

  Vocab() = default;
  /// `symbols` are single-character strings (multi-byte UTF-8 allowed).
  Vocab(std::vector<std::string> symbols, int num_control);

  static Vocab from_alphabet(std::string_view alphabet, int num_control);

  std::size_t size() const noexcept { return tokens_.size(); }
  int num_control() const noexcept { return num_control_; }
  TokenId control_begin() const noexcept { return kNumSpecial; }
  TokenId control_token(int bin) const;
  std::vector<TokenId> control_ids() const;
  TokenId first_symbol() const noexcept { return kNumSpecial + num_control_; }

  bool is_control(TokenId id) const noexcept {
    return id >= kNumSpecial && id < kNumSpecial + num_control_;
  }
  bool is_special(TokenId id) const noexcept { return id >= 0 && id < kNumSpecial; }
  bool contains(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < size(); }

  const std::string& token(TokenId id) const;
  /// IndexError for unknown symbols.
  TokenId id_of(std::string_view symbol) const;
  std::span<const std::string> tokens() const noexcept { return tokens_; }
  std::vector<std::string> symbols() const;

  /// One token per character; characters outside the alphabet map to UNK.
  TokenSeq encode(std::string_view text) const;
  /// Alphabet symbols verbatim, specials and control tokens as <name>.
  std::string decode(std::span<const TokenId> ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.num_control_ == b.num_control_ && a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  int num_control_ = 0;
};

/// Output with one trailing EOS removed; rewards and metrics see only content.
TokenSeq strip_eos(std::span<const TokenId> output);

}  // namespace ipa
