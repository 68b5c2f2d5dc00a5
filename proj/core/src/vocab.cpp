// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/vocab.hpp"

#include "ipa/errors.hpp"

namespace ipa {
namespace {

// Splits UTF-8 text into code points.
std::vector<std::string> split_chars(std::string_view text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = 3;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> symbols, int num_control) : num_control_(num_control) {
  if (num_control < 0) throw ConfigError("vocab: negative control-token count");
  if (symbols.empty()) throw ConfigError("vocab: empty alphabet");
  tokens_ = {"<bos>", "<eos>", "<pad>", "<unk>"};
  for (int k = 0; k < num_control; ++k) tokens_.push_back("<ctl" + std::to_string(k) + ">");
  for (std::string& s : symbols) {
    if (s.empty() || s.find('\n') != std::string::npos) throw ConfigError("vocab: invalid symbol");
    tokens_.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ConfigError("vocab: duplicate symbol '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::from_alphabet(std::string_view alphabet, int num_control) {
  return Vocab(split_chars(alphabet), num_control);
}

TokenId Vocab::control_token(int bin) const {
  if (bin < 0 || bin >= num_control_) {
    throw DomainError("control bin " + std::to_string(bin) + " outside [0, " + std::to_string(num_control_) + ")");
  }
  return kNumSpecial + bin;
}

std::vector<TokenId> Vocab::control_ids() const {
  std::vector<TokenId> ids;
  for (int k = 0; k < num_control_; ++k) ids.push_back(kNumSpecial + k);
  return ids;
}

const std::string& Vocab::token(TokenId id) const {
  if (!contains(id)) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id_of(std::string_view symbol) const {
  const auto it = index_.find(std::string(symbol));
  if (it == index_.end()) throw IndexError("unknown symbol '" + std::string(symbol) + "'");
  return it->second;
}

std::vector<std::string> Vocab::symbols() const {
  return {tokens_.begin() + first_symbol(), tokens_.end()};
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq ids;
  for (const std::string& ch : split_chars(text)) {
    const auto it = index_.find(ch);
    ids.push_back(it == index_.end() || it->second < first_symbol() ? kUnk : it->second);
  }
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += contains(id) ? tokens_[static_cast<std::size_t>(id)] : "<?>";
  return out;
}

TokenSeq strip_eos(std::span<const TokenId> output) {
  TokenSeq out(output.begin(), output.end());
  if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}

}  // namespace ipa
