#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "c2t/error.hpp"

namespace c2t::tok {

using TokenId = int;

inline constexpr TokenId kBlank = 0;
inline constexpr std::string_view kBlankSymbol = "\xE2\x88\x85";  // U+2205
inline constexpr std::string_view kWordBoundary = "|";

enum class VocabKind { character, phoneme };

inline std::string_view to_string(VocabKind k) {
  return k == VocabKind::character ? "character" : "phoneme";
}

inline VocabKind parse_vocab_kind(const std::string& s) {
  if (s == "character") return VocabKind::character;
  if (s == "phoneme") return VocabKind::phoneme;
  raise(ErrorKind::ConfigError, "unknown tokenization '" + s + "'");
}

/// 39-symbol ARPAbet inventory without stress markers.
inline constexpr std::array<std::string_view, 39> kArpabet = {
    "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH", "EH", "ER", "EY",
    "F",  "G",  "HH", "IH", "IY", "JH", "K",  "L",  "M",  "N",  "NG", "OW", "OY",
    "P",  "R",  "S",  "SH", "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH"};

class Vocabulary {
 public:
  Vocabulary(VocabKind kind, std::vector<std::string> symbols) : kind_(kind), symbols_(std::move(symbols)) {
    if (symbols_.empty() || symbols_[0] != kBlankSymbol)
      raise(ErrorKind::InvalidInput, "vocabulary must start with the blank symbol");
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (!index_.emplace(symbols_[i], static_cast<TokenId>(i)).second)
        raise(ErrorKind::InvalidInput, "duplicate vocabulary symbol " + symbols_[i]);
    }
  }

  /// blank, a..z, space, apostrophe (V = 29).
  static const Vocabulary& characters() {
    static const Vocabulary v = [] {
      std::vector<std::string> s{std::string(kBlankSymbol)};
      for (char c = 'a'; c <= 'z'; ++c) s.emplace_back(1, c);
      s.emplace_back(" ");
      s.emplace_back("'");
      return Vocabulary(VocabKind::character, std::move(s));
    }();
    return v;
  }

  /// blank, 39 ARPAbet phonemes, word boundary (V = 41).
  static const Vocabulary& phonemes() {
    static const Vocabulary v = [] {
      std::vector<std::string> s{std::string(kBlankSymbol)};
      for (auto p : kArpabet) s.emplace_back(p);
      s.emplace_back(kWordBoundary);
      return Vocabulary(VocabKind::phoneme, std::move(s));
    }();
    return v;
  }

  static const Vocabulary& of(VocabKind kind) {
    return kind == VocabKind::character ? characters() : phonemes();
  }

  VocabKind kind() const { return kind_; }
  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  const std::string& symbol(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
      raise(ErrorKind::TokenError, "token id " + std::to_string(id) + " out of range");
    return symbols_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(std::string_view symbol) const { return find(symbol).has_value(); }

  /// JSON array of symbols in id order.
  std::string to_json() const {
    std::string out = "[";
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (i) out += ",";
      out += '"';
      for (char c : symbols_[i]) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
      }
      out += '"';
    }
    return out + "]";
  }

 private:
  VocabKind kind_;
  std::vector<std::string> symbols_;
  std::map<std::string, TokenId, std::less<>> index_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  const Vocabulary* vocab = nullptr;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSequence& o) const { return ids == o.ids && vocab == o.vocab; }
};

/// Targets must be in range and blank-free.
inline void check_target(const TokenSequence& seq, std::size_t vocab_size) {
  for (TokenId id : seq.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
      raise(ErrorKind::TokenError, "token id " + std::to_string(id) + " outside vocabulary");
    if (id == kBlank) raise(ErrorKind::TokenError, "blank id in target sequence");
  }
}

}  // namespace c2t::tok
