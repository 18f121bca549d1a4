#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "c2t/error.hpp"
#include "c2t/tokenizers/vocabulary.hpp"

namespace c2t::tok {

/// Lowercase, keep only a-z, space and apostrophe, collapse whitespace runs,
/// trim. Throws EmptyText when nothing survives.
inline std::string normalize(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
    if (!((c >= 'a' && c <= 'z') || c == '\'')) continue;
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(c);
  }
  if (out.empty()) raise(ErrorKind::EmptyText, "text is empty after normalization");
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream is{std::string(text)};
  for (std::string w; is >> w;) words.push_back(std::move(w));
  return words;
}

// ---------------------------------------------------------------------------
// Characters

inline TokenSequence encode_chars(std::string_view normalized) {
  const auto& vocab = Vocabulary::characters();
  if (normalized.empty()) raise(ErrorKind::EmptyText, "cannot encode empty text");
  TokenSequence seq{{}, &vocab};
  seq.ids.reserve(normalized.size());
  for (char c : normalized) {
    auto id = vocab.find(std::string_view(&c, 1));
    if (!id) raise(ErrorKind::TokenError, std::string("unmappable character '") + c + "'");
    seq.ids.push_back(*id);
  }
  return seq;
}

inline std::string decode_chars(const std::vector<TokenId>& ids) {
  const auto& vocab = Vocabulary::characters();
  std::string out;
  for (TokenId id : ids) {
    if (id == kBlank) raise(ErrorKind::TokenError, "blank id in decode_chars input; collapse first");
    out += vocab.symbol(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phonemes

struct Lexicon {
  std::map<std::string, std::vector<std::string>> entries;
  std::size_t duplicates = 0;

  std::size_t size() const { return entries.size(); }
  const std::vector<std::string>* find(const std::string& word) const {
    auto it = entries.find(word);
    return it == entries.end() ? nullptr : &it->second;
  }
};

/// `word PH1 PH2 ...` per line, `#` starts a comment. Trailing stress digits
/// (AH0, IY1) are dropped so pronunciation dictionaries load unchanged.
/// The first pronunciation of a word wins.
inline Lexicon parse_lexicon(std::istream& is) {
  const auto& vocab = Vocabulary::phonemes();
  Lexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string raw_word;
    if (!(fields >> raw_word)) continue;
    std::string word;
    try {
      word = normalize(raw_word);
    } catch (const Error&) {
      raise(ErrorKind::FormatError, "line " + std::to_string(lineno) + ": unusable word '" + raw_word + "'");
    }
    std::vector<std::string> phones;
    for (std::string ph; fields >> ph;) {
      for (auto& c : ph) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      while (!ph.empty() && std::isdigit(static_cast<unsigned char>(ph.back()))) ph.pop_back();
      if (ph.empty() || ph == kWordBoundary || !vocab.contains(ph) || ph == kBlankSymbol)
        raise(ErrorKind::FormatError,
              "line " + std::to_string(lineno) + ": phoneme '" + ph + "' not in inventory");
      phones.push_back(ph);
    }
    if (phones.empty())
      raise(ErrorKind::FormatError, "line " + std::to_string(lineno) + ": no pronunciation for " + word);
    if (!lex.entries.emplace(word, std::move(phones)).second) ++lex.duplicates;
  }
  return lex;
}

inline Lexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) raise(ErrorKind::IoError, "cannot open lexicon " + path.string());
  return parse_lexicon(is);
}

/// Letter-name pronunciations used when a word is missing from the lexicon.
inline const std::vector<std::string>& letter_fallback(char letter) {
  static const std::map<char, std::vector<std::string>> table = {
      {'a', {"EY"}},      {'b', {"B", "IY"}},  {'c', {"S", "IY"}},  {'d', {"D", "IY"}},
      {'e', {"IY"}},      {'f', {"EH", "F"}},  {'g', {"JH", "IY"}}, {'h', {"EY", "CH"}},
      {'i', {"AY"}},      {'j', {"JH", "EY"}}, {'k', {"K", "EY"}},  {'l', {"EH", "L"}},
      {'m', {"EH", "M"}}, {'n', {"EH", "N"}},  {'o', {"OW"}},       {'p', {"P", "IY"}},
      {'q', {"K", "Y", "UW"}}, {'r', {"AA", "R"}}, {'s', {"EH", "S"}}, {'t', {"T", "IY"}},
      {'u', {"Y", "UW"}}, {'v', {"V", "IY"}},  {'w', {"D", "AH", "B", "AH", "L", "Y", "UW"}},
      {'x', {"EH", "K", "S"}}, {'y', {"W", "AY"}}, {'z', {"Z", "IY"}}};
  static const std::vector<std::string> none;
  auto it = table.find(letter);
  return it == table.end() ? none : it->second;
}

struct PhonemeEncoding {
  TokenSequence tokens;
  bool oov = false;
  std::vector<std::string> oov_words;
};

/// Per-word lexicon lookup, words separated by the boundary token.
inline PhonemeEncoding encode_phonemes(std::string_view normalized, const Lexicon& lexicon) {
  const auto& vocab = Vocabulary::phonemes();
  const auto words = split_words(normalized);
  if (words.empty()) raise(ErrorKind::EmptyText, "cannot encode empty text");
  const TokenId boundary = *vocab.find(kWordBoundary);
  PhonemeEncoding enc;
  enc.tokens.vocab = &vocab;
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w) enc.tokens.ids.push_back(boundary);
    if (const auto* phones = lexicon.find(words[w])) {
      for (const auto& ph : *phones) enc.tokens.ids.push_back(*vocab.find(ph));
      continue;
    }
    enc.oov = true;
    enc.oov_words.push_back(words[w]);
    for (char c : words[w])
      for (const auto& ph : letter_fallback(c)) enc.tokens.ids.push_back(*vocab.find(ph));
  }
  return enc;
}

/// Text rendering of phoneme ids: words split at boundaries, phonemes
/// lowercased and joined by apostrophes ("k'ae't"). The result is stable
/// under normalize(), so text metrics apply unchanged.
inline std::string decode_phonemes(const std::vector<TokenId>& ids) {
  const auto& vocab = Vocabulary::phonemes();
  const TokenId boundary = *vocab.find(kWordBoundary);
  std::string out;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (!out.empty()) out += ' ';
    out += word;
    word.clear();
  };
  for (TokenId id : ids) {
    if (id == kBlank) raise(ErrorKind::TokenError, "blank id in decode_phonemes input; collapse first");
    if (id == boundary) {
      flush();
      continue;
    }
    if (!word.empty()) word += '\'';
    for (char c : vocab.symbol(id)) word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  flush();
  return out;
}

/// Facade used by training and evaluation: text -> target ids, ids -> text.
class Tokenizer {
 public:
  explicit Tokenizer(VocabKind kind, std::shared_ptr<const Lexicon> lexicon = nullptr)
      : kind_(kind), lexicon_(std::move(lexicon)) {
    if (kind_ == VocabKind::phoneme && !lexicon_) lexicon_ = std::make_shared<Lexicon>();
  }

  VocabKind kind() const { return kind_; }
  const Vocabulary& vocab() const { return Vocabulary::of(kind_); }
  std::size_t vocab_size() const { return vocab().size(); }

  struct Encoded {
    TokenSequence tokens;
    bool oov = false;
  };

  Encoded encode(std::string_view text) const {
    const std::string norm = normalize(text);
    if (kind_ == VocabKind::character) return {encode_chars(norm), false};
    auto enc = encode_phonemes(norm, *lexicon_);
    return {std::move(enc.tokens), enc.oov};
  }

  std::string render(const std::vector<TokenId>& ids) const {
    return kind_ == VocabKind::character ? decode_chars(ids) : decode_phonemes(ids);
  }

  /// Reference text as the metrics see it for this tokenization.
  std::string reference(std::string_view text) const { return render(encode(text).tokens.ids); }

 private:
  VocabKind kind_;
  std::shared_ptr<const Lexicon> lexicon_;
};

}  // namespace c2t::tok
