#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "embsteal/errors.hpp"
#include "embsteal/records.hpp"

namespace embsteal {

// Byte range of one token inside the source text.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Splits on whitespace; every ASCII punctuation character is a token of its
// own. Non-ASCII bytes are treated as word characters.
inline std::vector<TokenSpan> token_spans(std::string_view text) {
  std::vector<TokenSpan> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (c < 0x80 && std::ispunct(c)) {
      out.push_back({i, i + 1});
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size()) {
        const auto d = static_cast<unsigned char>(text[i]);
        if (std::isspace(d) || (d < 0x80 && std::ispunct(d))) break;
        ++i;
      }
      out.push_back({start, i});
    }
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view text, bool lowercase = true) {
  std::vector<std::string> words;
  for (const auto& s : token_spans(text)) {
    std::string w(text.substr(s.begin, s.end - s.begin));
    if (lowercase) {
      for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    words.push_back(std::move(w));
  }
  return words;
}

inline std::size_t count_tokens(std::string_view text) { return token_spans(text).size(); }

// Cuts text after its first `max_tokens` tokens. Returns the text unchanged
// when it is already short enough.
inline std::string truncate_to_tokens(std::string_view text, std::size_t max_tokens) {
  const auto spans = token_spans(text);
  if (spans.size() <= max_tokens) return std::string(text);
  if (max_tokens == 0) return {};
  return std::string(text.substr(0, spans[max_tokens - 1].end));
}

inline constexpr std::string_view kQueryPrefix = "query: ";
inline constexpr std::string_view kPassagePrefix = "document: ";

inline std::string_view kind_prefix(TextKind kind) { return kind == TextKind::query ? kQueryPrefix : kPassagePrefix; }

// Token ids padded to max_len plus the matching attention mask.
struct EncodedText {
  std::vector<std::size_t> ids;
  std::vector<bool> mask;

  std::size_t length() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

// Word-level vocabulary with [PAD]=0 and [UNK]=1.
class Tokenizer {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::string_view kPadToken = "[PAD]";
  static constexpr std::string_view kUnkToken = "[UNK]";

  Tokenizer(std::vector<std::string> vocab, std::size_t max_len, bool lowercase = true)
      : vocab_(std::move(vocab)), max_len_(max_len), lowercase_(lowercase) {
    if (max_len_ == 0) throw ConfigError("tokenizer max_len must be positive");
    if (vocab_.size() < 2 || vocab_[kPad] != kPadToken || vocab_[kUnk] != kUnkToken) {
      throw DataError("vocabulary must start with [PAD] and [UNK]");
    }
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (!index_.emplace(vocab_[i], i).second) throw DataError("duplicate vocabulary token '" + vocab_[i] + "'");
    }
  }

  std::size_t size() const { return vocab_.size(); }
  std::size_t max_len() const { return max_len_; }
  bool lowercase() const { return lowercase_; }
  const std::vector<std::string>& vocab() const { return vocab_; }

  std::size_t id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  // Prefixes the text by kind, tokenizes, truncates to max_len and pads.
  EncodedText encode(const TextRecord& rec) const {
    std::string full(kind_prefix(rec.kind));
    full += rec.text;
    auto words = split_words(full, lowercase_);
    EncodedText out;
    out.ids.assign(max_len_, kPad);
    out.mask.assign(max_len_, false);
    if (words.empty()) words.emplace_back(kUnkToken);
    const std::size_t n = std::min(words.size(), max_len_);
    for (std::size_t i = 0; i < n; ++i) {
      out.ids[i] = id_of(words[i]);
      out.mask[i] = true;
    }
    return out;
  }

  // One token per line; line number is the id.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary " + path.string());
    for (const auto& t : vocab_) out << t << '\n';
  }

  static Tokenizer load(const std::filesystem::path& path, std::size_t max_len, bool lowercase = true) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary " + path.string());
    std::vector<std::string> vocab;
    std::string line;
    while (std::getline(in, line)) vocab.push_back(line);
    return Tokenizer(std::move(vocab), max_len, lowercase);
  }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t max_len_;
  bool lowercase_;
};

// Prefix words that the encoder sees in front of every text. Passing these
// as `reserved` to build_vocab keeps query and passage encodings distinct.
inline std::vector<std::string> prefix_tokens() { return {"query", "document", ":"}; }

// Specials, then `reserved` tokens, then the most frequent lowercased words
// of the corpus (ties broken lexicographically) until the vocabulary has
// `vocab_size` entries.
inline Tokenizer build_vocab(std::span<const TextRecord> corpus, std::size_t vocab_size, std::size_t max_len,
                             std::span<const std::string> reserved = {}) {
  if (vocab_size < 16) throw ConfigError("vocabulary size must be at least 16");
  if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& rec : corpus) {
    for (auto& w : split_words(rec.text)) ++counts[std::move(w)];
  }
  std::vector<std::string> vocab = {std::string(Tokenizer::kPadToken), std::string(Tokenizer::kUnkToken)};
  for (const auto& r : reserved) {
    if (vocab.size() >= vocab_size) break;
    if (std::find(vocab.begin(), vocab.end(), r) == vocab.end()) vocab.push_back(r);
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, c] : counts) {
    if (std::find(vocab.begin(), vocab.end(), w) == vocab.end()) ranked.emplace_back(w, c);
  }
  // counts is ordered, so a stable sort on count keeps ties lexicographic.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, c] : ranked) {
    if (vocab.size() >= vocab_size) break;
    vocab.push_back(w);
  }
  return Tokenizer(std::move(vocab), max_len);
}

}  // namespace embsteal
