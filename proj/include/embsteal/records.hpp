#pragma once

#include <cctype>
#include <map>
#include <string>
#include <string_view>

#include "embsteal/errors.hpp"

namespace embsteal {

enum class TextKind { query, passage };

inline const char* kind_name(TextKind k) { return k == TextKind::query ? "query" : "passage"; }

inline TextKind parse_kind(std::string_view s) {
  if (s == "query") return TextKind::query;
  if (s == "passage") return TextKind::passage;
  throw DataError("unknown text kind '" + std::string(s) + "'");
}

// One query or passage.
struct TextRecord {
  std::string id;
  TextKind kind = TextKind::passage;
  std::string text;

  friend bool operator==(const TextRecord&, const TextRecord&) = default;
};

inline bool is_blank(std::string_view s) {
  for (unsigned char c : s) {
    if (!std::isspace(c)) return false;
  }
  return true;
}

// Ordering used wherever "by id" matters: runs of digits compare by numeric
// value, everything else bytewise. "p9" < "p10", "7" < "12".
inline bool id_less(std::string_view a, std::string_view b) {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const bool da = std::isdigit(static_cast<unsigned char>(a[i]));
    const bool db = std::isdigit(static_cast<unsigned char>(b[j]));
    if (da && db) {
      std::size_t ei = i, ej = j;
      while (ei < a.size() && std::isdigit(static_cast<unsigned char>(a[ei]))) ++ei;
      while (ej < b.size() && std::isdigit(static_cast<unsigned char>(b[ej]))) ++ej;
      std::size_t si = i, sj = j;
      while (si + 1 < ei && a[si] == '0') ++si;
      while (sj + 1 < ej && b[sj] == '0') ++sj;
      const std::string_view na = a.substr(si, ei - si), nb = b.substr(sj, ej - sj);
      if (na.size() != nb.size()) return na.size() < nb.size();
      if (na != nb) return na < nb;
      // Equal value: fewer leading zeros first, so the order stays total.
      if (ei - i != ej - j) return ei - i < ej - j;
      i = ei;
      j = ej;
    } else {
      if (a[i] != b[j]) return static_cast<unsigned char>(a[i]) < static_cast<unsigned char>(b[j]);
      ++i;
      ++j;
    }
  }
  return a.size() - i < b.size() - j;
}

struct IdLess {
  bool operator()(std::string_view a, std::string_view b) const { return id_less(a, b); }
};

// (query id, doc id) -> graded relevance
using Qrels = std::map<std::string, std::map<std::string, int>>;

}  // namespace embsteal
