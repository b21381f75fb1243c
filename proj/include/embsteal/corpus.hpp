#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "embsteal/errors.hpp"
#include "embsteal/hash.hpp"
#include "embsteal/records.hpp"
#include "embsteal/rng.hpp"

namespace embsteal {

struct MalformedLine {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct Collection {
  std::vector<TextRecord> records;
  std::vector<MalformedLine> malformed;
  std::string source;

  std::size_t count(TextKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [&](const TextRecord& r) { return r.kind == kind; }));
  }
};

// "id<TAB>text" per line. Bad lines are reported and skipped; a repeated id
// is fatal.
inline Collection ingest_tsv(std::istream& in, TextKind kind, const std::string& source = "<stream>") {
  Collection c;
  c.source = source;
  std::unordered_map<std::string, std::size_t> first_line;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      c.malformed.push_back({no, "empty line"});
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      c.malformed.push_back({no, "missing TAB"});
      continue;
    }
    std::string id = line.substr(0, tab), text = line.substr(tab + 1);
    if (is_blank(id)) {
      c.malformed.push_back({no, "empty id"});
      continue;
    }
    if (is_blank(text)) {
      c.malformed.push_back({no, "empty text"});
      continue;
    }
    auto [it, fresh] = first_line.emplace(id, no);
    if (!fresh) {
      throw DataError(source + ": duplicate id '" + id + "' on lines " + std::to_string(it->second) + " and " +
                      std::to_string(no));
    }
    c.records.push_back({std::move(id), kind, std::move(text)});
  }
  return c;
}

inline Collection ingest_tsv(const std::filesystem::path& path, TextKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return ingest_tsv(in, kind, path.string());
}

inline void write_tsv(const std::filesystem::path& path, std::span<const TextRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& r : records) {
    if (r.id.find_first_of("\t\n") != std::string::npos || r.text.find('\n') != std::string::npos)
      throw DataError("record " + r.id + " cannot be written as TSV");
    out << r.id << '\t' << r.text << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

struct DedupStats {
  std::size_t ingested = 0;
  std::size_t removed_prefix = 0;
  std::size_t removed_suffix = 0;
  std::size_t removed_exact = 0;

  std::size_t removed() const { return removed_prefix + removed_suffix + removed_exact; }
};

struct DedupResult {
  std::vector<TextRecord> survivors;
  std::vector<std::string> removed_ids;
  DedupStats stats;
};

namespace detail {

// Byte trie with one hash map for all edges.
class EdgeTrie {
 public:
  // True when `s` spells a path from the root.
  bool has_path(std::string_view s) const {
    std::uint32_t node = 0;
    for (unsigned char ch : s) {
      auto it = edges_.find(key(node, ch));
      if (it == edges_.end()) return false;
      node = it->second;
    }
    return true;
  }

  template <typename It>
  void insert(It begin, It end) {
    std::uint32_t node = 0;
    for (It p = begin; p != end; ++p) {
      auto [it, fresh] = edges_.emplace(key(node, static_cast<unsigned char>(*p)), next_);
      if (fresh) ++next_;
      node = it->second;
    }
  }

  bool has_path_reversed(std::string_view s) const {
    std::uint32_t node = 0;
    for (auto p = s.rbegin(); p != s.rend(); ++p) {
      auto it = edges_.find(key(node, static_cast<unsigned char>(*p)));
      if (it == edges_.end()) return false;
      node = it->second;
    }
    return true;
  }

 private:
  static std::uint64_t key(std::uint32_t node, unsigned char ch) { return (static_cast<std::uint64_t>(node) << 8) | ch; }
  std::unordered_map<std::uint64_t, std::uint32_t> edges_;
  std::uint32_t next_ = 1;
};

}  // namespace detail

// Drops every passage whose text is a prefix or suffix of a retained
// passage. Candidates are visited longest first, so a text can only be
// removed by a strictly longer survivor or an identical one with a lower id.
// A text that is both a prefix and a suffix is counted once, as a prefix.
inline DedupResult dedup_contained(std::span<const TextRecord> passages) {
  for (const auto& p : passages)
    if (p.kind != TextKind::passage) throw DataError("dedup expects passages only; got query " + p.id);
  std::vector<std::size_t> order(passages.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto la = passages[a].text.size(), lb = passages[b].text.size();
    if (la != lb) return la > lb;
    return id_less(passages[a].id, passages[b].id);
  });

  DedupResult out;
  out.stats.ingested = passages.size();
  detail::EdgeTrie forward, backward;
  std::unordered_map<std::string_view, std::size_t> exact;
  std::vector<bool> keep(passages.size(), false);
  for (std::size_t i : order) {
    const std::string& t = passages[i].text;
    if (exact.count(t)) {
      ++out.stats.removed_exact;
    } else if (forward.has_path(t)) {
      ++out.stats.removed_prefix;
    } else if (backward.has_path_reversed(t)) {
      ++out.stats.removed_suffix;
    } else {
      keep[i] = true;
      exact.emplace(t, i);
      forward.insert(t.begin(), t.end());
      backward.insert(t.rbegin(), t.rend());
    }
  }
  for (std::size_t i = 0; i < passages.size(); ++i) {
    if (keep[i]) {
      out.survivors.push_back(passages[i]);
    } else {
      out.removed_ids.push_back(passages[i].id);
    }
  }
  return out;
}

struct SplitSpec {
  std::size_t dev_passages = 0;
  std::size_t dev_queries = 0;
  std::optional<std::size_t> train_sample;  // nullopt = all
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<TextRecord> train;
  std::vector<TextRecord> dev;
  std::string dev_ids_hash;
};

// Dev is the tail of each kind in id order. The train sample is uniform
// without replacement over what is left, patched to include both kinds.
inline Split split_and_sample(std::span<const TextRecord> records, const SplitSpec& spec) {
  std::vector<std::size_t> by_kind[2];
  for (std::size_t i = 0; i < records.size(); ++i) by_kind[records[i].kind == TextKind::query ? 0 : 1].push_back(i);
  const std::size_t want[2] = {spec.dev_queries, spec.dev_passages};
  std::vector<bool> is_dev(records.size(), false);
  for (int k = 0; k < 2; ++k) {
    auto& idx = by_kind[k];
    if (want[k] > idx.size()) {
      throw ConfigError("dev split asks for " + std::to_string(want[k]) + " " + (k ? "passages" : "queries") +
                        " but only " + std::to_string(idx.size()) + " exist");
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return id_less(records[a].id, records[b].id); });
    for (std::size_t j = idx.size() - want[k]; j < idx.size(); ++j) is_dev[idx[j]] = true;
  }

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!is_dev[i]) pool.push_back(i);
  std::vector<bool> in_train(records.size(), false);
  if (!spec.train_sample) {
    for (std::size_t i : pool) in_train[i] = true;
  } else {
    const std::size_t n = *spec.train_sample;
    if (n > pool.size()) {
      throw ConfigError("train sample of " + std::to_string(n) + " exceeds the " + std::to_string(pool.size()) +
                        " records left after the dev split");
    }
    std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return id_less(records[a].id, records[b].id); });
    Rng rng(derive_key(spec.seed, "train-sample"));
    rng.shuffle(pool.begin(), pool.end());
    auto has_kind = [&](TextKind k) {
      return std::any_of(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n),
                         [&](std::size_t i) { return records[i].kind == k; });
    };
    for (TextKind k : {TextKind::query, TextKind::passage}) {
      if (n < 2 || has_kind(k)) continue;
      auto donor = std::find_if(pool.begin() + static_cast<std::ptrdiff_t>(n), pool.end(),
                                [&](std::size_t i) { return records[i].kind == k; });
      if (donor == pool.end()) continue;
      // Swap out a member of the over-represented kind.
      auto victim = std::find_if(pool.rbegin() + static_cast<std::ptrdiff_t>(pool.size() - n), pool.rend(),
                                 [&](std::size_t i) { return records[i].kind != k; });
      std::iter_swap(donor, victim);
    }
    for (std::size_t j = 0; j < n; ++j) in_train[pool[j]] = true;
  }

  Split s;
  std::string dev_ids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (is_dev[i]) {
      s.dev.push_back(records[i]);
    } else if (in_train[i]) {
      s.train.push_back(records[i]);
    }
  }
  std::vector<std::string> ids;
  for (const auto& r : s.dev) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end(), IdLess{});
  for (const auto& id : ids) dev_ids += id + '\n';
  s.dev_ids_hash = sha256_hex(dev_ids);
  return s;
}

inline nlohmann::ordered_json corpus_manifest(const DedupStats& d, const Split* split, std::uint64_t seed,
                                              const std::string& config_hash = {}) {
  nlohmann::ordered_json j;
  j["ingested"] = d.ingested;
  j["removed_prefix"] = d.removed_prefix;
  j["removed_suffix"] = d.removed_suffix;
  j["removed_exact"] = d.removed_exact;
  j["survivors"] = d.ingested - d.removed();
  if (split) {
    j["train"] = split->train.size();
    j["dev"] = split->dev.size();
    j["dev_ids_hash"] = split->dev_ids_hash;
  }
  j["sample_seed"] = seed;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  return j;
}

}  // namespace embsteal
