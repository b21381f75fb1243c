#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "embsteal/binio.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/teachers.hpp"

namespace embsteal {

// Binary embedding store:
//   "EMBC1" u32 dim u64 count
//   per entry: u32 id_len, id bytes, dim × f32
// Entries are appended and flushed before the header count is bumped, so a
// torn write can only damage the entry in flight.
class EmbeddingCache {
 public:
  static constexpr std::string_view kMagic = "EMBC1";
  static constexpr std::streamoff kHeaderSize = 5 + 4 + 8;

  EmbeddingCache() = default;
  explicit EmbeddingCache(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return order_.size(); }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  const std::vector<std::string>& ids() const { return order_; }

  const EmbeddingVector& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("no cached embedding for id " + id);
    return vectors_[it->second];
  }

  const EmbeddingVector* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &vectors_[it->second];
  }

  // Offset just past the last complete entry when loaded from disk.
  std::streamoff committed_bytes() const { return committed_; }

  // Reads every complete entry; a trailing partial entry is ignored.
  static EmbeddingCache load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open cache " + path.string());
    binio::expect_magic(in, kMagic, "embedding cache");
    EmbeddingCache cache(binio::get<std::uint32_t>(in, "cache dim"));
    (void)binio::get<std::uint64_t>(in, "cache count");
    if (cache.dim_ == 0) throw DataError("cache " + path.string() + " has dim 0");
    cache.committed_ = kHeaderSize;
    std::vector<float> buf(cache.dim_);
    for (;;) {
      std::uint32_t len = 0;
      if (!binio::try_get(in, len)) break;
      std::string id(len, '\0');
      if (!in.read(id.data(), len)) break;
      bool complete = true;
      for (float& f : buf) {
        std::uint32_t bits = 0;
        if (!binio::try_get(in, bits)) {
          complete = false;
          break;
        }
        f = std::bit_cast<float>(bits);
      }
      if (!complete) break;
      std::vector<double> v(buf.begin(), buf.end());
      cache.insert(id, EmbeddingVector{std::move(v)});
      cache.committed_ = static_cast<std::streamoff>(in.tellg());
    }
    return cache;
  }

  // Writes a JSON object per line: {"id": ..., "embedding": [...]}.
  void export_jsonl(std::ostream& out) const {
    for (std::size_t i = 0; i < order_.size(); ++i) {
      nlohmann::ordered_json row;
      row["id"] = order_[i];
      row["embedding"] = vectors_[i].values;
      out << row.dump() << '\n';
    }
  }

  // In-memory insert; a repeated id overwrites.
  void insert(const std::string& id, EmbeddingVector v) {
    if (v.dim() != dim_) throw DataError("embedding for " + id + " has the wrong dimension");
    auto [it, fresh] = index_.emplace(id, vectors_.size());
    if (!fresh) {
      vectors_[it->second] = std::move(v);
      return;
    }
    order_.push_back(id);
    vectors_.push_back(std::move(v));
  }

 private:
  friend class CacheAppender;

  std::size_t dim_ = 0;
  std::vector<std::string> order_;
  std::vector<EmbeddingVector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
  std::streamoff committed_ = kHeaderSize;
};

// Single writer. Opening an existing file drops any torn tail first.
class CacheAppender {
 public:
  CacheAppender(const std::filesystem::path& path, std::size_t dim) : path_(path) {
    if (dim == 0) throw ConfigError("cache dim must be positive");
    if (std::filesystem::exists(path)) {
      cache_ = EmbeddingCache::load(path);
      if (cache_.dim() != dim) {
        throw DataError("cache " + path.string() + " holds dim " + std::to_string(cache_.dim()) + ", expected " +
                        std::to_string(dim));
      }
      std::filesystem::resize_file(path, static_cast<std::uintmax_t>(cache_.committed_bytes()));
      out_.open(path, std::ios::binary | std::ios::in | std::ios::out);
    } else {
      if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
      cache_ = EmbeddingCache(dim);
      out_.open(path, std::ios::binary | std::ios::out | std::ios::trunc);
      binio::put_bytes(out_, EmbeddingCache::kMagic);
      binio::put(out_, static_cast<std::uint32_t>(dim));
      binio::put(out_, static_cast<std::uint64_t>(0));
    }
    if (!out_) throw DataError("cannot open cache for writing: " + path.string());
    write_count();
  }

  const EmbeddingCache& cache() const { return cache_; }
  bool contains(const std::string& id) const { return cache_.contains(id); }

  void append(const std::string& id, const EmbeddingVector& v) {
    if (cache_.contains(id)) throw DataError("id " + id + " is already cached");
    if (v.dim() != cache_.dim()) throw DataError("embedding for " + id + " has the wrong dimension");
    if (id.size() > std::numeric_limits<std::uint32_t>::max()) throw DataError("id too long");
    out_.seekp(0, std::ios::end);
    binio::put(out_, static_cast<std::uint32_t>(id.size()));
    binio::put_bytes(out_, id);
    for (double x : v.values) binio::put_f32(out_, x);
    out_.flush();
    if (!out_) throw DataError("failed appending to cache " + path_.string());
    std::vector<double> stored;
    stored.reserve(v.dim());
    for (double x : v.values) stored.push_back(static_cast<float>(x));
    cache_.insert(id, EmbeddingVector{std::move(stored)});
    write_count();
  }

 private:
  void write_count() {
    out_.seekp(5 + 4);
    binio::put(out_, static_cast<std::uint64_t>(cache_.size()));
    out_.flush();
    if (!out_) throw DataError("failed updating cache header " + path_.string());
  }

  std::filesystem::path path_;
  EmbeddingCache cache_;
  std::fstream out_;
};

// Serves embeddings from a previously harvested cache.
class CachedTeacher : public Teacher {
 public:
  CachedTeacher(TeacherSpec spec, EmbeddingCache cache) : spec_(std::move(spec)), cache_(std::move(cache)) {
    if (cache_.dim() != spec_.dim) throw ConfigError("cache dimension does not match teacher " + spec_.name);
  }

  const TeacherSpec& spec() const override { return spec_; }

  std::vector<EmbeddingVector> embed(std::span<const TextRecord> batch) override {
    std::vector<EmbeddingVector> out;
    out.reserve(batch.size());
    for (const auto& rec : batch) out.push_back(cache_.at(rec.id));
    return out;
  }

 private:
  TeacherSpec spec_;
  EmbeddingCache cache_;
};

}  // namespace embsteal
