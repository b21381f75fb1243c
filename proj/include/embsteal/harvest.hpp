#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "embsteal/cache.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/records.hpp"
#include "embsteal/teachers.hpp"
#include "embsteal/tokenizer.hpp"

namespace embsteal {

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds initial{200};
  std::chrono::milliseconds cap{8000};

  std::chrono::milliseconds delay(int attempt) const {
    auto d = initial;
    for (int i = 0; i < attempt && d < cap; ++i) d *= 2;
    return std::min(d, cap);
  }
};

struct HarvestOptions {
  std::size_t batch_size = 64;
  RetryPolicy retry;
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
  std::string config_hash;
};

struct HarvestManifest {
  std::string teacher;
  std::size_t dim = 0;
  std::size_t requested = 0;
  std::size_t already_cached = 0;
  std::size_t embedded = 0;
  std::size_t teacher_calls = 0;
  std::vector<std::string> failed_ids;
  std::vector<std::string> truncated_ids;
  std::int64_t total_tokens = 0;
  Cents estimated_cost;
  std::string config_hash;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["teacher"] = teacher;
    j["dim"] = dim;
    j["requested"] = requested;
    j["already_cached"] = already_cached;
    j["embedded"] = embedded;
    j["teacher_calls"] = teacher_calls;
    j["failed"] = failed_ids.size();
    j["failed_ids"] = failed_ids;
    j["truncated"] = truncated_ids.size();
    j["truncated_ids"] = truncated_ids;
    j["total_tokens"] = total_tokens;
    j["estimated_cost"] = estimated_cost.str();
    j["estimated_cost_cents"] = estimated_cost.value;
    j["config_hash"] = config_hash;
    return j;
  }
};

// Token count the victim would bill for, approximated with the student's
// tokenization rule, after truncation to the teacher limit.
inline std::int64_t billed_tokens(const TeacherSpec& spec, std::span<const TextRecord> records) {
  std::int64_t total = 0;
  for (const auto& r : records)
    total += static_cast<std::int64_t>(std::min(count_tokens(r.text), spec.max_tokens));
  return total;
}

namespace detail {

// Calls the teacher, retrying transient failures. Returns false when the
// retries run out.
inline bool embed_with_retry(Teacher& teacher, std::span<const TextRecord> batch, const HarvestOptions& opt,
                             std::vector<EmbeddingVector>& out, std::size_t& calls) {
  for (int attempt = 0;; ++attempt) {
    try {
      ++calls;
      out = teacher.embed(batch);
      if (out.size() != batch.size()) throw MalformedResponseError("teacher returned the wrong number of vectors");
      return true;
    } catch (const TransportError&) {
    } catch (const MalformedResponseError&) {
    }
    if (attempt >= opt.retry.max_retries) return false;
    opt.sleep(opt.retry.delay(attempt));
  }
}

}  // namespace detail

// Embeds every record not yet in the cache. Safe to re-run: cached ids are
// skipped, so an interrupted harvest resumes where it stopped.
inline HarvestManifest harvest(Teacher& teacher, std::span<const TextRecord> records,
                               const std::filesystem::path& cache_path, const HarvestOptions& opt = {}) {
  const TeacherSpec& spec = teacher.spec();
  spec.validate();
  if (opt.batch_size == 0) throw ConfigError("harvest batch size must be positive");
  CacheAppender cache(cache_path, spec.dim);

  HarvestManifest m;
  m.teacher = spec.name;
  m.dim = spec.dim;
  m.config_hash = opt.config_hash;

  std::set<std::string> seen;
  std::vector<TextRecord> todo;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) continue;
    ++m.requested;
    if (cache.contains(r.id)) {
      ++m.already_cached;
      continue;
    }
    TextRecord sub = r;
    if (count_tokens(r.text) > spec.max_tokens) {
      sub.text = truncate_to_tokens(r.text, spec.max_tokens);
      m.truncated_ids.push_back(r.id);
    }
    todo.push_back(std::move(sub));
  }
  m.total_tokens = billed_tokens(spec, todo);
  m.estimated_cost = estimate_cost(spec, m.total_tokens);

  auto commit = [&](std::span<const TextRecord> batch, std::vector<EmbeddingVector>& vecs) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (vecs[i].dim() != spec.dim) throw DataError("teacher " + spec.name + " returned a vector of wrong dimension");
      cache.append(batch[i].id, EmbeddingVector::normalized(std::move(vecs[i].values)));
      ++m.embedded;
    }
  };

  std::vector<EmbeddingVector> vecs;
  for (std::size_t start = 0; start < todo.size(); start += opt.batch_size) {
    const std::span<const TextRecord> batch(todo.data() + start, std::min(opt.batch_size, todo.size() - start));
    if (detail::embed_with_retry(teacher, batch, opt, vecs, m.teacher_calls)) {
      commit(batch, vecs);
      continue;
    }
    // Isolate the bad records so the rest of the batch still lands.
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto one = batch.subspan(i, 1);
      if (batch.size() > 1 && detail::embed_with_retry(teacher, one, opt, vecs, m.teacher_calls)) {
        commit(one, vecs);
      } else {
        m.failed_ids.push_back(one[0].id);
      }
    }
  }
  return m;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace embsteal
