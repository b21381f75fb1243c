#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "embsteal/cache.hpp"
#include "embsteal/config.hpp"
#include "embsteal/corpus.hpp"
#include "embsteal/harvest.hpp"
#include "embsteal/live_client.hpp"
#include "embsteal/retrieval.hpp"
#include "embsteal/student.hpp"
#include "embsteal/trainer.hpp"
#include "embsteal/world.hpp"

namespace embsteal {

struct ExperimentData {
  std::vector<TextRecord> pool;  // distillation texts
  EvalDataset eval;
  std::optional<SyntheticWorld> world;
  std::optional<DedupStats> dedup;

  // Everything a teacher must embed: the pool plus both eval sides.
  std::vector<TextRecord> all_records() const {
    std::vector<TextRecord> out = pool;
    out.insert(out.end(), eval.queries.begin(), eval.queries.end());
    out.insert(out.end(), eval.passages.begin(), eval.passages.end());
    return out;
  }
};

inline ExperimentData data_from_world(const WorldConfig& w) {
  ExperimentData d;
  d.world = SyntheticWorld::generate(w);
  d.pool = d.world->train_records();
  d.eval = {"synthetic", d.world->eval_queries(), d.world->eval_passages(), d.world->eval_qrels()};
  return d;
}

inline ExperimentData load_data(const ExperimentConfig& cfg) {
  if (!cfg.corpus) return data_from_world(cfg.effective_world());
  const auto& c = *cfg.corpus;
  ExperimentData d;
  auto passages = ingest_tsv(std::filesystem::path(c.passages), TextKind::passage);
  auto queries = ingest_tsv(std::filesystem::path(c.queries), TextKind::query);
  if (c.dedup) {
    auto r = dedup_contained(passages.records);
    d.dedup = r.stats;
    d.pool = std::move(r.survivors);
  } else {
    d.pool = std::move(passages.records);
  }
  d.pool.insert(d.pool.end(), queries.records.begin(), queries.records.end());
  d.eval.name = std::filesystem::path(c.eval_queries).stem().string();
  d.eval.queries = ingest_tsv(std::filesystem::path(c.eval_queries), TextKind::query).records;
  d.eval.passages = ingest_tsv(std::filesystem::path(c.eval_passages), TextKind::passage).records;
  d.eval.qrels = read_qrels(std::filesystem::path(c.qrels));
  return d;
}

// Output tree under --out-dir.
struct OutputLayout {
  std::filesystem::path root;

  std::filesystem::path cache(const std::string& teacher) const { return root / "caches" / (teacher + ".embc"); }
  std::filesystem::path cache_manifest(const std::string& teacher) const {
    return root / "caches" / (teacher + ".manifest.json");
  }
  std::filesystem::path student_base() const { return root / "student" / "model"; }
  std::filesystem::path curve() const { return root / "student" / "curve.csv"; }
  std::filesystem::path train_report() const { return root / "student" / "train.json"; }
  std::filesystem::path report(const EncoderPairing& p) const { return root / "reports" / (slug(p) + ".json"); }
  std::filesystem::path run(const EncoderPairing& p) const { return root / "reports" / (slug(p) + ".run"); }
  std::filesystem::path ablate_dir() const { return root / "ablate"; }

  static std::string slug(const EncoderPairing& p) {
    std::string s = p.label();
    std::string out;
    for (char c : s) {
      if (c == '&') out += "-and-";
      else if (c == '/') out += "--";
      else out += c;
    }
    return out;
  }
};

inline std::unique_ptr<Teacher> make_teacher(const TeacherSpec& spec, const ExperimentData& data) {
  if (std::holds_alternative<SimulatedSource>(spec.source)) {
    if (!data.world) throw ConfigError("simulated teacher " + spec.name + " needs a synthetic world, not a file corpus");
    return std::make_unique<SimulatedTeacher>(*data.world, spec);
  }
  if (const auto* c = std::get_if<CacheSource>(&spec.source)) {
    auto cache = EmbeddingCache::load(c->path);
    if (cache.dim() != spec.dim) {
      throw ConfigError("cache " + c->path + " holds dim " + std::to_string(cache.dim()) + " but teacher " + spec.name +
                        " declares " + std::to_string(spec.dim));
    }
    return std::make_unique<CachedTeacher>(spec, std::move(cache));
  }
  return std::make_unique<LiveTeacher>(spec);
}

inline bool is_live(const TeacherSpec& spec) { return std::holds_alternative<LiveSource>(spec.source); }

// Teacher vectors for every record: the harvested cache under out/ when it
// exists, otherwise computed in memory (simulated) or read from the
// configured cache file. Live teachers must be harvested first.
inline EmbeddingCache teacher_embeddings(const TeacherSpec& spec, const ExperimentData& data,
                                         const std::optional<OutputLayout>& layout = std::nullopt,
                                         const std::string& teacher_hash = {}) {
  if (layout && std::filesystem::exists(layout->cache(spec.name))) {
    if (!teacher_hash.empty() && std::filesystem::exists(layout->cache_manifest(spec.name))) {
      const auto m = nlohmann::json::parse(read_file_bytes(layout->cache_manifest(spec.name)), nullptr, false);
      if (!m.is_discarded() && m.value("teacher_hash", teacher_hash) != teacher_hash) {
        throw ConfigError("cache " + layout->cache(spec.name).string() +
                          " was harvested under a different teacher or corpus configuration; re-harvest into another --out-dir");
      }
    }
    auto c = EmbeddingCache::load(layout->cache(spec.name));
    if (c.dim() != spec.dim) throw DataError("cache for " + spec.name + " has dim " + std::to_string(c.dim()));
    return c;
  }
  if (const auto* c = std::get_if<CacheSource>(&spec.source)) return EmbeddingCache::load(c->path);
  if (is_live(spec)) throw DataError("no harvested embeddings for live teacher " + spec.name + "; run harvest first");
  auto teacher = make_teacher(spec, data);
  EmbeddingCache out(spec.dim);
  const auto recs = data.all_records();
  const auto vecs = teacher->embed(recs);
  for (std::size_t i = 0; i < recs.size(); ++i) out.insert(recs[i].id, vecs[i]);
  return out;
}

// Per-id renormalized concatenation over the given records.
inline EmbeddingCache concat_cache(const EmbeddingCache& a, const EmbeddingCache& b, std::span<const TextRecord> records) {
  EmbeddingCache out(a.dim() + b.dim());
  for (const auto& r : records)
    if (!out.contains(r.id)) out.insert(r.id, concat_teachers(a.at(r.id), b.at(r.id)));
  return out;
}

struct TrainOutcome {
  StudentModel model;  // best snapshot
  TrainResult result;
  Split split;
};

inline TrainOutcome train_student(const ExperimentConfig& cfg, const ExperimentData& data,
                                  std::span<const EmbeddingCache* const> caches, const TrainingConfig& tcfg,
                                  const SplitSpec& split_spec) {
  auto split = split_and_sample(data.pool, split_spec);
  if (split.dev.empty()) throw ConfigError("the dev split is empty; set split.dev_passages / split.dev_queries");
  const auto train_pairs = make_targets(split.train, caches);
  const auto dev_pairs = make_targets(split.dev, caches);
  std::size_t teacher_dim = 0;
  for (const auto* c : caches) teacher_dim += c->dim();
  auto tok = build_vocab(split.train, cfg.student.vocab_size, cfg.student.max_len, prefix_tokens());
  auto model = make_student(std::move(tok), cfg.student.encoder(tcfg.dropout), teacher_dim, tcfg.seed, tcfg.projection_bias);
  auto result = train(model, tcfg, train_pairs, dev_pairs);
  StudentModel best = result.best;
  return {std::move(best), std::move(result), std::move(split)};
}

inline ojson train_summary(const TrainResult& r, const Split& split, const std::string& config_hash) {
  ojson j;
  j["config_hash"] = config_hash;
  j["train_pairs"] = split.train.size();
  j["dev_pairs"] = split.dev.size();
  j["dev_ids_hash"] = split.dev_ids_hash;
  j["steps"] = r.steps;
  j["best_step"] = r.best_step;
  j["best_dev_loss"] = r.best_dev_loss;
  j["stopped_early"] = r.stopped_early;
  j["aborted"] = r.aborted;
  if (r.aborted) j["abort_reason"] = r.abort_reason;
  return j;
}

}  // namespace embsteal
