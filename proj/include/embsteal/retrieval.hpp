#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "embsteal/cache.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/parallel.hpp"
#include "embsteal/records.hpp"
#include "embsteal/student.hpp"
#include "embsteal/tensor.hpp"

namespace embsteal {

// Row-major id → vector table with a fixed dimension.
class VectorIndex {
 public:
  explicit VectorIndex(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ConfigError("vector index dim must be positive");
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

  void add(std::string id, std::span<const double> v) {
    if (v.size() != dim_) {
      throw ShapeError("vector for " + id + " has dim " + std::to_string(v.size()) + ", index expects " +
                       std::to_string(dim_));
    }
    ids_.push_back(std::move(id));
    data_.insert(data_.end(), v.begin(), v.end());
  }

  void scale(double c) {
    for (double& x : data_) x *= c;
  }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<double> data_;
};

struct ScoredDoc {
  std::string doc_id;
  double score = 0.0;
};

struct QueryRanking {
  std::string query_id;
  std::vector<ScoredDoc> docs;  // score desc, doc_id asc
};

// Query order follows the query index.
using RunRanking = std::vector<QueryRanking>;

// Exhaustive top-k by dot product. Ties go to the smaller doc_id.
inline RunRanking exact_search(const VectorIndex& queries, const VectorIndex& passages, std::size_t k,
                               std::size_t workers = 0) {
  if (k == 0) throw ConfigError("search depth k must be at least 1");
  if (queries.dim() != passages.dim()) {
    throw ShapeError("query dim " + std::to_string(queries.dim()) + " differs from passage dim " +
                     std::to_string(passages.dim()));
  }
  const std::size_t n = passages.size(), depth = std::min(k, n);
  RunRanking run(queries.size());
  parallel_for(
      queries.size(),
      [&](std::size_t q) {
        std::vector<double> scores(n);
        for (std::size_t p = 0; p < n; ++p) scores[p] = dot(queries.row(q), passages.row(p));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        auto before = [&](std::size_t a, std::size_t b) {
          if (scores[a] != scores[b]) return scores[a] > scores[b];
          return passages.id(a) < passages.id(b);
        };
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(depth), order.end(), before);
        QueryRanking& out = run[q];
        out.query_id = queries.id(q);
        out.docs.reserve(depth);
        for (std::size_t r = 0; r < depth; ++r) out.docs.push_back({passages.id(order[r]), scores[order[r]]});
      },
      workers);
  return run;
}

enum class Gain { linear, exponential };

struct MetricSummary {
  std::map<std::string, double> per_query;
  double mean = 0.0;
  std::size_t evaluated = 0;
};

namespace detail {

inline const std::vector<ScoredDoc>* find_ranking(const std::map<std::string, const QueryRanking*>& by_id,
                                                  const std::string& qid) {
  auto it = by_id.find(qid);
  return it == by_id.end() ? nullptr : &it->second->docs;
}

inline std::map<std::string, const QueryRanking*> index_run(const RunRanking& run) {
  std::map<std::string, const QueryRanking*> out;
  for (const auto& q : run) out.emplace(q.query_id, &q);
  return out;
}

inline void finish(MetricSummary& m) {
  m.evaluated = m.per_query.size();
  double sum = 0.0;
  for (const auto& [q, v] : m.per_query) sum += v;
  m.mean = m.evaluated ? sum / static_cast<double>(m.evaluated) : 0.0;
}

}  // namespace detail

// DCG = Σ gain(rel_i)/log₂(i+1) over the first k retrieved; unjudged docs
// count as 0. Queries with no positive judgment are left out of the mean.
inline MetricSummary ndcg_at_k(const RunRanking& run, const Qrels& qrels, std::size_t k = 10, Gain gain = Gain::linear) {
  auto g = [gain](int rel) { return gain == Gain::linear ? static_cast<double>(rel) : std::exp2(rel) - 1.0; };
  const auto by_id = detail::index_run(run);
  MetricSummary m;
  for (const auto& [qid, judged] : qrels) {
    std::vector<int> rels;
    for (const auto& [doc, rel] : judged)
      if (rel > 0) rels.push_back(rel);
    if (rels.empty()) continue;
    std::sort(rels.rbegin(), rels.rend());
    double ideal = 0.0;
    for (std::size_t i = 0; i < std::min(k, rels.size()); ++i) ideal += g(rels[i]) / std::log2(static_cast<double>(i) + 2.0);
    double dcg = 0.0;
    if (const auto* docs = detail::find_ranking(by_id, qid)) {
      for (std::size_t i = 0; i < std::min(k, docs->size()); ++i) {
        auto it = judged.find((*docs)[i].doc_id);
        if (it != judged.end() && it->second > 0) dcg += g(it->second) / std::log2(static_cast<double>(i) + 2.0);
      }
    }
    m.per_query[qid] = dcg / ideal;
  }
  detail::finish(m);
  return m;
}

// |top-k ∩ {rel ≥ min_rel}| / |{rel ≥ min_rel}|, over queries with at least
// one such document.
inline MetricSummary recall_at_k(const RunRanking& run, const Qrels& qrels, std::size_t k = 100, int min_rel = 1) {
  if (min_rel < 1) throw ConfigError("recall min_rel must be at least 1");
  const auto by_id = detail::index_run(run);
  MetricSummary m;
  for (const auto& [qid, judged] : qrels) {
    std::size_t relevant = 0;
    for (const auto& [doc, rel] : judged) relevant += rel >= min_rel;
    if (relevant == 0) continue;
    std::size_t hit = 0;
    if (const auto* docs = detail::find_ranking(by_id, qid)) {
      for (std::size_t i = 0; i < std::min(k, docs->size()); ++i) {
        auto it = judged.find((*docs)[i].doc_id);
        hit += it != judged.end() && it->second >= min_rel;
      }
    }
    m.per_query[qid] = static_cast<double>(hit) / static_cast<double>(relevant);
  }
  detail::finish(m);
  return m;
}

// "qid 0 docid rel", whitespace separated.
inline Qrels read_qrels(std::istream& in, const std::string& source = "qrels") {
  Qrels q;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    std::istringstream fields(line);
    std::string qid, iter, doc, extra;
    long long rel = 0;
    if (!(fields >> qid >> iter >> doc >> rel) || (fields >> extra)) {
      throw DataError(source + " line " + std::to_string(lineno) + ": expected 'qid 0 docid rel'");
    }
    if (rel < 0) throw DataError(source + " line " + std::to_string(lineno) + ": negative relevance");
    if (!q[qid].emplace(doc, static_cast<int>(rel)).second) {
      throw DataError(source + " line " + std::to_string(lineno) + ": duplicate judgment for (" + qid + ", " + doc + ")");
    }
  }
  return q;
}

inline Qrels read_qrels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open qrels " + path.string());
  return read_qrels(in, path.string());
}

inline void write_qrels(std::ostream& out, const Qrels& q) {
  for (const auto& [qid, judged] : q)
    for (const auto& [doc, rel] : judged) out << qid << " 0 " << doc << ' ' << rel << '\n';
}

// "qid Q0 docid rank score tag", rank from 1, score as %.6f.
inline void write_run(std::ostream& out, const RunRanking& run, const std::string& tag) {
  char score[64];
  for (const auto& q : run) {
    for (std::size_t r = 0; r < q.docs.size(); ++r) {
      std::snprintf(score, sizeof score, "%.6f", q.docs[r].score);
      out << q.query_id << " Q0 " << q.docs[r].doc_id << ' ' << r + 1 << ' ' << score << ' ' << tag << '\n';
    }
  }
}

inline RunRanking read_run(std::istream& in, const std::string& source = "run") {
  std::map<std::string, std::vector<std::pair<long long, ScoredDoc>>> rows;
  std::vector<std::string> order;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    std::istringstream fields(line);
    std::string qid, q0, doc, tag;
    long long rank = 0;
    double score = 0.0;
    if (!(fields >> qid >> q0 >> doc >> rank >> score >> tag)) {
      throw DataError(source + " line " + std::to_string(lineno) + ": expected 'qid Q0 docid rank score tag'");
    }
    auto [it, fresh] = rows.try_emplace(qid);
    if (fresh) order.push_back(qid);
    for (const auto& [r, d] : it->second)
      if (d.doc_id == doc) throw DataError(source + " line " + std::to_string(lineno) + ": duplicate doc " + doc + " for " + qid);
    it->second.push_back({rank, {doc, score}});
  }
  RunRanking run;
  for (const auto& qid : order) {
    auto& v = rows[qid];
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    QueryRanking q{qid, {}};
    for (auto& [r, d] : v) q.docs.push_back(std::move(d));
    run.push_back(std::move(q));
  }
  return run;
}

enum class Side { teacher, student_final, student_bottleneck };

inline const char* side_name(Side s) {
  switch (s) {
    case Side::teacher: return "teacher";
    case Side::student_final: return "student-final";
    case Side::student_bottleneck: return "student-bottleneck";
  }
  return "?";
}

inline Side parse_side(const std::string& s) {
  if (s == "teacher") return Side::teacher;
  if (s == "student-final" || s == "student") return Side::student_final;
  if (s == "student-bottleneck") return Side::student_bottleneck;
  throw ConfigError("unknown encoder side '" + s + "' (teacher, student-final, student-bottleneck)");
}

struct EncoderPairing {
  Side query = Side::teacher;
  Side passage = Side::teacher;

  static EncoderPairing teacher_only() { return {Side::teacher, Side::teacher}; }
  static EncoderPairing q_only() { return {Side::student_final, Side::teacher}; }
  static EncoderPairing p_only() { return {Side::teacher, Side::student_final}; }
  static EncoderPairing q_and_p() { return {Side::student_final, Side::student_final}; }
  static EncoderPairing bottleneck() { return {Side::student_bottleneck, Side::student_bottleneck}; }

  // teacher, q-only, p-only, q&p, bottleneck, or "<query side>/<passage side>".
  static EncoderPairing parse(const std::string& s) {
    if (s == "teacher") return teacher_only();
    if (s == "q-only") return q_only();
    if (s == "p-only") return p_only();
    if (s == "q&p" || s == "qp") return q_and_p();
    if (s == "bottleneck") return bottleneck();
    const auto slash = s.find('/');
    if (slash == std::string::npos) throw ConfigError("unknown pairing '" + s + "'");
    return {parse_side(s.substr(0, slash)), parse_side(s.substr(slash + 1))};
  }

  std::string label() const {
    if (query == Side::teacher && passage == Side::teacher) return "teacher";
    if (query == Side::student_final && passage == Side::teacher) return "q-only";
    if (query == Side::teacher && passage == Side::student_final) return "p-only";
    if (query == Side::student_final && passage == Side::student_final) return "q&p";
    if (query == Side::student_bottleneck && passage == Side::student_bottleneck) return "bottleneck";
    return std::string(side_name(query)) + "/" + side_name(passage);
  }

  bool operator==(const EncoderPairing&) const = default;
};

struct EvalDataset {
  std::string name;
  std::vector<TextRecord> queries;
  std::vector<TextRecord> passages;
  Qrels qrels;
};

struct EvalSources {
  const EmbeddingCache* teacher = nullptr;
  const StudentModel* student = nullptr;
};

struct EvalOptions {
  std::size_t ndcg_k = 10;
  std::size_t recall_k = 100;
  Gain gain = Gain::linear;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t workers = 0;
};

inline std::size_t side_dim(Side s, const EvalSources& src) {
  switch (s) {
    case Side::teacher:
      if (!src.teacher) throw ConfigError("pairing needs teacher embeddings but no teacher cache was given");
      return src.teacher->dim();
    case Side::student_final:
      if (!src.student) throw ConfigError("pairing needs a student model but none was given");
      return src.student->teacher_dim();
    case Side::student_bottleneck:
      if (!src.student) throw ConfigError("pairing needs a student model but none was given");
      return src.student->student_dim();
  }
  return 0;
}

inline void validate_pairing(const EncoderPairing& p, const EvalSources& src) {
  const bool qb = p.query == Side::student_bottleneck, pb = p.passage == Side::student_bottleneck;
  if (qb != pb) {
    throw ConfigError("pairing " + p.label() +
                      " is invalid: bottleneck embeddings live in the student's own space and only pair with "
                      "bottleneck embeddings");
  }
  const std::size_t dq = side_dim(p.query, src), dp = side_dim(p.passage, src);
  if (dq != dp) {
    throw ConfigError("pairing " + p.label() + " is invalid: query side emits dim " + std::to_string(dq) +
                      " but passage side emits dim " + std::to_string(dp));
  }
}

inline VectorIndex encode_side(Side side, std::span<const TextRecord> records, const EvalSources& src,
                               std::size_t workers = 0) {
  VectorIndex index(side_dim(side, src));
  std::vector<std::vector<double>> rows(records.size());
  if (side == Side::teacher) {
    for (std::size_t i = 0; i < records.size(); ++i) rows[i] = src.teacher->at(records[i].id).values;
  } else {
    parallel_for(
        records.size(),
        [&](std::size_t i) {
          auto e = student_embed(*src.student, records[i]);
          rows[i] = std::move(side == Side::student_final ? e.final : e.bottleneck).values;
        },
        workers);
  }
  for (std::size_t i = 0; i < records.size(); ++i) index.add(records[i].id, rows[i]);
  return index;
}

struct EvalReport {
  std::string dataset;
  EncoderPairing pairing;
  std::size_t dim = 0;
  std::size_t num_queries = 0;
  std::size_t num_passages = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t ndcg_k = 10, recall_k = 100;
  Gain gain = Gain::linear;
  MetricSummary ndcg;
  MetricSummary recall_rel1;
  MetricSummary recall_rel2;
  double wall_time_ms = 0.0;
  RunRanking run;

  nlohmann::ordered_json to_json(bool include_timing = true) const {
    auto metric = [](const MetricSummary& m) {
      nlohmann::ordered_json j;
      j["mean"] = m.evaluated ? nlohmann::ordered_json(m.mean) : nlohmann::ordered_json(nullptr);
      j["evaluated_queries"] = m.evaluated;
      nlohmann::ordered_json per = nlohmann::ordered_json::object();
      for (const auto& [q, v] : m.per_query) per[q] = v;
      j["per_query"] = std::move(per);
      return j;
    };
    nlohmann::ordered_json j;
    j["dataset"] = dataset;
    j["pairing"] = pairing.label();
    j["query_side"] = side_name(pairing.query);
    j["passage_side"] = side_name(pairing.passage);
    j["dim"] = dim;
    j["num_queries"] = num_queries;
    j["num_passages"] = num_passages;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["gain"] = gain == Gain::linear ? "linear" : "exponential";
    j["ndcg@" + std::to_string(ndcg_k)] = metric(ndcg);
    j["recall@" + std::to_string(recall_k) + "(rel>=1)"] = metric(recall_rel1);
    j["recall@" + std::to_string(recall_k) + "(rel>=2)"] = metric(recall_rel2);
    if (include_timing) j["wall_time_ms"] = wall_time_ms;
    return j;
  }
};

inline EvalReport evaluate_pairing(const EncoderPairing& pairing, const EvalDataset& data, const EvalSources& src,
                                   const EvalOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  validate_pairing(pairing, src);
  if (data.queries.empty() || data.passages.empty()) throw DataError("evaluation set " + data.name + " is empty");
  EvalReport rep;
  rep.dataset = data.name;
  rep.pairing = pairing;
  rep.num_queries = data.queries.size();
  rep.num_passages = data.passages.size();
  rep.seed = opt.seed;
  rep.config_hash = opt.config_hash;
  rep.ndcg_k = opt.ndcg_k;
  rep.recall_k = opt.recall_k;
  rep.gain = opt.gain;
  const VectorIndex q = encode_side(pairing.query, data.queries, src, opt.workers);
  const VectorIndex p = encode_side(pairing.passage, data.passages, src, opt.workers);
  rep.dim = q.dim();
  rep.run = exact_search(q, p, std::max(opt.ndcg_k, opt.recall_k), opt.workers);
  rep.ndcg = ndcg_at_k(rep.run, data.qrels, opt.ndcg_k, opt.gain);
  rep.recall_rel1 = recall_at_k(rep.run, data.qrels, opt.recall_k, 1);
  rep.recall_rel2 = recall_at_k(rep.run, data.qrels, opt.recall_k, 2);
  rep.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace embsteal
