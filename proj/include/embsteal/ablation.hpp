#pragma once

#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "embsteal/config.hpp"
#include "embsteal/pipeline.hpp"

namespace embsteal {

struct Table {
  std::string title;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string text() const {
    std::vector<std::size_t> width(header.size(), 0);
    for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& r : rows)
      for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
    auto line = [&](const std::vector<std::string>& cells) {
      std::string out;
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (c) out += "  ";
        out += cells[c];
        if (c + 1 < cells.size()) out.append(width[c] - cells[c].size(), ' ');
      }
      return out + '\n';
    };
    std::string out = title + '\n' + line(header);
    std::size_t total = 0;
    for (std::size_t w : width) total += w;
    out += std::string(total + 2 * (width.size() - 1), '-') + '\n';
    for (const auto& r : rows) out += line(r);
    return out;
  }

  std::string csv() const {
    auto field = [](const std::string& s) {
      if (s.find_first_of(",\"\n") == std::string::npos) return s;
      std::string q = "\"";
      for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      return q + '"';
    };
    auto line = [&](const std::vector<std::string>& cells) {
      std::string out;
      for (std::size_t c = 0; c < cells.size(); ++c) out += (c ? "," : "") + field(cells[c]);
      return out + '\n';
    };
    std::string out = line(header);
    for (const auto& r : rows) out += line(r);
    return out;
  }
};

inline std::string fmt4(std::optional<double> v) {
  if (!v) return "FAILED";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

inline std::optional<double> mean_of(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  for (const auto& x : v) {
    if (!x) return std::nullopt;
    s += *x;
  }
  if (v.empty()) return std::nullopt;
  return s / static_cast<double>(v.size());
}

// One training/eval cell of a study.
struct CellSpec {
  std::uint64_t seed = 1;
  std::vector<std::string> teachers;  // one, or two for concat targets
  std::size_t train_pairs = 0;
  LossKind loss = LossKind::cosine;
  double tau = 0.05;
};

struct CellResult {
  std::string hash;
  std::optional<double> ndcg_final;       // (Q&P) with final embeddings
  std::optional<double> ndcg_bottleneck;  // both sides bottleneck
  std::optional<double> recall_final;
  std::uint64_t steps = 0;
  double best_dev_loss = 0.0;
  std::string error;
};

struct StudyReport {
  std::string name;
  std::string config_hash;
  Table cells;
  Table summary;
  std::vector<std::pair<std::string, std::vector<std::optional<double>>>> series;  // label → value per seed

  const std::vector<std::optional<double>>& at(const std::string& label) const {
    for (const auto& [k, v] : series)
      if (k == label) return v;
    throw ConfigError("study " + name + " has no series " + label);
  }

  ojson to_json() const {
    ojson j;
    j["study"] = name;
    j["config_hash"] = config_hash;
    ojson s = ojson::object();
    for (const auto& [k, v] : series) {
      ojson arr = ojson::array();
      for (const auto& x : v) arr.push_back(x ? ojson(*x) : ojson(nullptr));
      s[k] = std::move(arr);
    }
    j["series"] = std::move(s);
    return j;
  }
};

inline const std::vector<std::string>& study_names() {
  static const std::vector<std::string> names{"data-size", "loss", "bottleneck", "concat"};
  return names;
}

// Runs the desk-scale ablations. Worlds, teacher vectors and finished cells
// are memoized, so studies that share a cell train it once.
class AblationRunner {
 public:
  using Log = std::function<void(const std::string&)>;

  explicit AblationRunner(ExperimentConfig cfg, Log log = {}) : cfg_(std::move(cfg)), log_(std::move(log)) {
    cfg_.validate(false);
    hash_ = cfg_.hash();
  }

  const ExperimentConfig& config() const { return cfg_; }

  WorldConfig world_for(std::uint64_t seed) const {
    const auto& a = cfg_.ablate;
    std::size_t n = a.train_sample;
    for (std::size_t s : a.data_sizes) n = std::max(n, s);
    WorldConfig w = a.world;
    w.seed = seed;
    w.train_passages = n * 4 / 5 + cfg_.split.dev_passages;
    w.train_queries = n - n * 4 / 5 + cfg_.split.dev_queries;
    return w;
  }

  TrainingConfig training_for(const CellSpec& c) const {
    TrainingConfig t = cfg_.training;
    t.seed = c.seed;
    t.loss = c.loss;
    t.tau = c.tau;
    t.max_steps = cfg_.ablate.max_steps;
    t.epochs = std::max<std::size_t>(1, cfg_.ablate.max_steps);
    t.patience = 0;
    return t;
  }

  std::string cell_hash(const CellSpec& c) const {
    ojson j;
    j["world"] = cfgio::world_json(world_for(c.seed));
    j["teachers"] = ojson::array();
    for (const auto& t : c.teachers) j["teachers"].push_back(cfgio::teacher_json(teacher(t)));
    j["train_pairs"] = c.train_pairs;
    j["dev"] = {cfg_.split.dev_passages, cfg_.split.dev_queries};
    j["student"] = cfg_.to_json()["student"];
    j["training"] = training_for(c).to_json();
    j["eval"] = cfg_.to_json()["eval"];
    return sha256_hex(j.dump()).substr(0, 16);
  }

  const CellResult& cell(const CellSpec& c) {
    const std::string h = cell_hash(c);
    if (auto it = cells_.find(h); it != cells_.end()) return it->second;
    CellResult r;
    r.hash = h;
    try {
      const auto& data = data_for(c.seed);
      std::vector<const EmbeddingCache*> caches;
      for (const auto& t : c.teachers) caches.push_back(&vectors_for(c.seed, t));
      SplitSpec split = cfg_.split;
      split.seed = c.seed;
      split.train_sample = c.train_pairs;
      if (log_) log_("cell " + h + ": seed " + std::to_string(c.seed) + ", " + std::to_string(c.train_pairs) + " pairs, " +
                     cell_label(c));
      auto out = train_student(cfg_, data, caches, training_for(c), split);
      r.steps = out.result.steps;
      r.best_dev_loss = out.result.best_dev_loss;
      if (out.result.aborted) throw NumericError(out.result.abort_reason);
      EvalOptions opt = cfg_.eval;
      opt.seed = c.seed;
      opt.config_hash = h;
      const EvalSources src{nullptr, &out.model};
      const auto fin = evaluate_pairing(EncoderPairing::q_and_p(), data.eval, src, opt);
      const auto bot = evaluate_pairing(EncoderPairing::bottleneck(), data.eval, src, opt);
      r.ndcg_final = fin.ndcg.mean;
      r.recall_final = fin.recall_rel1.mean;
      r.ndcg_bottleneck = bot.ndcg.mean;
    } catch (const std::exception& e) {
      r.error = e.what();
      r.ndcg_final.reset();
      r.ndcg_bottleneck.reset();
      r.recall_final.reset();
      if (log_) log_("cell " + h + " failed: " + r.error);
    }
    return cells_.emplace(h, std::move(r)).first->second;
  }

  // Teacher/teacher nDCG on the eval set; two names mean the concatenation.
  std::optional<double> teacher_ndcg(std::uint64_t seed, const std::vector<std::string>& names) {
    try {
      const auto& data = data_for(seed);
      EvalOptions opt = cfg_.eval;
      opt.seed = seed;
      if (names.size() == 1) {
        return evaluate_pairing(EncoderPairing::teacher_only(), data.eval, {&vectors_for(seed, names[0]), nullptr}, opt).ndcg.mean;
      }
      std::vector<TextRecord> eval_recs = data.eval.queries;
      eval_recs.insert(eval_recs.end(), data.eval.passages.begin(), data.eval.passages.end());
      const auto joint = concat_cache(vectors_for(seed, names[0]), vectors_for(seed, names[1]), eval_recs);
      return evaluate_pairing(EncoderPairing::teacher_only(), data.eval, {&joint, nullptr}, opt).ndcg.mean;
    } catch (const std::exception& e) {
      if (log_) log_(std::string("teacher evaluation failed: ") + e.what());
      return std::nullopt;
    }
  }

  StudyReport data_size() {
    StudyReport rep = begin("data-size", "Data-size study: (Q&P) nDCG@" + std::to_string(cfg_.eval.ndcg_k) +
                                             " by distillation pairs, teacher " + primary());
    rep.cells.header = {"train_pairs", "seed", ndcg_col(), recall_col(), "best_dev_loss", "steps", "cell_hash"};
    rep.summary.header = {"train_pairs", "mean " + ndcg_col(), "seeds"};
    for (std::size_t n : cfg_.ablate.data_sizes) {
      std::vector<std::optional<double>> vals;
      for (auto seed : cfg_.ablate.seeds) {
        const auto& r = cell({seed, {primary()}, n, LossKind::cosine, cfg_.training.tau});
        vals.push_back(r.ndcg_final);
        rep.cells.rows.push_back(cell_row(std::to_string(n), seed, r));
      }
      rep.summary.rows.push_back({std::to_string(n), fmt4(mean_of(vals)), std::to_string(vals.size())});
      rep.series.emplace_back(std::to_string(n), std::move(vals));
    }
    return rep;
  }

  StudyReport loss() {
    StudyReport rep = begin("loss", "Loss study: (Q&P) nDCG@" + std::to_string(cfg_.eval.ndcg_k) + " with " +
                                        std::to_string(cfg_.ablate.train_sample) + " pairs and " +
                                        std::to_string(cfg_.ablate.max_steps) + " steps per cell");
    rep.cells.header = {"loss", "seed", ndcg_col(), recall_col(), "best_dev_loss", "steps", "cell_hash"};
    rep.summary.header = {"loss", "mean " + ndcg_col(), "seeds"};
    std::vector<std::pair<std::string, CellSpec>> settings{{"cosine", {0, {primary()}, cfg_.ablate.train_sample, LossKind::cosine, cfg_.training.tau}}};
    for (double tau : cfg_.ablate.taus) {
      settings.push_back({"contrastive(tau=" + tau_str(tau) + ")", {0, {primary()}, cfg_.ablate.train_sample, LossKind::contrastive, tau}});
    }
    for (auto& [label, spec] : settings) {
      std::vector<std::optional<double>> vals;
      for (auto seed : cfg_.ablate.seeds) {
        spec.seed = seed;
        const auto& r = cell(spec);
        vals.push_back(r.ndcg_final);
        rep.cells.rows.push_back(cell_row(label, seed, r));
      }
      rep.summary.rows.push_back({label, fmt4(mean_of(vals)), std::to_string(vals.size())});
      rep.series.emplace_back(label, std::move(vals));
    }
    return rep;
  }

  StudyReport bottleneck() {
    StudyReport rep = begin("bottleneck", "Bottleneck study: final vs bottleneck nDCG@" + std::to_string(cfg_.eval.ndcg_k) +
                                              " on " + std::to_string(cfg_.ablate.train_sample) + " pairs");
    rep.cells.header = {"dataset", "seed", "final", "bottleneck", "abs_diff", "cell_hash"};
    rep.summary.header = {"dataset", "mean final", "mean bottleneck", "abs_diff"};
    std::vector<std::optional<double>> fin, bot;
    for (auto seed : cfg_.ablate.seeds) {
      const auto& r = cell({seed, {primary()}, cfg_.ablate.train_sample, LossKind::cosine, cfg_.training.tau});
      fin.push_back(r.ndcg_final);
      bot.push_back(r.ndcg_bottleneck);
      std::optional<double> diff;
      if (r.ndcg_final && r.ndcg_bottleneck) diff = std::abs(*r.ndcg_final - *r.ndcg_bottleneck);
      rep.cells.rows.push_back({"synthetic", std::to_string(seed), fmt4(r.ndcg_final), fmt4(r.ndcg_bottleneck),
                                r.error.empty() ? fmt4(diff) : "FAILED: " + r.error, r.hash});
    }
    const auto mf = mean_of(fin), mb = mean_of(bot);
    std::optional<double> gap;
    if (mf && mb) gap = std::abs(*mf - *mb);
    rep.summary.rows.push_back({"synthetic", fmt4(mf), fmt4(mb), fmt4(gap)});
    rep.series.emplace_back("final", std::move(fin));
    rep.series.emplace_back("bottleneck", std::move(bot));
    return rep;
  }

  StudyReport concat() {
    const auto& names = cfg_.ablate.concat_teachers;
    StudyReport rep = begin("concat", "Concatenation study: teacher/teacher and (Q&P) student nDCG@" +
                                          std::to_string(cfg_.eval.ndcg_k));
    rep.cells.header = {"teacher", "seed", "teacher_ndcg", "student_ndcg", "cell_hash"};
    rep.summary.header = {"teacher", "mean teacher_ndcg", "mean student_ndcg"};
    const std::vector<std::pair<std::string, std::vector<std::string>>> settings{
        {names[0], {names[0]}}, {names[1], {names[1]}}, {names[0] + "+" + names[1], {names[0], names[1]}}};
    for (const auto& [label, teachers] : settings) {
      std::vector<std::optional<double>> tv, sv;
      for (auto seed : cfg_.ablate.seeds) {
        const auto t = teacher_ndcg(seed, teachers);
        const auto& r = cell({seed, teachers, cfg_.ablate.train_sample, LossKind::cosine, cfg_.training.tau});
        tv.push_back(t);
        sv.push_back(r.ndcg_final);
        rep.cells.rows.push_back({label, std::to_string(seed), fmt4(t),
                                  r.error.empty() ? fmt4(r.ndcg_final) : "FAILED: " + r.error, r.hash});
      }
      rep.summary.rows.push_back({label, fmt4(mean_of(tv)), fmt4(mean_of(sv))});
      rep.series.emplace_back("teacher:" + label, std::move(tv));
      rep.series.emplace_back("student:" + label, std::move(sv));
    }
    return rep;
  }

  StudyReport run(const std::string& study) {
    if (study == "data-size") return data_size();
    if (study == "loss") return loss();
    if (study == "bottleneck") return bottleneck();
    if (study == "concat") return concat();
    throw ConfigError("unknown study '" + study + "' (data-size, loss, bottleneck, concat)");
  }

 private:
  StudyReport begin(const std::string& name, const std::string& title) const {
    StudyReport rep;
    rep.name = name;
    rep.config_hash = hash_;
    rep.cells.title = title + " [config " + hash_.substr(0, 16) + "]";
    rep.summary.title = rep.cells.title;
    return rep;
  }

  std::string primary() const { return cfg_.teachers.front().name; }
  std::string ndcg_col() const { return "ndcg@" + std::to_string(cfg_.eval.ndcg_k); }
  std::string recall_col() const { return "recall@" + std::to_string(cfg_.eval.recall_k); }

  static std::string tau_str(double tau) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", tau);
    return buf;
  }

  static std::string cell_label(const CellSpec& c) {
    std::string t;
    for (const auto& n : c.teachers) t += (t.empty() ? "" : "+") + n;
    return t + (c.loss == LossKind::cosine ? ", cosine" : ", contrastive tau=" + tau_str(c.tau));
  }

  std::vector<std::string> cell_row(const std::string& label, std::uint64_t seed, const CellResult& r) const {
    if (!r.error.empty()) return {label, std::to_string(seed), "FAILED: " + r.error, "", "", "", r.hash};
    char dev[32];
    std::snprintf(dev, sizeof dev, "%.6f", r.best_dev_loss);
    return {label, std::to_string(seed), fmt4(r.ndcg_final), fmt4(r.recall_final), dev, std::to_string(r.steps), r.hash};
  }

  TeacherSpec teacher(const std::string& name) const {
    for (const auto& t : cfg_.teachers)
      if (t.name == name) return t;
    return builtin_teacher(name);
  }

  const ExperimentData& data_for(std::uint64_t seed) {
    auto it = data_.find(seed);
    if (it == data_.end()) it = data_.emplace(seed, std::make_unique<ExperimentData>(data_from_world(world_for(seed)))).first;
    return *it->second;
  }

  const EmbeddingCache& vectors_for(std::uint64_t seed, const std::string& name) {
    const auto key = std::make_pair(seed, name);
    auto it = vectors_.find(key);
    if (it == vectors_.end()) it = vectors_.emplace(key, teacher_embeddings(teacher(name), data_for(seed))).first;
    return it->second;
  }

  ExperimentConfig cfg_;
  Log log_;
  std::string hash_;
  std::map<std::uint64_t, std::unique_ptr<ExperimentData>> data_;
  std::map<std::pair<std::uint64_t, std::string>, EmbeddingCache> vectors_;
  std::map<std::string, CellResult> cells_;
};

inline void write_study(const std::filesystem::path& dir, const StudyReport& rep) {
  write_text(dir / (rep.name + ".txt"), rep.summary.text() + '\n' + rep.cells.text());
  write_text(dir / (rep.name + ".csv"), rep.cells.csv());
  write_text(dir / (rep.name + "_summary.csv"), rep.summary.csv());
  write_json(dir / (rep.name + ".json"), rep.to_json());
}

}  // namespace embsteal
