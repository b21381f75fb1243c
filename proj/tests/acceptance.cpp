// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "embsteal/ablation.hpp"
#include "embsteal/cli.hpp"
#include "embsteal/gradcheck.hpp"
#include "embsteal/losses.hpp"
#include "embsteal/pipeline.hpp"

using namespace embsteal;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail = what;
      pass = false;
    }
  }
};

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

// ---- criterion 1

Tensor random_matrix(Rng& rng, std::size_t n, std::size_t d) {
  Tensor t({n, d});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

Tensor unit_rows(Tensor t) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double n = l2_norm(t.row(i));
    for (double& v : t.row(i)) v /= n;
  }
  return t;
}

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 9000);
    const std::size_t n = 1 + rng.below(4), d = 2 + rng.below(5);
    Tensor t = random_matrix(rng, n, d);
    Parameter s("S", random_matrix(rng, n, d));
    Parameter* ps[] = {&s};
    auto cos = check_gradients([&](Tape& tape) { return ad::cosine_distance_loss(t, tape.param(s)); }, ps, 1e-4, 1e-3);
    o.require(cos.ok(), "cosine gradcheck failed at seed " + std::to_string(seed));
    worst = std::max(worst, cos.max_error);
    const Tensor tu = unit_rows(t);
    for (double tau : {0.05, 0.5}) {
      auto con = check_gradients([&](Tape& tape) { return ad::contrastive_loss(tu, tape.param(s), tau); }, ps, 1e-4, 1e-3);
      o.require(con.ok(), "contrastive gradcheck failed at seed " + std::to_string(seed));
      worst = std::max(worst, con.max_error);
    }

    EncoderConfig ec;
    ec.vocab_size = 12;
    ec.dim = 8;
    ec.layers = 2;
    ec.heads = 2;
    ec.max_len = 10;
    ec.dropout = 0.1;
    ec.init_std = 0.5;
    auto p = EncoderParams::initialize(ec, 300 + seed);
    const std::size_t len = 2 + rng.below(6);
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < len; ++i) ids.push_back(1 + rng.below(11));
    Tensor w({8});
    for (double& v : w.data()) v = rng.normal();
    auto enc = check_gradients(
        [&](Tape& tape) {
          EncoderGraph g(tape, p);
          return ad::sum(ad::mul(g.pooled(ids, std::vector<bool>(len, true), false, nullptr), tape.constant(w)));
        },
        p.parameters(), 1e-5, 1e-3);
    o.require(enc.ok(), "encoder gradcheck failed at seed " + std::to_string(seed));
    worst = std::max(worst, enc.max_error);
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime over 2 min");
  char buf[160];
  std::snprintf(buf, sizeof buf, "20 seeds x (cosine, contrastive x2, encoder), max rel error %.2e, %.1fs", worst, secs);
  if (o.pass) o.detail = buf;
  return o;
}

// ---- criterion 2

double naive_cos(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    ab += a(i, k) * b(j, k);
    aa += a(i, k) * a(i, k);
    bb += b(j, k) * b(j, k);
  }
  return ab / std::sqrt(aa * bb);
}

double naive_cosine_loss(const Tensor& t, const Tensor& s) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) acc += naive_cos(t, i, s, i);
  return -acc / static_cast<double>(t.rows());
}

double naive_contrastive(const Tensor& t, const Tensor& s, double tau) {
  const std::size_t n = t.rows();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(naive_cos(t, j, s, i) / tau);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) denom += std::exp(naive_cos(s, j, s, i) / tau);
    acc += std::log(std::exp(naive_cos(t, i, s, i) / tau) / denom);
  }
  return -acc / static_cast<double>(n);
}

Outcome loss_oracles() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 7000);
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(16);
    const Tensor t = random_matrix(rng, n, d), s = random_matrix(rng, n, d);
    const double c = std::abs(cosine_distance(t, s).value - naive_cosine_loss(t, s));
    worst = std::max(worst, c);
    o.require(c <= 1e-6, "cosine mismatch at batch " + std::to_string(seed));
    for (double tau : {0.01, 0.05}) {
      const double naive = naive_contrastive(t, s, tau);
      if (!std::isfinite(naive)) continue;  // exp overflow in the literal sum
      const double e = std::abs(contrastive(t, s, tau).value - naive);
      worst = std::max(worst, e);
      o.require(e <= 1e-6, "contrastive mismatch at batch " + std::to_string(seed));
    }
  }
  Rng rng(1);
  const Tensor t = random_matrix(rng, 1, 5), s = random_matrix(rng, 1, 5);
  o.require(contrastive(t, s, 0.01).value == 0.0 && contrastive(t, s, 0.05).value == 0.0, "n=1 contrastive is not 0");
  char buf[128];
  std::snprintf(buf, sizeof buf, "100 batches, tau {0.01, 0.05}, max abs error %.2e, n=1 gives 0", worst);
  if (o.pass) o.detail = buf;
  return o;
}

// ---- criterion 3

bool starts(const std::string& s, const std::string& p) { return s.size() >= p.size() && s.compare(0, p.size(), p) == 0; }
bool ends(const std::string& s, const std::string& p) {
  return s.size() >= p.size() && s.compare(s.size() - p.size(), p.size(), p) == 0;
}

std::set<std::string> containment_oracle(const std::vector<TextRecord>& ps) {
  std::vector<const TextRecord*> order;
  for (const auto& p : ps) order.push_back(&p);
  std::stable_sort(order.begin(), order.end(), [](const TextRecord* a, const TextRecord* b) {
    if (a->text.size() != b->text.size()) return a->text.size() > b->text.size();
    return id_less(a->id, b->id);
  });
  std::vector<const TextRecord*> kept;
  for (const TextRecord* p : order) {
    bool contained = false;
    for (const TextRecord* k : kept) contained = contained || starts(k->text, p->text) || ends(k->text, p->text);
    if (!contained) kept.push_back(p);
  }
  std::set<std::string> ids;
  for (const auto* k : kept) ids.insert(k->id);
  return ids;
}

std::vector<TextRecord> random_corpus(Rng& rng, std::size_t n) {
  std::vector<TextRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string t;
    const auto r = rng.below(4);
    if (r == 0 && !out.empty()) {
      const auto& src = out[rng.below(out.size())].text;
      t = src.substr(0, 1 + rng.below(src.size()));
    } else if (r == 1 && !out.empty()) {
      const auto& src = out[rng.below(out.size())].text;
      t = src.substr(rng.below(src.size()));
    } else {
      const std::size_t len = 1 + rng.below(14);
      for (std::size_t k = 0; k < len; ++k) t += "ab "[rng.below(3)];
      if (is_blank(t)) t = "b";
    }
    out.push_back({"p" + std::to_string(rng.below(5 * n)) + "_" + std::to_string(i), TextKind::passage, t});
  }
  return out;
}

Outcome dedup_correctness() {
  Outcome o;
  const auto t0 = Clock::now();
  std::size_t total = 0, removed = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 4000);
    const std::size_t n = seed == 0 ? 1000 : 1 + rng.below(1000);
    const auto corpus = random_corpus(rng, n);
    const auto r = dedup_contained(corpus);
    std::set<std::string> got;
    for (const auto& p : r.survivors) got.insert(p.id);
    o.require(got == containment_oracle(corpus), "survivors differ from oracle on corpus " + std::to_string(seed));
    const auto again = dedup_contained(r.survivors);
    o.require(again.survivors == r.survivors && again.stats.removed() == 0, "not idempotent on corpus " + std::to_string(seed));
    total += n;
    removed += r.stats.removed();
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "runtime over 1 min");
  if (o.pass) {
    std::ostringstream s;
    s << "50 corpora, " << total << " passages, " << removed << " removed, idempotent, " << std::fixed
      << std::setprecision(1) << secs << "s";
    o.detail = s.str();
  }
  return o;
}

// ---- criterion 4

double naive_ndcg(const std::vector<std::string>& ranked, const std::map<std::string, int>& judged, std::size_t k) {
  std::vector<int> gains, ideal;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
    auto it = judged.find(ranked[i]);
    gains.push_back(it == judged.end() ? 0 : it->second);
  }
  for (const auto& kv : judged) ideal.push_back(kv.second);
  std::sort(ideal.begin(), ideal.end(), std::greater<int>());
  double dcg = 0, idcg = 0;
  for (std::size_t i = 0; i < gains.size(); ++i) dcg += gains[i] / (std::log(i + 2.0) / std::log(2.0));
  for (std::size_t i = 0; i < ideal.size() && i < k; ++i) idcg += ideal[i] / (std::log(i + 2.0) / std::log(2.0));
  return dcg / idcg;
}

double naive_recall(const std::vector<std::string>& ranked, const std::map<std::string, int>& judged, std::size_t k) {
  std::size_t rel = 0, hit = 0;
  for (const auto& [d, r] : judged) {
    if (r < 1) continue;
    ++rel;
    for (std::size_t i = 0; i < ranked.size() && i < k; ++i) hit += ranked[i] == d;
  }
  return static_cast<double>(hit) / static_cast<double>(rel);
}

Outcome metric_oracles() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 5000);
    RunRanking run;
    Qrels qrels;
    const std::size_t nq = 1 + rng.below(10), nd = 5 + rng.below(250);
    std::map<std::string, std::vector<std::string>> lists;
    for (std::size_t q = 0; q < nq; ++q) {
      const std::string qid = "q" + std::to_string(q);
      std::vector<std::string> docs;
      for (std::size_t d = 0; d < nd; ++d) docs.push_back("d" + std::to_string(d));
      auto& judged = qrels[qid];
      const std::size_t nj = 1 + rng.below(12);
      for (std::size_t j = 0; j < nj; ++j) judged[docs[rng.below(nd)]] = static_cast<int>(rng.below(4));
      rng.shuffle(docs.begin(), docs.end());
      docs.resize(rng.below(nd + 1));
      QueryRanking r{qid, {}};
      for (std::size_t i = 0; i < docs.size(); ++i) r.docs.push_back({docs[i], -static_cast<double>(i)});
      run.push_back(std::move(r));
      lists[qid] = std::move(docs);
    }
    const auto nd10 = ndcg_at_k(run, qrels, 10);
    const auto r100 = recall_at_k(run, qrels, 100, 1);
    for (const auto& [qid, judged] : qrels) {
      bool any = false;
      for (const auto& kv : judged) any = any || kv.second >= 1;
      if (!any) {
        o.require(nd10.per_query.count(qid) == 0, "judged-negative query was scored");
        continue;
      }
      const double en = std::abs(nd10.per_query.at(qid) - naive_ndcg(lists[qid], judged, 10));
      const double er = std::abs(r100.per_query.at(qid) - naive_recall(lists[qid], judged, 100));
      worst = std::max({worst, en, er});
      o.require(en <= 1e-9 && er <= 1e-9, "metric mismatch on instance " + std::to_string(seed));
    }
  }
  Qrels q{{"q", {{"d1", 1}}}};
  RunRanking r{{"q", {{"d2", 0.9}, {"d1", 0.8}}}};
  const double hand = ndcg_at_k(r, q, 10).mean;
  o.require(std::abs(hand - 1.0 / std::log2(3.0)) <= 1e-12 && std::abs(hand - 0.6309) < 5e-5, "hand value is not 1/log2(3)");
  char buf[128];
  std::snprintf(buf, sizeof buf, "100 instances, max abs error %.1e, hand value %.4f", worst, hand);
  if (o.pass) o.detail = buf;
  return o;
}

// ---- criterion 5

Outcome end_to_end_steal() {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<double> teacher, student;
  for (std::uint64_t seed : {1, 2, 3}) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.teachers = {builtin_teacher("sim-cohere")};
    const auto data = load_data(cfg);
    const auto cache = teacher_embeddings(cfg.teachers[0], data);
    const EmbeddingCache* caches[] = {&cache};
    auto out = train_student(cfg, data, caches, cfg.effective_training(), cfg.effective_split());
    o.require(!out.result.aborted, "training aborted: " + out.result.abort_reason);
    EvalOptions opt = cfg.eval;
    opt.seed = seed;
    const EvalSources src{&cache, &out.model};
    teacher.push_back(evaluate_pairing(EncoderPairing::teacher_only(), data.eval, src, opt).ndcg.mean);
    student.push_back(evaluate_pairing(EncoderPairing::q_and_p(), data.eval, src, opt).ndcg.mean);
    std::ostringstream s;
    s << "seed " << seed << ": teacher " << teacher.back() << ", student (Q&P) " << student.back() << ", "
      << out.result.steps << " steps" << (out.result.stopped_early ? " (plateau)" : "");
    progress(s.str());
  }
  const double mt = (teacher[0] + teacher[1] + teacher[2]) / 3, ms = (student[0] + student[1] + student[2]) / 3;
  const double secs = seconds_since(t0);
  o.require(std::abs(mt - ms) <= 0.05, "student is more than 0.05 from the teacher");
  o.require(secs < 900.0, "runtime over 15 min");
  char buf[160];
  std::snprintf(buf, sizeof buf, "mean teacher %.4f, mean student (Q&P) %.4f, gap %.4f, %.0fs", mt, ms, std::abs(mt - ms), secs);
  o.detail = o.pass ? buf : o.detail + " (" + buf + ")";
  return o;
}

// ---- criteria 6-9

std::string join_means(const StudyReport& rep) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  bool first = true;
  for (const auto& [label, vals] : rep.series) {
    const auto m = mean_of(vals);
    s << (first ? "" : ", ") << label << " " << (m ? *m : std::nan(""));
    first = false;
  }
  return s.str();
}

std::optional<double> mean_at(const StudyReport& rep, const std::string& label) { return mean_of(rep.at(label)); }

Outcome data_size_study(AblationRunner& runner) {
  Outcome o;
  const auto rep = runner.data_size();
  std::vector<double> means;
  for (const auto& [label, vals] : rep.series) {
    const auto m = mean_of(vals);
    o.require(m.has_value() && vals.size() == 3, "cell failed for " + label + " pairs");
    means.push_back(m.value_or(0));
  }
  int inversions = 0;
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] >= means[i - 1]) continue;
    ++inversions;
    o.require(means[i - 1] - means[i] <= 0.01, "inversion larger than 0.01");
  }
  o.require(inversions <= 1, "more than one inversion");
  o.detail = (o.pass ? "" : o.detail + "; ") + join_means(rep);
  return o;
}

Outcome bottleneck_study(AblationRunner& runner) {
  Outcome o;
  const auto rep = runner.bottleneck();
  const auto f = mean_at(rep, "final"), b = mean_at(rep, "bottleneck");
  o.require(f && b, "a cell failed");
  if (f && b) o.require(std::abs(*f - *b) <= 0.03, "gap above 0.03");
  char buf[96];
  std::snprintf(buf, sizeof buf, "; |diff| %.4f", f && b ? std::abs(*f - *b) : std::nan(""));
  o.detail = (o.pass ? "" : o.detail + "; ") + join_means(rep) + buf;
  return o;
}

Outcome loss_study(AblationRunner& runner) {
  Outcome o;
  const auto rep = runner.loss();
  const auto c = mean_at(rep, "cosine"), k = mean_at(rep, "contrastive(tau=0.01)");
  o.require(c && k, "a cell failed");
  if (c && k) o.require(*c >= *k, "contrastive(tau=0.01) beats cosine");
  o.detail = (o.pass ? "" : o.detail + "; ") + join_means(rep);
  return o;
}

Outcome concat_study(AblationRunner& runner) {
  Outcome o;
  const auto rep = runner.concat();
  const auto& names = runner.config().ablate.concat_teachers;
  const std::string joint = names[0] + "+" + names[1];
  const auto tj = mean_at(rep, "teacher:" + joint), t0 = mean_at(rep, "teacher:" + names[0]),
             t1 = mean_at(rep, "teacher:" + names[1]);
  const auto sj = mean_at(rep, "student:" + joint), s0 = mean_at(rep, "student:" + names[0]),
             s1 = mean_at(rep, "student:" + names[1]);
  o.require(tj && t0 && t1 && sj && s0 && s1, "a cell failed");
  if (o.pass) {
    o.require(*tj >= *t0 && *tj >= *t1, "concatenated teacher below a single teacher");
    o.require(*sj >= std::min(*s0, *s1), "concat student below the worse single student");
  }
  o.detail = (o.pass ? "" : o.detail + "; ") + join_means(rep);
  return o;
}

// ---- criterion 10

Outcome cost_estimator() {
  Outcome o;
  const auto a = estimate_cost(builtin_teacher("openai"), 1'000'000);
  const auto c = estimate_cost(builtin_teacher("cohere"), 1'000'000);
  o.require(a.value == 13 && a.str() == "$0.13", "openai cost is " + a.str());
  o.require(c.value == 10 && c.str() == "$0.10", "cohere cost is " + c.str());
  if (o.pass) o.detail = "openai " + a.str() + ", cohere " + c.str();
  return o;
}

// ---- criterion 11

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "embsteal_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "config.json") << R"({
  "world": {"topics": 6, "train_passages": 300, "train_queries": 60, "eval_passages": 60, "eval_queries": 12},
  "split": {"dev_passages": 20, "dev_queries": 5},
  "training": {"epochs": 4, "batch_size": 16, "dev_eval_every": 10, "patience": 0}
})";
  std::vector<std::string> curves;
  std::vector<std::map<std::string, std::string>> reports;
  for (const char* sub : {"run1", "run2"}) {
    std::ostringstream out, err;
    const std::string dir = (root / sub).string();
    int code = run_cli({"--config", (root / "config.json").string(), "--out-dir", dir, "--seed", "11", "train"}, out, err);
    if (code == 0) code = run_cli({"--config", (root / "config.json").string(), "--out-dir", dir, "--seed", "11", "eval"}, out, err);
    o.require(code == 0, "cli run failed: " + err.str());
    curves.push_back(slurp(root / sub / "student" / "curve.csv"));
    std::map<std::string, std::string> reps;
    if (fs::exists(root / sub / "reports")) {
      for (const auto& e : fs::directory_iterator(root / sub / "reports")) {
        if (e.path().extension() != ".json") continue;
        auto j = nlohmann::ordered_json::parse(slurp(e.path()));
        j.erase("wall_time_ms");
        reps[e.path().filename().string()] = j.dump();
      }
    }
    reports.push_back(std::move(reps));
  }
  o.require(!curves[0].empty() && curves[0] == curves[1], "loss curves differ");
  o.require(reports[0].size() == 5 && reports[0] == reports[1], "EvalReports differ");
  if (o.pass) {
    o.detail = "curve.csv (" + std::to_string(curves[0].size()) + " bytes) and " + std::to_string(reports[0].size()) +
               " EvalReports identical";
  }
  fs::remove_all(root);
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  AblationRunner runner(ExperimentConfig{}, [](const std::string& m) { progress(m); });
  const std::vector<Criterion> criteria{
      {1, "gradient fidelity", gradient_fidelity},
      {2, "loss oracles", loss_oracles},
      {3, "dedup correctness", dedup_correctness},
      {4, "metric oracles", metric_oracles},
      {5, "end-to-end steal", end_to_end_steal},
      {6, "data-size ablation", [&] { return data_size_study(runner); }},
      {7, "bottleneck parity", [&] { return bottleneck_study(runner); }},
      {8, "loss comparison", [&] { return loss_study(runner); }},
      {9, "concat distillation", [&] { return concat_study(runner); }},
      {10, "cost estimator", cost_estimator},
      {11, "determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %-20s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
