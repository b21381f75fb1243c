#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "embsteal/ablation.hpp"
#include "embsteal/config.hpp"
#include "embsteal/corpus.hpp"
#include "embsteal/harvest.hpp"
#include "embsteal/pipeline.hpp"

namespace embsteal {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitTeacher = 5,
};

namespace cli {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = "out";
};

struct TrainOverrides {
  std::optional<double> lr, tau, dropout;
  std::optional<std::size_t> epochs, max_steps, batch_size, patience;
  std::optional<std::string> loss;
  bool force = false;
};

inline ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

inline std::vector<TeacherSpec> pick_teachers(const ExperimentConfig& cfg, const std::vector<std::string>& names) {
  if (names.empty()) return cfg.teachers;
  std::vector<TeacherSpec> out;
  for (const auto& n : names) {
    bool found = false;
    for (const auto& t : cfg.teachers)
      if (t.name == n) out.push_back(t), found = true;
    if (!found) out.push_back(builtin_teacher(n));
  }
  return out;
}

inline int cmd_dedup(const ExperimentConfig& cfg, const std::string& in, const std::string& out_path, std::ostream& out,
                     std::ostream& err) {
  auto coll = ingest_tsv(std::filesystem::path(in), TextKind::passage);
  for (const auto& m : coll.malformed) err << in << ":" << m.line << ": skipped (" << m.reason << ")\n";
  auto res = dedup_contained(coll.records);
  write_tsv(out_path, res.survivors);
  auto manifest = corpus_manifest(res.stats, nullptr, cfg.seed, cfg.hash());
  manifest["input"] = in;
  manifest["output"] = out_path;
  manifest["malformed_lines"] = coll.malformed.size();
  write_json(out_path + ".manifest.json", manifest);
  out << "ingested " << res.stats.ingested << ", removed " << res.stats.removed() << " (prefix "
      << res.stats.removed_prefix << ", suffix " << res.stats.removed_suffix << ", exact " << res.stats.removed_exact
      << "), kept " << res.survivors.size() << "\n";
  return kExitOk;
}

inline int cmd_harvest(const ExperimentConfig& cfg, const OutputLayout& layout, const std::vector<std::string>& names,
                       bool confirm_spend, std::ostream& out) {
  cfg.validate();
  const auto data = load_data(cfg);
  const auto records = data.all_records();
  for (const auto& spec : pick_teachers(cfg, names)) {
    const auto cache_path = layout.cache(spec.name);
    const auto manifest_path = layout.cache_manifest(spec.name);
    const std::string teacher_hash = cfg.teacher_hash(spec);
    if (std::filesystem::exists(cache_path) && std::filesystem::exists(manifest_path)) {
      const auto old = nlohmann::json::parse(read_file_bytes(manifest_path), nullptr, false);
      if (!old.is_discarded() && old.value("teacher_hash", teacher_hash) != teacher_hash) {
        throw ConfigError("cache " + cache_path.string() +
                          " was harvested under a different teacher or corpus configuration; refusing to extend it");
      }
    }
    std::vector<TextRecord> pending;
    {
      std::optional<EmbeddingCache> existing;
      if (std::filesystem::exists(cache_path)) existing = EmbeddingCache::load(cache_path);
      std::set<std::string> seen;
      for (const auto& r : records)
        if (seen.insert(r.id).second && !(existing && existing->contains(r.id))) pending.push_back(r);
    }
    const auto tokens = billed_tokens(spec, pending);
    const Cents cost = estimate_cost(spec, tokens);
    out << spec.name << ": " << records.size() << " records, " << pending.size() << " to embed, " << tokens
        << " tokens, projected " << cost.str() << (is_live(spec) ? "" : " (simulated, not billed)") << "\n";
    if (is_live(spec) && !pending.empty() && !confirm_spend) {
      throw ConfigError("live harvest for " + spec.name + " would spend about " + cost.str() +
                        "; re-run with --confirm-spend to proceed");
    }
    auto teacher = make_teacher(spec, data);
    HarvestOptions opt;
    opt.batch_size = cfg.harvest_batch;
    opt.config_hash = cfg.hash();
    auto m = harvest(*teacher, records, cache_path, opt);
    auto j = m.to_json();
    j["teacher_hash"] = teacher_hash;
    write_json(manifest_path, j);
    out << spec.name << ": " << m.embedded << " new, " << m.already_cached << " cached, " << m.failed_ids.size()
        << " failed, " << m.truncated_ids.size() << " truncated -> " << cache_path.string() << "\n";
  }
  return kExitOk;
}

inline int cmd_train(ExperimentConfig cfg, const OutputLayout& layout, const TrainOverrides& o, std::ostream& out,
                     std::ostream& err) {
  if (o.lr) cfg.training.lr = *o.lr;
  if (o.tau) cfg.training.tau = *o.tau;
  if (o.dropout) cfg.training.dropout = *o.dropout;
  if (o.epochs) cfg.training.epochs = *o.epochs;
  if (o.max_steps) cfg.training.max_steps = *o.max_steps;
  if (o.batch_size) cfg.training.batch_size = *o.batch_size;
  if (o.patience) cfg.training.patience = *o.patience;
  if (o.loss) cfg.training.loss = parse_loss(*o.loss);
  cfg.validate();
  const std::string train_hash = cfg.training_hash();
  const auto base = layout.student_base();
  if (std::filesystem::exists(CheckpointPaths(base).manifest) && !o.force) {
    const auto old = load_manifest(base);
    if (old.value("training_hash", "") != train_hash) {
      throw ConfigError("existing checkpoint " + base.string() + " was trained under a different configuration (" +
                        old.value("training_hash", std::string("?")).substr(0, 16) + " vs " + train_hash.substr(0, 16) +
                        "); refusing to resume, pass --force to overwrite");
    }
    out << "checkpoint " << base.string() << " is up to date for this configuration\n";
    return kExitOk;
  }
  const auto data = load_data(cfg);
  std::vector<EmbeddingCache> owned;
  for (const auto& t : cfg.teachers) owned.push_back(teacher_embeddings(t, data, layout, cfg.teacher_hash(t)));
  std::vector<const EmbeddingCache*> caches;
  for (const auto& c : owned) caches.push_back(&c);
  const auto tcfg = cfg.effective_training();
  err << "training on " << data.pool.size() << " pooled texts, teacher dim "
      << [&] {
           std::size_t d = 0;
           for (const auto* c : caches) d += c->dim();
           return d;
         }()
      << "\n";
  auto outcome = train_student(cfg, data, caches, tcfg, cfg.effective_split());
  ojson meta;
  meta["config_hash"] = cfg.hash();
  meta["training_hash"] = train_hash;
  meta["step"] = outcome.result.best_step;
  meta["dev_loss"] = outcome.result.best_dev_loss;
  meta["training"] = tcfg.to_json();
  save_student(outcome.model, base, meta);
  write_text(layout.curve(), curve_csv(outcome.result.curve));
  write_json(layout.train_report(), train_summary(outcome.result, outcome.split, cfg.hash()));
  out << "trained " << outcome.result.steps << " steps; best dev loss " << fmt4(outcome.result.best_dev_loss) << " at step "
      << outcome.result.best_step << " -> " << base.string() << "\n";
  if (outcome.result.aborted) {
    err << "training aborted: " << outcome.result.abort_reason << "; kept the best checkpoint\n";
    return kExitNumeric;
  }
  return kExitOk;
}

inline int cmd_eval(const ExperimentConfig& cfg, const OutputLayout& layout, const std::vector<std::string>& pairing_names,
                    bool write_runs, std::ostream& out) {
  cfg.validate();
  std::vector<EncoderPairing> pairings = cfg.pairings;
  if (!pairing_names.empty()) {
    pairings.clear();
    for (const auto& p : pairing_names) pairings.push_back(EncoderPairing::parse(p));
  }
  bool needs_student = false;
  for (const auto& p : pairings) needs_student = needs_student || p.query != Side::teacher || p.passage != Side::teacher;
  const auto data = load_data(cfg);
  std::vector<TextRecord> eval_recs = data.eval.queries;
  eval_recs.insert(eval_recs.end(), data.eval.passages.begin(), data.eval.passages.end());
  std::vector<EmbeddingCache> owned;
  for (const auto& t : cfg.teachers) owned.push_back(teacher_embeddings(t, data, layout, cfg.teacher_hash(t)));
  const EmbeddingCache teacher_side = owned.size() == 1 ? owned[0] : concat_cache(owned[0], owned[1], eval_recs);
  std::optional<StudentModel> student;
  if (needs_student) {
    const auto base = layout.student_base();
    if (!std::filesystem::exists(CheckpointPaths(base).manifest)) {
      throw DataError("no student checkpoint at " + base.string() + "; run train first");
    }
    if (load_manifest(base).value("training_hash", "") != cfg.training_hash()) {
      throw ConfigError("checkpoint " + base.string() + " was trained under a different configuration");
    }
    student = load_student(base, cfg.training.dropout);
  }
  EvalOptions opt = cfg.eval;
  opt.seed = cfg.seed;
  opt.config_hash = cfg.hash();
  Table table{"Retrieval on " + data.eval.name + " [config " + opt.config_hash.substr(0, 16) + "]",
              {"pairing", "dim", "ndcg@" + std::to_string(opt.ndcg_k), "recall@" + std::to_string(opt.recall_k),
               "recall@" + std::to_string(opt.recall_k) + "(rel>=2)"},
              {}};
  for (const auto& p : pairings) {
    const auto rep = evaluate_pairing(p, data.eval, {&teacher_side, student ? &*student : nullptr}, opt);
    write_json(layout.report(p), rep.to_json());
    if (write_runs) {
      std::filesystem::create_directories(layout.run(p).parent_path());
      std::ofstream run(layout.run(p));
      write_run(run, rep.run, OutputLayout::slug(p));
    }
    auto metric = [](const MetricSummary& m) { return m.evaluated ? fmt4(m.mean) : std::string("n/a"); };
    table.rows.push_back({p.label(), std::to_string(rep.dim), metric(rep.ndcg), metric(rep.recall_rel1), metric(rep.recall_rel2)});
  }
  write_text(layout.root / "reports" / "summary.txt", table.text());
  write_text(layout.root / "reports" / "summary.csv", table.csv());
  out << table.text();
  return kExitOk;
}

inline int cmd_ablate(const ExperimentConfig& cfg, const OutputLayout& layout, std::vector<std::string> studies,
                      std::ostream& out, std::ostream& err) {
  if (studies.empty() || (studies.size() == 1 && studies[0] == "all")) studies = study_names();
  AblationRunner runner(cfg, [&err](const std::string& msg) { err << msg << "\n"; });
  bool any_failed = false;
  for (const auto& s : studies) {
    const auto rep = runner.run(s);
    write_study(layout.ablate_dir(), rep);
    out << rep.summary.text() << "\n";
    for (const auto& row : rep.cells.rows)
      for (const auto& c : row) any_failed = any_failed || c.rfind("FAILED", 0) == 0;
  }
  return any_failed ? kExitFailure : kExitOk;
}

inline int cmd_cost(const ExperimentConfig& cfg, const std::vector<std::string>& names, std::optional<std::int64_t> tokens,
                    std::ostream& out) {
  std::vector<TeacherSpec> specs = pick_teachers(cfg, names);
  if (names.empty() && tokens) specs = {builtin_teacher("openai"), builtin_teacher("cohere")};
  std::optional<ExperimentData> data;
  if (!tokens) data = load_data(cfg);
  for (const auto& spec : specs) {
    const std::int64_t n = tokens ? *tokens : billed_tokens(spec, data->all_records());
    char price[32];
    std::snprintf(price, sizeof price, "%.2f", spec.price_per_million);
    out << spec.name << ": " << n << " tokens at $" << price << "/1M -> " << estimate_cost(spec, n).str() << "\n";
  }
  return kExitOk;
}

// Writes the synthetic world as TSV/qrels files usable as a file corpus.
inline int cmd_synth(const ExperimentConfig& cfg, const std::string& dir, std::ostream& out) {
  const auto w = SyntheticWorld::generate(cfg.effective_world());
  std::vector<TextRecord> passages, queries;
  for (const auto& r : w.train_records()) (r.kind == TextKind::passage ? passages : queries).push_back(r);
  const std::filesystem::path d(dir);
  write_tsv(d / "passages.tsv", passages);
  write_tsv(d / "queries.tsv", queries);
  write_tsv(d / "eval_queries.tsv", w.eval_queries());
  write_tsv(d / "eval_passages.tsv", w.eval_passages());
  std::ofstream q(d / "eval_qrels.txt");
  write_qrels(q, w.eval_qrels());
  out << "wrote " << passages.size() << " passages, " << queries.size() << " queries and a " << w.eval_queries().size()
      << "-query eval set to " << d.string() << "\n";
  return kExitOk;
}

}  // namespace cli

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"embsteal: distill black-box embedding models into a local student"};
  app.require_subcommand(1);
  app.fallthrough();
  cli::Globals g;
  app.add_option("--seed", g.seed, "Experiment seed (overrides the config)");
  app.add_option("--config", g.config, "JSON experiment config");
  app.add_option("--out-dir", g.out_dir, "Directory for caches, checkpoints and reports")->capture_default_str();

  auto* dedup = app.add_subcommand("dedup", "Remove passages contained as a prefix or suffix of another");
  std::string dedup_in, dedup_out;
  dedup->add_option("--in", dedup_in, "Passage TSV (id<TAB>text)")->required();
  dedup->add_option("--out", dedup_out, "Survivor TSV")->required();

  auto* harvest_cmd = app.add_subcommand("harvest", "Collect teacher embeddings into the cache");
  std::vector<std::string> harvest_teachers;
  bool confirm_spend = false;
  harvest_cmd->add_option("--teacher", harvest_teachers, "Teacher name (default: all configured)");
  harvest_cmd->add_flag("--confirm-spend", confirm_spend, "Allow billed calls to live APIs");

  auto* train_cmd = app.add_subcommand("train", "Distill the student from cached teacher embeddings");
  cli::TrainOverrides ov;
  train_cmd->add_option("--lr", ov.lr, "Peak learning rate");
  train_cmd->add_option("--tau", ov.tau, "Contrastive temperature");
  train_cmd->add_option("--dropout", ov.dropout, "Encoder dropout");
  train_cmd->add_option("--epochs", ov.epochs, "Epoch cap");
  train_cmd->add_option("--max-steps", ov.max_steps, "Step cap (0: none)");
  train_cmd->add_option("--batch-size", ov.batch_size, "Pairs per step");
  train_cmd->add_option("--patience", ov.patience, "Dev evaluations without improvement before stopping (0: off)");
  train_cmd->add_option("--loss", ov.loss, "cosine or contrastive");
  train_cmd->add_flag("--force", ov.force, "Overwrite a checkpoint trained under another configuration");

  auto* eval_cmd = app.add_subcommand("eval", "Retrieval evaluation under encoder pairings");
  std::vector<std::string> pairings;
  bool write_runs = false;
  eval_cmd->add_option("--pairing", pairings, "teacher, q-only, p-only, q&p, bottleneck (default: from config)");
  eval_cmd->add_flag("--run-file", write_runs, "Also write TREC run files");

  auto* ablate_cmd = app.add_subcommand("ablate", "Desk-scale ablation studies");
  std::vector<std::string> studies;
  ablate_cmd->add_option("--study", studies, "data-size, loss, bottleneck, concat or all")->required();

  auto* cost_cmd = app.add_subcommand("cost", "Projected embedding spend");
  std::vector<std::string> cost_teachers;
  std::optional<std::int64_t> tokens;
  cost_cmd->add_option("--teacher", cost_teachers, "Teacher name (default: configured, or openai and cohere with --tokens)");
  cost_cmd->add_option("--tokens", tokens, "Token count (default: count the configured corpus)");

  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic world as TSV files");
  std::string synth_dir;
  synth_cmd->add_option("--dir", synth_dir, "Output directory")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    const ExperimentConfig cfg = cli::load_config(g);
    const OutputLayout layout{g.out_dir};
    if (dedup->parsed()) return cli::cmd_dedup(cfg, dedup_in, dedup_out, out, err);
    if (harvest_cmd->parsed()) return cli::cmd_harvest(cfg, layout, harvest_teachers, confirm_spend, out);
    if (train_cmd->parsed()) return cli::cmd_train(cfg, layout, ov, out, err);
    if (eval_cmd->parsed()) return cli::cmd_eval(cfg, layout, pairings, write_runs, out);
    if (ablate_cmd->parsed()) return cli::cmd_ablate(cfg, layout, studies, out, err);
    if (cost_cmd->parsed()) return cli::cmd_cost(cfg, cost_teachers, tokens, out);
    if (synth_cmd->parsed()) return cli::cmd_synth(cfg, synth_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const AuthError& e) {
    err << "teacher error: " << e.what() << "\n";
    return kExitTeacher;
  } catch (const TransportError& e) {
    err << "teacher error: " << e.what() << "\n";
    return kExitTeacher;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace embsteal
