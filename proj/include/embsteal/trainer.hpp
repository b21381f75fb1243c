#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "embsteal/cache.hpp"
#include "embsteal/encoder.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/hash.hpp"
#include "embsteal/losses.hpp"
#include "embsteal/optim.hpp"
#include "embsteal/student.hpp"
#include "embsteal/teachers.hpp"

namespace embsteal {

enum class LossKind { cosine, contrastive };

inline const char* loss_name(LossKind k) { return k == LossKind::cosine ? "cosine" : "contrastive"; }

inline LossKind parse_loss(const std::string& s) {
  if (s == "cosine") return LossKind::cosine;
  if (s == "contrastive") return LossKind::contrastive;
  throw ConfigError("unknown loss '" + s + "' (expected cosine or contrastive)");
}

struct TrainingConfig {
  std::size_t batch_size = 256;
  double lr = 4e-5;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 50;
  double dropout = 0.10;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no cap beyond epochs
  LossKind loss = LossKind::cosine;
  double tau = 0.05;
  std::uint64_t seed = 0;
  std::size_t dev_eval_every = 50;
  std::size_t patience = 0;  // stop after this many dev evals without improvement; 0: never
  bool projection_bias = false;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (loss == LossKind::contrastive && batch_size < 2) throw ConfigError("contrastive loss needs batch_size >= 2");
    if (loss == LossKind::contrastive && !(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (patience && !dev_eval_every) throw ConfigError("patience needs dev_eval_every > 0");
  }

  AdamWConfig optimizer() const {
    AdamWConfig a;
    a.lr = lr;
    a.weight_decay = weight_decay;
    a.warmup_steps = warmup_steps;
    return a;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["warmup_steps"] = warmup_steps;
    j["dropout"] = dropout;
    j["epochs"] = epochs;
    j["max_steps"] = max_steps;
    j["loss"] = loss_name(loss);
    j["tau"] = tau;
    j["seed"] = seed;
    j["dev_eval_every"] = dev_eval_every;
    j["patience"] = patience;
    j["projection_bias"] = projection_bias;
    return j;
  }
};

// One distillation example: the text (its kind picks the prefix) and the
// teacher target.
struct TrainingPair {
  TextRecord record;
  EmbeddingVector target;
};

// Looks every record up in one cache, or in two and concatenates.
inline std::vector<TrainingPair> make_targets(std::span<const TextRecord> records,
                                              std::span<const EmbeddingCache* const> caches) {
  if (caches.empty() || caches.size() > 2) throw ConfigError("make_targets takes one or two teacher caches");
  std::vector<std::string> missing;
  std::vector<TrainingPair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    std::vector<const EmbeddingVector*> found;
    for (const EmbeddingCache* c : caches) {
      const EmbeddingVector* v = c->find(r.id);
      if (!v) {
        missing.push_back(r.id);
        break;
      }
      found.push_back(v);
    }
    if (found.size() != caches.size()) continue;
    out.push_back({r, found.size() == 1 ? *found[0] : concat_teachers(*found[0], *found[1])});
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 20) list += ", ... (" + std::to_string(missing.size()) + " total)";
    throw DataError("no cached teacher embedding for: " + list);
  }
  return out;
}

struct CurvePoint {
  std::uint64_t step = 0;
  std::optional<double> train_loss;
  std::optional<double> dev_loss;
};

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,train_loss,dev_loss\n";
  char buf[64];
  for (const auto& p : curve) {
    out += std::to_string(p.step) + ',';
    if (p.train_loss) {
      std::snprintf(buf, sizeof buf, "%.9g", *p.train_loss);
      out += buf;
    }
    out += ',';
    if (p.dev_loss) {
      std::snprintf(buf, sizeof buf, "%.9g", *p.dev_loss);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

struct TrainResult {
  StudentModel best;
  std::uint64_t best_step = 0;
  double best_dev_loss = std::numeric_limits<double>::infinity();
  std::uint64_t steps = 0;
  std::vector<CurvePoint> curve;
  bool aborted = false;
  bool stopped_early = false;
  std::string abort_reason;
};

namespace detail {

struct PreparedSet {
  std::vector<EncodedText> enc;
  Tensor targets;
};

inline PreparedSet prepare(const StudentModel& m, std::span<const TrainingPair> pairs) {
  PreparedSet s;
  if (pairs.empty()) return s;
  const std::size_t dt = m.teacher_dim();
  s.targets = Tensor({pairs.size(), dt});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].target.dim() != dt) {
      throw ConfigError("target for " + pairs[i].record.id + " has dim " + std::to_string(pairs[i].target.dim()) +
                        ", projection emits " + std::to_string(dt));
    }
    s.enc.push_back(m.tokenizer.encode(pairs[i].record));
    std::copy(pairs[i].target.values.begin(), pairs[i].target.values.end(), s.targets.row(i).begin());
  }
  return s;
}

inline Tensor gather_targets(const Tensor& all, std::span<const std::size_t> idx) {
  Tensor t({idx.size(), all.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(all.row(idx[i]).begin(), all.row(idx[i]).end(), t.row(i).begin());
  return t;
}

inline Var batch_loss(Tape& tape, StudentModel& m, bool trainable, const PreparedSet& set,
                      std::span<const std::size_t> idx, const TrainingConfig& cfg, bool train_mode, Rng* rng) {
  std::vector<const EncodedText*> encs;
  for (std::size_t i : idx) encs.push_back(&set.enc[i]);
  Var pooled;
  if (trainable) {
    EncoderGraph graph(tape, m.encoder);
    pooled = pooled_batch(graph, encs, train_mode, rng);
  } else {
    EncoderGraph graph(tape, static_cast<const EncoderParams&>(m.encoder));
    pooled = pooled_batch(graph, encs, train_mode, rng);
  }
  Var out = ad::project(tape, pooled, m.projection, trainable);
  const Tensor t = gather_targets(set.targets, idx);
  return cfg.loss == LossKind::cosine ? ad::cosine_distance_loss(t, out) : ad::contrastive_loss(t, out, cfg.tau);
}

}  // namespace detail

// Mean per-element loss in eval mode, in fixed chunks of batch_size.
inline double evaluate_loss(const StudentModel& model, std::span<const TrainingPair> pairs, const TrainingConfig& cfg) {
  if (pairs.empty()) throw DataError("cannot evaluate loss on an empty set");
  auto& m = const_cast<StudentModel&>(model);
  const auto set = detail::prepare(m, pairs);
  double total = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, pairs.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    total += detail::batch_loss(tape, m, false, set, idx, cfg, false, nullptr).value()[0] * static_cast<double>(n);
  }
  return total / static_cast<double>(pairs.size());
}

// AdamW on encoder + projection with per-epoch seeded shuffles. Dev loss is
// measured at step 0, every dev_eval_every steps and after the last step;
// the snapshot with the lowest dev loss is returned. With patience set, the
// run stops once that many consecutive dev evals fail to improve. A non-finite value
// stops the run and keeps the best snapshot so far.
inline TrainResult train(StudentModel& model, const TrainingConfig& cfg, std::span<const TrainingPair> train_pairs,
                         std::span<const TrainingPair> dev_pairs) {
  cfg.validate();
  model.validate();
  if (train_pairs.empty()) throw DataError("training set is empty");
  if (dev_pairs.empty()) throw DataError("dev set is empty");
  model.encoder.config.dropout = cfg.dropout;

  const auto train_set = detail::prepare(model, train_pairs);
  TrainResult res{model, 0, std::numeric_limits<double>::infinity(), 0, {}, false, false, {}};
  AdamW opt(model.parameters(), cfg.optimizer());

  std::size_t stale = 0;
  auto eval_dev = [&](std::uint64_t step) {
    const double dev = evaluate_loss(model, dev_pairs, cfg);
    if (!res.curve.empty() && res.curve.back().step == step) {
      res.curve.back().dev_loss = dev;
    } else {
      res.curve.push_back({step, std::nullopt, dev});
    }
    if (dev < res.best_dev_loss) {
      res.best_dev_loss = dev;
      res.best_step = step;
      res.best = model;
      stale = 0;
    } else {
      ++stale;
    }
  };

  std::uint64_t step = 0;
  try {
    eval_dev(0);
    const std::size_t n = train_pairs.size();
    std::vector<std::size_t> order(n);
    bool done = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      Rng shuffler(derive_key(cfg.seed, "shuffle", std::to_string(epoch)));
      shuffler.shuffle(order.begin(), order.end());
      for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        if (cfg.max_steps && step >= cfg.max_steps) {
          done = true;
          break;
        }
        const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
        Rng drop(derive_key(cfg.seed, "dropout", std::to_string(step + 1)));
        Tape tape;
        Var loss = detail::batch_loss(tape, model, true, train_set, idx, cfg, true, &drop);
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
        ++step;
        res.curve.push_back({step, loss.value()[0], std::nullopt});
        if (cfg.dev_eval_every && step % cfg.dev_eval_every == 0) {
          eval_dev(step);
          if (cfg.patience && stale >= cfg.patience) {
            res.stopped_early = true;
            done = true;
            break;
          }
        }
      }
    }
    if (res.curve.back().step != step || !res.curve.back().dev_loss) eval_dev(step);
  } catch (const NumericError& e) {
    res.aborted = true;
    res.abort_reason = e.what();
  }
  res.steps = step;
  return res;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace embsteal
