#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "embsteal/corpus.hpp"
#include "embsteal/encoder.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/hash.hpp"
#include "embsteal/retrieval.hpp"
#include "embsteal/teachers.hpp"
#include "embsteal/trainer.hpp"
#include "embsteal/world.hpp"

namespace embsteal {

using ojson = nlohmann::ordered_json;

namespace cfgio {

// Reads named members of one JSON object and rejects members nobody asked for.
class Fields {
 public:
  Fields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + " has the wrong type");
    }
  }

  const nlohmann::json* sub(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown key " + where_ + "." + k);
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> used_;
};

inline ojson world_json(const WorldConfig& w) {
  ojson j;
  j["seed"] = w.seed;
  j["topics"] = w.topics;
  j["ambient_dim"] = w.ambient_dim;
  j["sigma"] = w.sigma;
  j["words_per_topic"] = w.words_per_topic;
  j["filler_words"] = w.filler_words;
  j["topic_word_rate"] = w.topic_word_rate;
  j["zipf_exponent"] = w.zipf_exponent;
  j["query_words"] = {w.query_min_words, w.query_max_words};
  j["passage_words"] = {w.passage_min_words, w.passage_max_words};
  j["train_passages"] = w.train_passages;
  j["train_queries"] = w.train_queries;
  j["eval_passages"] = w.eval_passages;
  j["eval_queries"] = w.eval_queries;
  j["anchor_topic_word"] = w.anchor_topic_word;
  j["orthogonal_topics"] = w.orthogonal_topics;
  return j;
}

inline WorldConfig world_from(const nlohmann::json& j, WorldConfig w, const std::string& where) {
  Fields f(j, where);
  f.get("seed", w.seed);
  f.get("topics", w.topics);
  f.get("ambient_dim", w.ambient_dim);
  f.get("sigma", w.sigma);
  f.get("words_per_topic", w.words_per_topic);
  f.get("filler_words", w.filler_words);
  f.get("topic_word_rate", w.topic_word_rate);
  f.get("zipf_exponent", w.zipf_exponent);
  std::vector<std::size_t> range;
  if (f.has("query_words")) {
    f.get("query_words", range);
    if (range.size() != 2) throw ConfigError(where + ".query_words must be [min, max]");
    w.query_min_words = range[0], w.query_max_words = range[1];
  } else {
    f.get("query_words", range);
  }
  if (f.has("passage_words")) {
    f.get("passage_words", range);
    if (range.size() != 2) throw ConfigError(where + ".passage_words must be [min, max]");
    w.passage_min_words = range[0], w.passage_max_words = range[1];
  } else {
    f.get("passage_words", range);
  }
  f.get("train_passages", w.train_passages);
  f.get("train_queries", w.train_queries);
  f.get("eval_passages", w.eval_passages);
  f.get("eval_queries", w.eval_queries);
  f.get("anchor_topic_word", w.anchor_topic_word);
  f.get("orthogonal_topics", w.orthogonal_topics);
  f.finish();
  w.validate();
  return w;
}

inline ojson teacher_json(const TeacherSpec& t) {
  ojson j;
  j["name"] = t.name;
  j["dim"] = t.dim;
  j["max_tokens"] = t.max_tokens;
  j["price_per_million"] = t.price_per_million;
  j["input_type"] = t.supports_input_type;
  ojson s;
  if (const auto* sim = std::get_if<SimulatedSource>(&t.source)) {
    s["type"] = "simulated";
    s["salt"] = sim->salt;
    s["observer"] = sim->mode == ObserverMode::random ? "random" : "identity";
  } else if (const auto* c = std::get_if<CacheSource>(&t.source)) {
    s["type"] = "cache";
    s["path"] = c->path;
  } else {
    const auto& l = std::get<LiveSource>(t.source);
    s["type"] = "live";
    s["protocol"] = l.protocol == WireProtocol::openai ? "openai" : "cohere";
    s["endpoint"] = l.endpoint;
    s["model"] = l.model;
    s["api_key_env"] = l.api_key_env;
    s["batch_limit"] = l.batch_limit;
  }
  j["source"] = std::move(s);
  return j;
}

// A teacher is either a built-in name or an object; an object whose name is
// a built-in starts from that built-in.
inline TeacherSpec teacher_from(const nlohmann::json& j, const std::string& where) {
  if (j.is_string()) return builtin_teacher(j.get<std::string>());
  Fields f(j, where);
  std::string name;
  f.get("name", name);
  TeacherSpec t;
  try {
    t = builtin_teacher(name);
  } catch (const ConfigError&) {
    t = TeacherSpec{name, 0, 0, 0.0, false, SimulatedSource{}};
  }
  f.get("dim", t.dim);
  f.get("max_tokens", t.max_tokens);
  f.get("price_per_million", t.price_per_million);
  f.get("input_type", t.supports_input_type);
  if (const auto* s = f.sub("source")) {
    Fields sf(*s, where + ".source");
    std::string type;
    sf.get("type", type);
    if (type == "simulated") {
      SimulatedSource sim;
      std::string observer = "random";
      sf.get("salt", sim.salt);
      sf.get("observer", observer);
      if (observer != "random" && observer != "identity") throw ConfigError(where + ".source.observer must be random or identity");
      sim.mode = observer == "random" ? ObserverMode::random : ObserverMode::identity;
      t.source = sim;
    } else if (type == "cache") {
      CacheSource c;
      sf.get("path", c.path);
      if (c.path.empty()) throw ConfigError(where + ".source.path is required for cache teachers");
      t.source = c;
    } else if (type == "live") {
      LiveSource l = std::holds_alternative<LiveSource>(t.source) ? std::get<LiveSource>(t.source) : LiveSource{};
      std::string protocol = l.protocol == WireProtocol::openai ? "openai" : "cohere";
      sf.get("protocol", protocol);
      if (protocol != "openai" && protocol != "cohere") throw ConfigError(where + ".source.protocol must be openai or cohere");
      l.protocol = protocol == "openai" ? WireProtocol::openai : WireProtocol::cohere;
      sf.get("endpoint", l.endpoint);
      sf.get("model", l.model);
      sf.get("api_key_env", l.api_key_env);
      sf.get("batch_limit", l.batch_limit);
      if (sf.has("api_key")) throw ConfigError(where + ".source: credentials belong in the environment; set api_key_env");
      t.source = l;
    } else {
      throw ConfigError(where + ".source.type must be simulated, cache or live");
    }
    sf.finish();
  }
  f.finish();
  t.validate();
  return t;
}

inline TrainingConfig training_from(const nlohmann::json& j, TrainingConfig t, const std::string& where) {
  Fields f(j, where);
  f.get("batch_size", t.batch_size);
  f.get("lr", t.lr);
  f.get("weight_decay", t.weight_decay);
  f.get("warmup_steps", t.warmup_steps);
  f.get("dropout", t.dropout);
  f.get("epochs", t.epochs);
  f.get("max_steps", t.max_steps);
  std::string loss = loss_name(t.loss);
  f.get("loss", loss);
  t.loss = parse_loss(loss);
  f.get("tau", t.tau);
  f.get("dev_eval_every", t.dev_eval_every);
  f.get("patience", t.patience);
  f.get("projection_bias", t.projection_bias);
  f.finish();
  return t;
}

}  // namespace cfgio

struct StudentSpec {
  std::size_t dim = 16;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t vocab_size = 4096;
  std::size_t max_len = 32;
  double init_std = 0.02;

  EncoderConfig encoder(double dropout) const {
    EncoderConfig e;
    e.dim = dim;
    e.layers = layers;
    e.heads = heads;
    e.vocab_size = vocab_size;
    e.max_len = max_len;
    e.init_std = init_std;
    e.dropout = dropout;
    return e;
  }
};

struct CorpusPaths {
  std::string passages;       // TSV id<TAB>text, the distillation pool
  std::string queries;        // TSV, also pooled for distillation
  std::string eval_queries;   // TSV
  std::string eval_passages;  // TSV
  std::string qrels;          // TREC qrels for eval_queries
  bool dedup = true;
};

struct StudySpec {
  std::vector<std::size_t> data_sizes{1000, 4000, 20000};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> taus{0.01, 0.05};
  std::size_t train_sample = 4000;  // pairs per cell for the loss, bottleneck and concat studies
  std::size_t max_steps = 1500;
  std::vector<std::string> concat_teachers{"sim-cohere", "sim-openai"};
  WorldConfig world = default_world();

  static WorldConfig default_world() {
    WorldConfig w;
    w.topics = 24;
    w.sigma = 0.15;
    w.words_per_topic = 200;
    w.topic_word_rate = 0.25;
    return w;
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::optional<WorldConfig> world;
  bool world_seed_explicit = false;  // otherwise the world follows the experiment seed
  std::optional<CorpusPaths> corpus;
  std::vector<TeacherSpec> teachers{builtin_teacher("sim-cohere")};
  SplitSpec split{100, 25, std::nullopt, 0};
  StudentSpec student;
  TrainingConfig training = desk_training();
  std::vector<EncoderPairing> pairings{EncoderPairing::teacher_only(), EncoderPairing::q_only(), EncoderPairing::p_only(),
                                       EncoderPairing::q_and_p(), EncoderPairing::bottleneck()};
  EvalOptions eval;
  std::size_t harvest_batch = 64;
  StudySpec ablate;

  // Small batch, larger lr for the tiny student, train until the dev loss stalls.
  static TrainingConfig desk_training() {
    TrainingConfig t;
    t.batch_size = 32;
    t.lr = 1e-3;
    t.epochs = 100;
    t.dev_eval_every = 50;
    t.patience = 6;
    return t;
  }

  // One teacher, or two whose targets are concatenated.
  void validate(bool check_paths = true) const {
    if (world && corpus) throw ConfigError("config may define world or corpus, not both");
    if (teachers.empty() || teachers.size() > 2) throw ConfigError("config needs one or two teachers");
    for (const auto& t : teachers) t.validate();
    if (teachers.size() == 2 && teachers[0].name == teachers[1].name) throw ConfigError("the two teachers need distinct names");
    training.validate();
    student.encoder(training.dropout).validate();
    if (pairings.empty()) throw ConfigError("config needs at least one pairing");
    if (ablate.seeds.empty() || ablate.data_sizes.empty()) throw ConfigError("ablate.seeds and ablate.data_sizes must be non-empty");
    if (ablate.concat_teachers.size() != 2) throw ConfigError("ablate.concat_teachers must name two teachers");
    if (check_paths && corpus) {
      for (const auto* p : {&corpus->passages, &corpus->queries, &corpus->eval_queries, &corpus->eval_passages, &corpus->qrels}) {
        if (p->empty()) throw ConfigError("corpus paths must all be set (passages, queries, eval_queries, eval_passages, qrels)");
        if (!std::filesystem::exists(*p)) throw ConfigError("corpus file not found: " + *p);
      }
    }
    if (check_paths) {
      for (const auto& t : teachers)
        if (const auto* c = std::get_if<CacheSource>(&t.source); c && !std::filesystem::exists(c->path))
          throw ConfigError("teacher cache not found: " + c->path);
    }
  }

  TrainingConfig effective_training() const {
    TrainingConfig t = training;
    t.seed = seed;
    return t;
  }

  SplitSpec effective_split() const {
    SplitSpec s = split;
    s.seed = seed;
    return s;
  }

  WorldConfig effective_world() const {
    WorldConfig w = world ? *world : WorldConfig{};
    if (!world_seed_explicit) w.seed = seed;
    return w;
  }

  ojson to_json() const {
    ojson j;
    j["seed"] = seed;
    if (corpus) {
      ojson c;
      c["passages"] = corpus->passages;
      c["queries"] = corpus->queries;
      c["eval_queries"] = corpus->eval_queries;
      c["eval_passages"] = corpus->eval_passages;
      c["qrels"] = corpus->qrels;
      c["dedup"] = corpus->dedup;
      j["corpus"] = std::move(c);
    } else {
      j["world"] = cfgio::world_json(effective_world());
    }
    j["teachers"] = ojson::array();
    for (const auto& t : teachers) j["teachers"].push_back(cfgio::teacher_json(t));
    ojson s;
    s["dev_passages"] = split.dev_passages;
    s["dev_queries"] = split.dev_queries;
    s["train_sample"] = split.train_sample ? ojson(*split.train_sample) : ojson(nullptr);
    j["split"] = std::move(s);
    ojson st;
    st["dim"] = student.dim;
    st["layers"] = student.layers;
    st["heads"] = student.heads;
    st["vocab_size"] = student.vocab_size;
    st["max_len"] = student.max_len;
    st["init_std"] = student.init_std;
    j["student"] = std::move(st);
    j["training"] = effective_training().to_json();
    j["pairings"] = ojson::array();
    for (const auto& p : pairings) j["pairings"].push_back(p.label());
    ojson e;
    e["ndcg_k"] = eval.ndcg_k;
    e["recall_k"] = eval.recall_k;
    e["gain"] = eval.gain == Gain::linear ? "linear" : "exponential";
    j["eval"] = std::move(e);
    j["harvest_batch"] = harvest_batch;
    ojson a;
    a["data_sizes"] = ablate.data_sizes;
    a["seeds"] = ablate.seeds;
    a["taus"] = ablate.taus;
    a["train_sample"] = ablate.train_sample;
    a["max_steps"] = ablate.max_steps;
    a["concat_teachers"] = ablate.concat_teachers;
    a["world"] = cfgio::world_json(ablate.world);
    j["ablate"] = std::move(a);
    return j;
  }

  // SHA-256 of the canonical JSON form.
  std::string hash() const { return sha256_hex(to_json().dump()); }

  // Only the parts a trained checkpoint depends on.
  std::string training_hash() const {
    ojson j = to_json();
    for (const char* k : {"pairings", "eval", "harvest_batch", "ablate"}) j.erase(k);
    return sha256_hex(j.dump());
  }

  // Only the parts a teacher cache depends on: the teacher and the texts.
  std::string teacher_hash(const TeacherSpec& t) const {
    ojson j = to_json();
    ojson k;
    k["teacher"] = cfgio::teacher_json(t);
    k["data"] = corpus ? j["corpus"] : j["world"];
    return sha256_hex(k.dump());
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    using cfgio::Fields;
    ExperimentConfig c;
    Fields f(j, "config");
    f.get("seed", c.seed);
    if (const auto* w = f.sub("world")) {
      c.world = cfgio::world_from(*w, WorldConfig{}, "world");
      c.world_seed_explicit = w->contains("seed");
    }
    if (const auto* cp = f.sub("corpus")) {
      Fields cf(*cp, "corpus");
      CorpusPaths paths;
      cf.get("passages", paths.passages);
      cf.get("queries", paths.queries);
      cf.get("eval_queries", paths.eval_queries);
      cf.get("eval_passages", paths.eval_passages);
      cf.get("qrels", paths.qrels);
      cf.get("dedup", paths.dedup);
      cf.finish();
      c.corpus = paths;
    }
    if (const auto* ts = f.sub("teachers")) {
      if (!ts->is_array()) throw ConfigError("config.teachers must be an array");
      c.teachers.clear();
      for (std::size_t i = 0; i < ts->size(); ++i) c.teachers.push_back(cfgio::teacher_from((*ts)[i], "teachers[" + std::to_string(i) + "]"));
    }
    if (const auto* s = f.sub("split")) {
      Fields sf(*s, "split");
      sf.get("dev_passages", c.split.dev_passages);
      sf.get("dev_queries", c.split.dev_queries);
      if (sf.has("train_sample") && !s->at("train_sample").is_null()) {
        std::size_t n = 0;
        sf.get("train_sample", n);
        c.split.train_sample = n;
      } else {
        sf.sub("train_sample");
      }
      sf.finish();
    }
    if (const auto* s = f.sub("student")) {
      Fields sf(*s, "student");
      sf.get("dim", c.student.dim);
      sf.get("layers", c.student.layers);
      sf.get("heads", c.student.heads);
      sf.get("vocab_size", c.student.vocab_size);
      sf.get("max_len", c.student.max_len);
      sf.get("init_std", c.student.init_std);
      sf.finish();
    }
    if (const auto* t = f.sub("training")) c.training = cfgio::training_from(*t, c.training, "training");
    if (const auto* p = f.sub("pairings")) {
      if (!p->is_array()) throw ConfigError("config.pairings must be an array");
      c.pairings.clear();
      for (const auto& s : *p) c.pairings.push_back(EncoderPairing::parse(s.get<std::string>()));
    }
    if (const auto* e = f.sub("eval")) {
      Fields ef(*e, "eval");
      ef.get("ndcg_k", c.eval.ndcg_k);
      ef.get("recall_k", c.eval.recall_k);
      std::string gain = "linear";
      ef.get("gain", gain);
      if (gain != "linear" && gain != "exponential") throw ConfigError("eval.gain must be linear or exponential");
      c.eval.gain = gain == "linear" ? Gain::linear : Gain::exponential;
      ef.finish();
    }
    f.get("harvest_batch", c.harvest_batch);
    if (const auto* a = f.sub("ablate")) {
      Fields af(*a, "ablate");
      af.get("data_sizes", c.ablate.data_sizes);
      af.get("seeds", c.ablate.seeds);
      af.get("taus", c.ablate.taus);
      af.get("train_sample", c.ablate.train_sample);
      af.get("max_steps", c.ablate.max_steps);
      af.get("concat_teachers", c.ablate.concat_teachers);
      if (const auto* w = af.sub("world")) c.ablate.world = cfgio::world_from(*w, c.ablate.world, "ablate.world");
      af.finish();
    }
    f.finish();
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    auto j = nlohmann::json::parse(in, nullptr, false, true);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    return from_json(j);
  }
};

}  // namespace embsteal
