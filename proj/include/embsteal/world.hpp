#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "embsteal/errors.hpp"
#include "embsteal/records.hpp"
#include "embsteal/rng.hpp"
#include "embsteal/tensor.hpp"

namespace embsteal {

// Parameters of a synthetic retrieval world. Every text belongs to one topic;
// its words are drawn from that topic's vocabulary (Zipf-distributed) mixed
// with topic-neutral filler. Teachers see only the topic vector plus noise.
struct WorldConfig {
  std::uint64_t seed = 1;
  std::size_t topics = 8;
  std::size_t ambient_dim = 16;
  double sigma = 0.05;
  std::size_t words_per_topic = 60;
  std::size_t filler_words = 150;
  double topic_word_rate = 0.5;
  double zipf_exponent = 1.0;
  std::size_t query_min_words = 3;
  std::size_t query_max_words = 6;
  std::size_t passage_min_words = 10;
  std::size_t passage_max_words = 20;
  std::size_t train_passages = 2000;
  std::size_t train_queries = 500;
  std::size_t eval_passages = 200;
  std::size_t eval_queries = 40;
  bool anchor_topic_word = true;   // every text carries at least one topic word
  bool orthogonal_topics = false;  // Gram-Schmidt the topic vectors; needs topics <= ambient_dim

  void validate() const {
    if (topics < 2 || ambient_dim == 0) throw ConfigError("world needs at least 2 topics and a positive dimension");
    if (orthogonal_topics && topics > ambient_dim) throw ConfigError("orthogonal topics need topics <= ambient_dim");
    if (sigma < 0.0) throw ConfigError("world sigma must be non-negative");
    if (words_per_topic == 0 || filler_words == 0) throw ConfigError("world vocabularies must be non-empty");
    if (topic_word_rate < 0.0 || topic_word_rate > 1.0) throw ConfigError("topic_word_rate must be in [0, 1]");
    if (query_min_words == 0 || query_min_words > query_max_words || passage_min_words == 0 ||
        passage_min_words > passage_max_words) {
      throw ConfigError("world text lengths must satisfy 0 < min <= max");
    }
  }
};

class SyntheticWorld {
 public:
  static SyntheticWorld generate(const WorldConfig& cfg) {
    cfg.validate();
    SyntheticWorld w;
    w.config_ = cfg;
    w.draw_topics();
    w.build_words();
    Rng rng(derive_key(cfg.seed, "world-texts"));
    auto make = [&](const std::string& prefix, std::size_t n, TextKind kind, bool balanced,
                    std::vector<TextRecord>& out) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t topic = balanced ? i % cfg.topics : rng.below(cfg.topics);
        TextRecord rec{prefix + std::to_string(i), kind, w.make_text(topic, kind, rng)};
        w.topic_of_.emplace(rec.id, topic);
        out.push_back(std::move(rec));
      }
    };
    make("p", cfg.train_passages, TextKind::passage, false, w.train_records_);
    make("q", cfg.train_queries, TextKind::query, false, w.train_records_);
    make("ep", cfg.eval_passages, TextKind::passage, true, w.eval_passages_);
    make("eq", cfg.eval_queries, TextKind::query, true, w.eval_queries_);
    for (const auto& q : w.eval_queries_) {
      auto& judged = w.qrels_[q.id];
      for (const auto& p : w.eval_passages_) {
        if (w.topic_of_.at(p.id) == w.topic_of_.at(q.id)) judged[p.id] = 1;
      }
    }
    return w;
  }

  const WorldConfig& config() const { return config_; }
  std::uint64_t seed() const { return config_.seed; }
  const Tensor& topics() const { return topics_; }

  std::optional<std::size_t> topic_of(const std::string& id) const {
    auto it = topic_of_.find(id);
    if (it == topic_of_.end()) return std::nullopt;
    return it->second;
  }

  // Assigns a topic to a record created outside generate() (tests, toys).
  void assign(const std::string& id, std::size_t topic) {
    if (topic >= config_.topics) throw ConfigError("topic index out of range");
    topic_of_[id] = topic;
  }

  // Distillation pool: passages then queries.
  const std::vector<TextRecord>& train_records() const { return train_records_; }
  const std::vector<TextRecord>& eval_passages() const { return eval_passages_; }
  const std::vector<TextRecord>& eval_queries() const { return eval_queries_; }
  const Qrels& eval_qrels() const { return qrels_; }

  const std::vector<std::string>& topic_words(std::size_t topic) const { return topic_words_.at(topic); }

 private:
  void draw_topics() {
    const std::size_t t = config_.topics, d = config_.ambient_dim;
    Rng rng(derive_key(config_.seed, "world-topics"));
    topics_ = Tensor({t, d});
    for (std::size_t i = 0; i < t; ++i) {
      for (;;) {
        double n2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          topics_(i, j) = rng.normal();
          n2 += topics_(i, j) * topics_(i, j);
        }
        if (config_.orthogonal_topics) {
          for (std::size_t k = 0; k < i; ++k) {
            const double proj = dot(topics_.row(i), topics_.row(k));
            for (std::size_t j = 0; j < d; ++j) topics_(i, j) -= proj * topics_(k, j);
          }
          n2 = dot(topics_.row(i), topics_.row(i));
        }
        const double n = std::sqrt(n2);
        if (n < 1e-9) continue;
        for (std::size_t j = 0; j < d; ++j) topics_(i, j) /= n;
        bool distinct = true;
        for (std::size_t k = 0; k < i && distinct; ++k) distinct = dot(topics_.row(i), topics_.row(k)) < 1.0 - 1e-9;
        if (distinct) break;
      }
    }
  }

  // Three consonant-vowel syllables per word; the index is written in base 70
  // so distinct indices give distinct words.
  static std::string pseudo_word(std::size_t index) {
    static constexpr char kCons[] = "bdfgklmnprstvz";
    static constexpr char kVow[] = "aeiou";
    std::string w;
    for (int s = 0; s < 3; ++s) {
      const std::size_t syl = index % 70;
      index /= 70;
      w += kCons[syl / 5];
      w += kVow[syl % 5];
    }
    return w;
  }

  void build_words() {
    const std::size_t per = config_.words_per_topic;
    if (config_.topics * per + config_.filler_words > 70 * 70 * 70) throw ConfigError("world vocabulary too large");
    topic_words_.assign(config_.topics, {});
    for (std::size_t t = 0; t < config_.topics; ++t)
      for (std::size_t i = 0; i < per; ++i) topic_words_[t].push_back(pseudo_word(t * per + i));
    for (std::size_t i = 0; i < config_.filler_words; ++i) filler_.push_back(pseudo_word(config_.topics * per + i));
    zipf_cdf_.resize(per);
    double acc = 0.0;
    for (std::size_t r = 0; r < per; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), config_.zipf_exponent);
      zipf_cdf_[r] = acc;
    }
    for (double& c : zipf_cdf_) c /= acc;
  }

  std::string make_text(std::size_t topic, TextKind kind, Rng& rng) const {
    const bool query = kind == TextKind::query;
    const std::size_t lo = query ? config_.query_min_words : config_.passage_min_words;
    const std::size_t hi = query ? config_.query_max_words : config_.passage_max_words;
    const std::size_t n = lo + rng.below(hi - lo + 1);
    const std::size_t anchor = config_.anchor_topic_word ? rng.below(n) : n;
    std::string text;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) text += ' ';
      if (i == anchor || rng.bernoulli(config_.topic_word_rate)) {
        const double u = rng.uniform();
        const auto it = std::lower_bound(zipf_cdf_.begin(), zipf_cdf_.end(), u);
        const auto r = std::min<std::size_t>(static_cast<std::size_t>(it - zipf_cdf_.begin()), zipf_cdf_.size() - 1);
        text += topic_words_[topic][r];
      } else {
        text += filler_[rng.below(filler_.size())];
      }
    }
    text += query ? "?" : ".";
    return text;
  }

  WorldConfig config_;
  Tensor topics_;
  std::vector<std::vector<std::string>> topic_words_;
  std::vector<std::string> filler_;
  std::vector<double> zipf_cdf_;
  std::unordered_map<std::string, std::size_t> topic_of_;
  std::vector<TextRecord> train_records_;
  std::vector<TextRecord> eval_passages_;
  std::vector<TextRecord> eval_queries_;
  Qrels qrels_;
};

}  // namespace embsteal
