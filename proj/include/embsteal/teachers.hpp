#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "embsteal/errors.hpp"
#include "embsteal/records.hpp"
#include "embsteal/rng.hpp"
#include "embsteal/tensor.hpp"
#include "embsteal/world.hpp"

namespace embsteal {

// Transient transport failure; harvest retries these with backoff.
class TransportError : public Error {
 public:
  using Error::Error;
};

class RateLimitError : public TransportError {
 public:
  using TransportError::TransportError;
};

// Credentials rejected. Never retried.
class AuthError : public Error {
 public:
  using Error::Error;
};

class MalformedResponseError : public DataError {
 public:
  using DataError::DataError;
};

inline constexpr double kUnitNormTolerance = 1e-4;

// A unit-norm teacher or student embedding.
struct EmbeddingVector {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  double norm() const { return l2_norm(values); }

  static EmbeddingVector normalized(std::vector<double> v) {
    const double n = l2_norm(v);
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("cannot normalize a zero or non-finite embedding");
    for (double& x : v) x /= n;
    return {std::move(v)};
  }
};

inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  return dot(a.values, b.values) / (a.norm() * b.norm());
}

// Renormalized concatenation; for unit inputs this is a division by sqrt(2).
inline EmbeddingVector concat_teachers(const EmbeddingVector& a, const EmbeddingVector& b) {
  std::vector<double> v = a.values;
  v.insert(v.end(), b.values.begin(), b.values.end());
  return EmbeddingVector::normalized(std::move(v));
}

enum class ObserverMode { random, identity };

struct SimulatedSource {
  std::uint64_t salt = 0;
  ObserverMode mode = ObserverMode::random;
};

struct CacheSource {
  std::string path;
};

enum class WireProtocol { openai, cohere };

struct LiveSource {
  WireProtocol protocol = WireProtocol::openai;
  std::string endpoint;     // scheme://host[:port]
  std::string model;
  std::string api_key_env;  // name of the environment variable holding the key
  std::size_t batch_limit = 96;
};

struct TeacherSpec {
  std::string name;
  std::size_t dim = 0;
  std::size_t max_tokens = 0;
  double price_per_million = 0.0;  // USD per 1e6 tokens
  bool supports_input_type = false;
  std::variant<SimulatedSource, CacheSource, LiveSource> source;

  void validate() const {
    if (name.empty()) throw ConfigError("teacher needs a name");
    if (dim < 1) throw ConfigError("teacher " + name + " must have dim >= 1");
    if (max_tokens < 1) throw ConfigError("teacher " + name + " must have max_tokens >= 1");
    if (!(price_per_million >= 0.0)) throw ConfigError("teacher " + name + " must have a non-negative price");
  }
};

// Victim models and their desk-scale stand-ins. The simulated ones keep the
// 3072:1024 dimension ratio at 1/32 scale.
inline TeacherSpec builtin_teacher(const std::string& name) {
  if (name == "openai") {
    return {name, 3072, 8192, 0.13, false,
            LiveSource{WireProtocol::openai, "https://api.openai.com", "text-embedding-3-large", "OPENAI_API_KEY", 2048}};
  }
  if (name == "cohere") {
    return {name, 1024, 512, 0.10, true,
            LiveSource{WireProtocol::cohere, "https://api.cohere.com", "embed-english-v3.0", "COHERE_API_KEY", 96}};
  }
  if (name == "sim-openai") return {name, 96, 8192, 0.13, false, SimulatedSource{}};
  if (name == "sim-cohere") return {name, 32, 512, 0.10, true, SimulatedSource{}};
  throw ConfigError("unknown built-in teacher '" + name + "'");
}

// Money in whole cents.
struct Cents {
  std::int64_t value = 0;

  std::string str() const {
    char buf[48];
    std::snprintf(buf, sizeof buf, "$%lld.%02lld", static_cast<long long>(value / 100),
                  static_cast<long long>(value % 100));
    return buf;
  }
  friend bool operator==(Cents, Cents) = default;
};

// tokens / 1e6 × price, rounded half-up to the cent. The price is first
// fixed to micro-dollars so the result is exact integer arithmetic.
inline Cents estimate_cost(const TeacherSpec& spec, std::int64_t token_count) {
  if (token_count < 0) throw ConfigError("token count must be non-negative");
  const auto micro_per_million = static_cast<unsigned __int128>(std::llround(spec.price_per_million * 1e6));
  // tokens × µ$/1e6 tokens = µ$ × 1e-6 ... one cent is 1e4 µ$.
  const unsigned __int128 numerator = static_cast<unsigned __int128>(token_count) * micro_per_million;
  const unsigned __int128 denom = 10'000'000'000ULL;
  return {static_cast<std::int64_t>((numerator + denom / 2) / denom)};
}

// Anything that maps texts to unit embeddings.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual const TeacherSpec& spec() const = 0;
  // One vector per record, in input order.
  virtual std::vector<EmbeddingVector> embed(std::span<const TextRecord> batch) = 0;
};

inline std::size_t matrix_rank(Tensor m, double tol = 1e-9) {
  // Gaussian elimination with partial pivoting.
  const std::size_t rows = m.rows(), cols = m.cols();
  std::size_t rank = 0;
  for (std::size_t c = 0; c < cols && rank < rows; ++c) {
    std::size_t piv = rank;
    for (std::size_t r = rank + 1; r < rows; ++r)
      if (std::abs(m(r, c)) > std::abs(m(piv, c))) piv = r;
    if (std::abs(m(piv, c)) <= tol) continue;
    for (std::size_t j = 0; j < cols; ++j) std::swap(m(rank, j), m(piv, j));
    for (std::size_t r = rank + 1; r < rows; ++r) {
      const double f = m(r, c) / m(rank, c);
      for (std::size_t j = c; j < cols; ++j) m(r, j) -= f * m(rank, j);
    }
    ++rank;
  }
  return rank;
}

// d_t × D linear map a simulated teacher applies to the topic space.
// Random observers are redrawn until full rank.
inline Tensor teacher_observer(const SyntheticWorld& world, const TeacherSpec& spec) {
  const auto& sim = std::get<SimulatedSource>(spec.source);
  const std::size_t d = world.config().ambient_dim;
  Tensor obs({spec.dim, d});
  if (sim.mode == ObserverMode::identity) {
    for (std::size_t i = 0; i < std::min(spec.dim, d); ++i) obs(i, i) = 1.0;
    return obs;
  }
  const std::size_t full = std::min(spec.dim, d);
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_key(world.seed() ^ mix64(sim.salt), "observer", spec.name, std::to_string(attempt)));
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.dim));
    for (double& v : obs.data()) v = scale * rng.normal();
    if (matrix_rank(obs) == full) return obs;
  }
}

inline EmbeddingVector simulate_with_observer(const SyntheticWorld& world, const TeacherSpec& spec,
                                              const Tensor& observer, const TextRecord& rec) {
  const auto topic = world.topic_of(rec.id);
  if (!topic) throw DataError("record " + rec.id + " has no topic in this world");
  const auto& sim = std::get<SimulatedSource>(spec.source);
  const std::size_t d = world.config().ambient_dim;
  std::vector<double> latent(world.topics().row(*topic).begin(), world.topics().row(*topic).end());
  if (world.config().sigma > 0.0) {
    Rng noise(derive_key(world.seed() ^ mix64(sim.salt), "noise", spec.name, rec.id));
    for (double& v : latent) v += world.config().sigma * noise.normal();
  }
  std::vector<double> out(spec.dim, 0.0);
  for (std::size_t i = 0; i < spec.dim; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += observer(i, j) * latent[j];
  return EmbeddingVector::normalized(std::move(out));
}

// normalize(observer × (topic + sigma·noise)), deterministic in
// (world seed, teacher name, record id).
inline EmbeddingVector simulate_teacher(const SyntheticWorld& world, const TeacherSpec& spec, const TextRecord& rec) {
  return simulate_with_observer(world, spec, teacher_observer(world, spec), rec);
}

class SimulatedTeacher : public Teacher {
 public:
  SimulatedTeacher(const SyntheticWorld& world, TeacherSpec spec)
      : world_(world), spec_(std::move(spec)), observer_((spec_.validate(), teacher_observer(world_, spec_))) {}

  const TeacherSpec& spec() const override { return spec_; }

  std::vector<EmbeddingVector> embed(std::span<const TextRecord> batch) override {
    std::vector<EmbeddingVector> out;
    out.reserve(batch.size());
    for (const auto& rec : batch) out.push_back(simulate_with_observer(world_, spec_, observer_, rec));
    return out;
  }

 private:
  const SyntheticWorld& world_;
  TeacherSpec spec_;
  Tensor observer_;
};

}  // namespace embsteal
