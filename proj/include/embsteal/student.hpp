#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "embsteal/autodiff.hpp"
#include "embsteal/binio.hpp"
#include "embsteal/encoder.hpp"
#include "embsteal/errors.hpp"
#include "embsteal/hash.hpp"
#include "embsteal/teachers.hpp"
#include "embsteal/tokenizer.hpp"

namespace embsteal {

// d_t × d_s map from the pooled student output to teacher space.
struct ProjectionParams {
  Parameter weight;
  std::optional<Parameter> bias;

  std::size_t out_dim() const { return weight.value.rows(); }
  std::size_t in_dim() const { return weight.value.cols(); }

  static ProjectionParams initialize(std::size_t teacher_dim, std::size_t student_dim, std::uint64_t seed,
                                     bool with_bias = false) {
    if (teacher_dim == 0 || student_dim == 0) throw ConfigError("projection extents must be positive");
    ProjectionParams p;
    Rng rng(derive_key(seed, "projection-init"));
    Tensor w({teacher_dim, student_dim});
    const double std = 1.0 / std::sqrt(static_cast<double>(student_dim));
    for (double& v : w.data()) v = std * rng.normal();
    round_to_f32(w);
    p.weight = Parameter("projection.weight", std::move(w));
    if (with_bias) p.bias = Parameter("projection.bias", Tensor({teacher_dim}));
    return p;
  }

  // Identity on the first min(d_t, d_s) coordinates, zero elsewhere.
  static ProjectionParams identity(std::size_t teacher_dim, std::size_t student_dim) {
    ProjectionParams p;
    Tensor w({teacher_dim, student_dim});
    for (std::size_t i = 0; i < std::min(teacher_dim, student_dim); ++i) w(i, i) = 1.0;
    p.weight = Parameter("projection.weight", std::move(w));
    return p;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = {&weight};
    if (bias) out.push_back(&*bias);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto mut = const_cast<ProjectionParams*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  static constexpr std::string_view kMagic = "PRJ1";

  // {magic, d_t, d_s as u32, has_bias as u8}, then weight (and bias) as f32.
  void save(std::ostream& out) const {
    binio::put_bytes(out, kMagic);
    binio::put(out, static_cast<std::uint32_t>(out_dim()));
    binio::put(out, static_cast<std::uint32_t>(in_dim()));
    binio::put(out, static_cast<std::uint8_t>(bias ? 1 : 0));
    for (const Parameter* p : parameters())
      for (double v : p->value.data()) binio::put_f32(out, v);
  }

  static ProjectionParams load(std::istream& in) {
    binio::expect_magic(in, kMagic, "projection block");
    const auto dt = binio::get<std::uint32_t>(in, "projection rows");
    const auto ds = binio::get<std::uint32_t>(in, "projection cols");
    const auto has_bias = binio::get<std::uint8_t>(in, "projection bias flag");
    ProjectionParams p = identity(dt, ds);
    if (has_bias) p.bias = Parameter("projection.bias", Tensor({dt}));
    for (Parameter* q : p.parameters())
      for (double& v : q->value.data()) v = binio::get_f32(in, "projection parameters");
    return p;
  }
};

struct StudentEmbedding {
  EmbeddingVector bottleneck;  // normalized pooled encoder output, d_s
  EmbeddingVector final;       // normalized projection output, d_t
};

// Tokenizer + encoder + projection head.
struct StudentModel {
  Tokenizer tokenizer;
  EncoderParams encoder;
  ProjectionParams projection;

  std::size_t teacher_dim() const { return projection.out_dim(); }
  std::size_t student_dim() const { return encoder.config.dim; }

  std::vector<Parameter*> parameters() {
    auto out = encoder.parameters();
    for (Parameter* p : projection.parameters()) out.push_back(p);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto mut = const_cast<StudentModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  void validate() const {
    if (tokenizer.size() > encoder.config.vocab_size) throw ConfigError("tokenizer is larger than the encoder vocabulary");
    if (tokenizer.max_len() > encoder.config.max_len) throw ConfigError("tokenizer max_len exceeds encoder max_len");
    if (projection.in_dim() != encoder.config.dim) throw ConfigError("projection input dim differs from encoder dim");
  }
};

inline StudentModel make_student(Tokenizer tokenizer, EncoderConfig cfg, std::size_t teacher_dim, std::uint64_t seed,
                                 bool projection_bias = false) {
  cfg.vocab_size = tokenizer.size();
  cfg.max_len = tokenizer.max_len();
  StudentModel m{std::move(tokenizer), EncoderParams::initialize(cfg, seed),
                 ProjectionParams::initialize(teacher_dim, cfg.dim, seed, projection_bias)};
  m.validate();
  return m;
}

namespace ad {

// Row-wise x·Wᵀ (+ b).
inline Var project(Tape& tape, Var pooled, const ProjectionParams& proj, bool trainable) {
  auto& mut = const_cast<ProjectionParams&>(proj);
  Var w = trainable ? tape.param(mut.weight) : tape.frozen(proj.weight.value);
  Var out = ad::matmul_bt(pooled, w);
  if (proj.bias) out = ad::add_row(out, trainable ? tape.param(*mut.bias) : tape.frozen(proj.bias->value));
  return out;
}

}  // namespace ad

// Pooled d_s vectors for a batch stacked into an n × d_s matrix.
inline Var pooled_batch(EncoderGraph& graph, std::span<const EncodedText* const> batch, bool train_mode, Rng* rng) {
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const EncodedText* e : batch) rows.push_back(graph.pooled(*e, train_mode, rng));
  return ad::stack_rows(rows);
}

inline StudentEmbedding student_embed(const StudentModel& m, const EncodedText& enc) {
  Tape tape;
  EncoderGraph graph(tape, m.encoder);
  Var pooled = graph.pooled(enc, false, nullptr);
  Var row = ad::stack_rows({pooled});
  Var fin = ad::project(tape, row, m.projection, false);
  return {EmbeddingVector::normalized({pooled.value().data().begin(), pooled.value().data().end()}),
          EmbeddingVector::normalized({fin.value().data().begin(), fin.value().data().end()})};
}

inline StudentEmbedding student_embed(const StudentModel& m, const TextRecord& rec) {
  return student_embed(m, m.tokenizer.encode(rec));
}

// Files: <base>.bin (encoder block then projection block), <base>.vocab and
// <base>.manifest.json holding the content hash.
struct CheckpointPaths {
  std::filesystem::path bin, vocab, manifest;

  explicit CheckpointPaths(const std::filesystem::path& base)
      : bin(base.string() + ".bin"), vocab(base.string() + ".vocab"), manifest(base.string() + ".manifest.json") {}
};

inline std::string model_bytes(const StudentModel& m) {
  std::ostringstream out(std::ios::binary);
  m.encoder.save(out);
  m.projection.save(out);
  return out.str();
}

inline void save_student(const StudentModel& m, const std::filesystem::path& base, nlohmann::ordered_json meta = {}) {
  CheckpointPaths paths(base);
  if (paths.bin.has_parent_path()) std::filesystem::create_directories(paths.bin.parent_path());
  const std::string bytes = model_bytes(m);
  {
    std::ofstream out(paths.bin, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + paths.bin.string());
  }
  m.tokenizer.save(paths.vocab);
  nlohmann::ordered_json j;
  j["format"] = "EMBH1+PRJ1";
  j["content_sha256"] = sha256_hex(bytes);
  j["vocab_sha256"] = sha256_file(paths.vocab);
  j["vocab_size"] = m.encoder.config.vocab_size;
  j["dim"] = m.encoder.config.dim;
  j["layers"] = m.encoder.config.layers;
  j["heads"] = m.encoder.config.heads;
  j["max_len"] = m.encoder.config.max_len;
  j["teacher_dim"] = m.teacher_dim();
  j["projection_bias"] = m.projection.bias.has_value();
  for (auto& [k, v] : meta.items()) j[k] = v;
  std::ofstream out(paths.manifest, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + paths.manifest.string());
}

inline nlohmann::json load_manifest(const std::filesystem::path& base) {
  CheckpointPaths paths(base);
  std::ifstream in(paths.manifest);
  if (!in) throw DataError("cannot read " + paths.manifest.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError("malformed checkpoint manifest " + paths.manifest.string());
  return j;
}

inline StudentModel load_student(const std::filesystem::path& base, double dropout = 0.10) {
  CheckpointPaths paths(base);
  const auto manifest = load_manifest(base);
  const std::string bytes = read_file_bytes(paths.bin);
  if (manifest.value("content_sha256", "") != sha256_hex(bytes))
    throw DataError("checkpoint " + paths.bin.string() + " does not match its manifest hash");
  std::istringstream in(bytes, std::ios::binary);
  EncoderParams enc = EncoderParams::load(in, dropout);
  ProjectionParams proj = ProjectionParams::load(in);
  Tokenizer tok = Tokenizer::load(paths.vocab, enc.config.max_len);
  StudentModel m{std::move(tok), std::move(enc), std::move(proj)};
  m.validate();
  return m;
}

}  // namespace embsteal
