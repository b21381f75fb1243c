#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "embsteal/gradcheck.hpp"
#include "embsteal/harvest.hpp"
#include "embsteal/losses.hpp"
#include "embsteal/optim.hpp"
#include "embsteal/student.hpp"
#include "embsteal/trainer.hpp"
#include "embsteal/world.hpp"

using namespace embsteal;

namespace {

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

double naive_cosine_loss(const Tensor& t, const Tensor& s) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double ts = 0, tt = 0, ss = 0;
    for (std::size_t k = 0; k < t.cols(); ++k) {
      ts += t(i, k) * s(i, k);
      tt += t(i, k) * t(i, k);
      ss += s(i, k) * s(i, k);
    }
    acc += ts / std::sqrt(tt * ss);
  }
  return -acc / static_cast<double>(t.rows());
}

double naive_cos(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.cols(); ++k) {
    ab += a(i, k) * b(j, k);
    aa += a(i, k) * a(i, k);
    bb += b(j, k) * b(j, k);
  }
  return ab / std::sqrt(aa * bb);
}

// Literal double sum, no shifting.
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

WorldConfig tiny_world_config(std::uint64_t seed = 3) {
  WorldConfig w;
  w.seed = seed;
  w.topics = 4;
  w.ambient_dim = 8;
  w.sigma = 0.05;
  w.train_passages = 40;
  w.train_queries = 10;
  w.eval_passages = 16;
  w.eval_queries = 4;
  return w;
}

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.dim = 16;
  e.layers = 2;
  e.heads = 2;
  e.dropout = 0.0;
  return e;
}

std::vector<TrainingPair> simulated_pairs(const SyntheticWorld& w, const TeacherSpec& spec,
                                          std::span<const TextRecord> recs) {
  SimulatedTeacher t(w, spec);
  auto vecs = t.embed(recs);
  std::vector<TrainingPair> out;
  for (std::size_t i = 0; i < recs.size(); ++i) out.push_back({recs[i], vecs[i]});
  return out;
}

StudentModel tiny_student(const SyntheticWorld& w, std::size_t teacher_dim, std::uint64_t seed = 1) {
  const auto reserved = prefix_tokens();
  auto tok = build_vocab(w.train_records(), 512, 32, reserved);
  return make_student(std::move(tok), tiny_encoder(), teacher_dim, seed);
}

TeacherSpec sim8() { return TeacherSpec{"sim8", 8, 512, 0.1, false, SimulatedSource{}}; }

}  // namespace

TEST(CosineLoss, HandExamples) {
  Tensor t = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_NEAR(cosine_distance(t, t).value, -1.0, 1e-15);
  EXPECT_NEAR(cosine_distance(t, Tensor::matrix({{0, 3}, {-2, 0}})).value, 0.0, 1e-15);
  EXPECT_NEAR(cosine_distance(Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 1}})).value, -1.0 / std::sqrt(2.0), 1e-12);
}

TEST(CosineLoss, RejectsZeroRowsAndShapeMismatch) {
  EXPECT_THROW(cosine_distance(Tensor::matrix({{1, 0}}), Tensor::matrix({{0, 0}})), NumericError);
  EXPECT_THROW(cosine_distance(Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 0, 0}})), ShapeError);
}

TEST(ContrastiveLoss, SingleElementIsExactlyZero) {
  Rng rng(1);
  for (double tau : {0.01, 0.05, 1.0}) {
    EXPECT_EQ(contrastive(random_matrix(rng, 1, 5), random_matrix(rng, 1, 5), tau).value, 0.0);
  }
}

TEST(ContrastiveLoss, TwoOrthogonalRowsByHand) {
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const double e = std::exp(1.0);
  EXPECT_NEAR(contrastive(eye, eye, 1.0).value, -std::log(e / (e + 1.0 + 1.0)), 1e-12);
  // One student row flipped: row 0 sees e^{-1} from its neighbour.
  Tensor s = Tensor::matrix({{1, 0}, {-1, 0}});
  const double row0 = -std::log(e / (e + 1.0 + 1.0 / e));
  const double row1 = -std::log(1.0 / (1.0 / e + 1.0 + 1.0 / e));
  EXPECT_NEAR(contrastive(eye, s, 1.0).value, 0.5 * (row0 + row1), 1e-12);
}

TEST(ContrastiveLoss, RejectsNonPositiveTemperature) {
  Tensor t = Tensor::matrix({{1, 0}});
  EXPECT_THROW(contrastive(t, t, 0.0), ConfigError);
  EXPECT_THROW(contrastive(t, t, -0.5), ConfigError);
}

TEST(ContrastiveLoss, NonNegativeAndScaleFree) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor t = random_matrix(rng, 4, 6), s = random_matrix(rng, 4, 6);
    const double base = contrastive(t, s, 0.05).value;
    EXPECT_GE(base, 0.0);
    Tensor s2 = s;
    for (double& v : s2.data()) v *= 3.5;
    EXPECT_NEAR(contrastive(t, s2, 0.05).value, base, 1e-10);
  }
}

class LossOracles : public ::testing::TestWithParam<int> {};

TEST_P(LossOracles, MatchNaiveSummation) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) * 7 + 1);
  const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(16);
  Tensor t = random_matrix(rng, n, d), s = random_matrix(rng, n, d);
  EXPECT_NEAR(cosine_distance(t, s).value, naive_cosine_loss(t, s), 1e-6);
  for (double tau : {0.01, 0.05, 0.5}) {
    const double naive = naive_contrastive(t, s, tau);
    if (std::isfinite(naive)) EXPECT_NEAR(contrastive(t, s, tau).value, naive, 1e-6) << "tau " << tau;
  }
}

INSTANTIATE_TEST_SUITE_P(Batches, LossOracles, ::testing::Range(0, 100));

class LossGradients : public ::testing::TestWithParam<int> {};

TEST_P(LossGradients, MatchFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(GetParam()) + 500);
  {
    Tensor t = random_matrix(rng, 2, 4);
    Parameter s("S", random_matrix(rng, 2, 4));
    Parameter* ps[] = {&s};
    auto rep = check_gradients([&](Tape& tape) { return ad::cosine_distance_loss(t, tape.param(s)); }, ps, 1e-4, 1e-3);
    EXPECT_TRUE(rep.ok()) << rep.max_error;
  }
  {
    Tensor t = unit_rows(random_matrix(rng, 3, 4));
    Parameter s("S", random_matrix(rng, 3, 4));
    Parameter* ps[] = {&s};
    auto rep = check_gradients([&](Tape& tape) { return ad::contrastive_loss(t, tape.param(s), 0.05); }, ps, 1e-4, 1e-3);
    EXPECT_TRUE(rep.ok()) << rep.max_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradients, ::testing::Range(0, 20));

TEST(LossGradients, FlowThroughProjectionAndEncoder) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  EncoderConfig e;
  e.dim = 8;
  e.layers = 1;
  e.heads = 2;
  e.dropout = 0.0;
  e.init_std = 0.5;
  auto tok = build_vocab(w.train_records(), 64, 8, prefix_tokens());
  auto m = make_student(std::move(tok), e, 5, 3, true);
  auto pairs = simulated_pairs(w, TeacherSpec{"s5", 5, 99, 0.1, false, SimulatedSource{}},
                               std::span(w.train_records()).first(3));
  std::vector<EncodedText> enc;
  Tensor targets({3, 5});
  for (std::size_t i = 0; i < 3; ++i) {
    enc.push_back(m.tokenizer.encode(pairs[i].record));
    std::copy(pairs[i].target.values.begin(), pairs[i].target.values.end(), targets.row(i).begin());
  }
  std::vector<Parameter*> params = {&m.projection.weight, &*m.projection.bias, &m.encoder.layers[0].wq,
                                    &m.encoder.layers[0].ff_out};
  for (double tau : {0.0, 0.05}) {
    auto rep = check_gradients(
        [&](Tape& tape) {
          EncoderGraph g(tape, m.encoder);
          std::vector<const EncodedText*> ptrs = {&enc[0], &enc[1], &enc[2]};
          Var out = ad::project(tape, pooled_batch(g, ptrs, false, nullptr), m.projection, true);
          return tau > 0 ? ad::contrastive_loss(targets, out, tau) : ad::cosine_distance_loss(targets, out);
        },
        params, 1e-5, 1e-3);
    EXPECT_TRUE(rep.ok()) << rep.max_error;
  }
}

TEST(Optimizer, WarmupIsLinear) {
  AdamWConfig cfg;
  cfg.lr = 4e-5;
  cfg.warmup_steps = 50;
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 25), 0.5 * 4e-5);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 1), 4e-5 / 50);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 50), 4e-5);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 5000), 4e-5);
  cfg.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 1), 4e-5);
}

TEST(Optimizer, TwoStepsMatchHandComputation) {
  Parameter p("p", Tensor({2}, 0.0));
  p.value[0] = 1.0;
  p.value[1] = -2.0;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.warmup_steps = 0;
  cfg.weight_decay = 0.01;
  AdamW opt({&p}, cfg);
  const double g1[2] = {0.5, -1.0}, g2[2] = {0.25, 2.0};
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    const double* g = t == 1 ? g1 : g2;
    opt.zero_grad();
    p.grad[0] = g[0];
    p.grad[1] = g[1];
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] = x[i] * (1 - 0.1 * 0.01) - 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.value[i], x[i], 1e-6);
      EXPECT_EQ(p.value[i], static_cast<double>(static_cast<float>(p.value[i])));
    }
  }
}

TEST(StudentEmbed, BothOutputsUnitAndMatchOracle) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto m = tiny_student(w, 12);
  for (const auto& r : w.eval_queries()) {
    auto e = student_embed(m, r);
    EXPECT_NEAR(e.bottleneck.norm(), 1.0, 1e-12);
    EXPECT_NEAR(e.final.norm(), 1.0, 1e-12);
    const auto enc = m.tokenizer.encode(r);
    const Tensor pooled = encode_pooled(m.encoder, enc.ids, enc.mask);
    std::vector<double> wx(12, 0.0);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 16; ++j) wx[i] += m.projection.weight.value(i, j) * pooled[j];
    const double n = l2_norm(wx);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(e.final.values[i], wx[i] / n, 1e-6);
  }
}

TEST(StudentEmbed, IdentityProjectionKeepsBottleneckDirection) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto m = tiny_student(w, 24);
  m.projection = ProjectionParams::identity(24, 16);
  auto e = student_embed(m, w.eval_passages()[0]);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(e.final.values[i], e.bottleneck.values[i], 1e-12);
  for (std::size_t i = 16; i < 24; ++i) EXPECT_EQ(e.final.values[i], 0.0);
}

TEST(MakeTargets, SingleAndConcatenatedTeachers) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto dir = std::filesystem::temp_directory_path() / "embsteal_targets";
  std::filesystem::remove_all(dir);
  SimulatedTeacher a(w, builtin_teacher("sim-cohere")), b(w, builtin_teacher("sim-openai"));
  harvest(a, w.train_records(), dir / "a.embc");
  harvest(b, w.train_records(), dir / "b.embc");
  auto ca = EmbeddingCache::load(dir / "a.embc"), cb = EmbeddingCache::load(dir / "b.embc");
  const EmbeddingCache* one[] = {&ca};
  const EmbeddingCache* two[] = {&ca, &cb};
  auto single = make_targets(w.train_records(), one);
  auto concat = make_targets(w.train_records(), two);
  ASSERT_EQ(single.size(), w.train_records().size());
  EXPECT_EQ(single[0].target.dim(), 32u);
  EXPECT_EQ(concat[0].target.dim(), 128u);
  for (std::size_t i = 0; i + 1 < concat.size(); ++i) {
    EXPECT_NEAR(concat[i].target.norm(), 1.0, 1e-6);
    const double lhs = cosine(concat[i].target, concat[i + 1].target);
    const double rhs = 0.5 * (cosine(ca.at(concat[i].record.id), ca.at(concat[i + 1].record.id)) +
                              cosine(cb.at(concat[i].record.id), cb.at(concat[i + 1].record.id)));
    EXPECT_NEAR(lhs, rhs, 1e-6);
  }
  EXPECT_EQ(concat[3].record.kind, w.train_records()[3].kind);
  // Projection rows follow the summed teacher dims.
  auto m = tiny_student(w, concat[0].target.dim());
  EXPECT_EQ(m.projection.out_dim(), 32u + 96u);

  std::vector<TextRecord> extra = {w.train_records()[0], {"ghost-1", TextKind::query, "x"}, {"ghost-2", TextKind::query, "y"}};
  try {
    make_targets(extra, two);
    FAIL() << "expected missing-entry error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("ghost-1"), std::string::npos);
    EXPECT_NE(msg.find("ghost-2"), std::string::npos);
  }
}

TEST(Train, ZeroLearningRateLeavesModelUnchanged) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto pairs = simulated_pairs(w, sim8(), w.train_records());
  auto m = tiny_student(w, 8);
  const auto before = model_bytes(m);
  TrainingConfig cfg;
  cfg.lr = 0.0;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.dev_eval_every = 2;
  cfg.dropout = 0.1;
  auto dev = std::span(pairs).first(10);
  auto res = train(m, cfg, pairs, dev);
  EXPECT_EQ(model_bytes(m), before);
  double first = NAN;
  for (const auto& p : res.curve) {
    if (!p.dev_loss) continue;
    if (std::isnan(first)) first = *p.dev_loss;
    EXPECT_EQ(*p.dev_loss, first);
  }
  EXPECT_EQ(res.steps, 8u);
}

TEST(Train, TinyWorldConverges) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  ASSERT_EQ(w.train_records().size(), 50u);
  auto pairs = simulated_pairs(w, sim8(), w.train_records());
  auto m = tiny_student(w, 8);
  TrainingConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch_size = 50;
  cfg.warmup_steps = 10;
  cfg.epochs = 300;
  cfg.dropout = 0.0;
  cfg.dev_eval_every = 25;
  auto res = train(m, cfg, pairs, pairs);
  EXPECT_FALSE(res.aborted);
  const double final_loss = evaluate_loss(m, pairs, cfg);
  EXPECT_LT(final_loss, -0.98);
}

TEST(Train, MemorizationIsMonotoneAfterWarmup) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto ten = std::span(w.train_records()).first(10);
  auto pairs = simulated_pairs(w, sim8(), ten);
  auto m = tiny_student(w, 8);
  TrainingConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_size = 5;
  cfg.warmup_steps = 10;
  cfg.epochs = 60;
  cfg.dropout = 0.0;
  cfg.dev_eval_every = 0;
  auto res = train(m, cfg, pairs, pairs);
  std::vector<double> epoch_means;
  for (std::size_t e = 0; e < 60; ++e) {
    const double a = *res.curve[1 + 2 * e].train_loss, b = *res.curve[2 + 2 * e].train_loss;
    epoch_means.push_back(0.5 * (a + b));
  }
  const std::size_t first_after_warmup = 5;
  for (std::size_t e = first_after_warmup + 1; e < epoch_means.size(); ++e)
    EXPECT_LE(epoch_means[e], epoch_means[e - 1] + 0.01 * std::abs(epoch_means[e - 1])) << "epoch " << e;
  EXPECT_LT(epoch_means.back(), epoch_means[first_after_warmup]);
}

TEST(Train, ReturnedSnapshotReproducesItsDevLoss) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto pairs = simulated_pairs(w, sim8(), w.train_records());
  auto dev_recs = w.eval_passages();
  auto dev = simulated_pairs(w, sim8(), dev_recs);
  auto m = tiny_student(w, 8);
  TrainingConfig cfg;
  cfg.lr = 2e-3;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  cfg.warmup_steps = 5;
  cfg.dev_eval_every = 3;
  cfg.dropout = 0.1;
  auto res = train(m, cfg, pairs, dev);
  double min_dev = INFINITY;
  for (const auto& p : res.curve)
    if (p.dev_loss) min_dev = std::min(min_dev, *p.dev_loss);
  EXPECT_EQ(res.best_dev_loss, min_dev);
  EXPECT_NEAR(evaluate_loss(res.best, dev, cfg), res.best_dev_loss, 1e-6);
}

TEST(Train, DeterministicCurves) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto pairs = simulated_pairs(w, sim8(), w.train_records());
  TrainingConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.dev_eval_every = 2;
  auto a = tiny_student(w, 8), b = tiny_student(w, 8);
  auto ra = train(a, cfg, pairs, std::span(pairs).first(8));
  auto rb = train(b, cfg, pairs, std::span(pairs).first(8));
  EXPECT_EQ(curve_csv(ra.curve), curve_csv(rb.curve));
  EXPECT_EQ(model_bytes(a), model_bytes(b));
  cfg.seed = 1;
  auto c = tiny_student(w, 8);
  auto rc = train(c, cfg, pairs, std::span(pairs).first(8));
  EXPECT_NE(curve_csv(ra.curve), curve_csv(rc.curve));
}

TEST(Train, CurveCsvLayout) {
  std::vector<CurvePoint> c = {{0, std::nullopt, -0.5}, {1, -0.25, std::nullopt}, {2, -0.75, -0.625}};
  EXPECT_EQ(curve_csv(c), "step,train_loss,dev_loss\n0,,-0.5\n1,-0.25,\n2,-0.75,-0.625\n");
}

TEST(Train, NonFiniteUpdateAbortsWithBestSnapshot) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto pairs = simulated_pairs(w, sim8(), w.train_records());
  auto m = tiny_student(w, 8);
  const auto initial = model_bytes(m);
  TrainingConfig cfg;
  cfg.lr = 1e300;
  cfg.warmup_steps = 0;
  cfg.batch_size = 10;
  cfg.epochs = 3;
  auto res = train(m, cfg, pairs, std::span(pairs).first(5));
  EXPECT_TRUE(res.aborted);
  EXPECT_EQ(res.best_step, 0u);
  EXPECT_EQ(model_bytes(res.best), initial);
}

TEST(Train, ConfigValidation) {
  TrainingConfig cfg;
  cfg.loss = LossKind::contrastive;
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.batch_size = 4;
  cfg.tau = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  TrainingConfig d;
  EXPECT_EQ(d.batch_size, 256u);
  EXPECT_DOUBLE_EQ(d.lr, 4e-5);
  EXPECT_DOUBLE_EQ(d.weight_decay, 0.01);
  EXPECT_EQ(d.warmup_steps, 50u);
  EXPECT_DOUBLE_EQ(d.dropout, 0.10);
}

TEST(Checkpoint, StudentRoundTripsAndDetectsTampering) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto m = tiny_student(w, 8);
  m.projection = ProjectionParams::initialize(8, 16, 4, true);
  auto base = std::filesystem::temp_directory_path() / "embsteal_ckpt" / "student";
  save_student(m, base, {{"config_hash", "abc"}});
  auto back = load_student(base);
  EXPECT_EQ(model_bytes(back), model_bytes(m));
  EXPECT_EQ(back.tokenizer.vocab(), m.tokenizer.vocab());
  EXPECT_EQ(load_manifest(base)["config_hash"], "abc");
  {
    std::fstream f(CheckpointPaths(base).bin, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_THROW(load_student(base), DataError);
}

TEST(Train, PatienceStopsOnPlateau) {
  auto w = SyntheticWorld::generate(tiny_world_config());
  auto pairs = simulated_pairs(w, sim8(), w.train_records());
  auto m = tiny_student(w, 8);
  TrainingConfig cfg;
  cfg.lr = 0.0;
  cfg.batch_size = 5;
  cfg.epochs = 10;
  cfg.dev_eval_every = 1;
  cfg.patience = 2;
  auto res = train(m, cfg, pairs, std::span(pairs).first(5));
  EXPECT_TRUE(res.stopped_early);
  EXPECT_EQ(res.steps, 2u);
  EXPECT_EQ(res.best_step, 0u);
  cfg.dev_eval_every = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
