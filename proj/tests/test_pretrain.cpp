#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "c2t/numerics/gradcheck.hpp"
#include "c2t/pretrain/pretrain.hpp"
#include "c2t/signals/synth.hpp"
#include "oracles.hpp"

using namespace c2t;
using namespace c2t::pre;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an exception";
  return ErrorKind::InvalidInput;
}

enc::EncoderConfig small_encoder(enc::Family f = enc::Family::conformer) {
  enc::EncoderConfig c;
  c.family = f;
  c.in_channels = 4;
  c.blocks = 2;
  c.model_dim = 16;
  c.heads = 2;
  c.conv_kernel = 5;
  c.ff_mult = 2;
  c.dropout = 0.0;
  c.eeg_filters = 4;
  c.eeg_kernel = 5;
  return c;
}

PretrainConfig small_pretrain(Objective o) {
  PretrainConfig p;
  p.objective = o;
  p.mask_prob = 0.2;
  p.span_length = 3;
  p.distractors = 5;
  p.entries = 16;
  p.top_k = 2;
  p.schedule.lr = 2e-3;
  return p;
}

signals::Dataset synth(std::size_t n, std::uint64_t seed) {
  signals::SynthConfig s;
  s.channels = 4;
  s.random_text = true;
  s.num_trials = n;
  s.words_min = 2;
  s.words_max = 3;
  return signals::generate_synthetic(s, seed);
}

nn::DTensor rows(std::size_t T, std::size_t D, const std::vector<double>& v) {
  return nn::DTensor({T, D}, v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Masking

TEST(PlanMasks, Extremes) {
  EXPECT_TRUE(plan_masks(50, 0.0, 5, 1).empty());
  auto all = plan_masks(40, 1.0, 40, 2);
  ASSERT_EQ(all.indices.size(), 40u);
  EXPECT_DOUBLE_EQ(all.coverage(), 1.0);
  auto clipped = plan_masks(5, 1.0, 3, 3);
  EXPECT_EQ(clipped.indices, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(PlanMasks, DeterministicSortedInRange) {
  auto a = plan_masks(200, 0.1, 7, 42), b = plan_masks(200, 0.1, 7, 42), c = plan_masks(200, 0.1, 7, 43);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_NE(a.indices, c.indices);
  EXPECT_TRUE(std::is_sorted(a.indices.begin(), a.indices.end()));
  EXPECT_EQ(std::adjacent_find(a.indices.begin(), a.indices.end()), a.indices.end());
  for (auto i : a.indices) EXPECT_LT(i, 200u);
}

TEST(PlanMasks, CoverageIsUnionOfSpans) {
  // Every masked frame lies within span_length - 1 frames after a start, so
  // each maximal run is at least span_length long unless clipped at the end.
  auto m = plan_masks(300, 0.05, 6, 9);
  std::size_t run = 0;
  for (std::size_t t = 0; t <= 300; ++t) {
    const bool in = std::binary_search(m.indices.begin(), m.indices.end(), t) && t < 300;
    if (in) {
      ++run;
    } else if (run) {
      EXPECT_TRUE(run >= 6 || t == 300) << "run ending at " << t;
      run = 0;
    }
  }
}

TEST(PlanMasks, EnsureSpansOnlyFillsEmptyPlans) {
  const auto empty = plan_masks(30, 1e-9, 4, 5);
  ASSERT_TRUE(empty.empty());
  const auto filled = ensure_spans(empty, 1, 7);
  ASSERT_EQ(filled.indices.size(), 4u);
  EXPECT_EQ(filled.indices.back() - filled.indices.front(), 3u);
  EXPECT_LT(filled.indices.back(), 30u);
  EXPECT_TRUE(ensure_spans(plan_masks(30, 0.0, 4, 5), 1, 7).empty());
  const auto some = plan_masks(30, 0.3, 2, 5);
  EXPECT_EQ(ensure_spans(some, 3, 7).indices, some.indices);
}

TEST(PlanMasks, PreconditionViolations) {
  EXPECT_EQ(kind_of([] { plan_masks(4, 0.1, 5, 1); }), ErrorKind::InvalidInput);
  EXPECT_EQ(kind_of([] { plan_masks(4, 0.1, 0, 1); }), ErrorKind::InvalidInput);
  EXPECT_EQ(kind_of([] { plan_masks(4, 1.5, 2, 1); }), ErrorKind::InvalidInput);
}

TEST(PlanMasks, ExpectedCoverageMatchesMonteCarlo) {
  const std::size_t T = 1000, span = 10;
  const double p = 0.065;
  const auto mc = oracle::mask_coverage_mc(T, p, span, 100000, 2024);
  EXPECT_NEAR(mc.mean, oracle::mask_coverage_exact(T, p, span), 4 * mc.std_error);

  const std::size_t n = 3000;
  double s = 0.0, s2 = 0.0;
  for (std::size_t seed = 0; seed < n; ++seed) {
    const double c = plan_masks(T, p, span, seed).coverage();
    s += c;
    s2 += c * c;
  }
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_NEAR(mean, mc.mean, 3 * std::hypot(se, mc.std_error));
}

// ---------------------------------------------------------------------------
// Quantizer

TEST(Diversity, UniformUsageIsZero) {
  nn::DGraph g;
  auto l = g.input(nn::DTensor::zeros({7, 2 * 8}));
  EXPECT_NEAR(diversity_loss(l, 2, 8).value().data[0], 0.0, 1e-12);
}

TEST(Diversity, SingleCodeUsage) {
  for (std::size_t E : {2u, 5u, 64u}) {
    auto t = nn::DTensor::zeros({6, 2 * E});
    for (std::size_t r = 0; r < 6; ++r) {
      t.at(r, 1) = 60.0;
      t.at(r, E) = 60.0;
    }
    nn::DGraph g;
    EXPECT_NEAR(diversity_loss(g.input(t), 2, E).value().data[0], double(E - 1) / E, 1e-9) << "E=" << E;
  }
}

TEST(Diversity, GradientMatchesFiniteDifferences) {
  auto x = nn::random_tensor({5, 12}, 3, -2.0, 2.0);
  double err = nn::grad_check_fn([](nn::DGraph&, const std::vector<nn::DVar>& v) { return diversity_loss(v[0], 3, 4); },
                                 {x}, 1e-6);
  EXPECT_LT(err, 1e-5);
}

TEST(Quantize, HardCodesAreArgmaxOfLogits) {
  const std::size_t T = 9, D = 6, G = 2, E = 5;
  nn::ParamStore<double> P;
  P.add("pretrain.quant.w", nn::random_tensor({D, G * E}, 1, -1, 1));
  P.add("pretrain.quant.b", nn::random_tensor({G * E}, 2, -1, 1));
  P.add("pretrain.codebook", nn::random_tensor({G * E, D / G}, 3, -1, 1));
  auto x = nn::random_tensor({T, D}, 4, -1, 1);
  nn::DGraph g;
  auto q = quantize(g, g.input(x), P, Codebook{G, E, 1e-3}, false, 0);
  const auto& W = P.at("pretrain.quant.w").value;
  const auto& b = P.at("pretrain.quant.b").value;
  const auto& book = P.at("pretrain.codebook").value;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t gr = 0; gr < G; ++gr) {
      std::size_t best = 0;
      double best_v = -INFINITY;
      for (std::size_t e = 0; e < E; ++e) {
        double v = b.data[gr * E + e];
        for (std::size_t d = 0; d < D; ++d) v += x.at(t, d) * W.at(d, gr * E + e);
        if (v > best_v) best_v = v, best = e;
      }
      EXPECT_EQ(q.indices[t * G + gr], best);
      for (std::size_t d = 0; d < D / G; ++d)
        EXPECT_EQ(q.codes.value().at(t, gr * (D / G) + d), book.at(gr * E + best, d));
    }
}

TEST(Quantize, StraightThroughPassesGradient) {
  const std::size_t D = 8;
  auto enc_cfg = small_encoder();
  enc_cfg.model_dim = D;
  auto params = init_pretrain_params(enc_cfg, small_pretrain(Objective::wav2vec2), 5);
  auto& P = params.tensors;
  P.zero_grad();
  nn::Graph g(true, 1);
  auto x = g.input(nn::random_tensor({10, D}, 6, -1, 1).cast<float>(), true);
  auto q = quantize(g, x, P, Codebook{2, 16, 0.5}, true, 7);
  EXPECT_EQ(q.codes.value().shape, (nn::Shape{10, D}));
  g.backward(nn::sum(q.codes));
  double wq = 0, wb = 0;
  for (float v : P.at("pretrain.quant.w").grad) wq += std::abs(v);
  for (float v : P.at("pretrain.codebook").grad) wb += std::abs(v);
  EXPECT_GT(wq, 0.0);
  EXPECT_GT(wb, 0.0);
}

TEST(Quantize, DimensionMismatch) {
  auto params = init_pretrain_params(small_encoder(), small_pretrain(Objective::wav2vec2), 5);
  nn::Graph g;
  auto x = g.input(nn::Tensor::zeros({4, 12}));
  EXPECT_EQ(kind_of([&] { quantize(g, x, params.tensors, Codebook{2, 16, 1.0}, false, 0); }), ErrorKind::ShapeError);
  auto y = g.input(nn::Tensor::zeros({4, 16}));
  EXPECT_EQ(kind_of([&] { quantize(g, y, params.tensors, Codebook{4, 8, 1.0}, false, 0); }), ErrorKind::ShapeError);
  EXPECT_EQ(kind_of([] { Codebook{1, 1, 1.0}.check(); }), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind_of([] { Codebook{2, 4, 0.0}.check(); }), ErrorKind::InvalidConfig);
}

// ---------------------------------------------------------------------------
// Contrastive loss

TEST(Contrastive, OrthogonalDistractorsClosedForm) {
  // 11 one-hot frames: every distractor is orthogonal to the context.
  const std::size_t T = 11;
  auto eye = nn::DTensor::zeros({T, T});
  for (std::size_t i = 0; i < T; ++i) eye.at(i, i) = 1.0;
  std::vector<std::size_t> masked(T);
  std::iota(masked.begin(), masked.end(), 0);
  nn::DGraph g;
  auto v = g.input(eye);
  const double loss = contrastive_loss(v, v, masked, 10, 0.1, 3).value().data[0];
  const double expected = std::log1p(10.0 * std::exp(-10.0));
  EXPECT_NEAR(loss, expected, 1e-12);
  EXPECT_NEAR(loss, 4.54e-4, 1e-6);
}

TEST(Contrastive, IdenticalDistractorGivesLn2) {
  nn::DGraph g;
  auto q = g.input(rows(2, 3, {0.3, -1.0, 2.0, 0.3, -1.0, 2.0}));
  EXPECT_NEAR(contrastive_loss(q, q, {0, 1}, 1, 0.1, 0).value().data[0], std::log(2.0), 1e-12);
}

TEST(Contrastive, NonNegativeAndScaleInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = nn::random_tensor({12, 5}, seed, -1, 1);
    auto q = nn::random_tensor({12, 5}, seed + 100, -1, 1);
    const std::vector<std::size_t> masked{1, 2, 3, 7, 8, 11};
    nn::DGraph g;
    const double base = contrastive_loss(g.input(c), g.input(q), masked, 4, 0.1, seed).value().data[0];
    EXPECT_GE(base, 0.0);
    Rng rng(seed);
    for (std::size_t r = 0; r < 12; ++r) {
      const double a = rng.uniform(0.1, 10.0), b = rng.uniform(0.1, 10.0);
      for (std::size_t d = 0; d < 5; ++d) c.at(r, d) *= a, q.at(r, d) *= b;
    }
    const double scaled = contrastive_loss(g.input(c), g.input(q), masked, 4, 0.1, seed).value().data[0];
    EXPECT_NEAR(scaled, base, 1e-10);
  }
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  auto c = nn::random_tensor({8, 4}, 1, -1, 1);
  auto q = nn::random_tensor({8, 4}, 2, -1, 1);
  double err = nn::grad_check_fn(
      [](nn::DGraph&, const std::vector<nn::DVar>& v) { return contrastive_loss(v[0], v[1], {0, 2, 3, 5, 6}, 3, 0.5, 9); },
      {c, q}, 1e-6);
  EXPECT_LT(err, 1e-5);
}

TEST(Contrastive, Errors) {
  nn::DGraph g;
  auto v = g.input(nn::random_tensor({4, 3}, 1, -1, 1));
  EXPECT_EQ(kind_of([&] { contrastive_loss(v, v, {}, 3, 0.1, 0); }), ErrorKind::NoMaskedFrames);
  auto w = g.input(nn::random_tensor({4, 2}, 1, -1, 1));
  EXPECT_EQ(kind_of([&] { contrastive_loss(v, w, {1}, 3, 0.1, 0); }), ErrorKind::ShapeError);
  EXPECT_EQ(kind_of([&] { contrastive_loss(v, v, {1}, 0, 0.1, 0); }), ErrorKind::InvalidInput);
}

// ---------------------------------------------------------------------------
// EMA teacher and regression loss

TEST(Ema, FixedPoints) {
  nn::ParamStore<float> student;
  student.add("a", nn::Tensor({3}, std::vector<float>{0.5f, -1.f, 2.f}));
  TeacherState t{{}, 0.999, 4};
  t.shadow.add("a", nn::Tensor({3}, std::vector<float>{1.f, 1.f, 1.f}));
  auto before = t.shadow.at("a").value.data;
  ema_update(t, student, 1.0);
  EXPECT_EQ(t.shadow.at("a").value.data, before);
  ema_update(t, student, 0.0);
  EXPECT_EQ(t.shadow.at("a").value.data, student.at("a").value.data);

  nn::ParamStore<float> zero;
  zero.add("s", nn::Tensor({1}, std::vector<float>{0.f}));
  TeacherState one{{}, 0.999, 4};
  one.shadow.add("s", nn::Tensor({1}, std::vector<float>{1.f}));
  ema_update(one, zero, 0.999);
  EXPECT_FLOAT_EQ(one.shadow.at("s").value.data[0], 0.999f);
}

TEST(Ema, ShapeMismatch) {
  nn::ParamStore<float> student;
  student.add("a", nn::Tensor::zeros({3}));
  TeacherState t;
  t.shadow.add("a", nn::Tensor::zeros({4}));
  EXPECT_EQ(kind_of([&] { ema_update(t, student, 0.5); }), ErrorKind::ShapeError);
  TeacherState u;
  u.shadow.add("b", nn::Tensor::zeros({3}));
  EXPECT_EQ(kind_of([&] { ema_update(u, student, 0.5); }), ErrorKind::ShapeError);
}

TEST(Data2vecLoss, Values) {
  nn::DGraph g;
  auto t = nn::random_tensor({5, 3}, 1, -1, 1);
  EXPECT_EQ(data2vec_loss(g.input(t), t, {0, 3}, 1.0).value().data[0], 0.0);
  const double beta = 0.5;
  auto s = nn::DTensor({1, 1}, std::vector<double>{2 * beta});
  EXPECT_NEAR(data2vec_loss(g.input(s), nn::DTensor::zeros({1, 1}), {0}, beta).value().data[0], 1.5 * beta, 1e-15);
  EXPECT_EQ(kind_of([&] { data2vec_loss(g.input(t), t, {}, 1.0); }), ErrorKind::NoMaskedFrames);
  EXPECT_EQ(kind_of([&] { data2vec_loss(g.input(t), nn::DTensor::zeros({5, 2}), {1}, 1.0); }),
            ErrorKind::ShapeError);
}

TEST(Data2vecLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto target = nn::random_tensor({6, 4}, seed + 10, -2, 2);
    auto x = nn::random_tensor({6, 4}, seed, -2, 2);
    double err = nn::grad_check_fn(
        [&](nn::DGraph&, const std::vector<nn::DVar>& v) { return data2vec_loss(v[0], target, {0, 2, 5}, 1.0); },
        {x}, 1e-6);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(LayerTargets, NormalizedAverageOfTopBlocks) {
  std::vector<nn::DTensor> blocks;
  for (std::uint64_t s = 0; s < 3; ++s) blocks.push_back(nn::random_tensor({4, 6}, s, -3, 3));
  auto t = layer_targets(blocks, 2);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> avg(6);
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 6; ++c) mu += (avg[c] = (blocks[1].at(r, c) + blocks[2].at(r, c)) / 2) / 6;
    for (double a : avg) var += (a - mu) * (a - mu) / 6;
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(t.at(r, c), (avg[c] - mu) / std::sqrt(var + 1e-5), 1e-12);
  }
  EXPECT_EQ(layer_targets(blocks, 10).data, layer_targets(blocks, 3).data);
}

// ---------------------------------------------------------------------------
// Parameters and runs

TEST(PretrainConfig, ValidationAndJson) {
  PretrainConfig p;
  p.groups = 1;
  p.entries = 1;
  EXPECT_EQ(kind_of([&] { p.check(); }), ErrorKind::InvalidConfig);
  EXPECT_EQ(kind_of([] { parse_objective("bert"); }), ErrorKind::ConfigError);
  PretrainConfig q;
  q.objective = Objective::data2vec;
  q.schedule.lr = 0.01;
  nlohmann::json j = q;
  auto back = j.get<PretrainConfig>();
  EXPECT_EQ(back.objective, Objective::data2vec);
  EXPECT_EQ(back.schedule.lr, 0.01);
  EXPECT_EQ(back.top_k, 4u);
}

TEST(PretrainParams, StripLeavesEncoder) {
  auto ecfg = small_encoder();
  for (Objective o : {Objective::wav2vec2, Objective::data2vec}) {
    auto p = init_pretrain_params(ecfg, small_pretrain(o), 3);
    EXPECT_GT(p.count(), enc::init_params(ecfg, 3).count());
    auto s = strip_pretrain(p);
    EXPECT_EQ(s.count(), enc::init_params(ecfg, 3).count());
    EXPECT_NO_THROW(enc::check_params(ecfg, s.tensors));
  }
}

TEST(PretrainRun, MaskProbZeroRaises) {
  auto data = synth(4, 1);
  for (Objective o : {Objective::wav2vec2, Objective::data2vec}) {
    auto p = small_pretrain(o);
    p.mask_prob = 0.0;
    p.steps = 3;
    EXPECT_EQ(kind_of([&] { pretrain_run(data, small_encoder(), p, 1); }), ErrorKind::NoMaskedFrames);
  }
}

TEST(PretrainRun, DeterministicPerSeed) {
  auto data = synth(6, 2);
  auto p = small_pretrain(Objective::wav2vec2);
  p.steps = 5;
  auto a = pretrain_run(data, small_encoder(), p, 4), b = pretrain_run(data, small_encoder(), p, 4);
  ASSERT_EQ(a.trace.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
  for (const auto& [name, t] : a.params.tensors) EXPECT_EQ(t.value.data, b.params.tensors.at(name).value.data);
}

class PretrainLearns : public ::testing::TestWithParam<Objective> {};

TEST_P(PretrainLearns, LossDecreasesOverTwoHundredSteps) {
  auto data = synth(24, 7);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto p = small_pretrain(GetParam());
    auto r = pretrain_run(data, small_encoder(), p, seed);
    ASSERT_EQ(r.status, train::RunStatus::ok);
    ASSERT_EQ(r.trace.size(), 200u);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 20; ++i) first += r.trace[i].loss / 20, last += r.trace[180 + i].loss / 20;
    EXPECT_LT(last, first) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Objectives, PretrainLearns, ::testing::Values(Objective::wav2vec2, Objective::data2vec),
                         [](const auto& info) { return to_string(info.param); });

TEST(PretrainRun, TeacherIsExactEmaOfStudentHistory) {
  auto data = synth(6, 3);
  auto p = small_pretrain(Objective::data2vec);
  p.steps = 12;
  p.ema_start = 0.9;
  p.ema_end = 0.99;
  auto ecfg = small_encoder();
  // Offline replay: start from the initial student, fold in each recorded
  // student state with the scheduled decay.
  nn::ParamStore<float> replay = init_pretrain_params(ecfg, p, 8).tensors;
  double worst = 0.0;
  bool identical = true;
  auto res = pretrain_run(data, ecfg, p, 8, [&](std::size_t step, const nn::ParamStore<float>& student,
                                                const TeacherState* teacher) {
    ASSERT_NE(teacher, nullptr);
    const double tau = p.ema_start + (p.ema_end - p.ema_start) * double(step) / double(p.steps - 1);
    for (auto& [name, r] : replay) {
      const auto& s = student.at(name).value.data;
      for (std::size_t i = 0; i < s.size(); ++i)
        r.value.data[i] = static_cast<float>(tau * double(r.value.data[i]) + (1.0 - tau) * double(s[i]));
      const auto& t = teacher->shadow.at(name).value.data;
      for (std::size_t i = 0; i < t.size(); ++i) {
        worst = std::max(worst, std::abs(double(t[i]) - r.value.data[i]));
        identical = identical && t[i] == r.value.data[i];
      }
    }
  });
  EXPECT_EQ(res.steps, 12u);
  EXPECT_LT(worst, 1e-6);
  EXPECT_TRUE(identical);
}

TEST(PretrainRun, MaskedErrorExceedsUnmaskedAtInit) {
  auto data = synth(6, 5);
  auto ecfg = small_encoder();
  auto pcfg = small_pretrain(Objective::data2vec);
  double masked_err = 0, unmasked_err = 0;
  std::size_t nm = 0, nu = 0;
  for (std::size_t i = 0; i < data.trials.size(); ++i) {
    auto params = init_pretrain_params(ecfg, pcfg, 11);
    auto teacher = params.tensors;
    const auto x = signals::to_frames(data.trials[i].recording);
    const std::size_t T = enc::output_frames(ecfg, x.rows());
    auto plan = plan_masks(T, 0.15, 3, 100 + i);
    if (plan.empty()) continue;
    nn::Graph gs(false), gt(false);
    auto s_out = enc::run_encoder(gs, ecfg, params.tensors, gs.input(x), &plan.indices);
    auto t_out = enc::run_encoder(gt, ecfg, teacher, gt.input(x));
    std::vector<nn::Tensor> sb, tb;
    for (auto& b : s_out.block_outputs) sb.push_back(b.value());
    for (auto& b : t_out.block_outputs) tb.push_back(b.value());
    auto s = layer_targets(sb, pcfg.top_k), t = layer_targets(tb, pcfg.top_k);
    for (std::size_t r = 0; r < T; ++r) {
      double e = 0;
      for (std::size_t c = 0; c < s.cols(); ++c) e += std::pow(double(s.at(r, c)) - t.at(r, c), 2);
      if (std::binary_search(plan.indices.begin(), plan.indices.end(), r)) masked_err += e, ++nm;
      else unmasked_err += e, ++nu;
    }
  }
  ASSERT_GT(nm, 0u);
  ASSERT_GT(nu, 0u);
  EXPECT_GT(masked_err / nm, unmasked_err / nu);
}
