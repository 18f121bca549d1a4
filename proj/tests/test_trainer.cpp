#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "c2t/numerics/gradcheck.hpp"
#include "c2t/signals/synth.hpp"
#include "c2t/trainer/trainer.hpp"

using namespace c2t;
using namespace c2t::train;

namespace {

enc::EncoderConfig small_encoder() {
  enc::EncoderConfig c;
  c.in_channels = 4;
  c.blocks = 1;
  c.model_dim = 32;
  c.heads = 2;
  c.conv_kernel = 7;
  c.vocab_size = 29;
  c.ff_mult = 2;
  return c;
}

signals::Dataset synth(std::size_t n, std::uint64_t seed) {
  signals::SynthConfig s;
  s.channels = 4;
  s.random_text = true;
  s.num_trials = n;
  s.words_min = 1;
  s.words_max = 2;
  return signals::generate_synthetic(s, seed);
}

bool has_flag(const std::vector<DiagnosticFlag>& flags, FlagKind k) {
  return std::any_of(flags.begin(), flags.end(), [&](const auto& f) { return f.kind == k; });
}

double grad_norm(const nn::ParamStore<float>& p) {
  double sq = 0;
  for (const auto& [_, v] : p)
    for (float g : v.grad) sq += double(g) * g;
  return std::sqrt(sq);
}

}  // namespace

TEST(Watchdog, Thresholds) {
  TrainConfig cfg;
  const std::vector<double> calm{0.4, 0.6, 0.5};
  EXPECT_TRUE(watchdog(calm, cfg).empty());
  const std::vector<double> high{31.0, 31.0};
  auto f = watchdog(high, cfg, 12);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].kind, FlagKind::LossHighHard);
  EXPECT_EQ(f[0].step, 12u);
  const std::vector<double> soft{2.5, 3.0};
  EXPECT_EQ(watchdog(soft, cfg)[0].kind, FlagKind::LossHighSoft);
  const std::vector<double> inf{0.5, INFINITY};
  EXPECT_EQ(watchdog(inf, cfg)[0].kind, FlagKind::NonFiniteLoss);
  const std::vector<double> nan{NAN};
  EXPECT_EQ(watchdog(nan, cfg)[0].kind, FlagKind::NonFiniteLoss);
  EXPECT_THROW(watchdog(std::span<const double>{}, cfg), Error);
}

TEST(Config, Invariants) {
  TrainConfig c;
  c.watchdog_soft_threshold = 40;
  EXPECT_THROW(c.check(), Error);
  c = TrainConfig{};
  c.clip_norm = 0;
  EXPECT_THROW(c.check(), Error);
  nlohmann::json j = TrainConfig{};
  EXPECT_EQ(j.get<TrainConfig>().watchdog_hard_threshold, 30.0);
}

TEST(Clip, Boundaries) {
  nn::ParamStore<float> p;
  p.add("a", nn::Tensor::matrix(1, 2, {0, 0}));
  p.at("a").grad = {0.f, 0.f};
  auto r = clip_gradients(p, 1.0);
  EXPECT_EQ(r.norm_before, 0.0);
  EXPECT_EQ(p.at("a").grad, (nn::Buffer<float>{0.f, 0.f}));

  p.at("a").grad = {1.2f, 1.6f};  // norm 2
  clip_gradients(p, 1.0);
  EXPECT_FLOAT_EQ(p.at("a").grad[0], 0.6f);
  EXPECT_FLOAT_EQ(p.at("a").grad[1], 0.8f);

  p.at("a").grad = {0.6f, 0.8f};  // norm exactly 1 in double
  const auto before = p.at("a").grad;
  r = clip_gradients(p, std::sqrt(0.6 * 0.6 + 0.8 * 0.8) > 1.0 ? 1.1 : 1.0);
  EXPECT_EQ(p.at("a").grad, before);

  p.at("a").grad = {NAN, 1.f};
  EXPECT_FALSE(clip_gradients(p, 1.0).finite);
}

TEST(Clip, PostClipNormBounded) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    nn::ParamStore<float> p;
    for (int k = 0; k < 3; ++k) {
      auto& q = p.add("p" + std::to_string(k), nn::Tensor::zeros({1 + rng.below(20)}));
      for (auto& g : q.grad) g = static_cast<float>(rng.normal() * rng.uniform(0, 100));
    }
    const double clip = rng.uniform(0.01, 5.0);
    auto r = clip_gradients(p, clip);
    EXPECT_LE(grad_norm(p), clip + 1e-6);
    EXPECT_NEAR(r.norm_after, grad_norm(p), 1e-4);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::ParamStore<float> p;
  p.add("w", nn::Tensor::matrix(1, 2, {1.0f, -1.0f}));
  p.at("w").grad = {0.5f, -2.0f};
  AdamState st;
  TrainConfig cfg;
  adam_update(p, st, cfg, 0.1);
  // m_hat = g, v_hat = g^2 after bias correction.
  EXPECT_NEAR(p.at("w").value.data[0], 0.9, 1e-6);
  EXPECT_NEAR(p.at("w").value.data[1], -0.9, 1e-6);
  EXPECT_EQ(st.t, 1u);
}

TEST(Schedule, WarmupThenDecay) {
  TrainConfig cfg;
  cfg.lr = 1.0;
  EXPECT_NEAR(learning_rate(cfg, 0, 100), 0.1, 1e-12);
  EXPECT_NEAR(learning_rate(cfg, 9, 100), 1.0, 1e-12);
  EXPECT_NEAR(learning_rate(cfg, 10, 100), 1.0, 1e-12);
  EXPECT_LT(learning_rate(cfg, 90, 100), 0.2);
  EXPECT_GE(learning_rate(cfg, 99, 100), 0.05);
}

TEST(CtcNode, GradientThroughLogSoftmaxMatchesFiniteDifferences) {
  Rng rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    auto logits = nn::random_tensor({6, 4}, 100 + rep, -2.0, 2.0);
    const ctc::Labels target{1, 3, 3};
    const double err = nn::grad_check_fn(
        [&](nn::DGraph&, const std::vector<nn::DVar>& v) { return ctc_node(nn::log_softmax(v[0]), target, 0.25); },
        {logits}, 1e-6);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(TrainStep, HealthyBatchHasNoFlags) {
  auto ecfg = small_encoder();
  auto params = enc::init_params(ecfg, 1);
  tok::Tokenizer tk(tok::VocabKind::character);
  auto ex = make_examples(synth(4, 2), tk, true);
  std::vector<const Example*> batch;
  for (auto& e : ex) batch.push_back(&e);
  AdamState st;
  TrainConfig cfg;
  auto r = train_step(params, st, batch, ecfg, cfg, 0, cfg.lr);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.loss, 0.0);
  EXPECT_TRUE(r.flags.empty());
  EXPECT_TRUE(r.updated);
  EXPECT_LE(r.clip.norm_after, cfg.clip_norm + 1e-6);
  EXPECT_THROW(train_step(params, st, std::span<const Example* const>{}, ecfg, cfg, 1, cfg.lr), Error);
}

TEST(TrainStep, PrescaledParametersAreFlaggedNotFatal) {
  auto ecfg = small_encoder();
  auto params = enc::init_params(ecfg, 1);
  for (auto& [_, p] : params.tensors)
    for (auto& v : p.value.data) v *= 1e6f;
  tok::Tokenizer tk(tok::VocabKind::character);
  auto ex = make_examples(synth(2, 2), tk, true);
  std::vector<const Example*> batch{&ex[0], &ex[1]};
  AdamState st;
  TrainConfig cfg;
  StepResult r;
  ASSERT_NO_THROW(r = train_step(params, st, batch, ecfg, cfg, 0, cfg.lr));
  EXPECT_TRUE(has_flag(r.flags, FlagKind::NonFiniteLoss) || has_flag(r.flags, FlagKind::LossHighHard));
}

TEST(TrainStep, PerturbedLatticeIsNegativeCtcInput) {
  auto ecfg = small_encoder();
  auto params = enc::init_params(ecfg, 1);
  const auto before = params.tensors.at("head.proj.w").value.data;
  tok::Tokenizer tk(tok::VocabKind::character);
  auto ex = make_examples(synth(1, 2), tk, true);
  std::vector<const Example*> batch{&ex[0]};
  AdamState st;
  TrainConfig cfg;
  cfg.lattice_perturbation = 0.5;
  auto r = train_step(params, st, batch, ecfg, cfg, 7, cfg.lr);
  ASSERT_EQ(r.flags.size(), 1u);
  EXPECT_EQ(r.flags[0].kind, FlagKind::NegativeCtcInput);
  EXPECT_EQ(r.flags[0].step, 7u);
  EXPECT_FALSE(r.updated);
  EXPECT_EQ(params.tensors.at("head.proj.w").value.data, before);
}

TEST(Fit, OverfitsThirtyTrials) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto data = synth(30, seed);
    tok::Tokenizer tk(tok::VocabKind::character);
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.batch_size = 2;
    cfg.epochs = 30;
    cfg.seed = seed;
    auto res = fit(data, signals::Dataset{}, tk, small_encoder(), cfg);
    ASSERT_EQ(res.status, RunStatus::ok);
    const double initial = res.epochs.front().train_loss;
    const double final_loss = res.epochs.back().train_loss;
    EXPECT_LT(final_loss, 0.3 * initial) << "seed " << seed << " " << initial << " -> " << final_loss;
  }
}

TEST(Fit, DeterministicTrace) {
  auto data = synth(12, 4);
  auto [tr, dev] = signals::split_dataset(data, 0.25);
  tok::Tokenizer tk(tok::VocabKind::character);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 11;
  auto a = fit(tr, dev, tk, small_encoder(), cfg);
  auto b = fit(tr, dev, tk, small_encoder(), cfg);
  std::ostringstream sa, sb;
  write_trace_csv(sa, a.trace);
  write_trace_csv(sb, b.trace);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.epochs.size(), 2u);
  EXPECT_TRUE(sa.str().starts_with("step,loss,flag\n"));
  EXPECT_EQ(a.dev.hypotheses.size(), 3u);
}

TEST(Fit, InjectedPerturbationFailsRun) {
  auto data = synth(8, 5);
  tok::Tokenizer tk(tok::VocabKind::character);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lattice_perturbation = 0.5;
  auto res = fit(data, signals::Dataset{}, tk, small_encoder(), cfg);
  EXPECT_EQ(res.status, RunStatus::failed);
  ASSERT_FALSE(res.flags.empty());
  EXPECT_TRUE(has_flag(res.flags, FlagKind::NegativeCtcInput));
  EXPECT_EQ(res.trace.size(), 1u);
  std::ostringstream os;
  write_flag_log(os, res.flags);
  EXPECT_NE(os.str().find("NegativeCtcInput"), std::string::npos);
}

TEST(Fit, PrescaledRunFailsWithFlag) {
  auto data = synth(8, 6);
  tok::Tokenizer tk(tok::VocabKind::character);
  auto ecfg = small_encoder();
  auto params = enc::init_params(ecfg, 1);
  for (auto& [_, p] : params.tensors)
    for (auto& v : p.value.data) v *= 1e6f;
  TrainConfig cfg;
  cfg.epochs = 2;
  auto res = fit(data, signals::Dataset{}, tk, ecfg, cfg, params);
  EXPECT_EQ(res.status, RunStatus::failed);
  EXPECT_TRUE(has_flag(res.flags, FlagKind::NonFiniteLoss) || has_flag(res.flags, FlagKind::LossHighHard));
}

TEST(Fit, VocabMismatchIsConfigError) {
  tok::Tokenizer tk(tok::VocabKind::phoneme);
  EXPECT_THROW(fit(synth(2, 1), signals::Dataset{}, tk, small_encoder(), TrainConfig{}), Error);
}
