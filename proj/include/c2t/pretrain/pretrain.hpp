#pragma once

// Self-supervised encoder pretraining: masked contrastive learning over
// quantized latents (wav2vec2 style) and masked regression onto an EMA
// teacher (data2vec style).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2t/encoders/encoders.hpp"
#include "c2t/error.hpp"
#include "c2t/numerics/ops.hpp"
#include "c2t/rng.hpp"
#include "c2t/signals/signals.hpp"
#include "c2t/trainer/trainer.hpp"

namespace c2t::pre {

template <class S>
using BasicVar = nn::BasicVar<S>;

enum class Objective { wav2vec2, data2vec };

inline std::string to_string(Objective o) { return o == Objective::wav2vec2 ? "wav2vec2" : "data2vec"; }

inline Objective parse_objective(const std::string& s) {
  if (s == "wav2vec2") return Objective::wav2vec2;
  if (s == "data2vec") return Objective::data2vec;
  raise(ErrorKind::ConfigError, "unknown pretraining objective '" + s + "'");
}

inline train::TrainConfig default_schedule() {
  train::TrainConfig t;
  t.lr = 5e-4;
  t.batch_size = 4;
  t.epochs = 1;
  return t;
}

struct PretrainConfig {
  Objective objective = Objective::wav2vec2;
  std::size_t steps = 200;
  double mask_prob = 0.065;
  std::size_t span_length = 10;
  // Spans placed uniformly in a trial whose sampled mask came out empty
  // (only when mask_prob > 0).
  std::size_t min_spans = 1;
  std::size_t distractors = 10;
  double kappa = 0.1;
  double diversity_weight = 0.1;
  std::size_t groups = 2;
  std::size_t entries = 64;
  // Gumbel temperature, annealed linearly over the run.
  double gumbel_start = 2.0;
  double gumbel_end = 0.5;
  // Teacher EMA decay, ramped linearly over the run.
  double ema_start = 0.999;
  double ema_end = 0.9999;
  std::size_t top_k = 4;
  double beta = 1.0;
  train::TrainConfig schedule = default_schedule();

  void check() const {
    auto fail = [](const std::string& m) { raise(ErrorKind::InvalidConfig, m); };
    if (steps < 1) fail("steps must be >= 1");
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) fail("mask_prob must be in [0, 1]");
    if (span_length < 1) fail("span_length must be >= 1");
    if (distractors < 1) fail("distractors must be >= 1");
    if (!(kappa > 0.0)) fail("kappa must be > 0");
    if (!(diversity_weight >= 0.0)) fail("diversity_weight must be >= 0");
    if (groups < 1 || entries < 1 || groups * entries < 2) fail("codebook needs groups * entries >= 2");
    if (!(gumbel_start > 0.0 && gumbel_end > 0.0)) fail("gumbel temperatures must be > 0");
    if (!(ema_start >= 0.0 && ema_start <= 1.0 && ema_end >= 0.0 && ema_end <= 1.0))
      fail("ema decay must be in [0, 1]");
    if (top_k < 1) fail("top_k must be >= 1");
    if (!(beta > 0.0)) fail("beta must be > 0");
    schedule.check();
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"objective", to_string(c.objective)},
       {"steps", c.steps},
       {"mask_prob", c.mask_prob},
       {"span_length", c.span_length},
       {"min_spans", c.min_spans},
       {"distractors", c.distractors},
       {"kappa", c.kappa},
       {"diversity_weight", c.diversity_weight},
       {"groups", c.groups},
       {"entries", c.entries},
       {"gumbel_start", c.gumbel_start},
       {"gumbel_end", c.gumbel_end},
       {"ema_start", c.ema_start},
       {"ema_end", c.ema_end},
       {"top_k", c.top_k},
       {"beta", c.beta},
       {"schedule", c.schedule}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  if (j.contains("objective")) c.objective = parse_objective(j.at("objective").get<std::string>());
  c.steps = j.value("steps", c.steps);
  c.mask_prob = j.value("mask_prob", c.mask_prob);
  c.span_length = j.value("span_length", c.span_length);
  c.min_spans = j.value("min_spans", c.min_spans);
  c.distractors = j.value("distractors", c.distractors);
  c.kappa = j.value("kappa", c.kappa);
  c.diversity_weight = j.value("diversity_weight", c.diversity_weight);
  c.groups = j.value("groups", c.groups);
  c.entries = j.value("entries", c.entries);
  c.gumbel_start = j.value("gumbel_start", c.gumbel_start);
  c.gumbel_end = j.value("gumbel_end", c.gumbel_end);
  c.ema_start = j.value("ema_start", c.ema_start);
  c.ema_end = j.value("ema_end", c.ema_end);
  c.top_k = j.value("top_k", c.top_k);
  c.beta = j.value("beta", c.beta);
  if (j.contains("schedule")) {
    auto s = default_schedule();
    from_json(j.at("schedule"), s);
    c.schedule = s;
  }
}

// ---------------------------------------------------------------------------
// Masking

struct MaskPlan {
  std::vector<std::size_t> indices;  // sorted, unique
  std::size_t frames = 0;
  std::size_t span_length = 1;
  double mask_prob = 0.0;

  bool empty() const { return indices.empty(); }
  double coverage() const { return frames ? static_cast<double>(indices.size()) / static_cast<double>(frames) : 0.0; }
};

/// Every frame starts a span with probability mask_prob; spans are clipped at
/// the end of the sequence and overlapping spans merge.
inline MaskPlan plan_masks(std::size_t frames, double mask_prob, std::size_t span_length, std::uint64_t seed) {
  if (span_length < 1 || frames < span_length)
    raise(ErrorKind::InvalidInput, "plan_masks needs frames >= span_length >= 1");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) raise(ErrorKind::InvalidInput, "mask_prob must be in [0, 1]");
  MaskPlan plan{{}, frames, span_length, mask_prob};
  std::vector<char> hit(frames, 0);
  Rng rng(seed);
  for (std::size_t t = 0; t < frames; ++t)
    if (rng.bernoulli(mask_prob))
      for (std::size_t u = t; u < std::min(frames, t + span_length); ++u) hit[u] = 1;
  for (std::size_t t = 0; t < frames; ++t)
    if (hit[t]) plan.indices.push_back(t);
  return plan;
}

/// Adds `count` uniformly placed spans to an empty plan. Plans that already
/// mask something, and plans with mask_prob 0, are returned unchanged.
inline MaskPlan ensure_spans(MaskPlan plan, std::size_t count, std::uint64_t seed) {
  if (!plan.empty() || count == 0 || plan.mask_prob <= 0.0) return plan;
  std::vector<char> hit(plan.frames, 0);
  Rng rng(seed);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t t = rng.below(plan.frames - plan.span_length + 1);
    for (std::size_t u = t; u < t + plan.span_length; ++u) hit[u] = 1;
  }
  for (std::size_t t = 0; t < plan.frames; ++t)
    if (hit[t]) plan.indices.push_back(t);
  return plan;
}

// ---------------------------------------------------------------------------
// Quantizer

/// G groups of E code vectors. The vectors themselves live in the parameter
/// store: `pretrain.quant.w/b` map latents to G*E logits and
/// `pretrain.codebook` holds [G*E, D/G] code rows.
struct Codebook {
  std::size_t groups = 2;
  std::size_t entries = 64;
  double temperature = 2.0;

  void check() const {
    if (groups < 1 || entries < 1 || groups * entries < 2)
      raise(ErrorKind::InvalidConfig, "codebook needs groups * entries >= 2");
    if (!(temperature > 0.0)) raise(ErrorKind::InvalidConfig, "gumbel temperature must be > 0");
  }
};

/// Forward value is the one-hot argmax of each row; the gradient passes
/// straight through to x.
template <class S>
BasicVar<S> straight_through_onehot(BasicVar<S> x) {
  const std::size_t m = x.rows(), n = x.cols();
  auto out = nn::BasicTensor<S>::zeros({m, n});
  const auto& xv = x.value().data;
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = xv.begin() + static_cast<std::ptrdiff_t>(r * n);
    out.data[r * n + static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(n)) - row)] = S(1);
  }
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id](nn::BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(xi);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      },
      "straight_through_onehot");
}

/// (G*E - sum_g exp H(u_g)) / (G*E), where u_g is the frame-averaged softmax
/// of group g's logits and H its entropy. logits: [T, G*E].
template <class S>
BasicVar<S> diversity_loss(BasicVar<S> logits, std::size_t groups, std::size_t entries) {
  const std::size_t T = logits.rows(), GE = groups * entries;
  if (logits.cols() != GE) raise(ErrorKind::ShapeError, "diversity_loss expects G*E logit columns");
  const auto& lv = logits.value().data;
  // soft[t, j] per group, then usage u[j]
  std::vector<double> soft(T * GE), usage(GE, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t o = t * GE + g * entries;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < entries; ++e) mx = std::max(mx, static_cast<double>(lv[o + e]));
      double z = 0.0;
      for (std::size_t e = 0; e < entries; ++e) z += (soft[o + e] = std::exp(lv[o + e] - mx));
      for (std::size_t e = 0; e < entries; ++e) {
        soft[o + e] /= z;
        usage[g * entries + e] += soft[o + e] / static_cast<double>(T);
      }
    }
  std::vector<double> perplexity(groups);
  double total = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    double h = 0.0;
    for (std::size_t e = 0; e < entries; ++e) {
      const double u = usage[g * entries + e];
      if (u > 0.0) h -= u * std::log(u);
    }
    total += perplexity[g] = std::exp(h);
  }
  const double value = (static_cast<double>(GE) - total) / static_cast<double>(GE);
  return logits.graph->add_node(
      nn::BasicTensor<S>::scalar(static_cast<S>(value)), {logits.id},
      [li = logits.id, T, groups, entries, GE, soft = std::move(soft), usage = std::move(usage),
       perplexity = std::move(perplexity)](nn::BasicGraph<S>& g, std::size_t self) {
        const double dy = g.node(self).grad[0];
        // dL/du = P_g (log u + 1) / GE
        std::vector<double> du(GE);
        for (std::size_t j = 0; j < GE; ++j)
          du[j] = dy * perplexity[j / entries] * (std::log(std::max(usage[j], 1e-300)) + 1.0) / static_cast<double>(GE);
        auto& dl = g.grad_of(li);
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t gr = 0; gr < groups; ++gr) {
            const std::size_t o = t * GE + gr * entries;
            double dot = 0.0;
            for (std::size_t e = 0; e < entries; ++e) dot += soft[o + e] * du[gr * entries + e];
            for (std::size_t e = 0; e < entries; ++e)
              dl[o + e] += static_cast<S>(soft[o + e] * (du[gr * entries + e] - dot) / static_cast<double>(T));
          }
      },
      "diversity_loss");
}

template <class S>
struct QuantizeResult {
  BasicVar<S> codes;      // [T, D]
  BasicVar<S> diversity;  // scalar
  BasicVar<S> logits;     // [T, G*E]
  std::vector<std::size_t> indices;  // [T * G], chosen entry per frame and group
};

/// Gumbel-softmax code selection per group, straight-through in training and
/// plain argmax otherwise.
template <class S>
QuantizeResult<S> quantize(nn::BasicGraph<S>& g, BasicVar<S> latents, nn::ParamStore<S>& P, const Codebook& cb,
                           bool training, std::uint64_t seed) {
  cb.check();
  const std::size_t T = latents.rows(), D = latents.cols(), G = cb.groups, E = cb.entries, GE = G * E;
  auto& w = P.at("pretrain.quant.w");
  auto& book = P.at("pretrain.codebook");
  if (D % G != 0) raise(ErrorKind::ShapeError, "latent dim " + std::to_string(D) + " not divisible by groups");
  if (w.value.shape != nn::Shape{D, GE} || book.value.shape != nn::Shape{GE, D / G})
    raise(ErrorKind::ShapeError, "codebook shapes do not match latent dim " + std::to_string(D));

  QuantizeResult<S> r;
  r.logits = nn::linear(latents, g.param(w), g.param(P.at("pretrain.quant.b")));
  r.diversity = diversity_loss(r.logits, G, E);
  auto book_v = g.param(book);
  Rng rng(seed);
  std::vector<BasicVar<S>> parts;
  std::vector<std::vector<std::size_t>> picked(G);
  for (std::size_t gr = 0; gr < G; ++gr) {
    auto lg = nn::slice_cols(r.logits, gr * E, E);
    BasicVar<S> onehot;
    if (training) {
      auto noise = nn::BasicTensor<S>::zeros({T, E});
      for (auto& v : noise.data) {
        const double u = std::clamp(rng.uniform(), 1e-10, 1.0 - 1e-10);
        v = static_cast<S>(-std::log(-std::log(u)));
      }
      auto y = nn::softmax(nn::scale(nn::add(lg, g.constant(std::move(noise))), 1.0 / cb.temperature));
      onehot = straight_through_onehot(y);
    } else {
      auto hard = nn::BasicTensor<S>::zeros({T, E});
      const auto& lv = lg.value().data;
      for (std::size_t t = 0; t < T; ++t) {
        const auto row = lv.begin() + static_cast<std::ptrdiff_t>(t * E);
        hard.data[t * E + static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(E)) - row)] =
            S(1);
      }
      onehot = g.constant(std::move(hard));
    }
    const auto& ov = onehot.value().data;
    for (std::size_t t = 0; t < T; ++t)
      picked[gr].push_back(static_cast<std::size_t>(
          std::find(ov.begin() + static_cast<std::ptrdiff_t>(t * E), ov.begin() + static_cast<std::ptrdiff_t>((t + 1) * E),
                    S(1)) -
          (ov.begin() + static_cast<std::ptrdiff_t>(t * E))));
    std::vector<std::size_t> rows(E);
    std::iota(rows.begin(), rows.end(), gr * E);
    parts.push_back(nn::matmul(onehot, nn::select_rows(book_v, rows)));
  }
  r.codes = G == 1 ? parts[0] : nn::concat_cols(parts);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t gr = 0; gr < G; ++gr) r.indices.push_back(picked[gr][t]);
  return r;
}

// ---------------------------------------------------------------------------
// Contrastive objective

/// Mean over masked frames t of -log softmax_0(cos(c_t, q) / kappa) over
/// q in {q_t} plus K distractors drawn with replacement from the other masked
/// frames. A lone masked frame has no distractors and contributes 0.
template <class S>
BasicVar<S> contrastive_loss(BasicVar<S> context, BasicVar<S> targets, const std::vector<std::size_t>& masked,
                             std::size_t K, double kappa, std::uint64_t seed) {
  if (masked.empty()) raise(ErrorKind::NoMaskedFrames, "contrastive loss needs at least one masked frame");
  if (K < 1) raise(ErrorKind::InvalidInput, "contrastive loss needs K >= 1");
  if (!(kappa > 0.0)) raise(ErrorKind::InvalidInput, "kappa must be > 0");
  if (context.value().shape != targets.value().shape)
    raise(ErrorKind::ShapeError, "context " + nn::shape_str(context.value().shape) + " vs targets " +
                                     nn::shape_str(targets.value().shape));
  const std::size_t T = context.rows(), D = context.cols(), M = masked.size();
  for (std::size_t t : masked)
    if (t >= T) raise(ErrorKind::RangeError, "masked frame " + std::to_string(t) + " beyond " + std::to_string(T));

  // candidates[i] = {masked[i], distractors...}
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> cand(M);
  for (std::size_t i = 0; i < M; ++i) {
    cand[i].push_back(masked[i]);
    if (M == 1) continue;
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t j = rng.below(M - 1);
      if (j >= i) ++j;
      cand[i].push_back(masked[j]);
    }
  }

  struct Geo {
    std::vector<double> norm_c, norm_q;
  };
  auto norms = [D](const nn::Buffer<S>& v, std::size_t rows) {
    std::vector<double> n(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(v[r * D + d]) * v[r * D + d];
      n[r] = std::max(std::sqrt(s), 1e-8);
    }
    return n;
  };
  auto cosine = [D](const nn::Buffer<S>& c, std::size_t a, double na, const nn::Buffer<S>& q, std::size_t b,
                    double nb) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(c[a * D + d]) * q[b * D + d];
    return s / (na * nb);
  };

  const auto& cv = context.value().data;
  const auto& qv = targets.value().data;
  const auto nc = norms(cv, T), nq = norms(qv, T);
  double total = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    std::vector<double> s;
    for (std::size_t j : cand[i]) s.push_back(cosine(cv, masked[i], nc[masked[i]], qv, j, nq[j]) / kappa);
    total += nn::logsumexp(std::span<const double>(s)) - s[0];
  }
  const double value = total / static_cast<double>(M);

  return context.graph->add_node(
      nn::BasicTensor<S>::scalar(static_cast<S>(value)), {context.id, targets.id},
      [ci = context.id, qi = targets.id, masked, cand = std::move(cand), nc, nq, D, M, kappa,
       cosine](nn::BasicGraph<S>& g, std::size_t self) {
        const double dy = g.node(self).grad[0] / static_cast<double>(M);
        const auto& cv = g.node(ci).value.data;
        const auto& qv = g.node(qi).value.data;
        nn::Buffer<S>* dc = g.needs_grad(ci) ? &g.grad_of(ci) : nullptr;
        nn::Buffer<S>* dq = g.needs_grad(qi) ? &g.grad_of(qi) : nullptr;
        for (std::size_t i = 0; i < M; ++i) {
          const std::size_t t = masked[i];
          const auto& cs = cand[i];
          std::vector<double> cosv(cs.size()), s(cs.size());
          for (std::size_t k = 0; k < cs.size(); ++k) {
            cosv[k] = cosine(cv, t, nc[t], qv, cs[k], nq[cs[k]]);
            s[k] = cosv[k] / kappa;
          }
          const double lse = nn::logsumexp(std::span<const double>(s));
          for (std::size_t k = 0; k < cs.size(); ++k) {
            const double w = dy * (std::exp(s[k] - lse) - (k == 0 ? 1.0 : 0.0)) / kappa;
            if (w == 0.0) continue;
            const std::size_t j = cs[k];
            for (std::size_t d = 0; d < D; ++d) {
              const double c = cv[t * D + d], q = qv[j * D + d];
              if (dc) (*dc)[t * D + d] += static_cast<S>(w * (q / (nc[t] * nq[j]) - cosv[k] * c / (nc[t] * nc[t])));
              if (dq) (*dq)[j * D + d] += static_cast<S>(w * (c / (nc[t] * nq[j]) - cosv[k] * q / (nq[j] * nq[j])));
            }
          }
        }
      },
      "contrastive_loss");
}

// ---------------------------------------------------------------------------
// Teacher and regression objective

struct TeacherState {
  nn::ParamStore<float> shadow;
  double ema_decay = 0.999;
  std::size_t top_k = 4;
};

/// shadow <- tau * shadow + (1 - tau) * student, elementwise (evaluated in
/// double, stored as float).
inline TeacherState& ema_update(TeacherState& teacher, const nn::ParamStore<float>& student, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) raise(ErrorKind::InvalidInput, "ema decay must be in [0, 1]");
  if (teacher.shadow.size() != student.size())
    raise(ErrorKind::ShapeError, "teacher has " + std::to_string(teacher.shadow.size()) + " tensors, student " +
                                     std::to_string(student.size()));
  for (const auto& [name, p] : student) {
    if (!teacher.shadow.contains(name)) raise(ErrorKind::ShapeError, "teacher lacks " + name);
    if (teacher.shadow.at(name).value.shape != p.value.shape)
      raise(ErrorKind::ShapeError, "teacher/student shape mismatch for " + name);
  }
  for (const auto& [name, p] : student) {
    auto& s = teacher.shadow.at(name).value.data;
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = static_cast<float>(tau * static_cast<double>(s[i]) + (1.0 - tau) * static_cast<double>(p.value.data[i]));
  }
  teacher.ema_decay = tau;
  return teacher;
}

/// Row-wise layer norm (no affine) of the mean of the last top_k block
/// outputs; fewer blocks than top_k uses them all.
template <class S>
nn::BasicTensor<S> layer_targets(const std::vector<nn::BasicTensor<S>>& blocks, std::size_t top_k) {
  if (blocks.empty()) raise(ErrorKind::ShapeError, "layer_targets needs at least one block output");
  if (top_k < 1) raise(ErrorKind::InvalidInput, "top_k must be >= 1");
  const std::size_t k = std::min(top_k, blocks.size());
  const auto& shape = blocks.back().shape;
  const std::size_t n = blocks.back().cols(), m = blocks.back().rows();
  std::vector<double> avg(m * n, 0.0);
  for (std::size_t b = blocks.size() - k; b < blocks.size(); ++b) {
    if (blocks[b].shape != shape) raise(ErrorKind::ShapeError, "block outputs differ in shape");
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += static_cast<double>(blocks[b].data[i]) / static_cast<double>(k);
  }
  auto out = nn::BasicTensor<S>::zeros(shape);
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += avg[r * n + c];
    mu /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) var += (avg[r * n + c] - mu) * (avg[r * n + c] - mu);
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(n) + nn::kLayerNormEps);
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = static_cast<S>((avg[r * n + c] - mu) * inv);
  }
  return out;
}

/// Smooth-L1 between student predictions and teacher targets at the masked
/// rows, averaged over rows and dimensions. Both inputs are [T, D].
template <class S>
BasicVar<S> data2vec_loss(BasicVar<S> student, const nn::BasicTensor<S>& targets,
                          const std::vector<std::size_t>& masked, double beta) {
  if (masked.empty()) raise(ErrorKind::NoMaskedFrames, "regression loss needs at least one masked frame");
  if (student.value().shape != targets.shape)
    raise(ErrorKind::ShapeError, "student " + nn::shape_str(student.value().shape) + " vs targets " +
                                     nn::shape_str(targets.shape));
  const std::size_t D = targets.cols();
  auto picked = nn::BasicTensor<S>::zeros({masked.size(), D});
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i] >= targets.rows()) raise(ErrorKind::RangeError, "masked frame beyond sequence");
    std::copy_n(targets.data.begin() + static_cast<std::ptrdiff_t>(masked[i] * D), D,
                picked.data.begin() + static_cast<std::ptrdiff_t>(i * D));
  }
  return nn::smooth_l1(nn::select_rows(student, masked), picked, beta);
}

// ---------------------------------------------------------------------------
// Parameters

inline std::vector<enc::ParamSpec> pretrain_param_specs(const enc::EncoderConfig& ecfg, const PretrainConfig& pcfg) {
  using enc::ParamSpec;
  const std::size_t D = ecfg.model_dim;
  std::vector<ParamSpec> out;
  out.push_back({"pretrain.mask_emb", {D}, ParamSpec::Init::uniform, D});
  if (pcfg.objective == Objective::wav2vec2) {
    if (D % pcfg.groups != 0)
      raise(ErrorKind::ConfigError, "model_dim " + std::to_string(D) + " not divisible by codebook groups");
    const std::size_t GE = pcfg.groups * pcfg.entries;
    enc::detail::add_linear(out, "pretrain.context_proj", D, D);
    out.push_back({"pretrain.codebook", {GE, D / pcfg.groups}, ParamSpec::Init::uniform, 1});
    enc::detail::add_linear(out, "pretrain.quant", D, GE);
  } else {
    enc::detail::add_linear(out, "pretrain.regression", D, D);
  }
  return out;
}

/// Encoder init plus the `pretrain.*` tensors the objective needs.
inline enc::EncoderParams init_pretrain_params(const enc::EncoderConfig& ecfg, const PretrainConfig& pcfg,
                                               std::uint64_t seed) {
  auto params = enc::init_params(ecfg, seed);
  enc::materialize(params.tensors, pretrain_param_specs(ecfg, pcfg), seed);
  return params;
}

/// Drops the `pretrain.*` tensors so the result can seed supervised training.
inline enc::EncoderParams strip_pretrain(enc::EncoderParams params) {
  std::vector<std::string> drop;
  for (const auto& [name, _] : params.tensors)
    if (name.starts_with("pretrain.")) drop.push_back(name);
  for (const auto& n : drop) params.tensors.erase(n);
  return params;
}

// ---------------------------------------------------------------------------
// Per-example objective

inline double anneal(double start, double end, std::size_t step, std::size_t steps) {
  if (steps <= 1) return start;
  return start + (end - start) * static_cast<double>(step) / static_cast<double>(steps - 1);
}

/// Loss of one trial under the configured objective; the graph must be the
/// student's. `teacher` is required for data2vec.
inline nn::Var example_loss(nn::Graph& g, const enc::EncoderConfig& ecfg, const PretrainConfig& pcfg,
                            nn::ParamStore<float>& P, const TeacherState* teacher, const nn::Tensor& frames,
                            const MaskPlan& mask, std::size_t step, std::uint64_t seed) {
  auto out = enc::run_encoder(g, ecfg, P, g.input(frames), &mask.indices);
  const auto last = out.block_outputs.back();
  if (pcfg.objective == Objective::wav2vec2) {
    auto ctx = nn::linear(last, g.param(P.at("pretrain.context_proj.w")), g.param(P.at("pretrain.context_proj.b")));
    Codebook cb{pcfg.groups, pcfg.entries, anneal(pcfg.gumbel_start, pcfg.gumbel_end, step, pcfg.steps)};
    auto q = quantize(g, out.latents, P, cb, true, combine_seed(seed, 1));
    auto c = contrastive_loss(ctx, q.codes, mask.indices, pcfg.distractors, pcfg.kappa, combine_seed(seed, 2));
    return nn::add(c, nn::scale(q.diversity, pcfg.diversity_weight));
  }
  if (!teacher) raise(ErrorKind::StateError, "data2vec objective needs a teacher");
  auto pred = nn::linear(last, g.param(P.at("pretrain.regression.w")), g.param(P.at("pretrain.regression.b")));
  nn::Graph tg(false);
  auto shadow = teacher->shadow;
  auto tout = enc::run_encoder(tg, ecfg, shadow, tg.input(frames));
  std::vector<nn::Tensor> blocks;
  for (const auto& b : tout.block_outputs) blocks.push_back(b.value());
  return data2vec_loss(pred, layer_targets(blocks, teacher->top_k), mask.indices, pcfg.beta);
}

// ---------------------------------------------------------------------------
// Run

struct PretrainResult {
  enc::EncoderParams params;  // includes pretrain.* tensors
  std::vector<train::TraceRow> trace;
  std::vector<train::DiagnosticFlag> flags;
  train::RunStatus status = train::RunStatus::ok;
  std::optional<TeacherState> teacher;
  std::size_t steps = 0;
  std::size_t masked_frames = 0;
  std::size_t total_frames = 0;
};

/// Called after every optimizer step with the updated student (and teacher).
using StepHook = std::function<void(std::size_t step, const nn::ParamStore<float>& student, const TeacherState* teacher)>;

/// Runs pcfg.steps optimizer steps over the (unlabeled) dataset. A step whose
/// masks all come out empty raises NoMaskedFrames.
inline PretrainResult pretrain_run(const signals::Dataset& ds, const enc::EncoderConfig& ecfg,
                                   const PretrainConfig& pcfg, std::uint64_t seed, const StepHook& hook = {}) {
  pcfg.check();
  ecfg.check();
  if (ds.trials.empty()) raise(ErrorKind::InvalidInput, "pretraining set is empty");
  const auto& sched = pcfg.schedule;

  std::vector<nn::Tensor> frames;
  for (const auto& t : ds.trials) {
    if (t.recording.channels != ecfg.in_channels)
      raise(ErrorKind::ShapeError, "trial " + t.id + " has " + std::to_string(t.recording.channels) +
                                       " channels, encoder expects " + std::to_string(ecfg.in_channels));
    if (t.recording.frames() == 0) continue;
    frames.push_back(signals::to_frames(t.recording, ecfg.zscore));
  }
  if (frames.empty()) raise(ErrorKind::InputTooShort, "no trial has any samples");

  PretrainResult res;
  res.params = init_pretrain_params(ecfg, pcfg, seed);
  if (pcfg.objective == Objective::data2vec) res.teacher = TeacherState{res.params.tensors, pcfg.ema_start, pcfg.top_k};

  train::AdamState adam;
  Rng shuffle_rng(combine_seed(seed, 0x5eed));
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<double> window;
  bool soft_active = false;
  std::size_t bad_grads = 0;

  for (std::size_t step = 0; step < pcfg.steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(sched.batch_size, frames.size())) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const std::uint64_t step_seed = combine_seed(seed, step);
    std::vector<MaskPlan> plans;
    std::size_t live = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::size_t T = enc::output_frames(ecfg, frames[batch[i]].rows());
      const std::uint64_t mseed = combine_seed(step_seed, i);
      plans.push_back(ensure_spans(plan_masks(T, pcfg.mask_prob, std::min(pcfg.span_length, T), mseed),
                                   pcfg.min_spans, combine_seed(mseed, 1)));
      if (!plans.back().empty()) ++live;
      res.masked_frames += plans.back().indices.size();
      res.total_frames += T;
    }
    if (live == 0) raise(ErrorKind::NoMaskedFrames, "step " + std::to_string(step) + " masked no frames");

    res.params.tensors.zero_grad();
    double loss = 0.0;
    train::TraceRow row{step, 0.0, {}};
    bool fatal = false;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (plans[i].empty()) continue;
      const std::uint64_t ex_seed = combine_seed(step_seed, 1000 + i);
      nn::Graph g(true, ex_seed);
      auto l = nn::scale(example_loss(g, ecfg, pcfg, res.params.tensors, res.teacher ? &*res.teacher : nullptr,
                                      frames[batch[i]], plans[i], step, ex_seed),
                         1.0 / static_cast<double>(live));
      const double v = l.value().data[0];
      if (!std::isfinite(v)) {
        loss = v;
        break;
      }
      loss += v;
      g.backward(l);
    }
    row.loss = loss;
    res.steps = step + 1;
    if (!std::isfinite(loss)) {
      row.flags.push_back(train::FlagKind::NonFiniteLoss);
      res.flags.push_back({train::FlagKind::NonFiniteLoss, step, "loss is not finite"});
      res.status = train::RunStatus::failed;
      res.trace.push_back(std::move(row));
      break;
    }
    train::ClipResult clip;
    if (sched.clip_enabled) {
      clip = train::clip_gradients(res.params.tensors, sched.clip_norm);
    } else {
      double sq = 0.0;
      for (const auto& [_, p] : res.params.tensors)
        for (float gv : p.grad) sq += static_cast<double>(gv) * gv;
      clip.finite = std::isfinite(sq);
    }
    if (!clip.finite) {
      row.flags.push_back(train::FlagKind::NonFiniteGrad);
      res.flags.push_back({train::FlagKind::NonFiniteGrad, step, "gradient norm is not finite"});
      if (++bad_grads >= sched.nonfinite_grad_patience) {
        res.status = train::RunStatus::failed;
        fatal = true;
      }
    } else {
      bad_grads = 0;
      train::adam_update(res.params.tensors, adam, sched, train::learning_rate(sched, step, pcfg.steps));
      if (res.teacher)
        ema_update(*res.teacher, res.params.tensors, anneal(pcfg.ema_start, pcfg.ema_end, step, pcfg.steps));
    }
    window.push_back(loss);
    if (window.size() > sched.watchdog_window) window.erase(window.begin());
    for (const auto& f : train::watchdog(window, sched, step)) {
      if (f.kind == train::FlagKind::LossHighSoft) {
        if (!soft_active && window.size() == sched.watchdog_window) {
          res.flags.push_back(f);
          row.flags.push_back(f.kind);
          soft_active = true;
        }
      } else {
        row.flags.push_back(f.kind);
        res.flags.push_back(f);
        res.status = train::RunStatus::failed;
        fatal = true;
      }
    }
    if (window.size() == sched.watchdog_window && train::watchdog(window, sched, step).empty()) soft_active = false;
    res.trace.push_back(std::move(row));
    if (hook) hook(step, res.params.tensors, res.teacher ? &*res.teacher : nullptr);
    if (fatal) break;
  }
  return res;
}

}  // namespace c2t::pre
