#pragma once

// Supervised CTC fine-tuning with divergence instrumentation. The step loss
// is the CTC negative log-likelihood divided by the target length (at least
// 1), averaged over the batch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2t/ctc/ctc.hpp"
#include "c2t/encoders/encoders.hpp"
#include "c2t/metrics/metrics.hpp"
#include "c2t/rng.hpp"
#include "c2t/signals/signals.hpp"
#include "c2t/tokenizers/tokenizers.hpp"

namespace c2t::train {

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;
  bool clip_enabled = true;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double watchdog_soft_threshold = 2.0;
  double watchdog_hard_threshold = 30.0;
  std::size_t watchdog_window = 10;
  double warmup_fraction = 0.1;
  // Stop after this many optimizer steps; 0 runs every epoch.
  std::size_t max_steps = 0;
  // Consecutive skipped updates tolerated before the run is failed.
  std::size_t nonfinite_grad_patience = 3;
  // Fault injection: constant added to every log-probability before CTC.
  double lattice_perturbation = 0.0;
  std::size_t beam_width = 1;  // 1 decodes greedily

  void check() const {
    auto fail = [](const std::string& m) { raise(ErrorKind::InvalidConfig, m); };
    if (!(lr > 0.0)) fail("lr must be > 0");
    if (!(clip_norm > 0.0)) fail("clip_norm must be > 0");
    if (!(watchdog_soft_threshold <= watchdog_hard_threshold)) fail("watchdog thresholds need soft <= hard");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (watchdog_window < 1) fail("watchdog_window must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must be in [0, 1)");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) fail("warmup_fraction must be in [0, 1]");
    if (beam_width < 1) fail("beam_width must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"clip_norm", c.clip_norm},
       {"clip_enabled", c.clip_enabled},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"watchdog_soft_threshold", c.watchdog_soft_threshold},
       {"watchdog_hard_threshold", c.watchdog_hard_threshold},
       {"watchdog_window", c.watchdog_window},
       {"warmup_fraction", c.warmup_fraction},
       {"max_steps", c.max_steps},
       {"nonfinite_grad_patience", c.nonfinite_grad_patience},
       {"lattice_perturbation", c.lattice_perturbation},
       {"beam_width", c.beam_width}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.clip_enabled = j.value("clip_enabled", c.clip_enabled);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.watchdog_soft_threshold = j.value("watchdog_soft_threshold", c.watchdog_soft_threshold);
  c.watchdog_hard_threshold = j.value("watchdog_hard_threshold", c.watchdog_hard_threshold);
  c.watchdog_window = j.value("watchdog_window", c.watchdog_window);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.nonfinite_grad_patience = j.value("nonfinite_grad_patience", c.nonfinite_grad_patience);
  c.lattice_perturbation = j.value("lattice_perturbation", c.lattice_perturbation);
  c.beam_width = j.value("beam_width", c.beam_width);
}

// ---------------------------------------------------------------------------
// Diagnostics

enum class FlagKind { LossHighSoft, LossHighHard, NonFiniteLoss, NonFiniteGrad, NegativeCtcInput };

inline std::string to_string(FlagKind k) {
  switch (k) {
    case FlagKind::LossHighSoft: return "LossHighSoft";
    case FlagKind::LossHighHard: return "LossHighHard";
    case FlagKind::NonFiniteLoss: return "NonFiniteLoss";
    case FlagKind::NonFiniteGrad: return "NonFiniteGrad";
    case FlagKind::NegativeCtcInput: return "NegativeCtcInput";
  }
  return "?";
}

struct DiagnosticFlag {
  FlagKind kind;
  std::size_t step = 0;
  std::string payload;
};

/// Flags that end a run.
inline bool is_fatal(FlagKind k) {
  return k == FlagKind::LossHighHard || k == FlagKind::NonFiniteLoss || k == FlagKind::NegativeCtcInput;
}

/// Moving average of the window against the two thresholds; only the more
/// severe of the two fires.
inline std::vector<DiagnosticFlag> watchdog(std::span<const double> window, const TrainConfig& cfg,
                                            std::size_t step = 0) {
  if (window.empty()) raise(ErrorKind::InvalidInput, "watchdog window is empty");
  for (double v : window)
    if (!std::isfinite(v)) return {{FlagKind::NonFiniteLoss, step, "non-finite loss in window"}};
  const double mean = std::accumulate(window.begin(), window.end(), 0.0) / static_cast<double>(window.size());
  if (mean > cfg.watchdog_hard_threshold)
    return {{FlagKind::LossHighHard, step, "moving average " + std::to_string(mean)}};
  if (mean > cfg.watchdog_soft_threshold)
    return {{FlagKind::LossHighSoft, step, "moving average " + std::to_string(mean)}};
  return {};
}

struct ClipResult {
  double norm_before = 0.0;
  double norm_after = 0.0;
  bool finite = true;
};

/// Scales every gradient by clip_norm / g when the global L2 norm g exceeds
/// clip_norm. A non-finite norm leaves the gradients untouched.
template <class S>
ClipResult clip_gradients(nn::ParamStore<S>& params, double clip_norm) {
  if (!(clip_norm > 0.0)) raise(ErrorKind::InvalidConfig, "clip_norm must be > 0");
  double sq = 0.0;
  for (const auto& [_, p] : params)
    for (S g : p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  ClipResult r;
  r.norm_before = r.norm_after = std::sqrt(sq);
  r.finite = std::isfinite(r.norm_before);
  if (!r.finite || r.norm_before <= clip_norm) return r;
  const double f = clip_norm / r.norm_before;
  for (auto& [_, p] : params)
    for (S& g : p.grad) g = static_cast<S>(g * f);
  double after = 0.0;
  for (const auto& [_, p] : params)
    for (S g : p.grad) after += static_cast<double>(g) * static_cast<double>(g);
  r.norm_after = std::sqrt(after);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
  std::size_t t = 0;
};

template <class S>
void adam_update(nn::ParamStore<S>& params, AdamState& st, const TrainConfig& cfg, double lr) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (auto& [name, p] : params) {
    auto& [m, v] = st.moments[name];
    if (m.size() != p.value.size()) {
      m.assign(p.value.size(), 0.0);
      v.assign(p.value.size(), 0.0);
    }
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      p.value.data[i] = static_cast<S>(p.value.data[i] - lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps));
    }
  }
}

/// Linear warmup over the first warmup_fraction of steps, then linear decay
/// towards zero at total_steps.
inline double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  const double total = static_cast<double>(std::max<std::size_t>(total_steps, 1));
  const double warm = std::floor(cfg.warmup_fraction * total);
  const double s = static_cast<double>(step);
  if (warm > 0.0 && s < warm) return cfg.lr * (s + 1.0) / warm;
  const double rest = std::max(1.0, total - warm);
  return cfg.lr * std::max(0.05, 1.0 - (s - warm) / rest);
}

// ---------------------------------------------------------------------------
// CTC as a graph node

/// scale * CTC(-log p(target | log_probs)); validates the lattice first.
template <class S>
nn::BasicVar<S> ctc_node(nn::BasicVar<S> log_probs, const ctc::Labels& target, double scale) {
  const auto& v = log_probs.value();
  ctc::LogProbLattice lat(v.rows(), v.cols(), std::vector<double>(v.data.begin(), v.data.end()));
  auto res = std::make_shared<ctc::CtcResult>(ctc::ctc_loss(lat, target));
  auto out = nn::BasicTensor<S>::scalar(static_cast<S>(res->loss * scale));
  return log_probs.graph->add_node(
      std::move(out), {log_probs.id},
      [res, scale, xi = log_probs.id](nn::BasicGraph<S>& g, std::size_t self) {
        const double dy = g.node(self).grad[0] * scale;
        auto& dx = g.grad_of(xi);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += static_cast<S>(dy * res->grad[i]);
      },
      "ctc");
}

// ---------------------------------------------------------------------------
// Steps

struct Example {
  nn::Tensor frames;  // [T_in, C]
  ctc::Labels target;
  std::string reference;
};

inline std::vector<Example> make_examples(const signals::Dataset& ds, const tok::Tokenizer& tk, bool zscore) {
  std::vector<Example> out;
  out.reserve(ds.trials.size());
  for (const auto& t : ds.trials)
    out.push_back({signals::to_frames(t.recording, zscore), tk.encode(t.text).tokens.ids, tk.reference(t.text)});
  return out;
}

struct StepResult {
  double loss = 0.0;
  std::vector<DiagnosticFlag> flags;
  ClipResult clip;
  bool updated = false;
};

/// One optimizer step over the batch. Examples run one at a time with their
/// gradients summed, which equals a padded batch with masked frames.
inline StepResult train_step(enc::EncoderParams& params, AdamState& adam, std::span<const Example* const> batch,
                             const enc::EncoderConfig& ecfg, const TrainConfig& cfg, std::size_t step, double lr) {
  if (batch.empty()) raise(ErrorKind::InvalidInput, "train_step needs a non-empty batch");
  StepResult r;
  params.tensors.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    nn::Graph g(true, combine_seed(combine_seed(cfg.seed, step), i));
    nn::Var loss;
    try {
      auto out = enc::run_encoder(g, ecfg, params.tensors, g.input(batch[i]->frames));
      auto lp = out.log_probs;
      if (cfg.lattice_perturbation != 0.0)
        lp = nn::add(lp, g.constant(nn::Tensor::filled(lp.shape(), static_cast<float>(cfg.lattice_perturbation))));
      const double L = static_cast<double>(std::max<std::size_t>(1, batch[i]->target.size()));
      loss = ctc_node(lp, batch[i]->target, inv_b / L);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::InvalidLogProb) {
        r.flags.push_back({FlagKind::NegativeCtcInput, step, e.what()});
        r.loss = NAN;
        params.tensors.zero_grad();
        return r;
      }
      if (e.kind() == ErrorKind::InvalidInput) {  // non-finite activations
        r.flags.push_back({FlagKind::NonFiniteLoss, step, e.what()});
        r.loss = NAN;
        params.tensors.zero_grad();
        return r;
      }
      throw;
    }
    loss_sum += loss.value().data[0];
    g.backward(loss);
  }
  r.loss = loss_sum;
  if (!std::isfinite(r.loss)) {
    r.flags.push_back({FlagKind::NonFiniteLoss, step, "loss " + std::to_string(r.loss)});
    params.tensors.zero_grad();
    return r;
  }
  if (r.loss > cfg.watchdog_hard_threshold)
    r.flags.push_back({FlagKind::LossHighHard, step, "step loss " + std::to_string(r.loss)});
  if (cfg.clip_enabled) {
    r.clip = clip_gradients(params.tensors, cfg.clip_norm);
  } else {
    r.clip = clip_gradients(params.tensors, std::numeric_limits<double>::max());
  }
  if (!r.clip.finite) {
    r.flags.push_back({FlagKind::NonFiniteGrad, step, "gradient norm " + std::to_string(r.clip.norm_before)});
    params.tensors.zero_grad();
    return r;
  }
  adam_update(params.tensors, adam, cfg, lr);
  r.updated = true;
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  metrics::MetricsReport report;
  std::vector<std::string> hypotheses;
  std::vector<std::string> references;
  double token_error_rate = 0.0;
};

inline ctc::Labels decode(const ctc::LogProbLattice& lat, std::size_t beam_width) {
  if (beam_width <= 1) return ctc::greedy_decode(lat);
  auto hyps = ctc::beam_decode(lat, beam_width);
  return hyps.empty() ? ctc::Labels{} : hyps.front().labels;
}

/// Decodes every example. BLEU/ROUGE/WER compare rendered text; the
/// report's cer is the token error rate, which for the character vocabulary
/// is the usual CER.
inline Evaluation evaluate_examples(const std::vector<Example>& examples, const tok::Tokenizer& tk,
                                    const enc::EncoderConfig& ecfg, enc::EncoderParams& params,
                                    std::size_t beam_width = 1) {
  Evaluation ev;
  std::size_t edits = 0, ref_tokens = 0;
  for (const auto& ex : examples) {
    nn::Graph g(false);
    auto out = enc::run_encoder(g, ecfg, params.tensors, g.input(ex.frames));
    const auto labels = decode(enc::lattice_from_logits(out.logits.value()), beam_width);
    std::string hyp;
    try {
      hyp = tk.render(labels);
    } catch (const Error&) {
      hyp.clear();
    }
    ev.hypotheses.push_back(hyp);
    ev.references.push_back(ex.reference);
    edits += metrics::detail::levenshtein(labels, ex.target);
    ref_tokens += ex.target.size();
  }
  if (examples.empty()) return ev;
  ev.report = metrics::evaluate(ev.hypotheses, ev.references);
  ev.token_error_rate = ref_tokens ? static_cast<double>(edits) / static_cast<double>(ref_tokens) : 0.0;
  ev.report.cer = ev.token_error_rate;
  return ev;
}

// ---------------------------------------------------------------------------
// Training loop

enum class RunStatus { ok, failed };
inline std::string to_string(RunStatus s) { return s == RunStatus::ok ? "OK" : "FAILED"; }

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::vector<FlagKind> flags;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_cer = 0.0;
  double dev_wer = 0.0;
};

struct FitResult {
  enc::EncoderParams params;  // best dev checkpoint, else the last healthy one
  std::vector<TraceRow> trace;
  std::vector<DiagnosticFlag> flags;
  std::vector<EpochRecord> epochs;
  Evaluation dev;
  RunStatus status = RunStatus::ok;
  std::size_t steps = 0;
  std::size_t skipped_trials = 0;
  std::size_t best_epoch = 0;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Trains from `initial` (fresh init from cfg.seed when empty). Trials whose
/// targets cannot fit their lattice are dropped and counted.
inline FitResult fit(const signals::Dataset& train_set, const signals::Dataset& dev_set, const tok::Tokenizer& tk,
                     const enc::EncoderConfig& ecfg, const TrainConfig& cfg,
                     std::optional<enc::EncoderParams> initial = std::nullopt, const ProgressFn& progress = {}) {
  cfg.check();
  ecfg.check();
  if (train_set.trials.empty()) raise(ErrorKind::InvalidInput, "training split is empty");
  if (ecfg.vocab_size != tk.vocab_size())
    raise(ErrorKind::ConfigError, "encoder vocab_size " + std::to_string(ecfg.vocab_size) + " but tokenizer has " +
                                      std::to_string(tk.vocab_size()));
  FitResult res;
  res.params = initial ? std::move(*initial) : enc::init_params(ecfg, cfg.seed);
  enc::check_params(ecfg, res.params.tensors);

  auto feasible = [&](const Example& ex) {
    return ctc::min_frames(ex.target) <= enc::output_frames(ecfg, ex.frames.rows());
  };
  std::vector<Example> train;
  for (auto& ex : make_examples(train_set, tk, ecfg.zscore)) {
    if (feasible(ex)) train.push_back(std::move(ex));
    else ++res.skipped_trials;
  }
  if (train.empty()) raise(ErrorKind::DataError, "no training trial has a feasible CTC target");
  const auto dev = make_examples(dev_set, tk, ecfg.zscore);

  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min(total, cfg.max_steps);

  AdamState adam;
  Rng shuffle_rng(combine_seed(cfg.seed, 0x5eed));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> window;
  bool soft_active = false;
  std::size_t bad_grads = 0;
  double best_cer = INFINITY;
  enc::EncoderParams best = res.params;
  bool have_best = false;

  auto fail = [&](const DiagnosticFlag& f) {
    res.flags.push_back(f);
    res.status = RunStatus::failed;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs && res.steps < total && res.status == RunStatus::ok; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t b = 0; b < per_epoch && res.steps < total; ++b) {
      std::vector<const Example*> batch;
      for (std::size_t k = b * cfg.batch_size; k < std::min(order.size(), (b + 1) * cfg.batch_size); ++k)
        batch.push_back(&train[order[k]]);
      const std::size_t step = res.steps++;
      auto sr = train_step(res.params, adam, batch, ecfg, cfg, step, learning_rate(cfg, step, total));
      TraceRow row{step, sr.loss, {}};
      bool fatal = false;
      for (const auto& f : sr.flags) {
        row.flags.push_back(f.kind);
        if (f.kind == FlagKind::NonFiniteGrad) {
          res.flags.push_back(f);
          if (++bad_grads >= cfg.nonfinite_grad_patience) {
            fail({FlagKind::NonFiniteGrad, step, std::to_string(bad_grads) + " consecutive non-finite gradients"});
            fatal = true;
          }
        } else if (is_fatal(f.kind)) {
          fail(f);
          fatal = true;
        } else {
          res.flags.push_back(f);
        }
      }
      if (sr.updated) bad_grads = 0;
      if (!fatal && std::isfinite(sr.loss)) {
        window.push_back(sr.loss);
        if (window.size() > cfg.watchdog_window) window.erase(window.begin());
        for (const auto& f : watchdog(window, cfg, step)) {
          if (f.kind == FlagKind::LossHighSoft) {
            if (!soft_active && window.size() == cfg.watchdog_window) {
              res.flags.push_back(f);
              row.flags.push_back(f.kind);
              soft_active = true;
            }
          } else {
            row.flags.push_back(f.kind);
            fail(f);
            fatal = true;
          }
        }
        if (window.size() == cfg.watchdog_window && watchdog(window, cfg, step).empty()) soft_active = false;
        epoch_loss += sr.loss;
        ++epoch_steps;
      }
      res.trace.push_back(std::move(row));
      if (fatal) break;
    }
    if (res.status != RunStatus::ok) break;
    EpochRecord rec{epoch, epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : NAN, NAN, NAN};
    if (!dev.empty()) {
      auto ev = evaluate_examples(dev, tk, ecfg, res.params, cfg.beam_width);
      rec.dev_cer = ev.report.cer;
      rec.dev_wer = ev.report.wer;
      if (rec.dev_cer < best_cer) {
        best_cer = rec.dev_cer;
        best = res.params;
        have_best = true;
        res.best_epoch = epoch;
        res.dev = std::move(ev);
      }
    }
    res.epochs.push_back(rec);
    if (progress) progress(rec);
  }
  if (have_best) res.params = std::move(best);
  else if (!dev.empty()) res.dev = evaluate_examples(dev, tk, ecfg, res.params, cfg.beam_width);
  return res;
}

// ---------------------------------------------------------------------------
// Trace output

inline std::string flags_cell(const std::vector<FlagKind>& flags) {
  std::string s;
  for (auto k : flags) s += (s.empty() ? "" : ";") + to_string(k);
  return s;
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "step,loss,flag\n";
  char buf[64];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    os << r.step << ',' << buf << ',' << flags_cell(r.flags) << '\n';
  }
}

inline void write_flag_log(std::ostream& os, const std::vector<DiagnosticFlag>& flags) {
  os << "step,flag,payload\n";
  for (const auto& f : flags) {
    std::string p = f.payload;
    std::replace(p.begin(), p.end(), ',', ';');
    std::replace(p.begin(), p.end(), '\n', ' ');
    os << f.step << ',' << to_string(f.kind) << ',' << p << '\n';
  }
}

}  // namespace c2t::train
