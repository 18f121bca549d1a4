#pragma once

// Conformer, BENDR-style and EEG-Conformer-style encoders. Every family is
// a front-end that subsamples time by `subsample`, a stack of blocks, and
// the shared head: fully-connected + ReLU, projection to V, log_softmax.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2t/ctc/lattice.hpp"
#include "c2t/error.hpp"
#include "c2t/numerics/graph.hpp"
#include "c2t/numerics/ops.hpp"
#include "c2t/rng.hpp"
#include "c2t/signals/signals.hpp"

namespace c2t::enc {

using nn::BasicGraph;
using nn::BasicTensor;
using nn::BasicVar;
using nn::ParamStore;

enum class Family { conformer, bendr, eeg_conformer };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::conformer: return "conformer";
    case Family::bendr: return "bendr";
    case Family::eeg_conformer: return "eeg_conformer";
  }
  return "conformer";
}

inline Family parse_family(const std::string& s) {
  if (s == "conformer") return Family::conformer;
  if (s == "bendr") return Family::bendr;
  if (s == "eeg_conformer" || s == "eeg-conformer") return Family::eeg_conformer;
  raise(ErrorKind::ConfigError, "unknown encoder family '" + s + "'");
}

struct EncoderConfig {
  Family family = Family::conformer;
  std::size_t in_channels = 8;
  std::size_t blocks = 2;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t conv_kernel = 15;
  std::size_t subsample = 4;
  std::size_t vocab_size = 29;
  double dropout = 0.1;
  std::size_t ff_mult = 4;
  // Width of the head's fully-connected layer; 0 means model_dim.
  std::size_t head_hidden = 0;
  // EEG-Conformer patch embedding.
  std::size_t eeg_filters = 8;
  std::size_t eeg_kernel = 13;
  bool zscore = true;

  std::size_t hidden() const { return head_hidden ? head_hidden : model_dim; }

  void check() const {
    auto fail = [](const std::string& m) { raise(ErrorKind::ConfigError, m); };
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (blocks < 1) fail("blocks must be >= 1");
    if (model_dim < 1 || heads < 1) fail("model_dim and heads must be >= 1");
    if (model_dim % heads != 0)
      fail("heads (" + std::to_string(heads) + ") must divide model_dim (" + std::to_string(model_dim) + ")");
    if (conv_kernel < 1) fail("conv_kernel must be >= 1");
    if (subsample < 1) fail("subsample must be >= 1");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (ff_mult < 1) fail("ff_mult must be >= 1");
    if (eeg_filters < 1 || eeg_kernel < 1) fail("eeg_filters and eeg_kernel must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"family", to_string(c.family)}, {"in_channels", c.in_channels}, {"blocks", c.blocks},
       {"model_dim", c.model_dim},      {"heads", c.heads},             {"conv_kernel", c.conv_kernel},
       {"subsample", c.subsample},      {"vocab_size", c.vocab_size},   {"dropout", c.dropout},
       {"ff_mult", c.ff_mult},          {"head_hidden", c.head_hidden}, {"eeg_filters", c.eeg_filters},
       {"eeg_kernel", c.eeg_kernel},    {"zscore", c.zscore}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  if (j.contains("family")) c.family = parse_family(j["family"].get<std::string>());
  c.in_channels = j.value("in_channels", c.in_channels);
  c.blocks = j.value("blocks", c.blocks);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.heads = j.value("heads", c.heads);
  c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
  c.subsample = j.value("subsample", c.subsample);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  c.ff_mult = j.value("ff_mult", c.ff_mult);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.eeg_filters = j.value("eeg_filters", c.eeg_filters);
  c.eeg_kernel = j.value("eeg_kernel", c.eeg_kernel);
  c.zscore = j.value("zscore", c.zscore);
}

/// Prime factors of s in ascending order; {1} for s = 1. The strided
/// front-ends use one layer per factor.
inline std::vector<std::size_t> stride_factors(std::size_t s) {
  if (s <= 1) return {1};
  std::vector<std::size_t> f;
  for (std::size_t p = 2; p * p <= s; ++p)
    while (s % p == 0) {
      f.push_back(p);
      s /= p;
    }
  if (s > 1) f.push_back(s);
  return f;
}

inline std::size_t frontend_kernel(std::size_t stride) { return 2 * stride + 1; }

inline std::size_t output_frames(const EncoderConfig& cfg, std::size_t t_in) {
  return (t_in + cfg.subsample - 1) / cfg.subsample;
}

// ---------------------------------------------------------------------------
// Parameter layout

struct ParamSpec {
  std::string name;
  nn::Shape shape;
  enum class Init { uniform, ones, zeros } init = Init::uniform;
  std::size_t fan_in = 1;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ull;
  return h;
}

inline void add_linear(std::vector<ParamSpec>& out, const std::string& p, std::size_t in, std::size_t n) {
  out.push_back({p + ".w", {in, n}, ParamSpec::Init::uniform, in});
  out.push_back({p + ".b", {n}, ParamSpec::Init::uniform, in});
}

inline void add_norm(std::vector<ParamSpec>& out, const std::string& p, std::size_t n) {
  out.push_back({p + ".g", {n}, ParamSpec::Init::ones, 1});
  out.push_back({p + ".b", {n}, ParamSpec::Init::zeros, 1});
}

inline void add_ff(std::vector<ParamSpec>& out, const std::string& p, const EncoderConfig& c) {
  add_norm(out, p + ".ln", c.model_dim);
  add_linear(out, p + ".l1", c.model_dim, c.ff_mult * c.model_dim);
  add_linear(out, p + ".l2", c.ff_mult * c.model_dim, c.model_dim);
}

inline void add_mhsa(std::vector<ParamSpec>& out, const std::string& p, const EncoderConfig& c) {
  add_norm(out, p + ".ln", c.model_dim);
  for (const char* n : {".q", ".k", ".v", ".o"}) add_linear(out, p + n, c.model_dim, c.model_dim);
}

}  // namespace detail

/// Every parameter the configuration implies, in a fixed order.
inline std::vector<ParamSpec> param_specs(const EncoderConfig& cfg) {
  cfg.check();
  using detail::add_linear;
  using detail::add_norm;
  std::vector<ParamSpec> out;
  const std::size_t D = cfg.model_dim;
  switch (cfg.family) {
    case Family::conformer:
    case Family::bendr: {
      std::size_t cin = cfg.in_channels;
      const auto factors = stride_factors(cfg.subsample);
      for (std::size_t i = 0; i < factors.size(); ++i) {
        const std::size_t K = frontend_kernel(factors[i]);
        const std::string p = "frontend.conv" + std::to_string(i);
        out.push_back({p + ".w", {K, cin, D}, ParamSpec::Init::uniform, K * cin});
        out.push_back({p + ".b", {D}, ParamSpec::Init::uniform, K * cin});
        if (cfg.family == Family::bendr) add_norm(out, "frontend.ln" + std::to_string(i), D);
        cin = D;
      }
      if (cfg.family == Family::conformer) add_linear(out, "frontend.proj", D, D);
      break;
    }
    case Family::eeg_conformer: {
      const std::size_t F = cfg.eeg_filters;
      out.push_back({"frontend.temporal.w", {cfg.eeg_kernel, F}, ParamSpec::Init::uniform, cfg.eeg_kernel});
      out.push_back({"frontend.temporal.b", {F}, ParamSpec::Init::uniform, cfg.eeg_kernel});
      add_linear(out, "frontend.spatial", cfg.in_channels * F, F);
      add_linear(out, "frontend.proj", F, D);
      break;
    }
  }
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    if (cfg.family == Family::conformer) {
      detail::add_ff(out, p + ".ff1", cfg);
      detail::add_mhsa(out, p + ".mhsa", cfg);
      add_norm(out, p + ".conv.ln", D);
      add_linear(out, p + ".conv.pw1", D, 2 * D);
      out.push_back({p + ".conv.dw.w", {cfg.conv_kernel, D}, ParamSpec::Init::uniform, cfg.conv_kernel});
      out.push_back({p + ".conv.dw.b", {D}, ParamSpec::Init::uniform, cfg.conv_kernel});
      add_norm(out, p + ".conv.norm", D);
      add_linear(out, p + ".conv.pw2", D, D);
      detail::add_ff(out, p + ".ff2", cfg);
      add_norm(out, p + ".ln", D);
    } else {
      detail::add_mhsa(out, p + ".mhsa", cfg);
      detail::add_ff(out, p + ".ff", cfg);
    }
  }
  if (cfg.family != Family::conformer) add_norm(out, "trunk.ln", D);
  add_linear(out, "head.fc", D, cfg.hidden());
  add_linear(out, "head.proj", cfg.hidden(), cfg.vocab_size);
  return out;
}

template <class S = float>
struct BasicEncoderParams {
  ParamStore<S> tensors;
  std::uint64_t seed = 0;

  std::size_t count() const { return tensors.scalar_count(); }

  template <class U>
  BasicEncoderParams<U> cast() const {
    return {tensors.template cast<U>(), seed};
  }
};

using EncoderParams = BasicEncoderParams<float>;

/// Uniform(+-1/sqrt(fan_in)) weights and biases, unit norm gains, zero norm
/// offsets. Each tensor draws from its own stream keyed by name.
/// Adds freshly initialized tensors for `specs` to `store`.
inline void materialize(ParamStore<float>& store, const std::vector<ParamSpec>& specs, std::uint64_t seed) {
  for (const auto& spec : specs) {
    auto t = nn::Tensor::zeros(spec.shape);
    if (spec.init == ParamSpec::Init::ones) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (spec.init == ParamSpec::Init::uniform) {
      Rng rng(combine_seed(seed, detail::fnv1a(spec.name)));
      const double a = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (auto& v : t.data) v = static_cast<float>(rng.uniform(-a, a));
    }
    store.add(spec.name, std::move(t));
  }
}

inline EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderParams params;
  params.seed = seed;
  materialize(params.tensors, param_specs(cfg), seed);
  return params;
}

/// Throws ConfigError when a checkpoint's tensors do not match the config.
template <class S>
void check_params(const EncoderConfig& cfg, const ParamStore<S>& store) {
  for (const auto& spec : param_specs(cfg)) {
    if (!store.contains(spec.name)) raise(ErrorKind::ConfigError, "missing parameter " + spec.name);
    if (store.at(spec.name).value.shape != spec.shape)
      raise(ErrorKind::ConfigError, "parameter " + spec.name + " has shape " +
                                        nn::shape_str(store.at(spec.name).value.shape) + ", config implies " +
                                        nn::shape_str(spec.shape));
  }
}

// ---------------------------------------------------------------------------
// Forward pass

template <class S>
struct EncoderOutput {
  BasicVar<S> latents;  // front-end output [T, D], before masking
  std::vector<BasicVar<S>> block_outputs;
  BasicVar<S> logits;     // [T, V]
  BasicVar<S> log_probs;  // [T, V]
};

/// Sinusoidal position code [T, D].
template <class S>
BasicTensor<S> positional_encoding(std::size_t T, std::size_t D) {
  auto pe = BasicTensor<S>::zeros({T, D});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < D; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(D));
      pe.data[t * D + i] = static_cast<S>(i % 2 ? std::cos(t * freq) : std::sin(t * freq));
    }
  return pe;
}

namespace detail {

template <class S>
struct Ctx {
  BasicGraph<S>& g;
  ParamStore<S>& P;
  const EncoderConfig& cfg;

  BasicVar<S> p(const std::string& name) { return g.param(P.at(name)); }
  BasicVar<S> lin(BasicVar<S> x, const std::string& name) { return nn::linear(x, p(name + ".w"), p(name + ".b")); }
  BasicVar<S> ln(BasicVar<S> x, const std::string& name) {
    return nn::layernorm(x, std::optional(p(name + ".g")), std::optional(p(name + ".b")));
  }
  BasicVar<S> drop(BasicVar<S> x) { return cfg.dropout > 0.0 ? nn::dropout(x, cfg.dropout) : x; }

  BasicVar<S> ff(BasicVar<S> x, const std::string& name, bool swish) {
    auto h = lin(ln(x, name + ".ln"), name + ".l1");
    h = swish ? nn::swish(h) : nn::gelu(h);
    return drop(lin(drop(h), name + ".l2"));
  }

  BasicVar<S> mhsa(BasicVar<S> x, const std::string& name) {
    auto h = ln(x, name + ".ln");
    auto a = nn::attention(lin(h, name + ".q"), lin(h, name + ".k"), lin(h, name + ".v"), cfg.heads);
    return drop(lin(a, name + ".o"));
  }
};

template <class S>
BasicVar<S> frontend(Ctx<S>& c, BasicVar<S> x) {
  const auto& cfg = c.cfg;
  switch (cfg.family) {
    case Family::conformer:
    case Family::bendr: {
      const auto factors = stride_factors(cfg.subsample);
      for (std::size_t i = 0; i < factors.size(); ++i) {
        const std::string n = "frontend.conv" + std::to_string(i);
        x = nn::conv1d(x, c.p(n + ".w"), c.p(n + ".b"), factors[i]);
        x = cfg.family == Family::conformer ? nn::relu(x) : nn::gelu(c.ln(x, "frontend.ln" + std::to_string(i)));
      }
      return cfg.family == Family::conformer ? c.lin(x, "frontend.proj") : x;
    }
    case Family::eeg_conformer: {
      x = nn::channel_conv(x, c.p("frontend.temporal.w"), c.p("frontend.temporal.b"));
      x = nn::elu(c.lin(x, "frontend.spatial"));
      x = nn::avg_pool(x, cfg.subsample);
      return c.lin(x, "frontend.proj");
    }
  }
  return x;
}

}  // namespace detail

/// Runs one encoder on x[T_in, C]. Rows listed in `mask` are replaced by the
/// `pretrain.mask_emb` parameter after the front-end.
template <class S>
EncoderOutput<S> run_encoder(BasicGraph<S>& g, const EncoderConfig& cfg, ParamStore<S>& P, BasicVar<S> x,
                             const std::vector<std::size_t>* mask = nullptr) {
  if (x.value().rank() != 2 || x.cols() != cfg.in_channels)
    raise(ErrorKind::ShapeError, "encoder expects [T, " + std::to_string(cfg.in_channels) + "] input, got " +
                                     nn::shape_str(x.shape()));
  if (output_frames(cfg, x.rows()) == 0) raise(ErrorKind::InputTooShort, "encoder input has no frames");
  detail::Ctx<S> c{g, P, cfg};
  EncoderOutput<S> out;
  out.latents = detail::frontend(c, x);
  auto h = out.latents;
  if (mask && !mask->empty()) h = nn::replace_rows(h, *mask, c.p("pretrain.mask_emb"));
  h = nn::add(h, g.constant(positional_encoding<S>(h.rows(), cfg.model_dim)));
  h = c.drop(h);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    if (cfg.family == Family::conformer) {
      h = nn::add(h, nn::scale(c.ff(h, p + ".ff1", true), 0.5));
      h = nn::add(h, c.mhsa(h, p + ".mhsa"));
      auto m = c.lin(c.ln(h, p + ".conv.ln"), p + ".conv.pw1");
      m = nn::depthwise_conv1d(nn::glu(m), c.p(p + ".conv.dw.w"), c.p(p + ".conv.dw.b"));
      m = nn::swish(c.ln(m, p + ".conv.norm"));
      h = nn::add(h, c.drop(c.lin(m, p + ".conv.pw2")));
      h = nn::add(h, nn::scale(c.ff(h, p + ".ff2", true), 0.5));
      h = c.ln(h, p + ".ln");
    } else {
      h = nn::add(h, c.mhsa(h, p + ".mhsa"));
      h = nn::add(h, c.ff(h, p + ".ff", false));
    }
    out.block_outputs.push_back(h);
  }
  if (cfg.family != Family::conformer) h = c.ln(h, "trunk.ln");
  h = c.drop(nn::relu(c.lin(h, "head.fc")));
  out.logits = c.lin(h, "head.proj");
  out.log_probs = nn::log_softmax(out.logits);
  return out;
}

/// Lattice from logits, normalized in double precision.
template <class S>
ctc::LogProbLattice lattice_from_logits(const BasicTensor<S>& logits) {
  const std::size_t T = logits.rows(), V = logits.cols();
  std::vector<double> values;
  values.reserve(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> row(logits.data.begin() + static_cast<std::ptrdiff_t>(t * V),
                            logits.data.begin() + static_cast<std::ptrdiff_t>((t + 1) * V));
    const auto lp = nn::log_softmax(row);
    values.insert(values.end(), lp.begin(), lp.end());
  }
  return ctc::LogProbLattice(T, V, std::move(values));
}

/// Inference pass (dropout off) on a recording of any family.
inline ctc::LogProbLattice encode(const signals::RawRecording& rec, const EncoderConfig& cfg, EncoderParams& params) {
  cfg.check();
  if (rec.channels != cfg.in_channels)
    raise(ErrorKind::ShapeError, "recording has " + std::to_string(rec.channels) + " channels, encoder expects " +
                                     std::to_string(cfg.in_channels));
  if (rec.frames() == 0) raise(ErrorKind::InputTooShort, "empty recording");
  nn::Graph g(false);
  auto out = run_encoder(g, cfg, params.tensors, g.input(signals::to_frames(rec, cfg.zscore)));
  return lattice_from_logits(out.logits.value());
}

namespace detail {
inline ctc::LogProbLattice encode_as(Family f, const signals::RawRecording& rec, const EncoderConfig& cfg,
                                     EncoderParams& params) {
  if (cfg.family != f) raise(ErrorKind::ConfigError, "config family is " + to_string(cfg.family));
  return encode(rec, cfg, params);
}
}  // namespace detail

inline ctc::LogProbLattice conformer_forward(const signals::RawRecording& rec, const EncoderConfig& cfg,
                                             EncoderParams& params) {
  return detail::encode_as(Family::conformer, rec, cfg, params);
}
inline ctc::LogProbLattice bendr_forward(const signals::RawRecording& rec, const EncoderConfig& cfg,
                                         EncoderParams& params) {
  return detail::encode_as(Family::bendr, rec, cfg, params);
}
inline ctc::LogProbLattice eeg_conformer_forward(const signals::RawRecording& rec, const EncoderConfig& cfg,
                                                 EncoderParams& params) {
  return detail::encode_as(Family::eeg_conformer, rec, cfg, params);
}

// ---------------------------------------------------------------------------
// Cost estimate

/// Multiply-add count times two, split by stage.
struct FlopEstimate {
  double frontend = 0.0;
  double blocks = 0.0;
  double head = 0.0;
  double total() const { return frontend + blocks + head; }
};

inline FlopEstimate count_flops(const EncoderConfig& cfg, std::size_t t_in) {
  cfg.check();
  FlopEstimate f;
  if (t_in == 0) return f;
  const double D = static_cast<double>(cfg.model_dim);
  const double C = static_cast<double>(cfg.in_channels);
  const double T = static_cast<double>(output_frames(cfg, t_in));
  const double FF = static_cast<double>(cfg.ff_mult) * D;
  switch (cfg.family) {
    case Family::conformer:
    case Family::bendr: {
      std::size_t len = t_in;
      double cin = C;
      for (std::size_t s : stride_factors(cfg.subsample)) {
        len = (len + s - 1) / s;
        f.frontend += 2.0 * static_cast<double>(len) * static_cast<double>(frontend_kernel(s)) * cin * D;
        cin = D;
      }
      if (cfg.family == Family::conformer) f.frontend += 2.0 * T * D * D;
      break;
    }
    case Family::eeg_conformer: {
      const double F = static_cast<double>(cfg.eeg_filters);
      const double Ti = static_cast<double>(t_in);
      f.frontend = 2.0 * Ti * C * F * static_cast<double>(cfg.eeg_kernel) + 2.0 * Ti * C * F * F + 2.0 * T * F * D;
      break;
    }
  }
  const double attn = 4.0 * 2.0 * T * D * D + 2.0 * 2.0 * T * T * D;
  const double ff = 2.0 * 2.0 * T * D * FF;
  double per_block = attn;
  if (cfg.family == Family::conformer)
    per_block += 2.0 * ff + 2.0 * T * D * 2.0 * D + 2.0 * T * D * static_cast<double>(cfg.conv_kernel) +
                 2.0 * T * D * D;
  else
    per_block += ff;
  f.blocks = static_cast<double>(cfg.blocks) * per_block;
  const double H = static_cast<double>(cfg.hidden());
  f.head = 2.0 * T * D * H + 2.0 * T * H * static_cast<double>(cfg.vocab_size);
  return f;
}

}  // namespace c2t::enc
