#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "c2t/ctc/lattice.hpp"
#include "c2t/error.hpp"
#include "c2t/numerics/tensor.hpp"
#include "c2t/tokenizers/vocabulary.hpp"

namespace c2t::ctc {

using tok::kBlank;
using tok::TokenId;
using Labels = std::vector<TokenId>;

struct CtcResult {
  double loss = 0.0;               // -log p(target | lattice)
  std::vector<double> grad;        // T x V, d loss / d lattice entry
  std::vector<double> occupancy;   // T x V posterior over symbols per frame
};

/// Fewest frames that can emit the target: one per label plus a blank
/// between each adjacent equal pair.
inline std::size_t min_frames(const Labels& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

/// Forward-backward over the blank-interleaved target, in log space with
/// double accumulation. The lattice is not validated; entries are treated as
/// free log-scores, so grad is exact for perturbations of any single entry.
inline CtcResult ctc_forward_backward(const LogProbLattice& y, const Labels& target) {
  const std::size_t T = y.T, V = y.V, L = target.size();
  for (TokenId id : target) {
    if (id == kBlank) raise(ErrorKind::TokenError, "target contains the blank id");
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      raise(ErrorKind::TokenError, "target id " + std::to_string(id) + " outside lattice vocabulary");
  }
  if (T == 0 || T < min_frames(target))
    raise(ErrorKind::TargetTooLong, "target of " + std::to_string(L) + " labels needs " +
                                        std::to_string(min_frames(target)) + " frames, lattice has " +
                                        std::to_string(T));
  const std::size_t S = 2 * L + 1;
  std::vector<TokenId> ext(S, kBlank);
  for (std::size_t i = 0; i < L; ++i) ext[2 * i + 1] = target[i];
  auto can_skip = [&](std::size_t s) {  // transition s-2 -> s allowed
    return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
  };

  std::vector<double> alpha(T * S, -INFINITY), beta(T * S, -INFINITY);
  auto A = [&](std::size_t t, std::size_t s) -> double& { return alpha[t * S + s]; };
  auto B = [&](std::size_t t, std::size_t s) -> double& { return beta[t * S + s]; };
  auto emit = [&](std::size_t t, std::size_t s) { return y.at(t, static_cast<std::size_t>(ext[s])); };

  A(0, 0) = emit(0, 0);
  if (S > 1) A(0, 1) = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = A(t - 1, s);
      if (s >= 1) a = nn::log_add(a, A(t - 1, s - 1));
      if (can_skip(s)) a = nn::log_add(a, A(t - 1, s - 2));
      A(t, s) = a == -INFINITY ? -INFINITY : a + emit(t, s);
    }
  }
  const double logp = S > 1 ? nn::log_add(A(T - 1, S - 1), A(T - 1, S - 2)) : A(T - 1, 0);

  // beta excludes the emission at its own frame.
  B(T - 1, S - 1) = 0.0;
  if (S > 1) B(T - 1, S - 2) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = B(t + 1, s) + emit(t + 1, s);
      if (s + 1 < S) b = nn::log_add(b, B(t + 1, s + 1) + emit(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = nn::log_add(b, B(t + 1, s + 2) + emit(t + 1, s + 2));
      B(t, s) = std::isnan(b) ? -INFINITY : b;
    }
  }

  CtcResult r;
  r.loss = -logp;
  r.occupancy.assign(T * V, 0.0);
  if (std::isfinite(logp)) {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t s = 0; s < S; ++s) {
        const double lg = A(t, s) + B(t, s) - logp;
        if (lg > -INFINITY) r.occupancy[t * V + static_cast<std::size_t>(ext[s])] += std::exp(lg);
      }
  }
  r.grad.resize(T * V);
  for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] = -r.occupancy[i];
  return r;
}

/// CTC negative log-likelihood of a validated lattice. A lattice with a
/// positive entry or an unnormalized row is rejected with InvalidLogProb, so
/// the returned loss is never negative.
inline CtcResult ctc_loss(const LogProbLattice& lattice, const Labels& target) {
  require_valid(lattice);
  auto r = ctc_forward_backward(lattice, target);
  // Rounding can leave -0.0 or -1e-17 on a certain path.
  r.loss = std::max(0.0, r.loss);
  return r;
}

/// Merge adjacent repeats, then drop blanks.
inline Labels collapse(const Labels& path) {
  Labels out;
  TokenId prev = -1;
  for (TokenId id : path) {
    if (id != prev && id != kBlank) out.push_back(id);
    prev = id;
  }
  return out;
}

/// Per-frame argmax; ties go to the lowest id.
inline Labels best_path(const LogProbLattice& lattice) {
  Labels path(lattice.T);
  for (std::size_t t = 0; t < lattice.T; ++t) {
    const auto row = lattice.row(t);
    path[t] = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return path;
}

inline Labels greedy_decode(const LogProbLattice& lattice) {
  require_valid(lattice);
  return collapse(best_path(lattice));
}

struct Hypothesis {
  Labels labels;
  double score = 0.0;  // log p(labels | lattice) + alpha * |labels|
};

/// CTC prefix beam search. Each prefix tracks the log-probability of paths
/// ending in blank and ending in its last label, so without pruning the
/// score of every prefix is its exact marginal probability. With
/// beam_width = 1 only the single best prefix survives each frame, which is
/// a path-greedy variant and may differ from greedy_decode.
inline std::vector<Hypothesis> beam_decode(const LogProbLattice& lattice, std::size_t beam_width,
                                           double alpha = 0.0) {
  if (beam_width < 1) raise(ErrorKind::InvalidInput, "beam_width must be >= 1");
  require_valid(lattice);
  struct Mass {
    double blank = -INFINITY;
    double label = -INFINITY;
    double total() const { return nn::log_add(blank, label); }
  };
  auto ranked = [&](const std::map<Labels, Mass>& beams) {
    std::vector<Hypothesis> out;
    out.reserve(beams.size());
    for (const auto& [labels, m] : beams)
      out.push_back({labels, m.total() + alpha * static_cast<double>(labels.size())});
    // std::map iteration is lexicographic, so stable_sort breaks score ties
    // by label sequence.
    std::stable_sort(out.begin(), out.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
    return out;
  };

  std::map<Labels, Mass> beams;
  beams[{}].blank = 0.0;
  for (std::size_t t = 0; t < lattice.T; ++t) {
    std::map<Labels, Mass> next;
    for (const auto& [prefix, m] : beams) {
      const double total = m.total();
      auto& same = next[prefix];
      same.blank = nn::log_add(same.blank, total + lattice.at(t, kBlank));
      if (!prefix.empty()) {
        const auto last = static_cast<std::size_t>(prefix.back());
        same.label = nn::log_add(same.label, m.label + lattice.at(t, last));
      }
      for (std::size_t k = 1; k < lattice.V; ++k) {
        const double p = lattice.at(t, k);
        if (p == -INFINITY) continue;
        Labels extended = prefix;
        extended.push_back(static_cast<TokenId>(k));
        auto& ext = next[extended];
        const bool repeat = !prefix.empty() && static_cast<std::size_t>(prefix.back()) == k;
        ext.label = nn::log_add(ext.label, (repeat ? m.blank : total) + p);
      }
    }
    if (next.size() <= beam_width) {
      beams = std::move(next);
      continue;
    }
    auto order = ranked(next);
    beams.clear();
    for (std::size_t i = 0; i < beam_width; ++i) beams.emplace(order[i].labels, next.at(order[i].labels));
  }
  auto out = ranked(beams);
  std::erase_if(out, [](const Hypothesis& h) { return h.score == -INFINITY; });
  if (out.size() > beam_width) out.resize(beam_width);
  return out;
}

}  // namespace c2t::ctc
