#pragma once

// Corpus BLEU, ROUGE-1/2/L F1 and WER/CER over normalized, whitespace-split
// text. The reporting default is BLEU-4 with epsilon smoothing and ROUGE-1 F1.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "c2t/error.hpp"
#include "c2t/tokenizers/tokenizers.hpp"

namespace c2t::metrics {

enum class Smoothing { none, epsilon };
enum class Unit { word, character };

inline constexpr double kBleuEpsilon = 1e-9;

namespace detail {

/// Normalized words; empty text yields no words instead of throwing.
inline std::vector<std::string> words(std::string_view text) {
  try {
    return tok::split_words(tok::normalize(text));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::EmptyText) return {};
    throw;
  }
}

inline std::vector<std::string> reference_words(std::string_view text) {
  auto w = words(text);
  if (w.empty()) raise(ErrorKind::InvalidInput, "empty reference");
  return w;
}

inline std::string normalized_or_empty(std::string_view text) {
  try {
    return tok::normalize(text);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::EmptyText) return {};
    throw;
  }
}

using NGram = std::vector<std::string>;

inline std::map<NGram, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<NGram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++counts[NGram(toks.begin() + static_cast<std::ptrdiff_t>(i), toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

template <class T>
std::size_t levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

inline std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Corpus BLEU: geometric mean of clipped n-gram precisions times the
/// brevity penalty exp(1 - r/c) when c < r. Orders for which the
/// hypotheses contain no n-grams at all carry no evidence and are left out
/// of the mean; an empty hypothesis corpus scores 0.
inline double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                   std::size_t max_n = 4, Smoothing smoothing = Smoothing::epsilon) {
  if (hypotheses.size() != references.size())
    raise(ErrorKind::InvalidInput, "hypothesis and reference counts differ");
  if (max_n < 1) raise(ErrorKind::InvalidInput, "max_n must be >= 1");
  std::vector<double> matches(max_n, 0.0), totals(max_n, 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto hyp = detail::words(hypotheses[i]);
    const auto ref = detail::reference_words(references[i]);
    hyp_len += static_cast<double>(hyp.size());
    ref_len += static_cast<double>(ref.size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hc = detail::ngram_counts(hyp, n);
      const auto rc = detail::ngram_counts(ref, n);
      for (const auto& [gram, count] : hc) {
        auto it = rc.find(gram);
        matches[n - 1] += static_cast<double>(std::min(count, it == rc.end() ? 0 : it->second));
        totals[n - 1] += static_cast<double>(count);
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (totals[n] == 0.0) continue;
    double m = matches[n];
    if (m == 0.0) {
      if (smoothing == Smoothing::none) return 0.0;
      m = kBleuEpsilon;
    }
    log_sum += std::log(m / totals[n]);
    ++orders;
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return std::clamp(bp * std::exp(log_sum / static_cast<double>(orders)), 0.0, 1.0);
}

struct RougeScores {
  double rouge1_f = 0.0;
  double rouge2_f = 0.0;
  double rougeL_f = 0.0;
};

/// ROUGE-1/2 overlap F1 and LCS-based ROUGE-L F1 for one pair. An order at
/// which neither side has n-grams scores 1 when the texts are identical.
inline RougeScores rouge(std::string_view hypothesis, std::string_view reference) {
  const auto ref = detail::reference_words(reference);
  const auto hyp = detail::words(hypothesis);
  auto overlap_f = [&](std::size_t n) {
    const auto hc = detail::ngram_counts(hyp, n);
    const auto rc = detail::ngram_counts(ref, n);
    double h_total = 0.0, r_total = 0.0, overlap = 0.0;
    for (const auto& [g, c] : hc) h_total += static_cast<double>(c);
    for (const auto& [g, c] : rc) {
      r_total += static_cast<double>(c);
      auto it = hc.find(g);
      if (it != hc.end()) overlap += static_cast<double>(std::min(c, it->second));
    }
    if (h_total == 0.0 && r_total == 0.0) return hyp == ref ? 1.0 : 0.0;
    if (h_total == 0.0 || r_total == 0.0) return 0.0;
    return detail::f1(overlap / h_total, overlap / r_total);
  };
  RougeScores s;
  s.rouge1_f = overlap_f(1);
  s.rouge2_f = overlap_f(2);
  if (!hyp.empty()) {
    const double l = static_cast<double>(detail::lcs(hyp, ref));
    s.rougeL_f = detail::f1(l / static_cast<double>(hyp.size()), l / static_cast<double>(ref.size()));
  }
  return s;
}

/// Mean of per-pair ROUGE scores.
inline RougeScores rouge(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size())
    raise(ErrorKind::InvalidInput, "hypothesis and reference counts differ");
  RougeScores mean;
  if (hypotheses.empty()) return mean;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto s = rouge(hypotheses[i], references[i]);
    mean.rouge1_f += s.rouge1_f;
    mean.rouge2_f += s.rouge2_f;
    mean.rougeL_f += s.rougeL_f;
  }
  const double n = static_cast<double>(hypotheses.size());
  mean.rouge1_f /= n;
  mean.rouge2_f /= n;
  mean.rougeL_f /= n;
  return mean;
}

struct EditCounts {
  std::size_t edits = 0;
  std::size_t reference_length = 0;
  double rate() const { return static_cast<double>(edits) / static_cast<double>(reference_length); }
};

inline EditCounts edit_counts(std::string_view hypothesis, std::string_view reference, Unit unit) {
  if (unit == Unit::word) {
    const auto ref = detail::reference_words(reference);
    return {detail::levenshtein(detail::words(hypothesis), ref), ref.size()};
  }
  const std::string r = detail::normalized_or_empty(reference);
  if (r.empty()) raise(ErrorKind::InvalidInput, "empty reference");
  const std::string h = detail::normalized_or_empty(hypothesis);
  return {detail::levenshtein(std::vector<char>(h.begin(), h.end()), std::vector<char>(r.begin(), r.end())),
          r.size()};
}

/// Levenshtein distance (unit costs) over words or characters, divided by
/// the reference length. Character unit gives CER.
inline double wer(std::string_view hypothesis, std::string_view reference, Unit unit = Unit::word) {
  return edit_counts(hypothesis, reference, unit).rate();
}

/// Corpus rate: total edits over total reference length.
inline double corpus_error_rate(const std::vector<std::string>& hypotheses,
                                const std::vector<std::string>& references, Unit unit) {
  if (hypotheses.size() != references.size())
    raise(ErrorKind::InvalidInput, "hypothesis and reference counts differ");
  EditCounts total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto c = edit_counts(hypotheses[i], references[i], unit);
    total.edits += c.edits;
    total.reference_length += c.reference_length;
  }
  if (total.reference_length == 0) raise(ErrorKind::InvalidInput, "empty reference corpus");
  return total.rate();
}

struct MetricsReport {
  double bleu = 0.0;
  double rouge1_f = 0.0;
  double rouge2_f = 0.0;
  double rougeL_f = 0.0;
  double wer = 0.0;
  double cer = 0.0;
  std::size_t hypotheses = 0;
  std::size_t reference_tokens = 0;

  nlohmann::json to_json() const {
    return {{"bleu", bleu},         {"rouge1_f", rouge1_f}, {"rouge2_f", rouge2_f},
            {"rougeL_f", rougeL_f}, {"wer", wer},           {"cer", cer},
            {"hypotheses", hypotheses}, {"reference_tokens", reference_tokens}};
  }
};

inline MetricsReport evaluate(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references, std::size_t max_n = 4,
                              Smoothing smoothing = Smoothing::epsilon) {
  MetricsReport r;
  r.bleu = bleu(hypotheses, references, max_n, smoothing);
  const auto rg = rouge(hypotheses, references);
  r.rouge1_f = rg.rouge1_f;
  r.rouge2_f = rg.rouge2_f;
  r.rougeL_f = rg.rougeL_f;
  r.wer = corpus_error_rate(hypotheses, references, Unit::word);
  r.cer = corpus_error_rate(hypotheses, references, Unit::character);
  r.hypotheses = hypotheses.size();
  for (const auto& ref : references) r.reference_tokens += detail::words(ref).size();
  return r;
}

}  // namespace c2t::metrics
