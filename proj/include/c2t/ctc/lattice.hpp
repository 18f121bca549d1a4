#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "c2t/error.hpp"
#include "c2t/numerics/tensor.hpp"

namespace c2t::ctc {

// An entry counts as positive above this slack; a row is unnormalized when
// |sum(exp(row)) - 1| exceeds the residual tolerance.
inline constexpr double kPositiveSlack = 1e-9;
inline constexpr double kNormTolerance = 1e-6;

/// T x V per-frame log-probabilities, row-major, held in double.
struct LogProbLattice {
  std::size_t T = 0;
  std::size_t V = 0;
  std::vector<double> values;

  LogProbLattice() = default;
  LogProbLattice(std::size_t frames, std::size_t vocab, std::vector<double> v)
      : T(frames), V(vocab), values(std::move(v)) {
    if (T * V != values.size() || V == 0)
      raise(ErrorKind::ShapeError, "lattice dims do not match value count");
  }

  static LogProbLattice from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    std::vector<double> v;
    for (const auto& r : rows) {
      if (r.size() != rows[0].size()) raise(ErrorKind::ShapeError, "ragged lattice rows");
      v.insert(v.end(), r.begin(), r.end());
    }
    return LogProbLattice(rows.size(), rows[0].size(), std::move(v));
  }

  template <class S>
  static LogProbLattice from_tensor(const nn::BasicTensor<S>& t) {
    return LogProbLattice(t.rows(), t.cols(), std::vector<double>(t.data.begin(), t.data.end()));
  }

  double at(std::size_t t, std::size_t k) const { return values[t * V + k]; }
  double& at(std::size_t t, std::size_t k) { return values[t * V + k]; }
  std::span<const double> row(std::size_t t) const { return {values.data() + t * V, V}; }
};

struct LatticeDiagnostic {
  bool positive_entry = false;
  bool normalization_violation = false;
  bool non_finite = false;
  std::vector<double> row_max;
  std::vector<double> row_residual;

  bool ok() const { return !positive_entry && !normalization_violation && !non_finite; }

  std::string message() const {
    std::ostringstream os;
    if (positive_entry) {
      const auto it = std::max_element(row_max.begin(), row_max.end());
      os << "positive log-probability " << *it << " at frame " << (it - row_max.begin()) << "; ";
    }
    if (normalization_violation) {
      const auto it = std::max_element(row_residual.begin(), row_residual.end());
      os << "row " << (it - row_residual.begin()) << " exp-sums to 1" << (*it >= 0 ? "+" : "") << *it
         << "; ";
    }
    if (non_finite) os << "NaN or +inf entry; ";
    return os.str();
  }
};

/// Per-row maximum and normalization residual. -inf entries (probability
/// zero) are legal; NaN and +inf are not.
inline LatticeDiagnostic validate_lattice(const LogProbLattice& lattice) {
  LatticeDiagnostic d;
  d.row_max.resize(lattice.T);
  d.row_residual.resize(lattice.T);
  for (std::size_t t = 0; t < lattice.T; ++t) {
    double mx = -INFINITY, total = 0.0;
    for (double v : lattice.row(t)) {
      if (std::isnan(v) || v == INFINITY) {
        d.non_finite = true;
        continue;
      }
      mx = std::max(mx, v);
      total += std::exp(v);
    }
    d.row_max[t] = mx;
    d.row_residual[t] = total - 1.0;
    if (mx > kPositiveSlack) d.positive_entry = true;
    if (std::abs(total - 1.0) > kNormTolerance) d.normalization_violation = true;
  }
  return d;
}

inline void require_valid(const LogProbLattice& lattice) {
  const auto d = validate_lattice(lattice);
  if (!d.ok()) raise(ErrorKind::InvalidLogProb, d.message());
}

}  // namespace c2t::ctc
