#pragma once

// Finite-difference gradient checking. Checks run in double precision: a
// central difference with step 1e-5 is meaningless in float32.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "c2t/error.hpp"
#include "c2t/numerics/graph.hpp"
#include "c2t/numerics/ops.hpp"
#include "c2t/rng.hpp"

namespace c2t::nn {

using DGraph = BasicGraph<double>;
using DVar = BasicVar<double>;
using DTensor = BasicTensor<double>;

/// Builds a scalar loss from the given leaf inputs (all requiring grad).
using GradCheckFn = std::function<DVar(DGraph&, const std::vector<DVar>&)>;

inline DTensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  DTensor t = DTensor::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// max over coordinates of |analytic - fd| / max(1e-8, |fd|), over every
/// input tensor. Graphs are rebuilt per evaluation with a fixed RNG seed, so
/// stochastic ops (dropout) see the same mask each time.
inline double grad_check_fn(const GradCheckFn& build, const std::vector<DTensor>& inputs,
                            double step, bool training = false) {
  auto evaluate = [&](const std::vector<DTensor>& xs, std::vector<Buffer<double>>* grads) {
    DGraph g(training, 1234);
    std::vector<DVar> vars;
    for (const auto& x : xs) vars.push_back(g.input(x, true));
    DVar loss = build(g, vars);
    if (loss.value().size() != 1) raise(ErrorKind::ShapeError, "grad_check loss must be scalar");
    const double value = loss.value().data[0];
    if (grads) {
      g.backward(loss);
      grads->clear();
      for (const auto& v : vars) grads->push_back(g.grad(v));
    }
    return value;
  };

  std::vector<Buffer<double>> analytic;
  evaluate(inputs, &analytic);
  double worst = 0.0;
  std::vector<DTensor> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t].data[i];
      probe[t].data[i] = orig + step;
      const double up = evaluate(probe, nullptr);
      probe[t].data[i] = orig - step;
      const double down = evaluate(probe, nullptr);
      probe[t].data[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[t][i] - fd) / std::max(1e-8, std::abs(fd));
      if (!std::isfinite(err)) return INFINITY;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Weighted sum with fixed pseudo-random weights, so every output coordinate
/// contributes a distinct amount to the checked scalar.
inline DVar project_to_scalar(DVar out, std::uint64_t seed = 99) {
  auto weights = random_tensor(out.shape(), seed, 0.5, 1.5);
  return sum(mul(out, out.graph->constant(std::move(weights))));
}

struct GradCheckCase {
  // Extra operands derived from the point's shape.
  std::function<std::vector<DTensor>(const DTensor&)> operands;
  GradCheckFn build;
  bool training = false;
};

inline const std::map<std::string, GradCheckCase>& grad_check_registry() {
  static const std::map<std::string, GradCheckCase> registry = [] {
    std::map<std::string, GradCheckCase> r;
    auto none = [](const DTensor&) { return std::vector<DTensor>{}; };
    auto unary_case = [&](DVar (*f)(DVar)) {
      return GradCheckCase{none, [f](DGraph&, const std::vector<DVar>& v) {
                             return project_to_scalar(f(v[0]));
                           }};
    };
    r["matmul"] = {[](const DTensor& p) {
                     return std::vector<DTensor>{p.rank() == 2 && p.rows() == p.cols()
                                                     ? p
                                                     : random_tensor({p.cols(), 3}, 7)};
                   },
                   [](DGraph&, const std::vector<DVar>& v) { return project_to_scalar(matmul(v[0], v[1])); }};
    r["linear"] = {[](const DTensor& p) {
                     return std::vector<DTensor>{random_tensor({p.cols(), 5}, 11), random_tensor({5}, 12)};
                   },
                   [](DGraph&, const std::vector<DVar>& v) {
                     return project_to_scalar(linear(v[0], v[1], v[2]));
                   }};
    r["add"] = {[](const DTensor& p) { return std::vector<DTensor>{random_tensor(p.shape, 13)}; },
                [](DGraph&, const std::vector<DVar>& v) { return project_to_scalar(add(v[0], v[1])); }};
    r["mul"] = {[](const DTensor& p) { return std::vector<DTensor>{random_tensor(p.shape, 14)}; },
                [](DGraph&, const std::vector<DVar>& v) { return project_to_scalar(mul(v[0], v[1])); }};
    r["relu"] = unary_case(&relu<double>);
    r["sigmoid"] = unary_case(&sigmoid<double>);
    r["swish"] = unary_case(&swish<double>);
    r["gelu"] = unary_case(&gelu<double>);
    r["elu"] = unary_case(&elu<double>);
    r["glu"] = unary_case(&glu<double>);
    r["exp"] = unary_case(&exp<double>);
    r["log_softmax"] = unary_case(&log_softmax<double>);
    r["softmax"] = unary_case(&softmax<double>);
    r["col_mean"] = unary_case(&col_mean<double>);
    r["layernorm"] = {[](const DTensor& p) {
                        return std::vector<DTensor>{random_tensor({p.cols()}, 15, 0.5, 1.5),
                                                    random_tensor({p.cols()}, 16)};
                      },
                      [](DGraph&, const std::vector<DVar>& v) {
                        return project_to_scalar(layernorm<double>(v[0], v[1], v[2]));
                      }};
    r["conv1d"] = {[](const DTensor& p) {
                     return std::vector<DTensor>{random_tensor({3, p.cols(), 4}, 17), random_tensor({4}, 18)};
                   },
                   [](DGraph&, const std::vector<DVar>& v) {
                     return project_to_scalar(conv1d(v[0], v[1], v[2], 2));
                   }};
    r["depthwise_conv1d"] = {[](const DTensor& p) {
                               return std::vector<DTensor>{random_tensor({5, p.cols()}, 19),
                                                           random_tensor({p.cols()}, 20)};
                             },
                             [](DGraph&, const std::vector<DVar>& v) {
                               return project_to_scalar(depthwise_conv1d(v[0], v[1], v[2]));
                             }};
    r["channel_conv"] = {[](const DTensor&) {
                           return std::vector<DTensor>{random_tensor({3, 2}, 21), random_tensor({2}, 22)};
                         },
                         [](DGraph&, const std::vector<DVar>& v) {
                           return project_to_scalar(channel_conv(v[0], v[1], v[2]));
                         }};
    r["avg_pool"] = {none, [](DGraph&, const std::vector<DVar>& v) {
                       return project_to_scalar(avg_pool(v[0], 3));
                     }};
    r["attention"] = {[](const DTensor& p) {
                        return std::vector<DTensor>{random_tensor(p.shape, 23), random_tensor(p.shape, 24)};
                      },
                      [](DGraph&, const std::vector<DVar>& v) {
                        const std::size_t heads = v[0].cols() % 2 == 0 ? 2 : 1;
                        return project_to_scalar(attention(v[0], v[1], v[2], heads));
                      }};
    r["dropout"] = {none,
                    [](DGraph&, const std::vector<DVar>& v) { return project_to_scalar(dropout(v[0], 0.3)); },
                    true};
    r["smooth_l1"] = {none, [](DGraph&, const std::vector<DVar>& v) {
                        auto target = random_tensor(v[0].shape(), 25, -2.0, 2.0);
                        return smooth_l1(v[0], target, 0.5);
                      }};
    r["select_rows"] = {none, [](DGraph&, const std::vector<DVar>& v) {
                          std::vector<std::size_t> rows{0, v[0].rows() - 1, 0};
                          return project_to_scalar(select_rows(v[0], rows));
                        }};
    r["slice_concat"] = {none, [](DGraph&, const std::vector<DVar>& v) {
                           const std::size_t n = v[0].cols();
                           auto a = slice_cols(v[0], 0, (n + 1) / 2);
                           return project_to_scalar(concat_cols<double>({v[0], a}));
                         }};
    return r;
  }();
  return registry;
}

/// Named-primitive gradient check at a caller-chosen point.
inline double grad_check(const std::string& op_name, const DTensor& point, double step = 1e-5) {
  const auto& reg = grad_check_registry();
  auto it = reg.find(op_name);
  if (it == reg.end()) raise(ErrorKind::NotFound, "no gradient check registered for " + op_name);
  std::vector<DTensor> inputs{point};
  for (auto& extra : it->second.operands(point)) inputs.push_back(std::move(extra));
  return grad_check_fn(it->second.build, inputs, step, it->second.training);
}

inline std::vector<std::string> grad_check_ops() {
  std::vector<std::string> names;
  for (const auto& [name, _] : grad_check_registry()) names.push_back(name);
  return names;
}

}  // namespace c2t::nn
