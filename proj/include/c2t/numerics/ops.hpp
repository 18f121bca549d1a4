#pragma once

// Differentiable primitives over BasicGraph. Activations are 2-D, time-major
// (rows = frames, cols = features). Reductions accumulate in double.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "c2t/error.hpp"
#include "c2t/numerics/graph.hpp"
#include "c2t/numerics/tensor.hpp"

namespace c2t::nn {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using ConstStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

template <class S>
Eigen::Map<RowMat<S>> mat(Buffer<S>& v, std::size_t r, std::size_t c) {
  return Eigen::Map<RowMat<S>>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class S>
Eigen::Map<const RowMat<S>> cmat(const Buffer<S>& v, std::size_t r, std::size_t c) {
  return Eigen::Map<const RowMat<S>>(v.data(), static_cast<Eigen::Index>(r),
                                     static_cast<Eigen::Index>(c));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) raise(ErrorKind::ShapeError, what);
}

template <class S>
void accumulate(Buffer<S>& dst, const Buffer<S>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class S>
BasicTensor<S> like(const BasicTensor<S>& t) {
  return BasicTensor<S>::zeros(t.shape);
}

template <class S>
BasicTensor<S> mat2(std::size_t r, std::size_t c) {
  return BasicTensor<S>::zeros({r, c});
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Elementwise map with derivative expressed through input and output.
template <class S, class F, class DF>
BasicVar<S> unary(BasicVar<S> x, F f, DF df, const char* name) {
  auto& g = *x.graph;
  const auto& xv = x.value();
  BasicTensor<S> out = like(xv);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv.data[i]);
  return g.add_node(
      std::move(out), {x.id},
      [xi = x.id, df](BasicGraph<S>& g, std::size_t self) {
        const auto& n = g.node(self);
        const auto& xv = g.node(xi).value.data;
        auto& dx = g.grad_of(xi);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i] * df(xv[i], n.value.data[i]);
      },
      name);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class S>
BasicVar<S> matmul(BasicVar<S> a, BasicVar<S> b) {
  using namespace detail;
  const auto& av = a.value();
  const auto& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(),
          "matmul shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  auto out = mat2<S>(m, n);
  mat(out.data, m, n).noalias() = cmat(av.data, m, k) * cmat(bv.data, k, n);
  return a.graph->add_node(
      std::move(out), {a.id, b.id},
      [ai = a.id, bi = b.id, m, k, n](BasicGraph<S>& g, std::size_t self) {
        const auto dy = cmat(g.node(self).grad, m, n);
        if (g.needs_grad(ai))
          mat(g.grad_of(ai), m, k).noalias() += dy * cmat(g.node(bi).value.data, k, n).transpose();
        if (g.needs_grad(bi))
          mat(g.grad_of(bi), k, n).noalias() += cmat(g.node(ai).value.data, m, k).transpose() * dy;
      },
      "matmul");
}

/// x[m,k] * w[k,n] + b[n]
template <class S>
BasicVar<S> linear(BasicVar<S> x, BasicVar<S> w, BasicVar<S> b) {
  using namespace detail;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  require(wv.rank() == 2 && xv.cols() == wv.rows() && bv.size() == wv.cols(),
          "linear shapes " + shape_str(xv.shape) + " x " + shape_str(wv.shape) + " + " +
              shape_str(bv.shape));
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
  auto out = mat2<S>(m, n);
  auto o = mat(out.data, m, n);
  o.noalias() = cmat(xv.data, m, k) * cmat(wv.data, k, n);
  o.rowwise() += cmat(bv.data, 1, n).row(0);
  return x.graph->add_node(
      std::move(out), {x.id, w.id, b.id},
      [xi = x.id, wi = w.id, bi = b.id, m, k, n](BasicGraph<S>& g, std::size_t self) {
        const auto dy = cmat(g.node(self).grad, m, n);
        if (g.needs_grad(xi))
          mat(g.grad_of(xi), m, k).noalias() += dy * cmat(g.node(wi).value.data, k, n).transpose();
        if (g.needs_grad(wi))
          mat(g.grad_of(wi), k, n).noalias() += cmat(g.node(xi).value.data, m, k).transpose() * dy;
        if (g.needs_grad(bi)) mat(g.grad_of(bi), 1, n) += dy.colwise().sum();
      },
      "linear");
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class S>
BasicVar<S> add(BasicVar<S> a, BasicVar<S> b) {
  detail::require(a.shape() == b.shape(), "add shapes " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  auto out = a.value();
  out.requires_grad = false;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  return a.graph->add_node(
      std::move(out), {a.id, b.id},
      [ai = a.id, bi = b.id](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        if (g.needs_grad(ai)) detail::accumulate(g.grad_of(ai), dy);
        if (g.needs_grad(bi)) detail::accumulate(g.grad_of(bi), dy);
      },
      "add");
}

template <class S>
BasicVar<S> sub(BasicVar<S> a, BasicVar<S> b) {
  detail::require(a.shape() == b.shape(), "sub shapes differ");
  auto out = a.value();
  out.requires_grad = false;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
  return a.graph->add_node(
      std::move(out), {a.id, b.id},
      [ai = a.id, bi = b.id](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        if (g.needs_grad(ai)) detail::accumulate(g.grad_of(ai), dy);
        if (g.needs_grad(bi)) {
          auto& db = g.grad_of(bi);
          for (std::size_t i = 0; i < db.size(); ++i) db[i] -= dy[i];
        }
      },
      "sub");
}

template <class S>
BasicVar<S> mul(BasicVar<S> a, BasicVar<S> b) {
  detail::require(a.shape() == b.shape(), "mul shapes differ");
  auto out = a.value();
  out.requires_grad = false;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
  return a.graph->add_node(
      std::move(out), {a.id, b.id},
      [ai = a.id, bi = b.id](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const auto& av = g.node(ai).value.data;
        const auto& bv = g.node(bi).value.data;
        if (g.needs_grad(ai)) {
          auto& da = g.grad_of(ai);
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (g.needs_grad(bi)) {
          auto& db = g.grad_of(bi);
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * av[i];
        }
      },
      "mul");
}

template <class S>
BasicVar<S> scale(BasicVar<S> x, double factor) {
  const S f = static_cast<S>(factor);
  return detail::unary(x, [f](S v) { return v * f; }, [f](S, S) { return f; }, "scale");
}

/// x[m,n] + b[n] broadcast over rows.
template <class S>
BasicVar<S> add_row(BasicVar<S> x, BasicVar<S> b) {
  const std::size_t n = x.cols();
  detail::require(b.value().size() == n, "add_row width mismatch");
  auto out = x.value();
  out.requires_grad = false;
  const auto& bv = b.value().data;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += bv[c];
  return x.graph->add_node(
      std::move(out), {x.id, b.id},
      [xi = x.id, bi = b.id, n](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        if (g.needs_grad(xi)) detail::accumulate(g.grad_of(xi), dy);
        if (g.needs_grad(bi)) {
          auto& db = g.grad_of(bi);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i % n] += dy[i];
        }
      },
      "add_row");
}

template <class S>
BasicVar<S> sum(BasicVar<S> x) {
  double acc = 0.0;
  for (S v : x.value().data) acc += v;
  return x.graph->add_node(
      BasicTensor<S>::scalar(static_cast<S>(acc)), {x.id},
      [xi = x.id](BasicGraph<S>& g, std::size_t self) {
        const S dy = g.node(self).grad[0];
        for (auto& d : g.grad_of(xi)) d += dy;
      },
      "sum");
}

template <class S>
BasicVar<S> mean(BasicVar<S> x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Column means: [m,n] -> [1,n].
template <class S>
BasicVar<S> col_mean(BasicVar<S> x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> acc(n, 0.0);
  const auto& xv = x.value().data;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) acc[c] += xv[r * n + c];
  auto out = BasicTensor<S>::zeros({1, n});
  for (std::size_t c = 0; c < n; ++c) out.data[c] = static_cast<S>(acc[c] / static_cast<double>(m));
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, m, n](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(xi);
        const S inv = S(1) / static_cast<S>(m);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) dx[r * n + c] += dy[c] * inv;
      },
      "col_mean");
}

template <class S>
BasicVar<S> reshape(BasicVar<S> x, Shape shape) {
  detail::require(shape_size(shape) == x.value().size(), "reshape size mismatch");
  BasicTensor<S> out(std::move(shape), x.value().data);
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id](BasicGraph<S>& g, std::size_t self) {
        detail::accumulate(g.grad_of(xi), g.node(self).grad);
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Activations

template <class S>
BasicVar<S> relu(BasicVar<S> x) {
  return detail::unary(
      x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); },
      "relu");
}

template <class S>
BasicVar<S> sigmoid(BasicVar<S> x) {
  return detail::unary(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); }, [](S, S y) { return y * (S(1) - y); },
      "sigmoid");
}

/// x * sigmoid(x)
template <class S>
BasicVar<S> swish(BasicVar<S> x) {
  return detail::unary(
      x, [](S v) { return v / (S(1) + std::exp(-v)); },
      [](S v, S) {
        const S s = S(1) / (S(1) + std::exp(-v));
        return s * (S(1) + v * (S(1) - s));
      },
      "swish");
}

/// tanh-approximated GELU.
template <class S>
BasicVar<S> gelu(BasicVar<S> x) {
  constexpr S c = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S a = S(0.044715);
  return detail::unary(
      x, [](S v) { return S(0.5) * v * (S(1) + std::tanh(c * (v + a * v * v * v))); },
      [](S v, S) {
        const S u = c * (v + a * v * v * v);
        const S t = std::tanh(u);
        return S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * c * (S(1) + S(3) * a * v * v);
      },
      "gelu");
}

template <class S>
BasicVar<S> elu(BasicVar<S> x) {
  return detail::unary(
      x, [](S v) { return v > S(0) ? v : std::expm1(v); },
      [](S v, S y) { return v > S(0) ? S(1) : y + S(1); }, "elu");
}

template <class S>
BasicVar<S> exp(BasicVar<S> x) {
  return detail::unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; }, "exp");
}

template <class S>
BasicVar<S> log(BasicVar<S> x) {
  for (S v : x.value().data)
    if (!(v > S(0))) raise(ErrorKind::InvalidInput, "log of non-positive value");
  return detail::unary(x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; }, "log");
}

/// Gated linear unit over columns: [m, 2n] -> a * sigmoid(b), a|b the halves.
template <class S>
BasicVar<S> glu(BasicVar<S> x) {
  const std::size_t m = x.rows(), w = x.cols();
  detail::require(w % 2 == 0, "glu needs an even width");
  const std::size_t n = w / 2;
  const auto& xv = x.value().data;
  auto out = detail::mat2<S>(m, n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const S a = xv[r * w + c], b = xv[r * w + n + c];
      out.data[r * n + c] = a / (S(1) + std::exp(-b));
    }
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, m, n, w](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const auto& xv = g.node(xi).value.data;
        auto& dx = g.grad_of(xi);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) {
            const S a = xv[r * w + c], b = xv[r * w + n + c];
            const S s = S(1) / (S(1) + std::exp(-b));
            const S d = dy[r * n + c];
            dx[r * w + c] += d * s;
            dx[r * w + n + c] += d * a * s * (S(1) - s);
          }
      },
      "glu");
}

template <class S>
BasicVar<S> dropout(BasicVar<S> x, double p) {
  auto& g = *x.graph;
  if (!g.training() || p <= 0.0) return x;
  if (p >= 1.0) raise(ErrorKind::InvalidInput, "dropout rate must be < 1");
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  Buffer<S> mask(x.value().size());
  for (auto& m : mask) m = g.rng().bernoulli(p) ? S(0) : keep_scale;
  auto out = x.value();
  out.requires_grad = false;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask[i];
  return g.add_node(
      std::move(out), {x.id},
      [xi = x.id, mask = std::move(mask)](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(xi);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * mask[i];
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise layer normalization; gamma/beta of width n are optional.
template <class S>
BasicVar<S> layernorm(BasicVar<S> x, std::optional<BasicVar<S>> gamma = std::nullopt,
                      std::optional<BasicVar<S>> beta = std::nullopt,
                      double eps = kLayerNormEps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma) detail::require(gamma->value().size() == n, "layernorm gamma width");
  if (beta) detail::require(beta->value().size() == n, "layernorm beta width");
  const auto& xv = x.value().data;
  Buffer<S> xhat(m * n);
  Buffer<S> inv_std(m);
  auto out = detail::mat2<S>(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv[r * n + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<S>(is);
    for (std::size_t c = 0; c < n; ++c) {
      const S h = static_cast<S>((xv[r * n + c] - mu) * is);
      xhat[r * n + c] = h;
      S y = h;
      if (gamma) y *= gamma->value().data[c];
      if (beta) y += beta->value().data[c];
      out.data[r * n + c] = y;
    }
  }
  std::vector<std::size_t> inputs{x.id};
  const std::size_t gi = gamma ? gamma->id : SIZE_MAX;
  const std::size_t bi = beta ? beta->id : SIZE_MAX;
  if (gamma) inputs.push_back(gi);
  if (beta) inputs.push_back(bi);
  return x.graph->add_node(
      std::move(out), std::move(inputs),
      [xi = x.id, gi, bi, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const S* gv = gi == SIZE_MAX ? nullptr : g.node(gi).value.data.data();
        if (gi != SIZE_MAX && g.needs_grad(gi)) {
          auto& dg = g.grad_of(gi);
          for (std::size_t i = 0; i < m * n; ++i) dg[i % n] += dy[i] * xhat[i];
        }
        if (bi != SIZE_MAX && g.needs_grad(bi)) {
          auto& db = g.grad_of(bi);
          for (std::size_t i = 0; i < m * n; ++i) db[i % n] += dy[i];
        }
        if (!g.needs_grad(xi)) return;
        auto& dx = g.grad_of(xi);
        std::vector<double> dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            const double d = dy[r * n + c] * (gv ? gv[c] : S(1));
            dxhat[c] = d;
            mean_d += d;
            mean_dx += d * xhat[r * n + c];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t c = 0; c < n; ++c)
            dx[r * n + c] += static_cast<S>(inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx));
        }
      },
      "layernorm");
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise log-softmax, evaluated with the max shifted out and the
/// normalizer accumulated in double.
template <class S>
BasicVar<S> log_softmax(BasicVar<S> x) {
  const std::size_t m = x.rows(), n = x.cols();
  const auto& xv = x.value();
  if (!xv.all_finite()) raise(ErrorKind::InvalidInput, "log_softmax input is not finite");
  auto out = detail::mat2<S>(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    auto row = log_softmax<S>(xv.row(r));
    std::copy(row.begin(), row.end(), out.data.begin() + r * n);
  }
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, m, n](BasicGraph<S>& g, std::size_t self) {
        const auto& node = g.node(self);
        const auto& dy = node.grad;
        const auto& y = node.value.data;
        auto& dx = g.grad_of(xi);
        for (std::size_t r = 0; r < m; ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < n; ++c) total += dy[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            dx[r * n + c] += static_cast<S>(dy[r * n + c] - std::exp(static_cast<double>(y[r * n + c])) * total);
        }
      },
      "log_softmax");
}

template <class S>
BasicVar<S> softmax(BasicVar<S> x) {
  const std::size_t m = x.rows(), n = x.cols();
  const auto& xv = x.value();
  auto out = detail::mat2<S>(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    auto row = log_softmax<S>(xv.row(r));
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = std::exp(row[c]);
  }
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, m, n](BasicGraph<S>& g, std::size_t self) {
        const auto& node = g.node(self);
        const auto& dy = node.grad;
        const auto& y = node.value.data;
        auto& dx = g.grad_of(xi);
        for (std::size_t r = 0; r < m; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += dy[r * n + c] * y[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            dx[r * n + c] += static_cast<S>(y[r * n + c] * (dy[r * n + c] - dot));
        }
      },
      "softmax");
}

// ---------------------------------------------------------------------------
// Temporal convolutions. Output length is ceil(T / stride); taps reaching
// outside [0, T) read zeros, with (K - 1) / 2 taps of left context.

/// x[T,Cin], w[K,Cin,Cout], b[Cout] -> [ceil(T/stride), Cout]
template <class S>
BasicVar<S> conv1d(BasicVar<S> x, BasicVar<S> w, BasicVar<S> b, std::size_t stride = 1) {
  using namespace detail;
  const auto& wv = w.value();
  require(wv.rank() == 3, "conv1d weight must be [K,Cin,Cout]");
  const std::size_t T = x.rows(), cin = x.cols(), K = wv.shape[0], cout = wv.shape[2];
  require(wv.shape[1] == cin, "conv1d input channels " + std::to_string(cin) + " vs weight " +
                                  shape_str(wv.shape));
  require(b.value().size() == cout, "conv1d bias width");
  require(stride >= 1, "conv1d stride must be >= 1");
  const std::size_t tout = ceil_div(T, stride);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((K - 1) / 2);
  const std::size_t width = K * cin;
  auto im2col = [=](const Buffer<S>& xv) {
    Buffer<S> cols(tout * width, S(0));
    for (std::size_t t = 0; t < tout; ++t)
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
        std::copy_n(xv.begin() + src * cin, cin, cols.begin() + t * width + k * cin);
      }
    return cols;
  };
  auto cols = im2col(x.value().data);
  auto out = mat2<S>(tout, cout);
  auto o = mat(out.data, tout, cout);
  o.noalias() = cmat(cols, tout, width) * cmat(wv.data, width, cout);
  o.rowwise() += cmat(b.value().data, 1, cout).row(0);
  return x.graph->add_node(
      std::move(out), {x.id, w.id, b.id},
      [=, xi = x.id, wi = w.id, bi = b.id](BasicGraph<S>& g, std::size_t self) {
        const auto dy = cmat(g.node(self).grad, tout, cout);
        if (g.needs_grad(bi)) mat(g.grad_of(bi), 1, cout) += dy.colwise().sum();
        if (g.needs_grad(wi)) {
          const auto cols = im2col(g.node(xi).value.data);
          mat(g.grad_of(wi), width, cout).noalias() += cmat(cols, tout, width).transpose() * dy;
        }
        if (g.needs_grad(xi)) {
          Buffer<S> dcols(tout * width);
          mat(dcols, tout, width).noalias() = dy * cmat(g.node(wi).value.data, width, cout).transpose();
          auto& dx = g.grad_of(xi);
          for (std::size_t t = 0; t < tout; ++t)
            for (std::size_t k = 0; k < K; ++k) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + k) - pad;
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
              for (std::size_t c = 0; c < cin; ++c) dx[src * cin + c] += dcols[t * width + k * cin + c];
            }
        }
      },
      "conv1d");
}

/// Per-channel temporal filter: x[T,C], w[K,C], b[C] -> [T,C].
template <class S>
BasicVar<S> depthwise_conv1d(BasicVar<S> x, BasicVar<S> w, BasicVar<S> b) {
  const std::size_t T = x.rows(), C = x.cols();
  const auto& wv = w.value();
  detail::require(wv.rank() == 2 && wv.shape[1] == C, "depthwise weight must be [K,C]");
  detail::require(b.value().size() == C, "depthwise bias width");
  const std::size_t K = wv.shape[0];
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((K - 1) / 2);
  const auto& xv = x.value().data;
  auto out = detail::mat2<S>(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    S* o = out.data.data() + t * C;
    std::copy_n(b.value().data.begin(), C, o);
    for (std::size_t k = 0; k < K; ++k) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      const S* xs = xv.data() + src * C;
      const S* wk = wv.data.data() + k * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += wk[c] * xs[c];
    }
  }
  return x.graph->add_node(
      std::move(out), {x.id, w.id, b.id},
      [=, xi = x.id, wi = w.id, bi = b.id](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const auto& xv = g.node(xi).value.data;
        const auto& wv = g.node(wi).value.data;
        if (g.needs_grad(bi)) {
          auto& db = g.grad_of(bi);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i % C] += dy[i];
        }
        const bool need_x = g.needs_grad(xi), need_w = g.needs_grad(wi);
        Buffer<S>* dx = need_x ? &g.grad_of(xi) : nullptr;
        Buffer<S>* dw = need_w ? &g.grad_of(wi) : nullptr;
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t k = 0; k < K; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t c = 0; c < C; ++c) {
              const S d = dy[t * C + c];
              if (dw) (*dw)[k * C + c] += d * xv[src * C + c];
              if (dx) (*dx)[src * C + c] += d * wv[k * C + c];
            }
          }
      },
      "depthwise_conv1d");
}

/// One bank of F temporal filters shared by every input channel:
/// x[T,C], w[K,F], b[F] -> [T, C*F], output column c*F + f.
template <class S>
BasicVar<S> channel_conv(BasicVar<S> x, BasicVar<S> w, BasicVar<S> b) {
  const std::size_t T = x.rows(), C = x.cols();
  const auto& wv = w.value();
  detail::require(wv.rank() == 2, "channel_conv weight must be [K,F]");
  const std::size_t K = wv.shape[0], F = wv.shape[1];
  detail::require(b.value().size() == F, "channel_conv bias width");
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((K - 1) / 2);
  const auto& xv = x.value().data;
  const std::size_t W = C * F;
  auto out = detail::mat2<S>(T, W);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      S* o = out.data.data() + t * W + c * F;
      std::copy_n(b.value().data.begin(), F, o);
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
        const S xs = xv[src * C + c];
        const S* wk = wv.data.data() + k * F;
        for (std::size_t f = 0; f < F; ++f) o[f] += wk[f] * xs;
      }
    }
  return x.graph->add_node(
      std::move(out), {x.id, w.id, b.id},
      [=, xi = x.id, wi = w.id, bi = b.id](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const auto& xv = g.node(xi).value.data;
        const auto& wv = g.node(wi).value.data;
        if (g.needs_grad(bi)) {
          auto& db = g.grad_of(bi);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i % F] += dy[i];
        }
        const bool need_x = g.needs_grad(xi), need_w = g.needs_grad(wi);
        Buffer<S>* dx = need_x ? &g.grad_of(xi) : nullptr;
        Buffer<S>* dw = need_w ? &g.grad_of(wi) : nullptr;
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < C; ++c) {
            const S* d = dy.data() + t * W + c * F;
            for (std::size_t k = 0; k < K; ++k) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - pad;
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
              const S xs = xv[src * C + c];
              const S* wk = wv.data() + k * F;
              S acc = S(0);
              for (std::size_t f = 0; f < F; ++f) {
                if (dw) (*dw)[k * F + f] += d[f] * xs;
                acc += d[f] * wk[f];
              }
              if (dx) (*dx)[src * C + c] += acc;
            }
          }
      },
      "channel_conv");
}

/// Non-overlapping average pooling over time; the last window may be partial.
template <class S>
BasicVar<S> avg_pool(BasicVar<S> x, std::size_t stride) {
  detail::require(stride >= 1, "avg_pool stride must be >= 1");
  const std::size_t T = x.rows(), D = x.cols();
  const std::size_t tout = detail::ceil_div(T, stride);
  const auto& xv = x.value().data;
  auto out = detail::mat2<S>(tout, D);
  for (std::size_t i = 0; i < tout; ++i) {
    const std::size_t lo = i * stride, hi = std::min(T, lo + stride);
    const S inv = S(1) / static_cast<S>(hi - lo);
    for (std::size_t t = lo; t < hi; ++t)
      for (std::size_t d = 0; d < D; ++d) out.data[i * D + d] += xv[t * D + d] * inv;
  }
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, T, D, tout, stride](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(xi);
        for (std::size_t i = 0; i < tout; ++i) {
          const std::size_t lo = i * stride, hi = std::min(T, lo + stride);
          const S inv = S(1) / static_cast<S>(hi - lo);
          for (std::size_t t = lo; t < hi; ++t)
            for (std::size_t d = 0; d < D; ++d) dx[t * D + d] += dy[i * D + d] * inv;
        }
      },
      "avg_pool");
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over already-projected q, k, v
/// (each [T,D]); heads split the columns evenly, scores scale by 1/sqrt(D/heads).
template <class S>
BasicVar<S> attention(BasicVar<S> q, BasicVar<S> k, BasicVar<S> v, std::size_t heads) {
  using namespace detail;
  const std::size_t T = q.rows(), D = q.cols();
  require(k.shape() == q.shape() && v.shape() == q.shape(), "attention q/k/v shapes differ");
  require(heads >= 1 && D % heads == 0, "attention heads must divide model width");
  const std::size_t dh = D / heads;
  const S sc = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto idx = [](std::size_t n) { return static_cast<Eigen::Index>(n); };
  const Eigen::OuterStride<> stride(idx(D));

  auto probs = std::make_shared<Buffer<S>>(heads * T * T);
  auto out = mat2<S>(T, D);
  const auto& qv = q.value().data;
  const auto& kv = k.value().data;
  const auto& vv = v.value().data;
  for (std::size_t h = 0; h < heads; ++h) {
    ConstStridedMap<S> Q(qv.data() + h * dh, idx(T), idx(dh), stride);
    ConstStridedMap<S> K(kv.data() + h * dh, idx(T), idx(dh), stride);
    ConstStridedMap<S> V(vv.data() + h * dh, idx(T), idx(dh), stride);
    auto P = mat(*probs, heads * T, T).middleRows(idx(h * T), idx(T));
    P.noalias() = (Q * K.transpose()) * sc;
    for (Eigen::Index r = 0; r < idx(T); ++r) {
      const S mx = P.row(r).maxCoeff();
      double total = 0.0;
      for (Eigen::Index c = 0; c < idx(T); ++c) {
        const S e = std::exp(P(r, c) - mx);
        P(r, c) = e;
        total += e;
      }
      P.row(r) /= static_cast<S>(total);
    }
    StridedMap<S> O(out.data.data() + h * dh, idx(T), idx(dh), stride);
    O.noalias() = P * V;
  }
  return q.graph->add_node(
      std::move(out), {q.id, k.id, v.id},
      [=, qi = q.id, ki = k.id, vi = v.id](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const auto& qv = g.node(qi).value.data;
        const auto& kv = g.node(ki).value.data;
        const auto& vv = g.node(vi).value.data;
        Buffer<S>* dq = g.needs_grad(qi) ? &g.grad_of(qi) : nullptr;
        Buffer<S>* dk = g.needs_grad(ki) ? &g.grad_of(ki) : nullptr;
        Buffer<S>* dv = g.needs_grad(vi) ? &g.grad_of(vi) : nullptr;
        RowMat<S> dP(idx(T), idx(T));
        for (std::size_t h = 0; h < heads; ++h) {
          ConstStridedMap<S> Q(qv.data() + h * dh, idx(T), idx(dh), stride);
          ConstStridedMap<S> K(kv.data() + h * dh, idx(T), idx(dh), stride);
          ConstStridedMap<S> V(vv.data() + h * dh, idx(T), idx(dh), stride);
          ConstStridedMap<S> dO(dy.data() + h * dh, idx(T), idx(dh), stride);
          const auto P = cmat(*probs, heads * T, T).middleRows(idx(h * T), idx(T));
          if (dv) StridedMap<S>(dv->data() + h * dh, idx(T), idx(dh), stride).noalias() += P.transpose() * dO;
          dP.noalias() = dO * V.transpose();
          for (Eigen::Index r = 0; r < idx(T); ++r) {
            const S dot = dP.row(r).dot(P.row(r));
            dP.row(r) = P.row(r).cwiseProduct((dP.row(r).array() - dot).matrix());
          }
          if (dq) StridedMap<S>(dq->data() + h * dh, idx(T), idx(dh), stride).noalias() += (dP * K) * sc;
          if (dk)
            StridedMap<S>(dk->data() + h * dh, idx(T), idx(dh), stride).noalias() += (dP.transpose() * Q) * sc;
        }
      },
      "attention");
}

// ---------------------------------------------------------------------------
// Row and column plumbing

template <class S>
BasicVar<S> select_rows(BasicVar<S> x, std::vector<std::size_t> rows) {
  const std::size_t n = x.cols(), m = x.rows();
  auto out = detail::mat2<S>(rows.size(), n);
  const auto& xv = x.value().data;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < m, "select_rows index out of range");
    std::copy_n(xv.begin() + rows[i] * n, n, out.data.begin() + i * n);
  }
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, n, rows = std::move(rows)](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(xi);
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t c = 0; c < n; ++c) dx[rows[i] * n + c] += dy[i * n + c];
      },
      "select_rows");
}

/// Copy of x with the listed rows overwritten by a shared row vector.
template <class S>
BasicVar<S> replace_rows(BasicVar<S> x, const std::vector<std::size_t>& rows, BasicVar<S> fill) {
  const std::size_t n = x.cols(), m = x.rows();
  detail::require(fill.value().size() == n, "replace_rows fill width");
  std::vector<char> hit(m, 0);
  for (std::size_t r : rows) {
    detail::require(r < m, "replace_rows index out of range");
    hit[r] = 1;
  }
  auto out = x.value();
  out.requires_grad = false;
  for (std::size_t r = 0; r < m; ++r)
    if (hit[r]) std::copy_n(fill.value().data.begin(), n, out.data.begin() + r * n);
  return x.graph->add_node(
      std::move(out), {x.id, fill.id},
      [xi = x.id, fi = fill.id, m, n, hit = std::move(hit)](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        Buffer<S>* dx = g.needs_grad(xi) ? &g.grad_of(xi) : nullptr;
        Buffer<S>* df = g.needs_grad(fi) ? &g.grad_of(fi) : nullptr;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) {
            if (hit[r]) {
              if (df) (*df)[c] += dy[r * n + c];
            } else if (dx) {
              (*dx)[r * n + c] += dy[r * n + c];
            }
          }
      },
      "replace_rows");
}

template <class S>
BasicVar<S> slice_cols(BasicVar<S> x, std::size_t start, std::size_t len) {
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(len >= 1 && start + len <= n, "slice_cols out of range");
  auto out = detail::mat2<S>(m, len);
  const auto& xv = x.value().data;
  for (std::size_t r = 0; r < m; ++r) std::copy_n(xv.begin() + r * n + start, len, out.data.begin() + r * len);
  return x.graph->add_node(
      std::move(out), {x.id},
      [xi = x.id, m, n, start, len](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(xi);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < len; ++c) dx[r * n + start + c] += dy[r * len + c];
      },
      "slice_cols");
}

template <class S>
BasicVar<S> concat_cols(const std::vector<BasicVar<S>>& parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    detail::require(p.rows() == m, "concat_cols row mismatch");
    ids.push_back(p.id);
    widths.push_back(p.cols());
    n += p.cols();
  }
  auto out = detail::mat2<S>(m, n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    const auto& pv = p.value().data;
    for (std::size_t r = 0; r < m; ++r) std::copy_n(pv.begin() + r * w, w, out.data.begin() + r * n + off);
    off += w;
  }
  return parts[0].graph->add_node(
      std::move(out), ids,
      [ids, widths, m, n](BasicGraph<S>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        std::size_t off = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const std::size_t w = widths[i];
          if (g.needs_grad(ids[i])) {
            auto& dp = g.grad_of(ids[i]);
            for (std::size_t r = 0; r < m; ++r)
              for (std::size_t c = 0; c < w; ++c) dp[r * w + c] += dy[r * n + off + c];
          }
          off += w;
        }
      },
      "concat_cols");
}

// ---------------------------------------------------------------------------
// Losses

/// Mean smooth-L1 against a constant target: 0.5 r^2 / beta inside |r| < beta,
/// |r| - beta / 2 outside.
template <class S>
BasicVar<S> smooth_l1(BasicVar<S> pred, const BasicTensor<S>& target, double beta) {
  detail::require(pred.value().size() == target.size(), "smooth_l1 size mismatch");
  if (!(beta > 0.0)) raise(ErrorKind::InvalidInput, "smooth_l1 beta must be > 0");
  const auto& pv = pred.value().data;
  const std::size_t n = pv.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = static_cast<double>(pv[i]) - target.data[i];
    acc += std::abs(r) < beta ? 0.5 * r * r / beta : std::abs(r) - 0.5 * beta;
  }
  return pred.graph->add_node(
      BasicTensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n))), {pred.id},
      [pi = pred.id, target = target.data, beta, n](BasicGraph<S>& g, std::size_t self) {
        const double dy = g.node(self).grad[0] / static_cast<double>(n);
        const auto& pv = g.node(pi).value.data;
        auto& dp = g.grad_of(pi);
        for (std::size_t i = 0; i < n; ++i) {
          const double r = static_cast<double>(pv[i]) - target[i];
          const double d = std::abs(r) < beta ? r / beta : (r > 0 ? 1.0 : -1.0);
          dp[i] += static_cast<S>(dy * d);
        }
      },
      "smooth_l1");
}

}  // namespace c2t::nn
