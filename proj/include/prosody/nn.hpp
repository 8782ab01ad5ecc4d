#pragma once

#include "prosody/common.hpp"
#include "prosody/rng.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

// Small dense-layer toolkit with explicit backward passes. Layers keep their
// parameters in Tensor slots (value + grad); forward passes are const and
// write activations into caller-owned caches, so frozen models can be shared
// across threads while training mutates gradients single-threaded.
namespace prosody::nn {

template <class S>
struct Tensor {
  Mat<S> value;
  Mat<S> grad;

  void resize(Index r, Index c) {
    value = Mat<S>::Zero(r, c);
    grad = Mat<S>::Zero(r, c);
  }
  void zero_grad() { grad.setZero(); }
};

template <class S>
using ParamRefs = std::vector<std::pair<std::string, Tensor<S>*>>;

template <class S>
void zero_grads(const ParamRefs<S>& params) {
  for (auto& [name, t] : params) t->zero_grad();
}

template <class S>
void init_glorot(Tensor<S>& t, Index fan_in, Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Index i = 0; i < t.value.rows(); ++i)
    for (Index j = 0; j < t.value.cols(); ++j)
      t.value(i, j) = static_cast<S>(rng.uniform(-limit, limit));
}

template <class S>
void init_normal(Tensor<S>& t, double stddev, Rng& rng) {
  for (Index i = 0; i < t.value.rows(); ++i)
    for (Index j = 0; j < t.value.cols(); ++j)
      t.value(i, j) = static_cast<S>(stddev * rng.normal());
}

// y = x W + b, rows of x are tokens.
template <class S>
struct Dense {
  Tensor<S> w;  // in x out
  Tensor<S> b;  // 1 x out

  void init(Index in, Index out, Rng& rng) {
    w.resize(in, out);
    b.resize(1, out);
    init_glorot(w, in, out, rng);
  }

  Mat<S> forward(const Mat<S>& x) const {
    return (x * w.value).rowwise() + b.value.row(0);
  }

  // x is the forward input; returns dL/dx and accumulates parameter grads.
  Mat<S> backward(const Mat<S>& x, const Mat<S>& dy) {
    w.grad.noalias() += x.transpose() * dy;
    b.grad.row(0) += dy.colwise().sum();
    return dy * w.value.transpose();
  }

  void collect(const std::string& prefix, ParamRefs<S>& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
  }
};

// Row-wise softmax and its Jacobian-vector product.
template <class S>
Mat<S> softmax_rows(const Mat<S>& scores) {
  Mat<S> p = scores;
  for (Index i = 0; i < p.rows(); ++i) {
    const S m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <class S>
Mat<S> softmax_backward_rows(const Mat<S>& p, const Mat<S>& dp) {
  Mat<S> ds(p.rows(), p.cols());
  for (Index i = 0; i < p.rows(); ++i) {
    const S dot = p.row(i).dot(dp.row(i));
    ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
  }
  return ds;
}

// Per-row layer normalization with learned scale/shift.
template <class S>
struct LayerNorm {
  Tensor<S> gamma;  // 1 x dim
  Tensor<S> beta;   // 1 x dim
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<S> xhat;
    Vec<S> inv_std;
  };

  void init(Index dim) {
    gamma.resize(1, dim);
    gamma.value.setOnes();
    beta.resize(1, dim);
  }

  Mat<S> forward(const Mat<S>& x, Cache* cache) const {
    const Index n = x.cols();
    Mat<S> xhat(x.rows(), n);
    Vec<S> inv_std(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
      const S mean = x.row(i).mean();
      const S var = (x.row(i).array() - mean).square().sum() / S(n);
      const S istd = S(1) / std::sqrt(var + S(kEps));
      xhat.row(i) = ((x.row(i).array() - mean) * istd).matrix();
      inv_std[i] = istd;
    }
    Mat<S> y = xhat;
    for (Index i = 0; i < y.rows(); ++i)
      y.row(i) = y.row(i).cwiseProduct(gamma.value.row(0)) + beta.value.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return y;
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dy) {
    const Index n = dy.cols();
    beta.grad.row(0) += dy.colwise().sum();
    gamma.grad.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
    Mat<S> dxhat(dy.rows(), n);
    for (Index i = 0; i < dy.rows(); ++i)
      dxhat.row(i) = dy.row(i).cwiseProduct(gamma.value.row(0));
    Mat<S> dx(dy.rows(), n);
    for (Index i = 0; i < dy.rows(); ++i) {
      const S mean_d = dxhat.row(i).mean();
      const S mean_dx = dxhat.row(i).dot(cache.xhat.row(i)) / S(n);
      dx.row(i) = (cache.inv_std[i] *
                   (dxhat.row(i).array() - mean_d -
                    cache.xhat.row(i).array() * mean_dx))
                      .matrix();
    }
    return dx;
  }

  void collect(const std::string& prefix, ParamRefs<S>& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
  }
};

// Scaled dot-product multi-head attention. Queries come from xq, keys and
// values from xkv; xq == xkv gives self-attention (caller sums the two
// input gradients in that case).
template <class S>
struct MultiHeadAttention {
  int n_heads = 1;
  Dense<S> wq, wk, wv, wo;

  struct Cache {
    Mat<S> xq, xkv;
    Mat<S> q, k, v;
    Mat<S> concat;               // pre-output-projection
    std::vector<Mat<S>> attn;    // per head, n_q x n_k
  };

  void init(Index dim, int heads, Rng& rng) {
    if (heads < 1 || dim % heads != 0)
      throw ConfigError("attention width must be divisible by head count");
    n_heads = heads;
    wq.init(dim, dim, rng);
    wk.init(dim, dim, rng);
    wv.init(dim, dim, rng);
    wo.init(dim, dim, rng);
  }

  Mat<S> forward(const Mat<S>& xq, const Mat<S>& xkv, Cache* cache) const {
    const Index dim = wq.w.value.cols();
    const Index hd = dim / n_heads;
    const S scale = S(1) / std::sqrt(S(hd));
    Mat<S> q = wq.forward(xq);
    Mat<S> k = wk.forward(xkv);
    Mat<S> v = wv.forward(xkv);
    Mat<S> concat(xq.rows(), dim);
    std::vector<Mat<S>> attn(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      auto qh = q.middleCols(h * hd, hd);
      auto kh = k.middleCols(h * hd, hd);
      auto vh = v.middleCols(h * hd, hd);
      Mat<S> p = softmax_rows<S>(qh * kh.transpose() * scale);
      concat.middleCols(h * hd, hd).noalias() = p * vh;
      attn[static_cast<std::size_t>(h)] = std::move(p);
    }
    Mat<S> out = wo.forward(concat);
    if (cache) {
      cache->xq = xq;
      cache->xkv = xkv;
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->concat = std::move(concat);
      cache->attn = std::move(attn);
    }
    return out;
  }

  // Returns dL/dxq; adds dL/dxkv into dxkv_accum (must be sized like xkv).
  Mat<S> backward(const Cache& cache, const Mat<S>& dy, Mat<S>& dxkv_accum) {
    const Index dim = wq.w.value.cols();
    const Index hd = dim / n_heads;
    const S scale = S(1) / std::sqrt(S(hd));
    Mat<S> dconcat = wo.backward(cache.concat, dy);
    Mat<S> dq = Mat<S>::Zero(cache.q.rows(), dim);
    Mat<S> dk = Mat<S>::Zero(cache.k.rows(), dim);
    Mat<S> dv = Mat<S>::Zero(cache.v.rows(), dim);
    for (int h = 0; h < n_heads; ++h) {
      const Mat<S>& p = cache.attn[static_cast<std::size_t>(h)];
      auto qh = cache.q.middleCols(h * hd, hd);
      auto kh = cache.k.middleCols(h * hd, hd);
      auto vh = cache.v.middleCols(h * hd, hd);
      auto doh = dconcat.middleCols(h * hd, hd);
      Mat<S> dp = doh * vh.transpose();
      dv.middleCols(h * hd, hd).noalias() = p.transpose() * doh;
      Mat<S> ds = softmax_backward_rows<S>(p, dp) * scale;
      dq.middleCols(h * hd, hd).noalias() = ds * kh;
      dk.middleCols(h * hd, hd).noalias() = ds.transpose() * qh;
    }
    dxkv_accum += wk.backward(cache.xkv, dk);
    dxkv_accum += wv.backward(cache.xkv, dv);
    return wq.backward(cache.xq, dq);
  }

  void collect(const std::string& prefix, ParamRefs<S>& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }
};

// Exact GELU, x * Phi(x).
template <class S>
Mat<S> gelu(const Mat<S>& x) {
  return x.unaryExpr([](S v) {
    const double xd = static_cast<double>(v);
    return static_cast<S>(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
  });
}

template <class S>
Mat<S> gelu_backward(const Mat<S>& x, const Mat<S>& dy) {
  Mat<S> dx(x.rows(), x.cols());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) {
      const double xd = static_cast<double>(x(i, j));
      const double phi = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
      dx(i, j) = dy(i, j) * static_cast<S>(phi + xd * pdf);
    }
  return dx;
}

template <class S>
struct FeedForward {
  Dense<S> fc1, fc2;

  struct Cache {
    Mat<S> x;
    Mat<S> pre;  // fc1 output before activation
    Mat<S> act;
  };

  void init(Index dim, Index hidden, Rng& rng) {
    fc1.init(dim, hidden, rng);
    fc2.init(hidden, dim, rng);
  }

  Mat<S> forward(const Mat<S>& x, Cache* cache) const {
    Mat<S> pre = fc1.forward(x);
    Mat<S> act = gelu(pre);
    Mat<S> out = fc2.forward(act);
    if (cache) {
      cache->x = x;
      cache->pre = std::move(pre);
      cache->act = std::move(act);
    }
    return out;
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dy) {
    Mat<S> dact = fc2.backward(cache.act, dy);
    Mat<S> dpre = gelu_backward(cache.pre, dact);
    return fc1.backward(cache.x, dpre);
  }

  void collect(const std::string& prefix, ParamRefs<S>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Inverted dropout; identity when rate is zero or no rng is supplied.
template <class S>
struct Dropout {
  S rate = S(0);

  struct Cache {
    Mat<S> mask;  // empty means identity
  };

  Mat<S> forward(const Mat<S>& x, Rng* rng, Cache* cache) const {
    if (rate <= S(0) || rng == nullptr) {
      if (cache) cache->mask.resize(0, 0);
      return x;
    }
    const S keep = S(1) - rate;
    Mat<S> mask(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j)
        mask(i, j) = rng->uniform() < static_cast<double>(rate)
                         ? S(0)
                         : S(1) / keep;
    if (cache) cache->mask = mask;
    return x.cwiseProduct(mask);
  }

  Mat<S> backward(const Cache& cache, const Mat<S>& dy) const {
    if (cache.mask.size() == 0) return dy;
    return dy.cwiseProduct(cache.mask);
  }
};

// Adaptive moment estimation over a fixed parameter list.
template <class S>
class Adam {
 public:
  explicit Adam(S lr = S(1e-3), S beta1 = S(0.9), S beta2 = S(0.999),
                S eps = S(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamRefs<S>& params) {
    if (m_.empty()) {
      for (auto& [name, t] : params) {
        m_.push_back(Mat<S>::Zero(t->value.rows(), t->value.cols()));
        v_.push_back(Mat<S>::Zero(t->value.rows(), t->value.cols()));
      }
    }
    if (m_.size() != params.size())
      throw NumericError("optimizer bound to a different parameter list");
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_),
                                                 static_cast<double>(t_)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_),
                                                 static_cast<double>(t_)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& g = params[i].second->grad;
      m_[i] = beta1_ * m_[i] + (S(1) - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (S(1) - beta2_) * g.cwiseProduct(g);
      auto m_hat = m_[i] / bc1;
      auto v_hat = v_[i] / bc2;
      params[i].second->value.array() -=
          lr_ * m_hat.array() / (v_hat.array().sqrt() + eps_);
    }
  }

 private:
  S lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat<S>> m_, v_;
};

// Sinusoidal position/timestep code, interleaved [sin, cos, sin, cos, ...].
template <class S>
Mat<S> sinusoid_code(double t, Index dim) {
  if (dim % 2 != 0) throw ConfigError("sinusoid code needs an even dimension");
  Mat<S> out(1, dim);
  for (Index i = 0; i < dim / 2; ++i) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(i) /
                              static_cast<double>(dim));
    out(0, 2 * i) = static_cast<S>(std::sin(t * freq));
    out(0, 2 * i + 1) = static_cast<S>(std::cos(t * freq));
  }
  return out;
}

}  // namespace prosody::nn
