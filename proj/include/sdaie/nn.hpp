#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sdaie/common.hpp"

// Layers with explicit forward/backward passes. Feature maps are stored as
// (channels x H*W) row-major matrices; token sets as (tokens x features).
namespace sdaie::nn {

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

template <typename T>
void fill_normal(Mat<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, zero padding 1.

template <typename T>
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(const std::string& name, int cin, int cout)
      : cin_(cin), cout_(cout), weight_(name + ".weight", cout, cin * 9), bias_(name + ".bias", 1, cout) {}

  void init(Rng& rng) {
    fill_normal(weight_.value, rng, std::sqrt(2.0 / (cin_ * 9)));
    bias_.value.setZero();
  }

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }

  Mat<T> forward(const Mat<T>& x, int h, int w) const {
    check(x, h, w);
    Mat<T> cols = im2col(x, h, w);
    Mat<T> y = weight_.value * cols;
    y.colwise() += bias_.value.row(0).transpose();
    return y;
  }

  /// Accumulates parameter gradients; writes the input gradient when `dx` is set.
  void backward(const Mat<T>& x, int h, int w, const Mat<T>& dy, Mat<T>* dx) {
    Mat<T> cols = im2col(x, h, w);
    weight_.grad.noalias() += dy * cols.transpose();
    bias_.grad += dy.rowwise().sum().transpose();
    if (dx) {
      Mat<T> dcols = weight_.value.transpose() * dy;
      *dx = col2im(dcols, h, w);
    }
  }

  template <typename F>
  void visit(F&& f) {
    f(weight_);
    f(bias_);
  }

 private:
  void check(const Mat<T>& x, int h, int w) const {
    if (x.rows() != cin_ || x.cols() != static_cast<Eigen::Index>(h) * w)
      throw Error("conv: expected " + std::to_string(cin_) + "x" + std::to_string(h * w) + " input, got " +
                  std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
  }

  Mat<T> im2col(const Mat<T>& x, int h, int w) const {
    Mat<T> cols = Mat<T>::Zero(static_cast<Eigen::Index>(cin_) * 9, static_cast<Eigen::Index>(h) * w);
    for (int c = 0; c < cin_; ++c) {
      const T* src = x.row(c).data();
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = cols.row(c * 9 + ky * 3 + kx).data();
          const int dy = ky - 1, dxo = kx - 1;
          const int x0 = std::max(0, -dxo), x1 = std::min(w, w - dxo);
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            const T* s = src + static_cast<std::ptrdiff_t>(sy) * w + dxo;
            T* d = dst + static_cast<std::ptrdiff_t>(y) * w;
            for (int xx = x0; xx < x1; ++xx) d[xx] = s[xx];
          }
        }
    }
    return cols;
  }

  Mat<T> col2im(const Mat<T>& cols, int h, int w) const {
    Mat<T> x = Mat<T>::Zero(cin_, static_cast<Eigen::Index>(h) * w);
    for (int c = 0; c < cin_; ++c) {
      T* dst = x.row(c).data();
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = cols.row(c * 9 + ky * 3 + kx).data();
          const int dy = ky - 1, dxo = kx - 1;
          const int x0 = std::max(0, -dxo), x1 = std::min(w, w - dxo);
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            T* d = dst + static_cast<std::ptrdiff_t>(sy) * w + dxo;
            const T* s = src + static_cast<std::ptrdiff_t>(y) * w;
            for (int xx = x0; xx < x1; ++xx) d[xx] += s[xx];
          }
        }
    }
    return x;
  }

  int cin_ = 0, cout_ = 0;
  Param<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Layer normalization over a whole (C x HW) map with per-channel gain/bias.

template <typename T>
class MapLayerNorm {
 public:
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<T> xhat;
    T inv_std{};
  };

  MapLayerNorm() = default;
  MapLayerNorm(const std::string& name, int channels)
      : gain_(name + ".gain", 1, channels), bias_(name + ".bias", 1, channels) {
    gain_.value.setOnes();
  }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    const T mean = x.mean();
    const T var = (x.array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + T(kEps));
    Mat<T> xhat = (x.array() - mean) * inv;
    Mat<T> y = (xhat.array().colwise() * gain_.value.row(0).transpose().array()).colwise() + bias_.value.row(0).transpose().array();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = inv;
    }
    return y;
  }

  Mat<T> backward(const Cache& cache, const Mat<T>& dy) {
    gain_.grad += (dy.array() * cache.xhat.array()).rowwise().sum().matrix().transpose();
    bias_.grad += dy.rowwise().sum().transpose();
    Mat<T> dxhat = dy.array().colwise() * gain_.value.row(0).transpose().array();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat.array() * cache.xhat.array()).mean();
    return ((dxhat.array() - m1 - cache.xhat.array() * m2) * cache.inv_std).matrix();
  }

  template <typename F>
  void visit(F&& f) {
    f(gain_);
    f(bias_);
  }

 private:
  Param<T> gain_, bias_;
};

template <typename T>
Mat<T> avg_pool2(const Mat<T>& x, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  Mat<T> y(x.rows(), static_cast<Eigen::Index>(oh) * ow);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const T* s = x.row(c).data();
    T* d = y.row(c).data();
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx) {
        const T* p = s + static_cast<std::ptrdiff_t>(2 * yy) * w + 2 * xx;
        d[yy * ow + xx] = (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
      }
  }
  return y;
}

template <typename T>
Mat<T> avg_pool2_backward(const Mat<T>& dy, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  Mat<T> dx = Mat<T>::Zero(dy.rows(), static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    const T* s = dy.row(c).data();
    T* d = dx.row(c).data();
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx) {
        const T g = s[yy * ow + xx] * T(0.25);
        T* p = d + static_cast<std::ptrdiff_t>(2 * yy) * w + 2 * xx;
        p[0] += g;
        p[1] += g;
        p[w] += g;
        p[w + 1] += g;
      }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Conv -> LayerNorm -> ReLU -> optional 2x2 average pool.

template <typename T>
class ConvBlock {
 public:
  struct Cache {
    Mat<T> input;
    typename MapLayerNorm<T>::Cache norm;
    Mat<T> activated;
    int h = 0, w = 0;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, int cin, int cout, bool pool)
      : conv_(name + ".conv", cin, cout), norm_(name + ".norm", cout), pool_(pool) {}

  void init(Rng& rng) { conv_.init(rng); }
  bool pools() const { return pool_; }

  Mat<T> forward(const Mat<T>& x, int h, int w, Cache* cache) const {
    Mat<T> y = conv_.forward(x, h, w);
    Mat<T> a = norm_.forward(y, cache ? &cache->norm : nullptr).cwiseMax(T(0));
    Mat<T> out = pool_ ? avg_pool2(a, h, w) : a;
    if (cache) {
      cache->input = x;
      cache->activated = std::move(a);
      cache->h = h;
      cache->w = w;
    }
    return out;
  }

  void backward(const Cache& cache, const Mat<T>& dout, Mat<T>* dx) {
    Mat<T> da = pool_ ? avg_pool2_backward(dout, cache.h, cache.w) : dout;
    da = (cache.activated.array() > T(0)).select(da, T(0));
    Mat<T> dy = norm_.backward(cache.norm, da);
    conv_.backward(cache.input, cache.h, cache.w, dy, dx);
  }

  template <typename F>
  void visit(F&& f) {
    conv_.visit(f);
    norm_.visit(f);
  }

 private:
  Conv3x3<T> conv_;
  MapLayerNorm<T> norm_;
  bool pool_ = false;
};

// ---------------------------------------------------------------------------
// Dense layers over token sets.

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out)
      : in_(in), out_(out), weight_(name + ".weight", in, out), bias_(name + ".bias", 1, out) {}

  void init(Rng& rng, double gain = 1.0) {
    fill_normal(weight_.value, rng, gain / std::sqrt(static_cast<double>(in_)));
    bias_.value.setZero();
  }
  void init_uniform(Rng& rng, double half_width) {
    for (Eigen::Index i = 0; i < weight_.value.size(); ++i)
      weight_.value.data()[i] = static_cast<T>(rng.uniform(-half_width, half_width));
    bias_.value.setZero();
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Mat<T> forward(const Mat<T>& x) const {
    if (x.cols() != in_)
      throw Error("linear '" + weight_.name + "': expected " + std::to_string(in_) + " features, got " +
                  std::to_string(x.cols()));
    Mat<T> y = x * weight_.value;
    y.rowwise() += bias_.value.row(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
    weight_.grad.noalias() += x.transpose() * dy;
    bias_.grad += dy.colwise().sum();
    return dy * weight_.value.transpose();
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  template <typename F>
  void visit(F&& f) {
    f(weight_);
    f(bias_);
  }

 private:
  int in_ = 0, out_ = 0;
  Param<T> weight_, bias_;
};

template <typename T>
class TokenLayerNorm {
 public:
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<T> xhat;
    Vec<T> inv_std;
  };

  TokenLayerNorm() = default;
  TokenLayerNorm(const std::string& name, int dim) : gain_(name + ".gain", 1, dim), bias_(name + ".bias", 1, dim) {
    gain_.value.setOnes();
  }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    const Eigen::Index n = x.rows();
    Mat<T> xhat(n, x.cols());
    Vec<T> inv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T mean = x.row(i).mean();
      const T var = (x.row(i).array() - mean).square().mean();
      inv(i) = T(1) / std::sqrt(var + T(kEps));
      xhat.row(i) = (x.row(i).array() - mean) * inv(i);
    }
    Mat<T> y = (xhat.array().rowwise() * gain_.value.row(0).array()).rowwise() + bias_.value.row(0).array();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  Mat<T> backward(const Cache& cache, const Mat<T>& dy) {
    gain_.grad += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    bias_.grad += dy.colwise().sum();
    Mat<T> dxhat = dy.array().rowwise() * gain_.value.row(0).array();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const T m1 = dxhat.row(i).mean();
      const T m2 = (dxhat.row(i).array() * cache.xhat.row(i).array()).mean();
      dx.row(i) = (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2) * cache.inv_std(i);
    }
    return dx;
  }

  template <typename F>
  void visit(F&& f) {
    f(gain_);
    f(bias_);
  }

 private:
  Param<T> gain_, bias_;
};

template <typename T>
void softmax_rows(Mat<T>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const T mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

/// Multi-head self-attention without any positional term.
template <typename T>
class SelfAttention {
 public:
  struct Cache {
    Mat<T> x, q, k, v, concat;
    std::vector<Mat<T>> probs;
  };

  SelfAttention() = default;
  SelfAttention(const std::string& name, int dim, int heads)
      : dim_(dim),
        heads_(heads),
        q_(name + ".query", dim, dim),
        k_(name + ".key", dim, dim),
        v_(name + ".value", dim, dim),
        o_(name + ".out", dim, dim) {
    if (dim % heads != 0) throw Error("attention: dim must be divisible by heads");
  }

  void init(Rng& rng) {
    q_.init(rng);
    k_.init(rng);
    v_.init(rng);
    o_.init(rng, 0.5);
  }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    const int hd = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Mat<T> q = q_.forward(x), k = k_.forward(x), v = v_.forward(x);
    Mat<T> concat(x.rows(), dim_);
    std::vector<Mat<T>> probs;
    for (int h = 0; h < heads_; ++h) {
      Mat<T> s = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
      softmax_rows(s);
      concat.middleCols(h * hd, hd) = s * v.middleCols(h * hd, hd);
      if (cache) probs.push_back(std::move(s));
    }
    Mat<T> out = o_.forward(concat);
    if (cache) {
      cache->x = x;
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->concat = std::move(concat);
      cache->probs = std::move(probs);
    }
    return out;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dout) {
    const int hd = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Mat<T> dconcat = o_.backward(c.concat, dout);
    Mat<T> dq(c.q.rows(), dim_), dk(c.k.rows(), dim_), dv(c.v.rows(), dim_);
    for (int h = 0; h < heads_; ++h) {
      const Mat<T>& p = c.probs[static_cast<std::size_t>(h)];
      Mat<T> doh = dconcat.middleCols(h * hd, hd);
      Mat<T> dp = doh * c.v.middleCols(h * hd, hd).transpose();
      dv.middleCols(h * hd, hd) = p.transpose() * doh;
      Vec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
      Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
      dq.middleCols(h * hd, hd) = ds * c.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd) = ds.transpose() * c.q.middleCols(h * hd, hd);
    }
    Mat<T> dx = q_.backward(c.x, dq);
    dx += k_.backward(c.x, dk);
    dx += v_.backward(c.x, dv);
    return dx;
  }

  template <typename F>
  void visit(F&& f) {
    q_.visit(f);
    k_.visit(f);
    v_.visit(f);
    o_.visit(f);
  }

 private:
  int dim_ = 0, heads_ = 1;
  Linear<T> q_, k_, v_, o_;
};

/// Pre-norm encoder layer: x + attn(ln(x)), then x + ffn(ln(x)).
template <typename T>
class EncoderLayer {
 public:
  struct Cache {
    typename TokenLayerNorm<T>::Cache ln1, ln2;
    typename SelfAttention<T>::Cache attn;
    Mat<T> h2, hidden;
  };

  EncoderLayer() = default;
  EncoderLayer(const std::string& name, int dim, int heads, int ff)
      : ln1_(name + ".ln1", dim),
        attn_(name + ".attn", dim, heads),
        ln2_(name + ".ln2", dim),
        ff1_(name + ".ff1", dim, ff),
        ff2_(name + ".ff2", ff, dim) {}

  void init(Rng& rng) {
    attn_.init(rng);
    ff1_.init(rng, std::sqrt(2.0));
    ff2_.init(rng, 0.5);
  }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    Mat<T> h1 = ln1_.forward(x, cache ? &cache->ln1 : nullptr);
    Mat<T> x2 = x + attn_.forward(h1, cache ? &cache->attn : nullptr);
    Mat<T> h2 = ln2_.forward(x2, cache ? &cache->ln2 : nullptr);
    Mat<T> hidden = ff1_.forward(h2).cwiseMax(T(0));
    Mat<T> out = x2 + ff2_.forward(hidden);
    if (cache) {
      cache->h2 = std::move(h2);
      cache->hidden = std::move(hidden);
    }
    return out;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dout) {
    Mat<T> dhidden = ff2_.backward(c.hidden, dout);
    dhidden = (c.hidden.array() > T(0)).select(dhidden, T(0));
    Mat<T> dx2 = dout + ln2_.backward(c.ln2, ff1_.backward(c.h2, dhidden));
    return dx2 + ln1_.backward(c.ln1, attn_.backward(c.attn, dx2));
  }

  template <typename F>
  void visit(F&& f) {
    ln1_.visit(f);
    attn_.visit(f);
    ln2_.visit(f);
    ff1_.visit(f);
    ff2_.visit(f);
  }

 private:
  TokenLayerNorm<T> ln1_;
  SelfAttention<T> attn_;
  TokenLayerNorm<T> ln2_;
  Linear<T> ff1_, ff2_;
};

}  // namespace sdaie::nn
