#pragma once

#include <cmath>
#include <vector>

#include "sdaie/common.hpp"
#include "sdaie/nn.hpp"

namespace sdaie {

template <typename T>
using ParamList = std::vector<nn::Param<T>*>;

template <typename T, typename Model>
ParamList<T> collect_params(Model& model) {
  ParamList<T> out;
  model.visit([&](nn::Param<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
std::size_t count_scalars(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

/// Digest over parameter names and their float32 values.
template <typename T>
std::uint64_t params_digest(const ParamList<T>& params) {
  Fnv1a h;
  for (const auto* p : params) {
    h.update(p->name);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const float f = static_cast<float>(p->value.data()[i]);
      h.update(&f, sizeof f);
    }
  }
  return h.value();
}

/// Copies values between parameter lists of identical layout (names and
/// shapes must match), converting the scalar type.
template <typename S, typename D>
void copy_params(const ParamList<S>& src, const ParamList<D>& dst) {
  if (src.size() != dst.size()) throw Error("copy_params: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->name != dst[i]->name || src[i]->value.rows() != dst[i]->value.rows() ||
        src[i]->value.cols() != dst[i]->value.cols())
      throw Error("copy_params: layout mismatch at '" + src[i]->name + "'");
    dst[i]->value = src[i]->value.template cast<D>();
  }
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer with bias correction.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& g = params_[i]->grad;
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      params_[i]->value.array() -= step * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  long long steps() const { return t_; }
  const ParamList<T>& params() const { return params_; }

 private:
  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace sdaie
