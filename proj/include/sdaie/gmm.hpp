#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sdaie/checkpoint.hpp"
#include "sdaie/common.hpp"

namespace sdaie {

using MatD = Eigen::MatrixXd;
using VecD = Eigen::VectorXd;

inline constexpr double kDefaultRho = 0.02;
inline constexpr double kDefaultRidgeScale = 1e-6;

/// Full-covariance Gaussian mixture with a decision threshold on log p(v).
struct GmmModel {
  int K = 0;
  int dim = 0;
  VecD pi;
  std::vector<VecD> mu;
  std::vector<MatD> sigma;
  double ridge = 0.0;
  double tau = -std::numeric_limits<double>::infinity();
  double rho = kDefaultRho;

  /// Factorizes every covariance; must be called after any parameter change.
  void prepare() {
    chol_.clear();
    log_norm_.clear();
    for (int k = 0; k < K; ++k) {
      Eigen::LLT<MatD> llt(sigma[static_cast<std::size_t>(k)]);
      if (llt.info() != Eigen::Success) throw Error("gmm: covariance of component " + std::to_string(k) + " is singular");
      const MatD& l = llt.matrixL();
      const double logdet = 2.0 * l.diagonal().array().log().sum();
      if (!std::isfinite(logdet)) throw Error("gmm: covariance of component " + std::to_string(k) + " is singular");
      log_norm_.push_back(-0.5 * (dim * std::log(2.0 * std::numbers::pi) + logdet));
      chol_.push_back(l);
    }
  }

  bool prepared() const { return static_cast<int>(chol_.size()) == K; }

  /// log pi_k + log N(x_i; mu_k, Sigma_k) as an (N x K) matrix. Rows of X are samples.
  MatD component_log_density(const MatD& x) const {
    if (!prepared()) throw Error("gmm: model not prepared");
    if (x.cols() != dim) throw Error("gmm: feature dimension " + std::to_string(x.cols()) + " != " + std::to_string(dim));
    MatD out(x.rows(), K);
    for (int k = 0; k < K; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      MatD centered = (x.rowwise() - mu[ks].transpose()).transpose();  // dim x N
      chol_[ks].triangularView<Eigen::Lower>().solveInPlace(centered);
      const double lp = pi(k) > 0 ? std::log(pi(k)) : -std::numeric_limits<double>::infinity();
      out.col(k) = (lp + log_norm_[ks]) - 0.5 * centered.colwise().squaredNorm().transpose().array();
    }
    return out;
  }

  void validate() const {
    if (K < 1 || dim < 1) throw Error("gmm: K and dim must be positive");
    if (pi.size() != K || mu.size() != static_cast<std::size_t>(K) || sigma.size() != static_cast<std::size_t>(K))
      throw Error("gmm: parameter count does not match K");
    if ((pi.array() < 0).any() || std::abs(pi.sum() - 1.0) > 1e-9) throw Error("gmm: weights must be >= 0 and sum to 1");
    for (int k = 0; k < K; ++k) {
      const auto& s = sigma[static_cast<std::size_t>(k)];
      if (mu[static_cast<std::size_t>(k)].size() != dim || s.rows() != dim || s.cols() != dim)
        throw Error("gmm: component shape mismatch");
      if (!s.isApprox(s.transpose(), 1e-12)) throw Error("gmm: covariance not symmetric");
    }
    if (!(ridge > 0)) throw Error("gmm: ridge must be positive");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["K"] = K;
    j["feature_dim"] = dim;
    j["pi"] = std::vector<double>(pi.data(), pi.data() + pi.size());
    j["mu"] = nlohmann::json::array();
    j["sigma"] = nlohmann::json::array();
    for (int k = 0; k < K; ++k) {
      const auto& m = mu[static_cast<std::size_t>(k)];
      j["mu"].push_back(std::vector<double>(m.data(), m.data() + m.size()));
      nlohmann::json rows = nlohmann::json::array();
      const auto& s = sigma[static_cast<std::size_t>(k)];
      for (int r = 0; r < dim; ++r) {
        std::vector<double> row(static_cast<std::size_t>(dim));
        for (int c = 0; c < dim; ++c) row[static_cast<std::size_t>(c)] = s(r, c);
        rows.push_back(std::move(row));
      }
      j["sigma"].push_back(std::move(rows));
    }
    j["ridge"] = ridge;
    j["tau"] = std::isfinite(tau) ? nlohmann::json(tau) : nlohmann::json(nullptr);
    j["rho"] = rho;
    return j;
  }

  static GmmModel from_json(const nlohmann::json& j) {
    GmmModel g;
    try {
      g.K = j.at("K").get<int>();
      g.dim = j.at("feature_dim").get<int>();
      const auto p = j.at("pi").get<std::vector<double>>();
      g.pi = Eigen::Map<const VecD>(p.data(), static_cast<Eigen::Index>(p.size()));
      for (const auto& m : j.at("mu")) {
        const auto v = m.get<std::vector<double>>();
        g.mu.emplace_back(Eigen::Map<const VecD>(v.data(), static_cast<Eigen::Index>(v.size())));
      }
      for (const auto& s : j.at("sigma")) {
        MatD m(g.dim, g.dim);
        if (s.size() != static_cast<std::size_t>(g.dim)) throw Error("gmm: sigma has wrong row count");
        for (int r = 0; r < g.dim; ++r) {
          const auto row = s[static_cast<std::size_t>(r)].get<std::vector<double>>();
          if (row.size() != static_cast<std::size_t>(g.dim)) throw Error("gmm: sigma has wrong column count");
          for (int c = 0; c < g.dim; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
        }
        g.sigma.push_back(std::move(m));
      }
      g.ridge = j.at("ridge").get<double>();
      g.tau = j.at("tau").is_null() ? -std::numeric_limits<double>::infinity() : j.at("tau").get<double>();
      g.rho = j.value("rho", kDefaultRho);
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("gmm.json: ") + e.what());
    }
    g.validate();
    g.prepare();
    return g;
  }

  std::uint64_t digest() const {
    Fnv1a h;
    h.update(&K, sizeof K);
    h.update(&dim, sizeof dim);
    auto put = [&](const double* d, Eigen::Index n) { h.update(d, static_cast<std::size_t>(n) * sizeof(double)); };
    put(pi.data(), pi.size());
    for (const auto& m : mu) put(m.data(), m.size());
    for (const auto& s : sigma) put(s.data(), s.size());
    h.update(&ridge, sizeof ridge);
    return h.value();
  }

 private:
  std::vector<MatD> chol_;
  std::vector<double> log_norm_;
};

inline double log_sum_exp(const Eigen::Ref<const VecD>& a) {
  const double mx = a.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((a.array() - mx).exp().sum());
}

struct EStepResult {
  MatD q;             // N x K responsibilities
  VecD log_lik;       // per-sample log p(x_i)
  double mean_log_lik = 0.0;
};

/// Responsibilities computed in log space.
inline EStepResult e_step(const MatD& x, const GmmModel& model) {
  const MatD lp = model.component_log_density(x);
  EStepResult r;
  r.q.resize(x.rows(), model.K);
  r.log_lik.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double l = log_sum_exp(lp.row(i).transpose());
    if (!std::isfinite(l)) throw Error("gmm e_step: sample " + std::to_string(i) + " has zero density under every component");
    r.log_lik(i) = l;
    r.q.row(i) = (lp.row(i).array() - l).exp();
    r.q.row(i) /= r.q.row(i).sum();
  }
  r.mean_log_lik = r.log_lik.mean();
  return r;
}

/// Ridge used when fitting: scale * trace(sample covariance) / dim.
inline double default_ridge(const MatD& x, double scale = kDefaultRidgeScale) {
  const VecD mean = x.colwise().mean().transpose();
  const MatD c = x.rowwise() - mean.transpose();
  const double tr = c.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, x.rows() - 1));
  const double r = scale * tr / static_cast<double>(x.cols());
  return r > 0 ? r : scale;
}

/// Weighted updates of weights, means and covariances; `ridge` is added to
/// each covariance diagonal. Components with zero mass are re-seeded at a
/// random sample; their indices are appended to `reseeded`.
inline void m_step(const MatD& x, const MatD& q, GmmModel& model, Rng* rng = nullptr,
                   std::vector<int>* reseeded = nullptr) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (q.rows() != n || q.cols() != model.K) throw Error("gmm m_step: responsibility shape mismatch");
  if (!(model.ridge > 0)) throw Error("gmm m_step: ridge must be positive");
  const VecD mass = q.colwise().sum().transpose();
  model.dim = static_cast<int>(d);
  model.mu.resize(static_cast<std::size_t>(model.K));
  model.sigma.resize(static_cast<std::size_t>(model.K));
  model.pi = mass / static_cast<double>(n);
  for (int k = 0; k < model.K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (!(mass(k) > 0)) {
      Rng fallback(0x5eed + static_cast<std::uint64_t>(k));
      Rng& r = rng ? *rng : fallback;
      model.mu[ks] = x.row(static_cast<Eigen::Index>(r.below(static_cast<std::uint64_t>(n)))).transpose();
      const MatD c = x.rowwise() - x.colwise().mean();
      model.sigma[ks] = (c.transpose() * c) / static_cast<double>(std::max<Eigen::Index>(1, n - 1));
      model.sigma[ks].diagonal().array() += model.ridge;
      model.pi(k) = 1.0 / static_cast<double>(n);
      if (reseeded) reseeded->push_back(k);
      continue;
    }
    model.mu[ks] = (q.col(k).transpose() * x).transpose() / mass(k);
    const MatD c = (x.rowwise() - model.mu[ks].transpose()).array().colwise() * q.col(k).array().sqrt();
    MatD s = MatD::Zero(d, d);
    s.selfadjointView<Eigen::Lower>().rankUpdate(c.transpose(), 1.0 / mass(k));
    model.sigma[ks] = s.selfadjointView<Eigen::Lower>();
    model.sigma[ks].diagonal().array() += model.ridge;
  }
  model.pi /= model.pi.sum();
  model.prepare();
}

struct GmmFitOptions {
  int K = 5;
  std::uint64_t seed = 0;
  int max_iter = 200;
  double tol = 1e-6;
  double ridge_scale = kDefaultRidgeScale;
};

struct GmmFitReport {
  std::vector<double> log_likelihood;  // mean training log-likelihood after each M-step
  std::vector<int> reseeded;
  int iterations = 0;
  bool converged = false;

  /// Largest drop between consecutive iterations (<= 0 when monotone).
  double worst_decrease() const {
    double w = 0.0;
    for (std::size_t i = 1; i < log_likelihood.size(); ++i) w = std::max(w, log_likelihood[i - 1] - log_likelihood[i]);
    return w;
  }
};

/// k-means++ style seeding followed by EM.
inline GmmModel fit_gmm(const MatD& x, const GmmFitOptions& opt, GmmFitReport* report = nullptr) {
  const Eigen::Index n = x.rows();
  if (opt.K < 1) throw Error("fit_gmm: K must be >= 1");
  if (n < opt.K) throw Error("fit_gmm: need at least K=" + std::to_string(opt.K) + " samples, got " + std::to_string(n));
  if (!x.allFinite()) throw Error("fit_gmm: non-finite feature");
  Rng rng(mix_seed(opt.seed, 0x6e44));

  std::vector<Eigen::Index> centers{static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)))};
  VecD d2 = (x.rowwise() - x.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < opt.K) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2(pick);
        if (u < 0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(pick);
    d2 = d2.cwiseMin((x.rowwise() - x.row(pick)).rowwise().squaredNorm());
  }
  MatD q = MatD::Zero(n, opt.K);
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    double bd = INFINITY;
    for (int k = 0; k < opt.K; ++k) {
      const double dd = (x.row(i) - x.row(centers[static_cast<std::size_t>(k)])).squaredNorm();
      if (dd < bd) bd = dd, best = k;
    }
    q(i, best) = 1.0;
  }

  GmmModel model;
  model.K = opt.K;
  model.ridge = default_ridge(x, opt.ridge_scale);
  GmmFitReport rep;
  m_step(x, q, model, &rng, &rep.reseeded);
  double prev = -INFINITY;
  for (int it = 0; it < opt.max_iter; ++it) {
    const auto e = e_step(x, model);
    rep.log_likelihood.push_back(e.mean_log_lik);
    rep.iterations = it + 1;
    if (std::isfinite(prev) && std::abs(e.mean_log_lik - prev) < opt.tol * std::abs(prev)) {
      rep.converged = true;
      break;
    }
    prev = e.mean_log_lik;
    m_step(x, e.q, model, &rng, &rep.reseeded);
  }
  if (report) *report = std::move(rep);
  return model;
}

inline double score(const VecD& v, const GmmModel& model) {
  const MatD lp = model.component_log_density(v.transpose());
  return log_sum_exp(lp.row(0).transpose());
}

inline VecD score_all(const MatD& x, const GmmModel& model) {
  const MatD lp = model.component_log_density(x);
  VecD s(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) s(i) = log_sum_exp(lp.row(i).transpose());
  return s;
}

/// Empirical rho-quantile, linear interpolation between order statistics
/// at position (M - 1) * rho.
inline double calibrate_threshold(std::vector<double> scores, double rho = kDefaultRho) {
  if (scores.empty()) throw Error("calibrate_threshold: no scores");
  if (!(rho > 0 && rho < 1)) throw Error("calibrate_threshold: rho must be in (0, 1)");
  std::sort(scores.begin(), scores.end());
  const double h = static_cast<double>(scores.size() - 1) * rho;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, scores.size() - 1);
  return scores[lo] + (h - static_cast<double>(lo)) * (scores[hi] - scores[lo]);
}

/// Strict comparison: a score equal to tau is photographic.
inline bool is_generated(double s, double tau) { return s < tau; }

inline void save_gmm(const GmmModel& g, const std::filesystem::path& path) { io::write_json(g.to_json(), path); }
inline GmmModel load_gmm(const std::filesystem::path& path) { return GmmModel::from_json(io::read_json(path)); }

}  // namespace sdaie
