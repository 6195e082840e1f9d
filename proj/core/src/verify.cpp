#include "gblm/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>

#include <Eigen/QR>

#include "gblm/toy_lm.hpp"

namespace gblm {

namespace {

using Clock = std::chrono::steady_clock;

VectorD normal_vector(SplitMix64& rng, Index n) {
  VectorD v(n);
  for (Index k = 0; k < n; ++k) v(k) = rng.normal();
  return v;
}

MatrixD normal_matrix(SplitMix64& rng, Index r, Index c) {
  MatrixD m(r, c);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return m;
}

Index dim_for(std::uint64_t seed, int instance) {
  SplitMix64 rng(seed ^ (0x9d1Aull * static_cast<std::uint64_t>(instance + 1)));
  return 2 + static_cast<Index>(rng.below(15));  // 2..16
}

std::uint64_t instance_seed(const VerifyOptions& opt, std::uint64_t salt, int instance) {
  return opt.seed ^ (salt * 0x100000001B3ull) ^ (static_cast<std::uint64_t>(instance) << 20);
}

CheckResult finish(std::string name, double measured, double tolerance, bool passed, Clock::time_point t0,
                   std::string detail = {}) {
  CheckResult c;
  c.name = std::move(name);
  c.measured = measured;
  c.tolerance = tolerance;
  c.passed = passed;
  c.detail = std::move(detail);
  c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return c;
}

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double lx = std::log(x[k]);
    const double ly = std::log(y[k]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

QuadModel random_quad_model(std::uint64_t seed, Index n, double grad_scale) {
  SplitMix64 rng(seed);
  const MatrixD a = normal_matrix(rng, n + 2, n);
  QuadModel q;
  q.hessian = a.transpose() * a;
  q.hessian.diagonal().array() += 0.1;
  q.hessian = 0.5 * (q.hessian + q.hessian.transpose()).eval();
  q.w = normal_vector(rng, n);
  q.g = grad_scale * normal_vector(rng, n);
  return q;
}

CheckResult check_obs_substitution(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-10;
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const auto q = random_quad_model(instance_seed(opt, 1, k), dim_for(opt.seed, k));
    for (Index m = 0; m < q.size(); ++m) {
      const auto s = obs_delta_e_full(q, m, opt.mutation);
      worst = std::max(worst, std::abs(s.delta_e - quadratic_objective(q, s.delta_w)));
    }
  }
  return finish("obs_closed_form_substitution", worst, tol, worst <= tol, t0,
                "closed-form dE vs g'dw + 1/2 dw'H dw at the returned dw, all m");
}

CheckResult check_obs_constraint(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-10;
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const auto q = random_quad_model(instance_seed(opt, 2, k), dim_for(opt.seed, k));
    for (Index m = 0; m < q.size(); ++m) {
      const auto s = obs_delta_e_full(q, m, opt.mutation);
      worst = std::max(worst, std::abs(q.w(m) + s.delta_w(m)));
      // Stationarity of the Lagrangian: g + H dw + lambda e_m = 0.
      VectorD r = q.g + q.hessian * s.delta_w;
      r(m) += s.lagrange_lambda;
      worst = std::max(worst, r.cwiseAbs().maxCoeff() / std::max(1.0, q.hessian.cwiseAbs().maxCoeff()));
    }
  }
  return finish("obs_constraint_and_stationarity", worst, tol, worst <= tol, t0,
                "w_m + dw_m = 0 and g + H dw + lambda e_m = 0");
}

CheckResult check_obs_optimality(const VerifyOptions& opt, int instances, int perturbations) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-12;
  double worst = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < instances; ++k) {
    const auto q = random_quad_model(instance_seed(opt, 3, k), dim_for(opt.seed, k));
    SplitMix64 rng(instance_seed(opt, 33, k));
    for (Index m = 0; m < q.size(); ++m) {
      const auto s = obs_delta_e_full(q, m, opt.mutation);
      for (int p = 0; p < perturbations; ++p) {
        VectorD z = normal_vector(rng, q.size()) * std::pow(10.0, -3.0 * rng.uniform());
        z(m) = 0.0;
        // Positive when the feasible alternative undercuts the closed form.
        worst = std::max(worst, s.delta_e - quadratic_objective(q, s.delta_w + z));
      }
    }
  }
  return finish("obs_constrained_optimality", worst, tol, worst <= tol, t0,
                "max over feasible perturbations of dE(closed form) - dE(perturbed)");
}

CheckResult check_zero_gradient_collapse(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-12;
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    auto q = random_quad_model(instance_seed(opt, 4, k), dim_for(opt.seed, k));
    q.g.setZero();
    for (Index m = 0; m < q.size(); ++m) {
      const double classic = obs_saliency_classic(q, m);
      worst = std::max(worst, std::abs(obs_delta_e_full(q, m, opt.mutation).delta_e - classic));
      worst = std::max(worst, std::abs(obs_delta_e_first_order(q, m) - classic));
    }
  }
  return finish("obs_zero_gradient_collapse", worst, tol, worst <= tol, t0,
                "g = 0: full, first-order and classic saliencies agree");
}

CheckResult check_diagonal_chain(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-12;
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    SplitMix64 rng(instance_seed(opt, 5, k));
    const Index n = dim_for(opt.seed, k);
    const Index rows = 4 + static_cast<Index>(rng.below(8));
    const MatrixD x = normal_matrix(rng, rows, n) / std::sqrt(static_cast<double>(rows));
    const VectorD xnorm = x.colwise().norm().transpose();
    QuadModel q;
    q.hessian = MatrixD(2.0 * xnorm.cwiseAbs2().asDiagonal());
    q.w = normal_vector(rng, n);
    q.g = 0.1 * normal_vector(rng, n);
    for (Index m = 0; m < n; ++m) {
      const double eq8 = obs_delta_e_first_order(q, m);
      const double eq11 = obs_delta_e_diag(q.w(m), xnorm(m), q.g(m));
      worst = std::max(worst, std::abs(eq8 - eq11));
    }
  }
  return finish("obs_diagonal_chain", worst, tol, worst <= tol, t0,
                "H = 2 diag(||x_j||^2): first-order dE equals (w||x||)^2 - w g");
}

CheckResult check_approximation_order(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  const std::vector<double> scales = {1e-1, 1e-2, 1e-3, 1e-4};
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (int k = 0; k < instances; ++k) {
    const auto base = random_quad_model(instance_seed(opt, 6, k), dim_for(opt.seed, k));
    const Index m = k % base.size();
    std::vector<double> gap;
    for (double s : scales) {
      QuadModel q = base;
      q.g = base.g * s;
      gap.push_back(std::abs(obs_delta_e_full(q, m, opt.mutation).delta_e - obs_delta_e_first_order(q, m)));
    }
    const double slope = loglog_slope(scales, gap);
    lo = std::min(lo, slope);
    hi = std::max(hi, slope);
  }
  const bool ok = lo >= 1.8 && hi <= 2.2;
  const double measured = std::abs(lo - 2.0) > std::abs(hi - 2.0) ? lo : hi;
  return finish("obs_quadratic_approximation_order", measured, 2.2, ok, t0,
                "log-log slope of |full - first order| over g scales 1e-1..1e-4 must lie in [1.8, 2.2]");
}

CheckResult check_sparsegpt_rank_agreement(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  int disagreements = 0;
  for (int k = 0; k < instances; ++k) {
    SplitMix64 rng(instance_seed(opt, 7, k));
    const Index n = dim_for(opt.seed, k);
    const Index rows = 3;
    VectorD diag(n);
    for (Index j = 0; j < n; ++j) diag(j) = 0.5 + 2.0 * rng.uniform();
    const MatrixD h = diag.asDiagonal();
    const MatrixD w = normal_matrix(rng, rows, n);
    const MatrixD metric = sparsegpt_metric(w, h);
    for (Index i = 0; i < rows; ++i) {
      QuadModel q;
      q.hessian = h;
      q.w = w.row(i).transpose();
      q.g = VectorD::Zero(n);
      std::vector<double> obs(static_cast<std::size_t>(n));
      for (Index m = 0; m < n; ++m) obs[static_cast<std::size_t>(m)] = obs_delta_e_full(q, m, opt.mutation).delta_e;
      std::vector<Index> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
      std::iota(a.begin(), a.end(), 0);
      std::iota(b.begin(), b.end(), 0);
      std::stable_sort(a.begin(), a.end(), [&](Index x, Index y) { return metric(i, x) < metric(i, y); });
      std::stable_sort(b.begin(), b.end(), [&](Index x, Index y) { return obs[x] < obs[y]; });
      if (a != b) ++disagreements;
    }
  }
  return finish("sparsegpt_metric_rank_agreement", disagreements, 0.0, disagreements == 0, t0,
                "diagonal H, g = 0: |W|^2/diag(H^-1) ranks weights like the OBS saliency");
}

CheckResult check_weight_update(const VerifyOptions& opt, int instances) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-9;
  double worst = 0.0;
  int not_improved = 0;
  for (int k = 0; k < instances; ++k) {
    SplitMix64 rng(instance_seed(opt, 8, k));
    const Index n = 8;
    const Index rows = 20;
    const MatrixD x = normal_matrix(rng, rows, n);
    const VectorD w = normal_vector(rng, n);
    // Prune the 4 smallest |w|, 50% sparsity.
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Index a, Index b) { return std::abs(w(a)) < std::abs(w(b)); });
    std::vector<bool> pruned(static_cast<std::size_t>(n), false);
    for (Index t = 0; t < n / 2; ++t) pruned[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = true;

    const VectorD updated = obs_weight_update(w, pruned, hessian_from_acts(x, 0.0, true));
    VectorD zeroed = w;
    for (Index j = 0; j < n; ++j) {
      if (pruned[static_cast<std::size_t>(j)]) zeroed(j) = 0.0;
    }
    const double err_update = (x * (updated - w)).squaredNorm();
    const double err_zero = (x * (zeroed - w)).squaredNorm();
    if (!(err_update < err_zero)) ++not_improved;

    // Generic least squares on the kept columns: min ||X_K v - X w||.
    std::vector<Index> kept;
    for (Index j = 0; j < n; ++j) {
      if (!pruned[static_cast<std::size_t>(j)]) kept.push_back(j);
    }
    Eigen::MatrixXd xk(rows, static_cast<Index>(kept.size()));
    for (std::size_t c = 0; c < kept.size(); ++c) xk.col(static_cast<Index>(c)) = x.col(kept[c]);
    const Eigen::VectorXd v = xk.colPivHouseholderQr().solve(Eigen::VectorXd(x * w));
    for (std::size_t c = 0; c < kept.size(); ++c) worst = std::max(worst, std::abs(v(static_cast<Index>(c)) - updated(kept[c])));
    for (Index j = 0; j < n; ++j) {
      if (pruned[static_cast<std::size_t>(j)] && updated(j) != 0.0) worst = std::numeric_limits<double>::infinity();
    }
  }
  const bool ok = worst <= tol && not_improved == 0;
  return finish("obs_weight_update_least_squares", worst, tol, ok, t0,
                "kept weights match a QR least-squares solve; " + std::to_string(not_improved) +
                    " instances failed to reduce reconstruction error");
}

CheckResult check_toy_gradients(const VerifyOptions& opt, int coordinates) {
  const auto t0 = Clock::now();
  constexpr double tol = 1e-6;
  constexpr double step = 1e-5;
  ToyConfig cfg;
  cfg.seed = opt.seed;
  cfg.train_tokens = 512;
  ToyModel model = ToyModel::init(cfg);
  SplitMix64 rng(opt.seed ^ 0xfdc4ecull);
  for (Index k = 0; k < model.b1.size(); ++k) model.b1(k) = 0.1 * rng.normal();
  for (Index k = 0; k < model.b2.size(); ++k) model.b2(k) = 0.1 * rng.normal();

  const auto corpus = gen_corpus(cfg, Split::train);
  const auto all = examples_of(corpus.tokens, cfg.context);
  const std::vector<Example> batch(all.begin(), all.begin() + 32);
  const auto grads = backward(model, batch);

  auto loss = [&](const ToyModel& m) {
    double total = 0.0;
    for (const auto& ex : batch) total += forward(m, ex).nll;
    return total / static_cast<double>(batch.size());
  };

  struct Param {
    std::function<double&(ToyModel&, Index)> ref;
    std::function<double(Index)> analytic;
    Index size;
  };
  const Param params[] = {
      {[](ToyModel& m, Index k) -> double& { return m.w1.data()[k]; }, [&](Index k) { return grads.w1.data()[k]; },
       model.w1.size()},
      {[](ToyModel& m, Index k) -> double& { return m.b1.data()[k]; }, [&](Index k) { return grads.b1(k); },
       model.b1.size()},
      {[](ToyModel& m, Index k) -> double& { return m.w2.data()[k]; }, [&](Index k) { return grads.w2.data()[k]; },
       model.w2.size()},
      {[](ToyModel& m, Index k) -> double& { return m.b2.data()[k]; }, [&](Index k) { return grads.b2(k); },
       model.b2.size()},
  };

  double worst = 0.0;
  for (int c = 0; c < coordinates; ++c) {
    const auto& p = params[c % 4];
    const auto k = static_cast<Index>(rng.below(static_cast<std::uint64_t>(p.size)));
    ToyModel plus = model, minus = model;
    p.ref(plus, k) += step;
    p.ref(minus, k) -= step;
    const double fd = (loss(plus) - loss(minus)) / (2.0 * step);
    const double an = p.analytic(k);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return finish("toy_lm_finite_difference_gradients", worst, tol, worst < tol, t0,
                "central differences, step 1e-5, relative error with denominator max(|fd|, |analytic|, 1e-4)");
}

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::optional<std::string> VerifyReport::first_failure() const {
  for (const auto& c : checks) {
    if (!c.passed) return c.name;
  }
  return std::nullopt;
}

VerifyReport run_verification(const VerifyOptions& opt) {
  VerifyReport r;
  r.checks.push_back(check_obs_substitution(opt));
  r.checks.push_back(check_obs_constraint(opt));
  r.checks.push_back(check_obs_optimality(opt));
  r.checks.push_back(check_zero_gradient_collapse(opt));
  r.checks.push_back(check_diagonal_chain(opt));
  r.checks.push_back(check_approximation_order(opt));
  r.checks.push_back(check_sparsegpt_rank_agreement(opt));
  r.checks.push_back(check_weight_update(opt));
  r.checks.push_back(check_toy_gradients(opt));
  return r;
}

nlohmann::json to_json(const CheckResult& c) {
  return {{"name", c.name},           {"passed", c.passed}, {"measured", c.measured},
          {"tolerance", c.tolerance}, {"detail", c.detail}, {"seconds", c.seconds}};
}

nlohmann::json to_json(const VerifyReport& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : r.checks) checks.push_back(to_json(c));
  const auto fail = r.first_failure();
  return {{"passed", r.all_passed()},
          {"first_failure", fail ? nlohmann::json(*fail) : nlohmann::json(nullptr)},
          {"checks", checks}};
}

}  // namespace gblm
