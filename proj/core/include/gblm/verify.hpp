#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gblm/obs_kernel.hpp"

namespace gblm {

struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;   ///< worst observed error (or fitted value)
  double tolerance = 0.0;  ///< bound the measurement was compared against
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 0x5eed;
  SaliencyMutation mutation = SaliencyMutation::none;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_passed() const;
  std::optional<std::string> first_failure() const;
};

// Individual oracle checks, exposed so the acceptance suite can run them one
// at a time.
CheckResult check_obs_substitution(const VerifyOptions& opt, int instances = 200);
CheckResult check_obs_constraint(const VerifyOptions& opt, int instances = 200);
CheckResult check_obs_optimality(const VerifyOptions& opt, int instances = 50, int perturbations = 100);
CheckResult check_zero_gradient_collapse(const VerifyOptions& opt, int instances = 100);
CheckResult check_diagonal_chain(const VerifyOptions& opt, int instances = 100);
CheckResult check_approximation_order(const VerifyOptions& opt, int instances = 20);
CheckResult check_sparsegpt_rank_agreement(const VerifyOptions& opt, int instances = 50);
CheckResult check_weight_update(const VerifyOptions& opt, int instances = 100);
CheckResult check_toy_gradients(const VerifyOptions& opt, int coordinates = 50);

/// Runs every check above, in order.
VerifyReport run_verification(const VerifyOptions& opt = {});

nlohmann::json to_json(const CheckResult& c);
nlohmann::json to_json(const VerifyReport& r);

/// Random symmetric positive definite quadratic model of dimension n:
/// H = A'A + 0.1 I with A of shape (n + 2, n), w and g standard normal,
/// g scaled by `grad_scale`.
QuadModel random_quad_model(std::uint64_t seed, Index n, double grad_scale = 1.0);

}  // namespace gblm
