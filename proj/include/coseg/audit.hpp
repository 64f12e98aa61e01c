#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace coseg {

struct AuditCheck {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0;
  bool passed = false;
};

// Central finite-difference checks of every differentiable op, each
// composite block, the full model forward and every loss, once per seed.
std::vector<AuditCheck> gradient_audit(const std::vector<std::uint64_t>& seeds = {1, 2, 3}, double tol = 1e-4);

}  // namespace coseg
