#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msod/tensor.hpp"

namespace msod {

// Pure forward function: fresh leaf tensors in, scalar loss out. Called
// repeatedly with perturbed copies, so it must not keep state.
using ForwardFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int components = 0;
  bool pass = false;
  double tolerance = 0.0;
};

// Central finite differences against tape gradients.
// rel err = |fd - analytic| / max(|fd|, |analytic|, 1e-8), componentwise.
// component_budget < 0 checks every component of every leaf; otherwise at
// most that many seeded-sampled components per leaf.
CheckResult finite_difference_check(const std::string& name, const ForwardFn& f,
                                    const std::vector<Tensor>& leaves,
                                    double tolerance, double h = 1e-5,
                                    int component_budget = -1,
                                    std::uint64_t sample_seed = 0);

// One named finite-difference check per differentiable tensor op.
std::vector<CheckResult> run_op_gradient_suite(std::uint64_t seed);

// Names covered by run_op_gradient_suite, for coverage assertions.
std::vector<std::string> registered_op_names();

}  // namespace msod
