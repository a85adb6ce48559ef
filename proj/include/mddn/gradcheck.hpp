#pragma once

// Finite-difference verification of backward rules.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mddn/tensor.hpp"

namespace mddn::gradcheck {

enum class FdMethod {
  central,  // one central difference with step eps
  ridders,  // extrapolated central differences starting from step eps
};

struct FdOptions {
  FdMethod method = FdMethod::central;
  double eps = 1e-6;
  // 0 checks every coordinate; otherwise this many random coordinates per input.
  std::size_t coords_per_input = 0;
  std::uint64_t seed = 0;
  // Negative control: scales the analytic gradient of the first input.
  bool corrupt = false;
};

struct FdResult {
  double max_rel_err = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double analytic = 0.0, numeric = 0.0;
  std::size_t checked = 0;
  // Coordinates sitting on a kink (no smooth probe interval down to 1e-10).
  std::size_t skipped = 0;
};

struct Input {
  std::string name;
  Tensor<double>* value;
};

using ForwardFn = std::function<Tensor<double>()>;
// Receives the output cotangent, returns one gradient per input, in order.
using BackwardFn = std::function<std::vector<Tensor<double>>(const Tensor<double>&)>;
// Optional extended-precision evaluation of the same function, reading the
// same inputs. When given, it supplies the numeric derivatives.
using ReferenceFn = std::function<Tensor<long double>()>;

// Loss = sum(output * cotangent) with a fixed random cotangent. Compares the
// analytic gradient of every checked coordinate against central differences:
// |a - n| / max(1e-8, |a| + |n|). forward reads the inputs through the given
// pointers; modifying them is a ContractError. With the ridders method the
// probe step shrinks until both ends take the same branches of every
// piecewise operation as the unperturbed point (see branch_trace.hpp).
FdResult finite_diff_check(const ForwardFn& forward, const BackwardFn& backward,
                           const std::vector<Input>& inputs, const FdOptions& opt = {},
                           const ReferenceFn& reference = {});

struct Case {
  std::string module;  // numerics | sampling | layers | model
  std::string op;
  double tolerance;
  std::function<FdResult(bool corrupt)> run;
};

std::vector<Case> suites();

struct CaseReport {
  std::string module, op;
  FdResult result;
  double tolerance;
  double seconds;
  bool passed;
};

// module: "all" or one module name. fault: op whose analytic gradient is corrupted.
std::vector<CaseReport> run_suites(const std::string& module, const std::string& fault = "",
                                   const std::function<void(const CaseReport&)>& on_case = {});

}  // namespace mddn::gradcheck
