#pragma once

#include <functional>
#include <vector>

#include "voxloc/ops.hpp"
#include "voxloc/rng.hpp"

namespace voxloc::test {

// Central finite-difference oracle, independent of the tape's backward pass.
// `build` assembles a scalar graph from leaf vars created from `inputs`.
// Returns the max over checked entries of |analytic - numeric| scaled by
// max(1, |analytic|, |numeric|).
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

using BuildFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline double eval_forward(const BuildFn& build, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.input(t));
  return tape.value(build(tape, vars)).item();
}

inline GradCheckResult grad_check(const BuildFn& build, std::vector<Tensor<double>> inputs,
                                  double h = 1e-5, int max_entries_per_tensor = 0,
                                  std::uint64_t sample_seed = 1234) {
  // analytic gradients
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    Var root = build(tape, vars);
    tape.backward(root);
    for (Var v : vars) {
      analytic.push_back(tape.has_grad(v) ? tape.grad(v)
                                          : Tensor<double>::zeros(tape.value(v).shape()));
    }
  }

  GradCheckResult res;
  Rng rng(sample_seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    std::size_t n = inputs[ti].numel();
    std::vector<std::size_t> entries;
    if (max_entries_per_tensor > 0 && n > static_cast<std::size_t>(max_entries_per_tensor)) {
      for (int k = 0; k < max_entries_per_tensor; ++k)
        entries.push_back(rng.uniform_index(n));
    } else {
      entries.resize(n);
      for (std::size_t i = 0; i < n; ++i) entries[i] = i;
    }
    for (std::size_t idx : entries) {
      double orig = inputs[ti][idx];
      inputs[ti][idx] = orig + h;
      double fp = eval_forward(build, inputs);
      inputs[ti][idx] = orig - h;
      double fm = eval_forward(build, inputs);
      inputs[ti][idx] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[ti][idx];
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
      res.checked += 1;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

}  // namespace voxloc::test
