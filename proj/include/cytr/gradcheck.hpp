#pragma once

// Finite-difference gradient checker. The builder callback constructs a
// scalar loss on a fresh tape each time it is called, reading whatever
// parameter tensors it closes over; the checker compares one reverse-mode
// pass against central differences per coordinate.

#include <cmath>
#include <string>

#include "cytr/tensor.hpp"

namespace cytr {

/// Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// `build` has signature TensorPtr<S>(Tape<S>&) and must be deterministic.
template <typename S, typename BuildFn>
S grad_check(BuildFn&& build, const TensorPtr<S>& param, S step) {
  if (step <= S(0)) throw ContractError("grad_check: step must be positive");

  param->zero_grad();
  std::vector<S> analytic;
  {
    Tape<S> tape;
    TensorPtr<S> loss = build(tape);
    if (loss->size() != 1) throw ContractError("grad_check: builder must return a scalar");
    tape.backward(loss);
    analytic.resize(param->size());
    for (std::size_t i = 0; i < param->size(); ++i) analytic[i] = param->grad_at(i);
    param->zero_grad();
  }

  const auto eval = [&](std::size_t coord) -> S {
    S value;
    try {
      Tape<S> tape;
      value = build(tape)->values[0];
    } catch (const NumericError& e) {
      throw NumericError("grad_check: non-finite intermediate at coordinate " +
                         std::to_string(coord) + " (" + e.what() + ")");
    }
    if (!std::isfinite(static_cast<double>(value)))
      throw NumericError("grad_check: non-finite loss at coordinate " + std::to_string(coord));
    return value;
  };

  S worst = 0;
  for (std::size_t i = 0; i < param->size(); ++i) {
    const S saved = param->values[i];
    param->values[i] = saved + step;
    const S plus = eval(i);
    param->values[i] = saved - step;
    const S minus = eval(i);
    param->values[i] = saved;
    const S numeric = (plus - minus) / (S(2) * step);
    const S denom = std::max(S(1e-8), std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace cytr
