#pragma once

// Numerical tolerance hierarchy used across tests and checks.
namespace bindlab::tol {

// Logit equality between two forward passes that should agree.
inline constexpr double kLogit = 1e-8;
// Pure algebraic identities (norms, rotations, shift invariance).
inline constexpr double kAlgebraic = 1e-10;
// Relative-encoding check: shifting every apparent position by a constant.
inline constexpr double kRopeShift = 1e-6;
// Normalization of exp(log_softmax).
inline constexpr double kSoftmaxSum = 1e-12;
// Analytic vs central-difference gradients (relative).
inline constexpr double kGradientRel = 1e-4;

}  // namespace bindlab::tol
