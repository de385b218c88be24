#pragma once

#include <span>
#include <vector>

#include "polyprobe/core/tensor.hpp"

namespace polyprobe::core {

inline constexpr double kZeroNormTolerance = 1e-12;

// <u,v> / (|u| |v|), clamped to [-1, 1]. Throws ZeroNorm when either norm is
// below kZeroNormTolerance. Exactly symmetric in its arguments.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

std::vector<double> normalized(std::span<const double> v);

struct SvdOptions {
  std::size_t max_sweeps = 80;
  double tolerance = 1e-14;
};

// Thin SVD: a = u * diag(s) * v^T with s sorted descending.
// For an m x n input with r = min(m, n): u is m x r, v is n x r.
struct Svd {
  Tensor u;
  std::vector<double> s;
  Tensor v;
};

// One-sided Jacobi (Hestenes). Throws SvdFailure when the column pairs are
// not mutually orthogonal after max_sweeps sweeps.
Svd svd(const Tensor& a, const SvdOptions& options = {});

struct PinvOptions {
  // Singular values below rel_tol * sigma_max are treated as zero.
  double rel_tol = 1e-10;
  SvdOptions svd;
};

Tensor pseudo_inverse(const Tensor& a, const PinvOptions& options = {});

// Residuals of the four Penrose conditions in Frobenius norm:
// |A X A - A|, |X A X - X|, |(A X)^T - A X|, |(X A)^T - X A|.
struct PenroseResiduals {
  double axa = 0.0;
  double xax = 0.0;
  double ax_sym = 0.0;
  double xa_sym = 0.0;
  double max() const;
};

PenroseResiduals penrose_residuals(const Tensor& a, const Tensor& x);

}  // namespace polyprobe::core
