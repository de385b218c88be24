#include "polyprobe/core/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "polyprobe/core/error.hpp"

namespace polyprobe::core {

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  require(u.size() == v.size(), ErrorCode::ShapeMismatch, "cosine_similarity: length mismatch");
  const double nu = norm(u);
  const double nv = norm(v);
  require(nu >= kZeroNormTolerance && nv >= kZeroNormTolerance, ErrorCode::ZeroNorm,
          "cosine_similarity of a (near) zero vector");
  const double c = dot(u, v) / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

std::vector<double> normalized(std::span<const double> v) {
  const double n = norm(v);
  require(n >= kZeroNormTolerance, ErrorCode::ZeroNorm, "cannot normalize a (near) zero vector");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) {
    x /= n;
  }
  return out;
}

namespace {

// Works on a tall matrix (m >= n) stored column-major in `cols`.
Svd jacobi_tall(std::vector<std::vector<double>> cols, std::size_t m, const SvdOptions& options) {
  const std::size_t n = cols.size();
  std::vector<std::vector<double>> vcols(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    vcols[i][i] = 1.0;
  }

  double total = 0.0;
  for (const auto& c : cols) {
    total += dot(c, c);
  }
  // Columns this small are numerically zero; rotating them only churns noise.
  const double negligible = total * 1e-30;

  bool converged = n < 2;
  for (std::size_t sweep = 0; sweep < options.max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        auto& ci = cols[i];
        auto& cj = cols[j];
        const double alpha = dot(ci, ci);
        const double beta = dot(cj, cj);
        const double gamma = dot(ci, cj);
        if (alpha <= negligible || beta <= negligible) {
          continue;
        }
        if (std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) {
          continue;
        }
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double tsign = zeta >= 0.0 ? 1.0 : -1.0;
        const double tn = tsign / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + tn * tn);
        const double s = c * tn;
        for (std::size_t r = 0; r < m; ++r) {
          const double a = ci[r];
          const double b = cj[r];
          ci[r] = c * a - s * b;
          cj[r] = s * a + c * b;
        }
        auto& vi = vcols[i];
        auto& vj = vcols[j];
        for (std::size_t r = 0; r < n; ++r) {
          const double a = vi[r];
          const double b = vj[r];
          vi[r] = c * a - s * b;
          vj[r] = s * a + c * b;
        }
      }
    }
  }
  if (!converged) {
    fail(ErrorCode::SvdFailure, "Jacobi SVD did not converge in " + std::to_string(options.max_sweeps) + " sweeps");
  }

  std::vector<double> sigma(n);
  for (std::size_t i = 0; i < n; ++i) {
    sigma[i] = norm(cols[i]);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  Svd out{Tensor(Shape{m, n}), std::vector<double>(n), Tensor(Shape{n, n})};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    out.s[k] = sigma[src];
    for (std::size_t r = 0; r < m; ++r) {
      out.u(r, k) = sigma[src] > 0.0 ? cols[src][r] / sigma[src] : 0.0;
    }
    for (std::size_t r = 0; r < n; ++r) {
      out.v(r, k) = vcols[src][r];
    }
  }
  return out;
}

}  // namespace

Svd svd(const Tensor& a, const SvdOptions& options) {
  require_rank(a, 2, "svd");
  require_finite(a, "svd input");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m >= n) {
    std::vector<std::vector<double>> cols(n, std::vector<double>(m));
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        cols[c][r] = a(r, c);
      }
    }
    return jacobi_tall(std::move(cols), m, options);
  }
  // Wide input: decompose the transpose and swap the factors.
  std::vector<std::vector<double>> cols(m, std::vector<double>(n));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      cols[r][c] = a(r, c);
    }
  }
  Svd t = jacobi_tall(std::move(cols), n, options);
  return Svd{std::move(t.v), std::move(t.s), std::move(t.u)};
}

Tensor pseudo_inverse(const Tensor& a, const PinvOptions& options) {
  const Svd dec = svd(a, options.svd);
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const std::size_t r = dec.s.size();
  const double smax = r > 0 ? dec.s.front() : 0.0;
  const double cut = options.rel_tol * smax;

  // X = V diag(1/s) U^T, keeping only s > cut.
  Tensor x(Shape{n, m});
  for (std::size_t k = 0; k < r; ++k) {
    if (dec.s[k] <= cut || dec.s[k] == 0.0) {
      continue;
    }
    const double inv = 1.0 / dec.s[k];
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = dec.v(i, k) * inv;
      if (vik == 0.0) {
        continue;
      }
      for (std::size_t j = 0; j < m; ++j) {
        x(i, j) += vik * dec.u(j, k);
      }
    }
  }
  return x;
}

double PenroseResiduals::max() const { return std::max({axa, xax, ax_sym, xa_sym}); }

PenroseResiduals penrose_residuals(const Tensor& a, const Tensor& x) {
  const Tensor ax = matmul(a, x);
  const Tensor xa = matmul(x, a);
  PenroseResiduals r;
  r.axa = frobenius_norm(sub(matmul(ax, a), a));
  r.xax = frobenius_norm(sub(matmul(xa, x), x));
  r.ax_sym = frobenius_norm(sub(transpose(ax), ax));
  r.xa_sym = frobenius_norm(sub(transpose(xa), xa));
  return r;
}

}  // namespace polyprobe::core
