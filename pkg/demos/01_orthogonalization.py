"""Orthogonalizing a momentum matrix: exact SVD polar factor versus the Newton-Schulz iteration.

Muon replaces each hidden-layer update with an approximation of ``U V^T``.
Five quintic iterations land every singular value in a band around 1
instead of exactly on it, which is enough for optimization and far cheaper.
"""
import numpy as np

from muloco.linalg import newton_schulz, svd

rng = np.random.default_rng(0)
g = rng.standard_normal((32, 64)) * np.geomspace(1e-3, 1.0, 64)

exact = svd(g)
polar = exact.orthonormal_factor()
approx = newton_schulz(g)

print("input singular values: min %.2e max %.2e" % (exact.sigma.min(), exact.sigma.max()))
sv = np.linalg.svd(approx, compute_uv=False)
print("after Newton-Schulz:   min %.3f max %.3f" % (sv.min(), sv.max()))
print("distance to U V^T (Frobenius, relative): %.3f" % (np.linalg.norm(approx - polar) / np.linalg.norm(polar)))

# The reconstruction of the Jacobi SVD itself is exact to rounding.
print("SVD reconstruction error: %.1e" % np.abs(exact.reconstruct() - g).max())
