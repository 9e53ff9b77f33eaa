"""GEM gradient projection."""
from __future__ import annotations

import numpy as np
from scipy.optimize import nnls


class GEMSolverError(RuntimeError):
    pass


def gem_project(g, memory_grads, margin: float = 0.0) -> np.ndarray:
    """Project ``g`` so it has non-negative inner product with every memory gradient.

    Solves the dual ``min_{lam >= margin} 1/2 ||g + G^T lam||^2`` (non-negative
    least squares after shifting by ``margin``) and returns ``g + G^T lam``.
    With ``margin = 0`` this is the Euclidean projection onto the cone
    ``{v : G v >= 0}``. If ``g`` already satisfies every constraint it is
    returned unchanged.
    """
    g = np.asarray(g, dtype=np.float64)
    G = np.asarray(memory_grads, dtype=np.float64)
    if G.size == 0:
        return g
    G = np.atleast_2d(G)
    if G.shape[1] != g.shape[0]:
        raise ValueError(f"memory gradient dim {G.shape[1]} != gradient dim {g.shape[0]}")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if np.all(G @ g >= 0):
        return g

    shift = margin * G.sum(axis=0)
    try:
        mu, _ = nnls(G.T, -(g + shift), maxiter=50 * max(G.shape))
    except RuntimeError as exc:
        raise GEMSolverError(f"dual QP did not converge: {exc}") from exc
    v = g + shift + G.T @ mu

    tol = 1e-6 * np.linalg.norm(g) * np.linalg.norm(G, axis=1)
    residual = G @ v
    if np.any(residual < -tol):
        worst = float(np.min(residual + tol))
        raise GEMSolverError(f"projected gradient violates a constraint by {-worst:.3e}")
    return v
