"""Analytic (recursive ridge regression) classifier."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class ACILError(ValueError):
    pass


@dataclass(frozen=True)
class ACILState:
    projection: np.ndarray  # (feature_dim, expansion_dim)
    R: np.ndarray  # inverse of (Phi^T Phi + gamma I), (expansion_dim, expansion_dim)
    W: np.ndarray  # (expansion_dim, n_classes)
    gamma: float

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]


def init_acil(feature_dim: int, expansion_dim: int = 1024, gamma: float = 1.0,
              seed: int = 0) -> ACILState:
    if gamma <= 0:
        raise ACILError("gamma must be positive")
    rng = np.random.default_rng(seed)
    projection = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, expansion_dim))
    return ACILState(projection, np.eye(expansion_dim) / gamma,
                     np.zeros((expansion_dim, 0)), float(gamma))


def expand(state: ACILState, embeddings) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != state.projection.shape[0]:
        raise ACILError(
            f"embeddings of shape {emb.shape} do not match projection input "
            f"{state.projection.shape[0]}"
        )
    return np.maximum(emb @ state.projection, 0.0)


def acil_update(state: ACILState, embeddings, targets, chunk: int = 512,
                check_pd: bool = True) -> ACILState:
    """Absorb a batch into the ridge solution with the Woodbury identity.

    ``targets`` is a one-hot (N, C) matrix over all classes seen so far;
    ``W`` gains zero columns when ``C`` exceeds its current width. After any
    sequence of updates ``W == inv(Phi^T Phi + gamma I) Phi^T Y`` over all
    rows seen.
    """
    Y = np.asarray(targets, dtype=np.float64)
    phi_all = expand(state, embeddings)
    if Y.ndim != 2 or Y.shape[0] != phi_all.shape[0]:
        raise ACILError(f"targets of shape {Y.shape} for {phi_all.shape[0]} embeddings")
    if Y.shape[1] < state.n_classes:
        raise ACILError(f"targets have {Y.shape[1]} columns, W has {state.n_classes}")
    W = np.hstack([state.W, np.zeros((state.W.shape[0], Y.shape[1] - state.n_classes))])
    R = state.R
    for start in range(0, len(phi_all), chunk):
        phi, y = phi_all[start:start + chunk], Y[start:start + chunk]
        R_phi_t = R @ phi.T
        K = np.eye(len(phi)) + phi @ R_phi_t
        R = R - R_phi_t @ np.linalg.solve(K, R_phi_t.T)
        R = 0.5 * (R + R.T)
        W = W + R @ phi.T @ (y - phi @ W)
    if check_pd:
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError as exc:
            raise ACILError("R lost positive definiteness") from exc
    return replace(state, R=R, W=W)


def acil_scores(state: ACILState, embeddings) -> np.ndarray:
    return expand(state, embeddings) @ state.W


def ridge_solution(phi: np.ndarray, Y: np.ndarray, gamma: float) -> np.ndarray:
    """Direct batch ridge solve, used as a reference."""
    A = phi.T @ phi + gamma * np.eye(phi.shape[1])
    return np.linalg.solve(A, phi.T @ Y)
