"""Soft-margin RBF-kernel SVM trained by sequential minimal optimization.

Features are z-scored internally from training statistics; the kernel is
K(u, v) = exp(-gamma * ||u - v||^2) on the standardized coordinates.  The
dual is optimized pair by pair: each sweep visits every point, and for a
KKT violator picks the partner maximizing |E_i - E_j| (falling back to an
index scan when that step cannot move).  Training converges when a full
sweep finds no violator beyond smo_tol; pair selection is deterministic, so
identical inputs give identical models.

Labels are +1/-1; a decision value of exactly 0 predicts -1, so callers
should map the tie-preferred class to -1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import SingleClassDataset, UntrainedModel


class NoConvergence(Exception):
    pass


@dataclass(frozen=True)
class SvmParams:
    """kernel_gamma=None applies the default 1 / (2 * d * pooled variance);
    on z-scored features the pooled variance is 1, giving 1/(2d)."""

    kernel_gamma: float | None = None
    penalty: float = 1.0
    smo_tol: float = 1e-3
    max_passes: int = 1000

    def __post_init__(self):
        if self.kernel_gamma is not None and not self.kernel_gamma > 0:
            raise ValueError(f"kernel_gamma must be > 0, got {self.kernel_gamma}")
        if not self.penalty > 0:
            raise ValueError(f"penalty must be > 0, got {self.penalty}")
        if not self.smo_tol > 0:
            raise ValueError(f"smo_tol must be > 0, got {self.smo_tol}")
        if self.max_passes < 1:
            raise ValueError(f"max_passes must be >= 1, got {self.max_passes}")


@dataclass(frozen=True)
class SvmModel:
    """Trained state: support vectors in standardized coordinates with their
    labels and dual coefficients, plus the standardization itself."""

    support_x: np.ndarray  # (m, d) standardized
    support_y: np.ndarray  # (m,) in {+1, -1}
    alphas: np.ndarray  # (m,) in (0, C]
    bias: float
    gamma: float
    mu: np.ndarray  # (d,) feature means
    sigma: np.ndarray  # (d,) feature stds (zeros replaced by 1)
    penalty: float
    smo_tol: float


def _kernel_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-gamma * d2)


def train_svm(X2, y2, params: SvmParams = SvmParams()) -> SvmModel:
    """Fit on (n, d) features and +1/-1 labels."""
    X2 = np.asarray(X2, dtype=np.float64)
    y = np.asarray(y2, dtype=np.float64)
    if X2.ndim != 2 or len(X2) != len(y):
        raise ValueError(f"need (n, d) features and n labels, got {X2.shape} and {y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    if np.unique(y).size < 2:
        raise SingleClassDataset("both classes must be present")
    if not np.all(np.isfinite(X2)):
        raise ValueError("feature matrix contains NaN or infinity")

    mu = X2.mean(axis=0)
    sigma = X2.std(axis=0)
    sigma = np.where(sigma == 0, 1.0, sigma)
    Z = (X2 - mu) / sigma
    if params.kernel_gamma is not None:
        gamma = params.kernel_gamma
    else:
        pooled = float(Z.var(axis=0).mean())
        gamma = 1.0 / (2.0 * Z.shape[1] * pooled)

    n = len(y)
    C = params.penalty
    tol = params.smo_tol
    K = _kernel_matrix(Z, Z, gamma)
    alphas = np.zeros(n)
    b = 0.0

    def errors() -> np.ndarray:
        return (alphas * y) @ K + b - y

    def try_step(i: int, j: int, E: np.ndarray) -> bool:
        nonlocal b
        if i == j:
            return False
        if y[i] != y[j]:
            low = max(0.0, alphas[j] - alphas[i])
            high = min(C, C + alphas[j] - alphas[i])
        else:
            low = max(0.0, alphas[i] + alphas[j] - C)
            high = min(C, alphas[i] + alphas[j])
        if low >= high:
            return False
        eta = 2.0 * K[i, j] - K[i, i] - K[j, j]
        if eta >= 0:
            return False
        aj_new = alphas[j] - y[j] * (E[i] - E[j]) / eta
        aj_new = min(high, max(low, aj_new))
        if abs(aj_new - alphas[j]) < 1e-12:
            return False
        ai_new = alphas[i] + y[i] * y[j] * (alphas[j] - aj_new)
        b1 = (b - E[i] - y[i] * (ai_new - alphas[i]) * K[i, i]
              - y[j] * (aj_new - alphas[j]) * K[i, j])
        b2 = (b - E[j] - y[i] * (ai_new - alphas[i]) * K[i, j]
              - y[j] * (aj_new - alphas[j]) * K[j, j])
        alphas[i] = ai_new
        alphas[j] = aj_new
        if 0 < ai_new < C:
            b = b1
        elif 0 < aj_new < C:
            b = b2
        else:
            b = (b1 + b2) / 2.0
        return True

    for _ in range(params.max_passes):
        changed = 0
        for i in range(n):
            E = errors()
            r = y[i] * E[i]
            if not ((r < -tol and alphas[i] < C) or (r > tol and alphas[i] > 0)):
                continue
            # second-choice heuristic, then a deterministic fallback scan
            j = int(np.argmax(np.abs(E - E[i])))
            if try_step(i, j, E):
                changed += 1
                continue
            for j in range(n):
                if try_step(i, j, E):
                    changed += 1
                    break
        if changed == 0:
            break
    else:
        raise NoConvergence(f"SMO did not converge within {params.max_passes} sweeps")

    support = alphas > 0
    return SvmModel(
        support_x=Z[support].copy(),
        support_y=y[support].copy(),
        alphas=alphas[support].copy(),
        bias=float(b),
        gamma=float(gamma),
        mu=mu,
        sigma=sigma,
        penalty=C,
        smo_tol=tol,
    )


def decision_value(svm: SvmModel, x2) -> float:
    """Sum alpha_i y_i K(x_i, x) + b on the standardized point."""
    if not isinstance(svm, SvmModel):
        raise UntrainedModel("svm model is not trained")
    x = (np.asarray(x2, dtype=np.float64) - svm.mu) / svm.sigma
    if svm.alphas.size == 0:
        return svm.bias
    k = np.exp(-svm.gamma * ((svm.support_x - x) ** 2).sum(axis=1))
    return float((svm.alphas * svm.support_y) @ k + svm.bias)


def svm_predict(svm: SvmModel, x2) -> tuple[int, float]:
    """(label in {+1, -1}, signed decision value); 0 maps to -1."""
    f = decision_value(svm, x2)
    return (1 if f > 0 else -1), f
