"""Eigengrasp basis: PCA over human hand poses and the weight <-> pose maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xdex.pose_model import POSE_DIM, canonicalize

DEFAULT_K = 10


@dataclass(frozen=True, eq=False)
class EigengraspBasis:
    mean: np.ndarray
    components: np.ndarray  # (k, dim), orthonormal rows
    eigenvalues: np.ndarray
    centered: bool = True

    def __post_init__(self):
        comps = np.atleast_2d(np.asarray(self.components, dtype=np.float64))
        mean = np.asarray(self.mean, dtype=np.float64)
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        k, dim = comps.shape
        if mean.shape != (dim,) or ev.shape != (k,):
            raise ValueError("mean / eigenvalues do not match components")
        if not 1 <= k <= dim:
            raise ValueError(f"k must be in [1, {dim}], got {k}")
        for arr in (comps, mean, ev):
            arr.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "k": self.k,
            "centered": bool(self.centered),
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "components": self.components.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EigengraspBasis":
        basis = cls(
            mean=doc["mean"],
            components=doc["components"],
            eigenvalues=doc["eigenvalues"],
            centered=bool(doc["centered"]),
        )
        if basis.k != doc["k"] or basis.dim != doc["dim"]:
            raise ValueError("basis file k/dim fields disagree with its arrays")
        return basis


def load_basis(path: str | Path) -> EigengraspBasis:
    return EigengraspBasis.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def compute_basis(dataset, k: int = DEFAULT_K, centered: bool = True) -> EigengraspBasis:
    """PCA of an (N, dim) pose matrix.

    Eigenvalues are population (1/N) covariance eigenvalues in centered
    mode and second-moment eigenvalues otherwise. Each component's sign is
    fixed so its largest-magnitude entry is positive; near-ties go to the
    lowest index.
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("dataset must be a 2-D (N, dim) matrix")
    N, dim = X.shape
    if N < 2:
        raise ValueError(f"need at least 2 poses, got {N}")
    if not np.all(np.isfinite(X)):
        raise ValueError("dataset contains non-finite values")
    if not 1 <= k <= min(N, dim):
        raise ValueError(f"k must be in [1, {min(N, dim)}], got {k}")
    X = canonicalize(X)
    mean = X.mean(axis=0)
    Xc = X - mean if centered else X
    cov = (Xc.T @ Xc) / N
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:k]
    vals = vals[order]
    comps = vecs[:, order].T.copy()
    if np.any(vals < -1e-12 * max(1.0, abs(vals[0]))):
        raise ValueError("covariance has a significantly negative eigenvalue")
    # eigenvalues under the rounding floor of the data are exact zeros
    floor = dim * np.finfo(np.float64).eps * float(np.max(np.abs(X))) ** 2
    vals = np.where(vals <= floor, 0.0, vals)
    # first entry within rounding of the largest magnitude, so ties break by index
    mag = np.abs(comps)
    pivot = np.argmax(mag >= mag.max(axis=1, keepdims=True) * (1 - 1e-9), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= signs[:, None]
    return EigengraspBasis(mean=mean, components=comps, eigenvalues=vals, centered=centered)


def synthesize(basis: EigengraspBasis, w) -> np.ndarray:
    """Pose from eigengrasp weights: (mean +) sum_i w_i e_i, canonicalized.

    Accepts a single k-vector or an (N, k) batch.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != basis.k:
        raise ValueError(f"expected {basis.k} weights, got {w.shape[-1]}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite values")
    theta = w @ basis.components
    if basis.centered:
        theta = theta + basis.mean
    return canonicalize(theta)


def project(basis: EigengraspBasis, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != basis.dim:
        raise ValueError(f"expected {basis.dim}-D pose, got {theta.shape[-1]}")
    if basis.centered:
        theta = theta - basis.mean
    return theta @ basis.components.T


def explained_fraction(basis: EigengraspBasis, dataset) -> float:
    """Fraction of total (co)variance captured by the retained components."""
    X = canonicalize(np.asarray(dataset, dtype=np.float64))
    Xc = X - X.mean(axis=0) if basis.centered else X
    total = float(np.sum(Xc * Xc) / X.shape[0])
    if total == 0.0:
        return 1.0
    return float(basis.eigenvalues.sum() / total)


def synthetic_poses(
    n: int,
    rank: int = 5,
    seed: int = 0,
    spread: float = 0.35,
    noise: float = 1e-4,
) -> np.ndarray:
    """Poses from a random low-rank model: mean + U diag(s) z + noise.

    The mean is a mild finger curl, U is a random orthonormal (45, rank)
    basis, ``s`` decays geometrically from ``spread`` and ``z`` is standard
    normal. Blocks are canonicalized, which leaves typical draws untouched.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= rank <= POSE_DIM:
        raise ValueError(f"rank must be in [1, {POSE_DIM}]")
    rng = np.random.default_rng(seed)
    mean = np.zeros(POSE_DIM)
    mean[1::3] = 0.3  # curl about +y at every joint
    U, _ = np.linalg.qr(rng.standard_normal((POSE_DIM, rank)))
    s = spread * 0.8 ** np.arange(rank)
    z = rng.standard_normal((n, rank))
    X = mean + (z * s) @ U.T + noise * rng.standard_normal((n, POSE_DIM))
    return canonicalize(X)
