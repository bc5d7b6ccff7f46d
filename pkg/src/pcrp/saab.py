"""Saab transform: mean removal, a DC response along the all-ones direction, and
energy-ordered AC principal components of the DC-removed residual."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SaabKernel:
    mean: np.ndarray  # (d_in,)
    dc: np.ndarray  # (d_in,) unit vector along all-ones
    ac: np.ndarray  # (n_ac, d_in) orthonormal rows, descending energy
    energies: np.ndarray  # (1 + n_ac,) fractions for [DC, AC...], sum to 1
    n_out: int  # retained outputs, DC included

    @property
    def d_in(self) -> int:
        return self.mean.shape[0]

    @property
    def n_available(self) -> int:
        return 1 + self.ac.shape[0]

    @property
    def retained_energy(self) -> float:
        return float(self.energies[: self.n_out].sum())

    def truncated(self, n_out: int) -> "SaabKernel":
        if not 1 <= n_out <= self.n_available:
            raise ValueError(f"n_out must be in [1, {self.n_available}], got {n_out}")
        return SaabKernel(self.mean, self.dc, self.ac, self.energies, int(n_out))

    def transform(self, x) -> np.ndarray:
        return apply_saab(self, x)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each row made positive
    pick = np.argmax(np.abs(vecs), axis=1)
    s = np.sign(vecs[np.arange(vecs.shape[0]), pick])
    s[s == 0] = 1.0
    return vecs * s[:, None]


def fit_saab(samples, energy_threshold: float | None = None,
             target_dim: int | None = None) -> SaabKernel:
    """Fit a Saab kernel on ``samples`` (n, d_in).

    Exactly one of ``energy_threshold`` (keep the fewest leading components
    whose cumulative energy fraction reaches it) or ``target_dim`` may be set;
    with neither, every component is kept.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"Saab fit needs at least {d + 1} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    if energy_threshold is not None and target_dim is not None:
        raise ValueError("give energy_threshold or target_dim, not both")

    mean = x.mean(axis=0)
    xc = x - mean
    dc = np.full(d, 1.0 / np.sqrt(d))
    dc_resp = xc @ dc
    resid = xc - np.outer(dc_resp, dc)
    cov = resid.T @ resid / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    floor = 1e-12 * max(1.0, float(evals[0]) if evals.size else 0.0)
    keep = evals > floor
    ac = _fix_signs(evecs[:, keep].T) if keep.any() else np.zeros((0, d))
    ac_energy = evals[keep]

    dc_energy = float(np.mean(dc_resp ** 2))
    total = dc_energy + float(ac_energy.sum())
    if total > 0:
        energies = np.concatenate([[dc_energy], ac_energy]) / total
    else:
        energies = np.concatenate([[1.0], np.zeros(ac_energy.size)])

    n_avail = 1 + ac.shape[0]
    if target_dim is not None:
        if target_dim < 1:
            raise ValueError("target_dim must be >= 1")
        if target_dim > n_avail:
            log.warning("covariance rank allows only %d of %d requested Saab components",
                        n_avail, target_dim)
        n_out = min(int(target_dim), n_avail)
    elif energy_threshold is not None:
        cum = np.cumsum(energies)
        n_out = int(np.searchsorted(cum, energy_threshold - 1e-12) + 1)
        n_out = min(max(n_out, 1), n_avail)
    else:
        n_out = n_avail
    return SaabKernel(mean, dc, ac, energies, n_out)


def apply_saab(kernel: SaabKernel, x) -> np.ndarray:
    """Spectral response ``[DC, AC_1, ..., AC_{n_out-1}]`` of one vector or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != kernel.d_in:
        raise ValueError(f"expected input dimension {kernel.d_in}, got {arr.shape[-1]}")
    xc = arr - kernel.mean
    basis = np.vstack([kernel.dc[None, :], kernel.ac[: kernel.n_out - 1]])
    return xc @ basis.T
