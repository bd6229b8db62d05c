"""Fitted multivariate mixtures (point estimates of a VB posterior)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from ..errors import DomainError, ModelFormatError
from ..io import StandardizationRecord
from ..numerics import SpdMatrix, mvn_logpdf, mvt_logpdf

FAMILIES = ("MN", "Mt", "MFA", "MtFA")


@dataclass(frozen=True)
class MixtureModel:
    """K-component normal or t mixture.

    Component parameters live on the standardized scale described by
    ``standardization``; ``logpdf`` takes and returns original units.
    ``scales`` holds the effective scale matrix of every component; for
    factor families it equals ``L L' + I / psi`` and ``loadings``/``psi``
    are kept as well.
    """

    family: str
    weights: np.ndarray
    locs: np.ndarray
    scales: np.ndarray
    dof: Optional[np.ndarray] = None
    loadings: Optional[List[np.ndarray]] = None
    psi: Optional[np.ndarray] = None
    standardization: Optional[StandardizationRecord] = None
    _spd: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown mixture family {self.family!r}")
        w = np.asarray(self.weights, dtype=float)
        if abs(w.sum() - 1.0) > 1e-12:
            w = w / w.sum()
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "locs", np.atleast_2d(np.asarray(self.locs, dtype=float)))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float).reshape(
            self.locs.shape[0], self.locs.shape[1], self.locs.shape[1]))
        if self.is_t:
            if self.dof is None:
                raise DomainError("t families need degrees of freedom")
            object.__setattr__(self, "dof", np.asarray(self.dof, dtype=float))
        if self.standardization is None:
            object.__setattr__(self, "standardization", StandardizationRecord.identity(self.d))
        object.__setattr__(self, "_spd", tuple(SpdMatrix(v, jitter=True) for v in self.scales))

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.locs.shape[1]

    @property
    def is_t(self) -> bool:
        return self.family in ("Mt", "MtFA")

    @property
    def factors(self) -> Optional[List[int]]:
        return None if self.loadings is None else [L.shape[1] for L in self.loadings]

    def component_logpdf_std(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty((z.shape[0], self.K))
        for k in range(self.K):
            if self.is_t:
                out[:, k] = mvt_logpdf(z, self.locs[k], self._spd[k], self.dof[k])
            else:
                out[:, k] = mvn_logpdf(z, self.locs[k], self._spd[k])
        return out

    def logpdf(self, x):
        """Log density at rows of ``x`` in original units."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.d:
            raise DomainError(f"expected {self.d} columns, got {x.shape[1]}")
        z = self.standardization.apply(x)
        comp = self.component_logpdf_std(z) + np.log(self.weights)[None, :]
        out = logsumexp(comp, axis=1) + self.standardization.log_jacobian
        return float(out[0]) if single else out

    def responsibilities(self, x):
        z = self.standardization.apply(np.atleast_2d(x))
        comp = self.component_logpdf_std(z) + np.log(self.weights)[None, :]
        return np.exp(comp - logsumexp(comp, axis=1, keepdims=True))

    def component_correlations(self) -> np.ndarray:
        sd = np.sqrt(np.einsum("kii->ki", self.scales))
        return self.scales / (sd[:, :, None] * sd[:, None, :])

    def marginal_params(self, j: int):
        """(weights, locations, sds, dof) of coordinate ``j`` in original units."""
        if not 0 <= j < self.d:
            raise DomainError(f"coordinate {j} out of range for d={self.d}")
        rec = self.standardization
        locs = rec.shift[j] + rec.scale[j] * self.locs[:, j]
        sds = rec.scale[j] * np.sqrt(self.scales[:, j, j])
        return self.weights.copy(), locs, sds, None if self.dof is None else self.dof.copy()

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        comp = rng.choice(self.K, size=n, p=self.weights)
        z = np.empty((n, self.d))
        for k in range(self.K):
            idx = np.flatnonzero(comp == k)
            if idx.size == 0:
                continue
            e = rng.standard_normal((idx.size, self.d)) @ self._spd[k].chol.T
            if self.is_t:
                w = rng.gamma(0.5 * self.dof[k], 2.0 / self.dof[k], size=idx.size)
                e = e / np.sqrt(w)[:, None]
            z[idx] = self.locs[k] + e
        return self.standardization.invert(z)

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "K": self.K,
            "weights": self.weights.tolist(),
            "locs": self.locs.tolist(),
            "scales": self.scales.tolist(),
            "standardization": self.standardization.to_dict(),
        }
        if self.dof is not None:
            out["dof"] = self.dof.tolist()
        if self.loadings is not None:
            out["loadings"] = [L.tolist() for L in self.loadings]
            out["psi"] = self.psi.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureModel":
        try:
            d = len(data["locs"][0])
            loadings = None
            if "loadings" in data:
                loadings = [np.asarray(L, dtype=float).reshape(d, -1) for L in data["loadings"]]
            return cls(
                family=data["family"],
                weights=np.asarray(data["weights"], dtype=float),
                locs=np.asarray(data["locs"], dtype=float),
                scales=np.asarray(data["scales"], dtype=float),
                dof=None if "dof" not in data else np.asarray(data["dof"], dtype=float),
                loadings=loadings,
                psi=None if "psi" not in data else np.asarray(data["psi"], dtype=float),
                standardization=StandardizationRecord.from_dict(data["standardization"]),
            )
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise ModelFormatError(f"malformed mixture block: {exc}") from None


def mixture_logpdf(model: MixtureModel, x):
    """log sum_k pi_k f_k(x): log-sum-exp over component log densities."""
    return model.logpdf(x)
