"""Univariate marginal estimators and their cross-validated selection.

Every estimator here is a finite location-scale mixture of normals or of
t distributions: the Gaussian kernel estimator is an equal-weight normal
mixture centred at the sample points, the univariate VB fits come from
the multivariate engine with d = 1, and implied marginals slice a fitted
joint mixture.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp, ndtr, stdtr

from .errors import CtmixError, DataError, DomainError, ModelFormatError
from .numerics import LOG_2PI, UnivariateCdf, invert_cdf, t_logpdf_std
from .seeding import derive_seed, fold_indices

log = logging.getLogger(__name__)

KINDS = ("kernel", "univ_mix_normal", "univ_mix_t", "implied_mix_normal", "implied_mix_t",
         "parametric")
CANDIDATES = ("kernel", "univ_mix_normal", "univ_mix_t", "implied_mix_normal", "implied_mix_t")

_CHUNK = 1 << 20


class MarginalModel(UnivariateCdf):
    """Univariate mixture ``sum_k w_k s_k^-1 g((x - m_k) / s_k)``.

    ``g`` is the standard normal density, or the standard t with ``dof[k]``
    degrees of freedom when ``dof`` is given.
    """

    def __init__(self, kind: str, weights, locs, scales, dof=None, meta: Optional[dict] = None):
        if kind not in KINDS:
            raise DomainError(f"unknown marginal kind {kind!r}")
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        self.kind = kind
        # leave already-normalized weights untouched so reloads are bit-exact
        self.weights = w / w.sum() if abs(w.sum() - 1.0) > 1e-12 else w
        self.locs = np.atleast_1d(np.asarray(locs, dtype=float))
        self.scales = np.atleast_1d(np.asarray(scales, dtype=float))
        self.dof = None if dof is None else np.atleast_1d(np.asarray(dof, dtype=float))
        if not (self.weights.shape == self.locs.shape == self.scales.shape):
            raise DomainError("weights, locations and scales must have equal length")
        if np.any(~(self.scales > 0)):
            raise DomainError("marginal scales must be positive")
        self.meta = dict(meta or {})
        self._logw = np.log(self.weights)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def is_t(self) -> bool:
        return self.dof is not None

    # evaluation is chunked so kernel estimators with many points stay cheap in memory
    def _blocks(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        step = max(1, _CHUNK // max(self.K, 1))
        for start in range(0, x.size, step):
            xs = x[start:start + step]
            yield (xs[:, None] - self.locs[None, :]) / self.scales[None, :]

    def logpdf(self, x):
        shape = np.shape(x)
        parts = []
        for z in self._blocks(x):
            if self.is_t:
                lk = t_logpdf_std(z, self.dof[None, :])
            else:
                lk = -0.5 * (LOG_2PI + z * z)
            parts.append(logsumexp(lk - np.log(self.scales) + self._logw, axis=1))
        out = np.concatenate(parts)
        return float(out[0]) if shape == () else out.reshape(shape)

    def cdf(self, x):
        shape = np.shape(x)
        parts = []
        for z in self._blocks(x):
            c = stdtr(self.dof[None, :], z) if self.is_t else ndtr(z)
            parts.append(np.clip(c @ self.weights, 0.0, 1.0))
        out = np.concatenate(parts)
        return float(out[0]) if shape == () else out.reshape(shape)

    def quantile(self, u):
        return invert_cdf(self, u)

    @property
    def center(self):
        return float(self.weights @ self.locs)

    @property
    def spread(self):
        return float(np.max(self.scales) + np.max(np.abs(self.locs - self.center)))

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        k = rng.choice(self.K, size=n, p=self.weights)
        e = rng.standard_t(self.dof[k]) if self.is_t else rng.standard_normal(n)
        return self.locs[k] + self.scales[k] * e

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "kernel":
            out["points"] = self.locs.tolist()
            out["bandwidth"] = float(self.scales[0])
        else:
            out["weights"] = self.weights.tolist()
            out["locs"] = self.locs.tolist()
            out["scales"] = self.scales.tolist()
            if self.dof is not None:
                out["dof"] = self.dof.tolist()
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MarginalModel":
        try:
            kind = data["kind"]
            if kind == "kernel":
                pts = np.asarray(data["points"], dtype=float)
                return cls(kind, np.full(pts.size, 1.0 / pts.size), pts,
                           np.full(pts.size, float(data["bandwidth"])), meta=data.get("meta"))
            return cls(kind, data["weights"], data["locs"], data["scales"],
                       data.get("dof"), meta=data.get("meta"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed marginal block: {exc}") from None

    def __repr__(self):
        return f"MarginalModel(kind={self.kind!r}, K={self.K})"


def normal_marginal(loc: float = 0.0, scale: float = 1.0) -> MarginalModel:
    """A fixed N(loc, scale^2) marginal."""
    return MarginalModel("parametric", [1.0], [loc], [scale], meta={"family": "normal"})


def t_marginal(loc: float, scale: float, dof: float) -> MarginalModel:
    """A fixed location-scale t marginal."""
    return MarginalModel("parametric", [1.0], [loc], [scale], [dof], meta={"family": "t"})


def _clean_samples(samples, min_n: int) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_n:
        raise DataError(f"need at least {min_n} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DataError("samples contain non-finite values")
    return x


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 * min(sd, IQR / 1.34) * n^(-1/5), falling back to sd when IQR = 0."""
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if not spread > 0:
        spread = sd
    return 0.9 * spread * x.size ** -0.2


def fit_kernel(samples) -> MarginalModel:
    """Gaussian kernel estimator with Silverman's bandwidth."""
    x = _clean_samples(samples, 2)
    if not np.std(x) > 0:
        raise DataError("kernel estimator needs a sample with positive variance")
    h = silverman_bandwidth(x)
    return MarginalModel("kernel", np.full(x.size, 1.0 / x.size), x, np.full(x.size, h),
                         meta={"bandwidth_rule": "silverman"})


def fit_univ_mixture(samples, family: str = "normal", *, seed: int = 0, K_init: int = 5,
                     opts=None) -> MarginalModel:
    """Univariate normal or t mixture fitted by VB with component elimination."""
    from .vb.engine import FitOptions, evb_fit

    if family not in ("normal", "t"):
        raise DomainError(f"family must be 'normal' or 't', got {family!r}")
    x = _clean_samples(samples, 10)
    if not np.std(x) > 0:
        raise DataError("mixture estimator needs a sample with positive variance")
    opts = opts or FitOptions(K_init=K_init, seed=seed)
    res = evb_fit(x[:, None], "MN" if family == "normal" else "Mt", opts)
    w, m, s, nu = res.model.marginal_params(0)
    kind = "univ_mix_normal" if family == "normal" else "univ_mix_t"
    return MarginalModel(kind, w, m, s, nu, meta={"elbo": float(res.state.elbo)})


def implied_marginal(joint, j: int) -> MarginalModel:
    """Coordinate-``j`` marginal of a fitted multivariate mixture (0-based ``j``)."""
    w, m, s, nu = joint.marginal_params(j)
    kind = "implied_mix_t" if nu is not None else "implied_mix_normal"
    return MarginalModel(kind, w, m, s, nu)


def implied_marginals(joint) -> List[MarginalModel]:
    return [implied_marginal(joint, j) for j in range(joint.d)]


# ---------------------------------------------------------------------------
# selection

Candidate = Union[str, MarginalModel]


def _candidate_name(c: Candidate) -> str:
    return c if isinstance(c, str) else f"fixed:{c.kind}"


def _check_candidates(candidates: Sequence[Candidate]) -> None:
    if not candidates:
        raise DomainError("need at least one candidate")
    for c in candidates:
        if isinstance(c, str) and c not in CANDIDATES:
            raise DomainError(f"unknown marginal candidate {c!r}")


def fit_marginal_class(kind: Candidate, data: np.ndarray, j: int, *, seed: int = 0,
                       joint=None) -> MarginalModel:
    """Fit candidate ``kind`` for column ``j`` of ``data``.

    Implied candidates use ``joint`` when given, else fit the joint mixture
    on all columns of ``data``.
    """
    if isinstance(kind, MarginalModel):
        return kind
    col = data[:, j]
    if kind == "kernel":
        return fit_kernel(col)
    if kind == "univ_mix_normal":
        return fit_univ_mixture(col, "normal", seed=seed)
    if kind == "univ_mix_t":
        return fit_univ_mixture(col, "t", seed=seed)
    if kind in ("implied_mix_normal", "implied_mix_t"):
        if joint is None:
            joint = fit_joint_for_implied(data, kind, seed=seed)
        return implied_marginal(joint, j)
    raise DomainError(f"unknown marginal candidate {kind!r}")


def fit_joint_for_implied(data: np.ndarray, kind: str, *, seed: int = 0):
    from .vb.engine import FitOptions, fit

    family = "MN" if kind == "implied_mix_normal" else "Mt"
    if data.shape[0] <= data.shape[1]:
        family = "MFA" if family == "MN" else "MtFA"
    return fit(data, family, FitOptions(seed=seed))


@dataclass
class Selection:
    """Outcome of cross-validated selection for one column."""

    column: int
    chosen: Candidate
    scores: Dict[str, float] = field(default_factory=dict)
    model: Optional[MarginalModel] = None

    @property
    def chosen_name(self) -> str:
        return _candidate_name(self.chosen)


def select_marginals(data, candidates: Sequence[Candidate] = CANDIDATES, folds: int = 10,
                     seed: int = 0, columns: Optional[Sequence[int]] = None,
                     refit: bool = True) -> List[Selection]:
    """B-fold CV-LPDS selection of a marginal class for each column.

    Joint fits needed by implied candidates are shared by all columns of a
    fold. A candidate that fails on any fold scores ``+inf``. Ties go to
    the earlier candidate. With ``refit`` the winner is refit on all rows.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    _check_candidates(candidates)
    n, d = x.shape
    columns = list(range(d)) if columns is None else list(columns)
    blocks = fold_indices(n, folds, derive_seed(seed, 0))
    names = [_candidate_name(c) for c in candidates]
    totals = {j: {nm: 0.0 for nm in names} for j in columns}
    for b, test in enumerate(blocks):
        train = np.setdiff1d(np.arange(n), test)
        joints = {}
        for c in candidates:
            if isinstance(c, str) and c.startswith("implied") and c not in joints:
                try:
                    joints[c] = fit_joint_for_implied(x[train], c, seed=derive_seed(seed, 1, b))
                except CtmixError as exc:
                    log.info("joint fit for %s failed on fold %d: %s", c, b, exc)
                    joints[c] = None
        for j in columns:
            for c, nm in zip(candidates, names):
                if not math.isfinite(totals[j][nm]):
                    continue
                try:
                    if isinstance(c, str) and c.startswith("implied"):
                        if joints[c] is None:
                            raise DataError("joint fit unavailable")
                        m = implied_marginal(joints[c], j)
                    else:
                        m = fit_marginal_class(c, x[train], j, seed=derive_seed(seed, 2, b, j))
                    lp = m.logpdf(x[test, j])
                    if not np.all(np.isfinite(lp)):
                        raise DataError("non-finite held-out log density")
                    totals[j][nm] += float(-lp.sum())
                except CtmixError as exc:
                    log.info("candidate %s failed on fold %d column %d: %s", nm, b, j, exc)
                    totals[j][nm] = math.inf
    out = []
    for j in columns:
        scores = {nm: totals[j][nm] / n for nm in names}
        best = min(range(len(names)), key=lambda i: (scores[names[i]], i))
        sel = Selection(j, candidates[best], scores)
        if refit:
            sel.model = fit_marginal_class(candidates[best], x, j, seed=derive_seed(seed, 3, j))
        out.append(sel)
    return out


def select_marginal(samples, candidates: Sequence[Candidate] = ("kernel", "univ_mix_normal",
                                                                "univ_mix_t"),
                    folds: int = 10, seed: int = 0, *, joint_data=None, column: int = 0
                    ) -> Selection:
    """Select a marginal class for one variable.

    Implied candidates need the full matrix: pass ``joint_data`` and the
    ``column`` index that ``samples`` corresponds to.
    """
    if joint_data is not None:
        return select_marginals(joint_data, candidates, folds, seed, columns=[column])[0]
    if any(isinstance(c, str) and c.startswith("implied") for c in candidates):
        raise DomainError("implied candidates need joint_data")
    x = _clean_samples(samples, 2)
    sel = select_marginals(x[:, None], candidates, folds, seed)[0]
    sel.column = column
    return sel
