"""Copula-type density estimators and the normal / t copula baselines.

With marginal cdfs ``F_j`` (densities ``f_j``), working marginals ``H_j``
and a fitted joint mixture ``G`` (density ``g``), the copula-type estimator
is::

    f(y) = g(x) * prod_j f_j(y_j) / h_j(x_j),    x_j = H_j^-1(F_j(y_j))

It is a proper density for any choice of ``H``; when ``H_j`` equals the
``j``-th marginal of ``G`` it is an exact copula model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtri, stdtrit

from .errors import CtmixError, DataError, DomainError, FitError, ModelFormatError, NumericError
from .marginals import MarginalModel, implied_marginal, implied_marginals, normal_marginal
from .numerics import PROB_CLAMP, SpdMatrix, clamp_probability, mvn_logpdf, mvt_logpdf, t_logpdf_std
from .vb.engine import FitOptions, evb_fit
from .vb.model import MixtureModel

log = logging.getLogger(__name__)

CT_FAMILIES = {"CT-MN": "MN", "CT-Mt": "Mt", "CT-MFA": "MFA", "CT-MtFA": "MtFA"}


def _as_matrix(data) -> np.ndarray:
    y = np.asarray(data, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    return y


def _check_finite(y, what="data"):
    bad = np.argwhere(~np.isfinite(y))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise DataError(f"non-finite {what} at row {i + 1}, column {j + 1}")


def to_u_space(data, marginals: Sequence[MarginalModel], delta: float = PROB_CLAMP) -> np.ndarray:
    """``u_ij = F_j(y_ij)`` clamped to ``[delta, 1 - delta]``."""
    y = _as_matrix(data)
    if y.shape[1] != len(marginals):
        raise DomainError(f"{y.shape[1]} columns but {len(marginals)} marginals")
    _check_finite(y)
    u = np.column_stack([F.cdf(y[:, j]) for j, F in enumerate(marginals)])
    return clamp_probability(u, delta)


def to_x_space(u, working: Sequence[MarginalModel]) -> np.ndarray:
    """``x_ij = H_j^-1(u_ij)`` column by column."""
    u = _as_matrix(u)
    if u.shape[1] != len(working):
        raise DomainError(f"{u.shape[1]} columns but {len(working)} working marginals")
    return np.column_stack([H.quantile(u[:, j]) for j, H in enumerate(working)])


def _marginal_sum(models, x) -> np.ndarray:
    return sum(m.logpdf(x[:, j]) for j, m in enumerate(models))


@dataclass
class CopulaTypeModel:
    """Marginals ``F``, working marginals ``H`` and joint mixture ``G``.

    ``iteration_log`` holds one row per fitting iteration with the training
    log-likelihood; the stored ``(H, G)`` pair is the best-scoring one.
    """

    family: str
    marginals: List[MarginalModel]
    working: List[MarginalModel]
    joint: MixtureModel
    iteration_log: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.family not in CT_FAMILIES:
            raise DomainError(f"unknown copula-type family {self.family!r}")
        d = self.joint.d
        if len(self.marginals) != d or len(self.working) != d:
            raise DomainError("marginals, working marginals and joint disagree on d")

    @property
    def d(self) -> int:
        return self.joint.d

    @property
    def best_loglik(self) -> float:
        return max(r["loglik"] for r in self.iteration_log) if self.iteration_log else math.nan

    def x_space(self, y) -> np.ndarray:
        return to_x_space(to_u_space(y, self.marginals), self.working)

    def logpdf(self, y):
        """log g(x) + sum_j [log f_j(y_j) - log h_j(x_j)]."""
        single = np.ndim(y) == 1
        y = _as_matrix(y)
        x = self.x_space(y)
        out = (self.joint.logpdf(x) + _marginal_sum(self.marginals, y)
               - _marginal_sum(self.working, x))
        return float(out[0]) if single else out

    def copula_logpdf_u(self, u):
        """Density of the fitted model on the unit cube (log c(u))."""
        x = to_x_space(u, self.working)
        return self.joint.logpdf(x) - _marginal_sum(self.working, x)

    def marginal_logpdf(self, j: int, yj):
        """log of g_j(x_j) / h_j(x_j) * f_j(y_j), the j-th marginal density."""
        yj = np.asarray(yj, dtype=float)
        F, H = self.marginals[j], self.working[j]
        xj = H.quantile(clamp_probability(F.cdf(yj)))
        gj = implied_marginal(self.joint, j)
        return gj.logpdf(xj) - H.logpdf(xj) + F.logpdf(yj)

    def exact_logpdf(self, y):
        """Exact copula variant: h_j replaced by the joint's own marginals g_j."""
        single = np.ndim(y) == 1
        y = _as_matrix(y)
        g = implied_marginals(self.joint)
        x = to_x_space(to_u_space(y, self.marginals), g)
        out = self.joint.logpdf(x) + _marginal_sum(self.marginals, y) - _marginal_sum(g, x)
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "marginals": [m.to_dict() for m in self.marginals],
            "working": [m.to_dict() for m in self.working],
            "joint": self.joint.to_dict(),
            "iteration_log": [dict(r) for r in self.iteration_log],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CopulaTypeModel":
        try:
            return cls(
                family=data["family"],
                marginals=[MarginalModel.from_dict(m) for m in data["marginals"]],
                working=[MarginalModel.from_dict(m) for m in data["working"]],
                joint=MixtureModel.from_dict(data["joint"]),
                iteration_log=[dict(r) for r in data.get("iteration_log", [])],
            )
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"malformed copula-type block: {exc}") from None


def exact_copula_logpdf(model: CopulaTypeModel, y):
    return model.exact_logpdf(y)


def ct_logpdf(model: CopulaTypeModel, y):
    return model.logpdf(y)


def ct_marginal_logpdf(model: CopulaTypeModel, j: int, yj):
    return model.marginal_logpdf(j, yj)


# ---------------------------------------------------------------------------
# iterative fitting

Start = Union[str, Sequence[MarginalModel]]


def iterative_fit(u, family: str, marginals: Sequence[MarginalModel], *,
                  start: Start = "normal", opts: Optional[FitOptions] = None,
                  marginal_loglik: float = 0.0, max_iter: int = 30,
                  patience: int = 1) -> CopulaTypeModel:
    """Alternate quantile transforms and joint fits until the likelihood stalls.

    Each iteration maps ``u`` to x-space through the current working
    marginals ``H``, fits the joint mixture ``G`` on it, scores the pair
    ``(H, G)`` by its training log-likelihood, then sets ``H`` to the
    marginals implied by ``G``. Stops after ``patience`` consecutive
    iterations without improvement or ``max_iter`` iterations, returning
    the best pair.

    Parameters
    ----------
    u : (n, d) array in (0, 1)
    family : one of ``CT-MN``, ``CT-Mt``, ``CT-MFA``, ``CT-MtFA``
    marginals : the fitted ``F_j``; stored on the result
    start : ``"normal"`` for standard normal ``H``, or explicit marginals
    marginal_loglik : ``sum_ij log f_j(y_ij)``, added to the logged
        likelihood so it is on the scale of the data
    """
    if family not in CT_FAMILIES:
        raise DomainError(f"unknown copula-type family {family!r}")
    u = _as_matrix(u)
    _check_finite(u, "probability")
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("u-data must lie strictly inside (0, 1)")
    d = u.shape[1]
    opts = opts or FitOptions()
    if isinstance(start, str):
        if start != "normal":
            raise DomainError(f"unknown start {start!r}")
        H = [normal_marginal() for _ in range(d)]
    else:
        H = list(start)
    best = None
    trace: List[dict] = []
    stale = 0
    for it in range(max_iter):
        try:
            x = to_x_space(u, H)
            G = evb_fit(x, CT_FAMILIES[family], opts).model
            ll = float(np.sum(G.logpdf(x) - _marginal_sum(H, x))) + marginal_loglik
        except CtmixError as exc:
            raise FitError(f"{family} iteration {it + 1} failed: {exc}", trace=trace) from exc
        if not math.isfinite(ll):
            raise FitError(f"{family} iteration {it + 1}: non-finite log-likelihood", trace=trace)
        trace.append({"iter": it + 1, "loglik": ll, "K": G.K})
        log.debug("%s iteration %d: loglik %.6f, K=%d", family, it + 1, ll, G.K)
        if best is None or ll > best[0]:
            best = (ll, H, G)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
        H = implied_marginals(G)
    _, H, G = best
    return CopulaTypeModel(family, list(marginals), H, G, trace)


def fit_copula_type(data, family: str, marginals: Sequence[MarginalModel], *,
                    start: Start = "implied", opts: Optional[FitOptions] = None,
                    max_iter: int = 30, patience: int = 1) -> CopulaTypeModel:
    """Copula-type fit on y-space data with given marginals.

    ``start="implied"`` takes the initial working marginals from a direct
    mixture fit of the same family on ``data``; ``"normal"`` uses Phi.
    """
    y = _as_matrix(data)
    _check_finite(y)
    opts = opts or FitOptions()
    u = to_u_space(y, marginals)
    if isinstance(start, str) and start == "implied":
        try:
            direct = evb_fit(y, CT_FAMILIES[family], opts).model
        except CtmixError as exc:
            raise FitError(f"initial {family} fit failed: {exc}") from exc
        start = implied_marginals(direct)
    mll = float(np.sum(_marginal_sum(marginals, y)))
    return iterative_fit(u, family, marginals, start=start, opts=opts, marginal_loglik=mll,
                         max_iter=max_iter, patience=patience)


# ---------------------------------------------------------------------------
# parametric copulas


def _correlation(S: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(S))
    R = S / np.outer(sd, sd)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def _t_scale_mle(x: np.ndarray, nu: float, tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
    """Zero-location multivariate t scale MLE by EM."""
    n, d = x.shape
    S = x.T @ x / n
    for _ in range(max_iter):
        L = np.linalg.cholesky(S)
        m = np.sum(np.linalg.solve(L, x.T) ** 2, axis=0)
        w = (nu + d) / (nu + m)
        S_new = (x * w[:, None]).T @ x / n
        if np.max(np.abs(S_new - S)) < tol * (1.0 + np.max(np.abs(S))):
            return S_new
        S = S_new
    return S


@dataclass
class ParametricCopulaModel:
    """Normal (``kind="normal"``) or t (``kind="t"``) copula with marginals."""

    kind: str
    corr: np.ndarray
    marginals: List[MarginalModel]
    nu: Optional[int] = None
    loglik: float = math.nan

    def __post_init__(self):
        if self.kind not in ("normal", "t"):
            raise DomainError(f"unknown copula kind {self.kind!r}")
        if self.kind == "t" and self.nu is None:
            raise DomainError("t copula needs nu")
        self.corr = np.asarray(self.corr, dtype=float)
        self._spd = SpdMatrix(self.corr, jitter=True)

    @property
    def d(self) -> int:
        return self.corr.shape[0]

    @property
    def estimator_id(self) -> str:
        return "NC" if self.kind == "normal" else "tC"

    def _quantile(self, u):
        return ndtri(u) if self.kind == "normal" else stdtrit(float(self.nu), u)

    def _std_logpdf(self, x):
        if self.kind == "normal":
            return -0.5 * (math.log(2 * math.pi) + x * x)
        return t_logpdf_std(x, float(self.nu))

    def copula_logpdf_u(self, u):
        x = self._quantile(clamp_probability(_as_matrix(u)))
        zero = np.zeros(self.d)
        if self.kind == "normal":
            joint = mvn_logpdf(x, zero, self._spd)
        else:
            joint = mvt_logpdf(x, zero, self._spd, float(self.nu))
        return np.atleast_1d(joint) - np.sum(self._std_logpdf(x), axis=1)

    def logpdf(self, y):
        single = np.ndim(y) == 1
        y = _as_matrix(y)
        u = to_u_space(y, self.marginals)
        out = self.copula_logpdf_u(u) + _marginal_sum(self.marginals, y)
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "corr": self.corr.tolist(),
               "marginals": [m.to_dict() for m in self.marginals], "loglik": self.loglik}
        if self.nu is not None:
            out["nu"] = int(self.nu)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParametricCopulaModel":
        try:
            return cls(data["kind"], np.asarray(data["corr"], dtype=float),
                       [MarginalModel.from_dict(m) for m in data["marginals"]],
                       data.get("nu"), float(data.get("loglik", math.nan)))
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"malformed parametric copula block: {exc}") from None


def fit_parametric_copula(u, kind: str, marginals: Sequence[MarginalModel], *,
                          lambda0: int = 100) -> ParametricCopulaModel:
    """Normal copula by projected covariance MLE; t copula by integer profile in nu."""
    u = clamp_probability(_as_matrix(u))
    if kind == "normal":
        x = ndtri(u)
        R = _correlation(x.T @ x / x.shape[0])
        m = ParametricCopulaModel("normal", R, list(marginals))
        m.loglik = float(np.sum(m.copula_logpdf_u(u)))
        return m
    if kind != "t":
        raise DomainError(f"unknown copula kind {kind!r}")
    best = None
    for nu in range(1, int(lambda0) + 1):
        x = stdtrit(float(nu), u)
        try:
            R = _correlation(_t_scale_mle(x, float(nu)))
            m = ParametricCopulaModel("t", R, list(marginals), nu)
            ll = float(np.sum(m.copula_logpdf_u(u)))
        except (np.linalg.LinAlgError, NumericError):
            continue
        if best is None or ll > best.loglik:
            m.loglik = ll
            best = m
    if best is None:
        raise FitError("t copula fit failed for every nu")
    return best
