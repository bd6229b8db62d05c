"""Convergence loop, component elimination (EVB) and the ``fit`` façade."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from ..errors import DataError, DomainError, FitError, NumericError
from ..io import StandardizationRecord, atomic_write_text, standardize
from .factor import (FactorState, init_factor_state, initial_factor_count, prune_factors,
                     vb_sweep_mtfa, elbo_mtfa)
from .full import elbo_mt, init_full_state, vb_sweep_mt
from .model import FAMILIES, MixtureModel
from .priors import Priors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    """Knobs of the VB fit.

    ``fixed_nu`` pins every component's dof (t families) and disables the
    grid step. ``factors`` overrides the starting factor count.
    """

    K_init: int = 5
    max_sweeps: int = 500
    tol: float = 1e-5
    seed: int = 0
    nu_init: float = 10.0
    fixed_nu: Optional[float] = None
    factors: Optional[int] = None
    standardize: bool = True
    trace: bool = False
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if int(self.K_init) != self.K_init or self.K_init < 1:
            raise DomainError("K_init must be a positive integer")
        if self.max_sweeps < 1 or not self.tol > 0:
            raise DomainError("max_sweeps must be >= 1 and tol > 0")

    def with_(self, **changes) -> "FitOptions":
        return replace(self, **changes)


@dataclass
class TraceRow:
    sweep: int
    elbo: float
    factors: Optional[List[int]]
    nu: Optional[List[float]]
    K: int


@dataclass
class FitResult:
    model: MixtureModel
    state: object
    trace: List[TraceRow]
    removals: int = 0


# ---------------------------------------------------------------------------
# helpers


def kmeans_responsibilities(x: np.ndarray, K: int, seed: int) -> np.ndarray:
    """Hard one-hot start from a single k-means++ run."""
    from sklearn.cluster import KMeans

    n = x.shape[0]
    K = max(1, min(K, n))
    if K == 1:
        return np.ones((n, 1))
    labels = KMeans(n_clusters=K, init="k-means++", n_init=1,
                    random_state=seed).fit_predict(x)
    q = np.zeros((n, K))
    q[np.arange(n), labels] = 1.0
    # k-means may leave a cluster empty on duplicated points
    keep = q.sum(axis=0) > 0
    return q[:, keep]


def _is_factor(family: str) -> bool:
    return family in ("MFA", "MtFA")


def _is_t(family: str) -> bool:
    return family in ("Mt", "MtFA")


def _sweep(state, x, priors, fit_dof, with_elbo):
    if isinstance(state, FactorState):
        return vb_sweep_mtfa(state, x, priors, fit_dof=fit_dof, with_elbo=with_elbo)
    return vb_sweep_mt(state, x, priors, fit_dof=fit_dof, with_elbo=with_elbo)


def _elbo(state, x, priors):
    if isinstance(state, FactorState):
        return elbo_mtfa(state, x, priors)
    return elbo_mt(state, x, priors)


def _param_change(old, new) -> float:
    (m0, s0), (m1, s1) = old.main_parameters(), new.main_parameters()
    delta = float(np.max(np.abs(m1 - m0))) if m0.size else 0.0
    if isinstance(s0, list):
        for a, b in zip(s0, s1):
            if a.size:
                delta = max(delta, float(np.max(np.abs(b - a))))
    else:
        delta = max(delta, float(np.max(np.abs(s1 - s0))))
    return delta


class _Runner:
    def __init__(self, x, family, opts: FitOptions):
        self.x = x
        self.family = family
        self.opts = opts
        self.priors = opts.priors
        self.fit_dof = _is_t(family) and opts.fixed_nu is None
        self.trace: List[TraceRow] = []
        self.sweeps = 0
        self.removals = 0

    def record(self, s):
        if not self.opts.trace:
            return
        self.trace.append(TraceRow(
            sweep=self.sweeps, elbo=float(s.elbo), K=s.K,
            factors=list(s.factors) if isinstance(s, FactorState) else None,
            nu=None if s.nu is None else [float(v) for v in s.nu]))

    def converge(self, s):
        """Sweep until the main parameters move less than ``tol``."""
        tracing = self.opts.trace
        for _ in range(self.opts.max_sweeps):
            new = _sweep(s, self.x, self.priors, self.fit_dof, tracing)
            self.sweeps += 1
            change = _param_change(s, new)
            s = new
            self.record(s)
            if change < self.opts.tol:
                break
        if not tracing:
            s.elbo = _elbo(s, self.x, self.priors)
        return s

    def eliminate(self, s):
        """EVB: drop the least occupied component while the bound improves."""
        while s.K > 1:
            j = int(np.argmin(s.q.sum(axis=0)))
            cand = self.converge(s.remove_component(j))
            if not cand.elbo > s.elbo:
                break
            log.debug("EVB removed component %d: K=%d, elbo %.6f -> %.6f",
                      j, cand.K, s.elbo, cand.elbo)
            self.removals += 1
            s = cand
        return s

    def run(self, s):
        s = self.converge(s)
        if not isinstance(s, FactorState):
            return self.eliminate(s)
        # factor families: prune factors, eliminate components, repeat
        best = s
        while True:
            cand, removed = prune_factors(best, self.priors)
            if removed:
                cand = self.converge(cand)
            cand = self.eliminate(cand)
            if not (removed or cand.K < best.K) or not cand.elbo > best.elbo:
                break
            best = cand
        return best


def state_to_model(state, family: str, record: StandardizationRecord) -> MixtureModel:
    """Point estimates from a VB posterior (posterior means of the main parameters)."""
    weights = state.alpha / state.alpha.sum()
    dof = None if state.nu is None else np.array(state.nu, dtype=float)
    if isinstance(state, FactorState):
        psi = state.apsi / state.bpsi
        d = state.d
        loadings = [np.array(L) for L in state.lam]
        scales = np.stack([L @ L.T + np.eye(d) / p for L, p in zip(loadings, psi)])
        return MixtureModel(family, weights, state.mu.copy(), scales, dof=dof,
                            loadings=loadings, psi=psi, standardization=record)
    scales = state.sigma / state.tau[:, None, None]
    return MixtureModel(family, weights, state.mu.copy(), scales, dof=dof,
                        standardization=record)


def initial_state(x: np.ndarray, family: str, opts: FitOptions):
    q0 = kmeans_responsibilities(x, opts.K_init, opts.seed)
    nu0 = opts.nu_init if opts.fixed_nu is None else opts.fixed_nu
    if _is_factor(family):
        k = initial_factor_count(x.shape[1]) if opts.factors is None else int(opts.factors)
        s = init_factor_state(x, q0, opts.priors, t=_is_t(family),
                              factors=[k] * q0.shape[1], nu_init=nu0)
    else:
        s = init_full_state(x, q0, opts.priors, t=_is_t(family), nu_init=nu0)
    if _is_t(family) and opts.fixed_nu is not None:
        s.nu = np.full(s.K, float(opts.fixed_nu))
    return s


def evb_fit(data, family: str, opts: Optional[FitOptions] = None, *,
            names: Optional[Sequence[str]] = None) -> FitResult:
    """Fit a mixture by variational Bayes with component elimination.

    Parameters
    ----------
    data : (n, d) array
    family : {"MN", "Mt", "MFA", "MtFA"}
    opts : FitOptions, optional

    Returns
    -------
    FitResult
        Model, final state, trace and the number of accepted removals.
    """
    opts = opts or FitOptions()
    if family not in FAMILIES:
        raise DomainError(f"unknown mixture family {family!r}")
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if not _is_factor(family) and n <= d:
        raise DataError(f"{family} needs n > d (n={n}, d={d}); use a factor family")
    if opts.standardize:
        z, record = standardize(x, names)
    else:
        z, record = x, StandardizationRecord.identity(d)
    runner = _Runner(z, family, opts)
    try:
        state = runner.run(initial_state(z, family, opts))
    except NumericError as exc:
        raise FitError(f"{family} fit failed: {exc}", trace=runner.trace) from exc
    if not np.all(np.isfinite(state.alpha)) or state.K < 1:
        raise FitError(f"{family} fit collapsed", trace=runner.trace)
    model = state_to_model(state, family, record)
    return FitResult(model, state, runner.trace, runner.removals)


def fit(data, family: str, opts: Optional[FitOptions] = None, **kw) -> MixtureModel:
    """Fitted mixture only; see :func:`evb_fit`."""
    return evb_fit(data, family, opts, **kw).model


def trace_to_csv(rows: Sequence[TraceRow]) -> str:
    """CSV text with columns sweep, elbo, K, k_1..k_K, nu_1..nu_K.

    Columns are sized for the largest K in the trace; later rows with fewer
    components leave the extra cells empty.
    """
    kmax = max((r.K for r in rows), default=0)
    head = ["sweep", "elbo", "K"] + [f"k_{i + 1}" for i in range(kmax)] + \
        [f"nu_{i + 1}" for i in range(kmax)]
    lines = [",".join(head)]
    for r in rows:
        ks = [str(v) for v in (r.factors or [])]
        nus = [repr(float(v)) for v in (r.nu or [])]
        cells = [str(r.sweep), repr(float(r.elbo)), str(r.K)]
        cells += ks + [""] * (kmax - len(ks)) + nus + [""] * (kmax - len(nus))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_trace(path, rows: Sequence[TraceRow]) -> None:
    atomic_write_text(path, trace_to_csv(rows))
