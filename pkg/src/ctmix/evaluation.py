"""Predictive scoring, the simulation generator and the comparison harness."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .copula import (CopulaTypeModel, fit_copula_type, fit_parametric_copula, to_u_space)
from .errors import CtmixError, DomainError, NumericError
from .io import atomic_write_text
from .marginals import (CANDIDATES, MarginalModel, fit_marginal_class, implied_marginals,
                        select_marginals, t_marginal, normal_marginal)
from .seeding import derive_seed, fold_indices
from .vb.engine import FitOptions, evb_fit
from .vb.model import MixtureModel
from .vb.priors import Priors

log = logging.getLogger(__name__)

ESTIMATORS = ("MN", "Mt", "MFA", "MtFA", "NC", "tC", "CT-MN", "CT-Mt", "CT-MFA", "CT-MtFA")
REPORT_HEADER = "estimator,mean_lpds,sd_lpds,mean_seconds,n,d,B,seed"


def parse_estimator(name: str) -> str:
    """Canonical estimator id from a case-insensitive name (``ct-mt`` -> ``CT-Mt``)."""
    table = {e.lower(): e for e in ESTIMATORS}
    try:
        return table[name.strip().lower()]
    except KeyError:
        raise DomainError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}") from None


# ---------------------------------------------------------------------------
# scores


def lpds(model, test) -> float:
    """Mean negative log density of ``model`` over the rows of ``test``."""
    y = np.asarray(test, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] == 0:
        raise DomainError("empty test set")
    lp = np.atleast_1d(model.logpdf(y))
    bad = np.flatnonzero(~np.isfinite(lp))
    if bad.size:
        raise NumericError(f"non-finite log density at test row {int(bad[0]) + 1}",
                           {"row": int(bad[0])})
    return float(-np.mean(lp))


# ---------------------------------------------------------------------------
# estimators

MarginalSpec = Union[None, Sequence[MarginalModel], Sequence[str]]


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator id plus its options.

    ``marginals`` fixes the marginal treatment for copula estimators: a
    list of fitted ``MarginalModel`` (used as is, e.g. the truth in
    simulations), a list of class names (refit on every training set), or
    ``None`` (classes chosen by CV on the data passed to ``cv_lpds``).
    """

    id: str
    K_init: int = 5
    priors: Priors = field(default_factory=Priors)
    candidates: tuple = CANDIDATES
    selection_folds: Optional[int] = None
    start: str = "implied"
    max_iter: int = 30
    marginals: MarginalSpec = None

    def __post_init__(self):
        object.__setattr__(self, "id", parse_estimator(self.id))
        if self.marginals is not None:
            object.__setattr__(self, "marginals", tuple(self.marginals))

    @property
    def needs_marginals(self) -> bool:
        return self.id in ("NC", "tC") or self.id.startswith("CT-")

    def fit_options(self, seed: int) -> FitOptions:
        return FitOptions(K_init=self.K_init, seed=seed, priors=self.priors)


def fit_marginals(spec: MarginalSpec, train: np.ndarray, seed: int) -> List[MarginalModel]:
    """Resolve a marginal spec on ``train``: fixed models or per-class refits."""
    d = train.shape[1]
    if spec is None:
        raise DomainError("marginal classes must be resolved before fitting")
    if len(spec) != d:
        raise DomainError(f"{len(spec)} marginal specs for {d} columns")
    if all(isinstance(m, MarginalModel) for m in spec):
        return list(spec)
    joints = {}
    out = []
    for j, kind in enumerate(spec):
        if isinstance(kind, MarginalModel):
            out.append(kind)
            continue
        joint = None
        if kind.startswith("implied"):
            if kind not in joints:
                from .marginals import fit_joint_for_implied
                joints[kind] = fit_joint_for_implied(train, kind, seed=derive_seed(seed, 7))
            joint = joints[kind]
        out.append(fit_marginal_class(kind, train, j, seed=derive_seed(seed, 8, j), joint=joint))
    return out


def fit_estimator(spec: EstimatorSpec, train, seed: int = 0, marginals: MarginalSpec = None):
    """Fit ``spec`` on ``train``; the result has a ``logpdf`` in data units."""
    y = np.asarray(train, dtype=float)
    marginals = spec.marginals if marginals is None else marginals
    opts = spec.fit_options(seed)
    if not spec.needs_marginals:
        return evb_fit(y, spec.id, opts).model
    if marginals is None:
        sel = select_marginals(y, spec.candidates, spec.selection_folds or 10,
                               derive_seed(seed, 9), refit=True)
        F = [s.model for s in sel]
    else:
        F = fit_marginals(marginals, y, seed)
    if spec.id in ("NC", "tC"):
        u = to_u_space(y, F)
        return fit_parametric_copula(u, "normal" if spec.id == "NC" else "t", F,
                                     lambda0=spec.priors.lambda0)
    return fit_copula_type(y, spec.id, F, start=spec.start, opts=opts, max_iter=spec.max_iter)


@dataclass
class ScoreReport:
    """LPDS of one estimator on one data set (holdout or cross-validated)."""

    estimator: str
    lpds: float
    n: int
    d: int
    B: int
    seed: int
    seconds: float
    fold_scores: List[float] = field(default_factory=list)
    marginal_classes: Optional[List[str]] = None
    failed: List[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failed)


def _class_names(spec: MarginalSpec):
    if spec is None:
        return None
    return [m if isinstance(m, str) else f"fixed:{m.kind}" for m in spec]


def select_marginal_classes(data, spec: EstimatorSpec, B: int, seed: int) -> List[str]:
    """Marginal classes chosen once on the full data, as used by :func:`cv_lpds`."""
    sel = select_marginals(data, spec.candidates, spec.selection_folds or B,
                           derive_seed(seed, 101), refit=False)
    return [s.chosen for s in sel]


def cv_lpds(data, spec: EstimatorSpec, B: int = 10, seed: int = 0, *,
            marginal_classes: Optional[Sequence[str]] = None) -> ScoreReport:
    """B-fold cross-validated LPDS.

    Marginal classes (when not fixed by ``spec`` or passed in
    ``marginal_classes``) are selected once on the full data with B-fold
    CV; classes and joint are then refit on every training split. A
    failing fold is flagged and scored as ``inf``.
    """
    y = np.asarray(data, dtype=float)
    n, d = y.shape
    if B < 2:
        raise DomainError("need at least two folds")
    folds = fold_indices(n, B, derive_seed(seed, 100))
    t0 = time.perf_counter()
    marg = spec.marginals
    if spec.needs_marginals and marg is None:
        marg = (list(marginal_classes) if marginal_classes is not None
                else select_marginal_classes(y, spec, B, seed))
    total = 0.0
    fold_scores, failed = [], []
    for b, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        try:
            model = fit_estimator(spec, y[train], derive_seed(seed, 102, b), marg)
            s = lpds(model, y[test])
        except CtmixError as exc:
            log.warning("%s fold %d failed: %s", spec.id, b + 1, exc)
            failed.append(f"fold {b + 1}: {exc}")
            s = math.inf
        fold_scores.append(s)
        total += s * test.size
    return ScoreReport(spec.id, total / n, n, d, B, seed, time.perf_counter() - t0,
                       fold_scores, _class_names(marg), failed)


def holdout_lpds(train, test, spec: EstimatorSpec, seed: int = 0) -> ScoreReport:
    """Fit on ``train`` and score on an independent ``test`` set."""
    y = np.asarray(train, dtype=float)
    t0 = time.perf_counter()
    failed = []
    try:
        model = fit_estimator(spec, y, seed)
        s = lpds(model, test)
    except CtmixError as exc:
        log.warning("%s failed: %s", spec.id, exc)
        failed.append(str(exc))
        s = math.inf
    return ScoreReport(spec.id, s, y.shape[0], y.shape[1], 0, seed, time.perf_counter() - t0,
                       [s], _class_names(spec.marginals), failed)


# ---------------------------------------------------------------------------
# simulation


def dgp_mixture(d: int, variant: str = "table") -> MixtureModel:
    """The two-component normal mixture generating the x-stage.

    ``table``: means -2 and +2 (all coordinates), scale matrices
    ``0.5^|i-j|`` and ``(-0.5)^|i-j|``. ``motivating`` (d = 2): means
    (2, 2) and (-2, -2) with correlations 0.6 and -0.6.
    """
    if d < 2:
        raise DomainError("the generator needs d >= 2")
    lag = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    if variant == "table":
        locs = np.stack([np.full(d, -2.0), np.full(d, 2.0)])
        scales = np.stack([0.5 ** lag, (-0.5) ** lag])
    elif variant == "motivating":
        if d != 2:
            raise DomainError("the motivating variant is two-dimensional")
        locs = np.array([[2.0, 2.0], [-2.0, -2.0]])
        scales = np.array([[[1.0, 0.6], [0.6, 1.0]], [[1.0, -0.6], [-0.6, 1.0]]])
    else:
        raise DomainError(f"unknown generator variant {variant!r}")
    return MixtureModel("MN", np.array([0.5, 0.5]), locs, scales)


# t with 5 dof scaled to unit variance: the second argument of t(0, 1, 5) is
# read as a variance, like the 3 in N(1, 3)
T5_UNIT_VARIANCE_SCALE = math.sqrt(3.0 / 5.0)


def dgp_marginals(d: int, variant: str = "table") -> List[MarginalModel]:
    """True y-space marginals.

    Every coordinate is a t with 5 dof, mean 0 and variance 1; in the
    motivating variant the first coordinate is N(1, 3) (variance 3).
    """
    F = [t_marginal(0.0, T5_UNIT_VARIANCE_SCALE, 5.0) for _ in range(d)]
    if variant == "motivating":
        F[0] = normal_marginal(1.0, math.sqrt(3.0))
    return F


def dgp_density(d: int, variant: str = "table") -> CopulaTypeModel:
    """The exact generating density as a copula model (H equal to the true G_j)."""
    G = dgp_mixture(d, variant)
    return CopulaTypeModel("CT-MN", dgp_marginals(d, variant), implied_marginals(G), G)


def simulate_dgp(d: int, n: int, seed: int, variant: str = "table", *,
                 return_stages: bool = False):
    """Draw ``n`` rows of the simulation design.

    x ~ two-component mixture, u_j = G_j(x_j) with the analytic implied
    marginals, y_j = F_j^-1(u_j). With ``return_stages`` returns
    ``(y, u, x)``.
    """
    if n < 1:
        raise DomainError("n must be positive")
    G = dgp_mixture(d, variant)
    rng = np.random.default_rng(seed)
    x = G.sample(n, rng)
    Gj = implied_marginals(G)
    u = to_u_space(x, Gj)
    F = dgp_marginals(d, variant)
    y = np.column_stack([F[j].quantile(u[:, j]) for j in range(d)])
    return (y, u, x) if return_stages else y


# ---------------------------------------------------------------------------
# comparisons


@dataclass
class ComparisonRow:
    estimator: str
    scores: List[float]
    seconds: List[float]
    n: int
    d: int
    B: int
    seed: int
    failed: int = 0

    @property
    def mean_lpds(self) -> float:
        return float(np.mean(self.scores))

    @property
    def sd_lpds(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0

    @property
    def mean_seconds(self) -> float:
        return float(np.mean(self.seconds))


def run_comparison(specs: Sequence[EstimatorSpec], *, data=None, test=None, B: int = 0,
                   seed: int = 0, reps: int = 1, simulate: Optional[Dict[str, int]] = None,
                   n_test: int = 1000, true_marginals: bool = True) -> List[ComparisonRow]:
    """Score every spec and collect one row per estimator.

    Three protocols: ``simulate={"d": .., "n": ..}`` draws a training and a
    test set per replication (true marginals are used for copula
    estimators unless ``true_marginals`` is False); ``data`` with ``B >= 2``
    runs B-fold CV per replication; ``data`` with ``test`` scores a holdout.
    """
    if not specs:
        raise DomainError("need at least one estimator")
    # CV marginal selection depends only on (data, candidates, folds, seed): share it
    chosen = {}
    rows = []
    for spec in specs:
        scores, secs, failed = [], [], 0
        n = d = 0
        for r in range(reps):
            rseed = derive_seed(seed, r)
            if simulate is not None:
                d, n = int(simulate["d"]), int(simulate["n"])
                train = simulate_dgp(d, n, derive_seed(rseed, 1))
                held = simulate_dgp(d, n_test, derive_seed(rseed, 2))
                s = spec
                if spec.needs_marginals and spec.marginals is None and true_marginals:
                    s = replace(spec, marginals=dgp_marginals(d))
                rep = holdout_lpds(train, held, s, derive_seed(rseed, 3))
            elif data is not None and test is not None:
                rep = holdout_lpds(data, test, spec, rseed)
            elif data is not None and B >= 2:
                classes = None
                if spec.needs_marginals and spec.marginals is None:
                    key = (r, spec.candidates, spec.selection_folds)
                    if key not in chosen:
                        chosen[key] = select_marginal_classes(data, spec, B, rseed)
                    classes = chosen[key]
                rep = cv_lpds(data, spec, B, rseed, marginal_classes=classes)
            else:
                raise DomainError("give simulate=..., data with test, or data with B >= 2")
            n, d = rep.n, rep.d
            scores.append(rep.lpds)
            secs.append(rep.seconds)
            failed += bool(rep.failed)
        rows.append(ComparisonRow(spec.id, scores, secs, n, d, B, seed, failed))
    return rows


def report_csv(rows: Sequence[ComparisonRow]) -> str:
    lines = [REPORT_HEADER]
    for r in rows:
        lines.append(",".join([r.estimator, repr(r.mean_lpds), repr(r.sd_lpds),
                               repr(r.mean_seconds), str(r.n), str(r.d), str(r.B), str(r.seed)]))
    return "\n".join(lines) + "\n"


def write_report(path, rows: Sequence[ComparisonRow]) -> None:
    atomic_write_text(path, report_csv(rows))
