"""Variational Bayes for mixtures of (t-)factor analyzers.

Model (per component j, observation i)::

    x_i | delta_i = j, z_ij, w_ij ~ N(mu_j + Lambda_j z_ij, (w_ij psi_j)^-1 I)
    z_ij | w_ij                   ~ N(0, w_ij^-1 I_{k_j})
    w_ij                          ~ Gamma(nu_j/2, nu_j/2)         (t only)
    Lambda_jl ~ N(0, tau_jl^-1 I),  tau_jl, psi_j ~ Gamma(a, b)
    mu_j ~ N(0, kappa0^-1 I),       pi ~ Dirichlet(alpha0)

Per-component factor counts ``k_j`` may differ and may be zero (a
spherical component). The normal version fixes ``w_ij = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp, xlogy

from ..errors import NumericError
from ..numerics import LOG_2PI, digamma, log_gamma
from .full import _elogpi, _gamma_entropy, _renormalize_rows, optimize_dof_general, per_value
from .priors import Priors


def initial_factor_count(d: int) -> int:
    """Largest identifiable factor count: floor((2d + 1 - sqrt(8d + 1)) / 2)."""
    return int(math.floor(0.5 * (2 * d + 1 - math.sqrt(8 * d + 1)) + 1e-12))


@dataclass
class FactorState:
    """Variational posterior for the MFA / MtFA families.

    Per component ``j``: ``lam[j]`` is the (d, k_j) matrix of loading means,
    ``s2lam[j]`` the isotropic loading variances, ``atau[j]``/``btau[j]`` the
    ARD gamma posteriors. Per observation: ``zmean[j]`` (n, k_j) factor-score
    means whose covariance is ``zcore[j] * zscale[:, j]``.
    """

    t: bool
    q: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    s2mu: np.ndarray
    lam: List[np.ndarray]
    s2lam: List[np.ndarray]
    atau: List[np.ndarray]
    btau: List[np.ndarray]
    apsi: np.ndarray
    bpsi: np.ndarray
    zmean: List[np.ndarray]
    zcore: List[np.ndarray]
    zscale: np.ndarray
    nu: Optional[np.ndarray] = None
    aw: Optional[np.ndarray] = None
    bw: Optional[np.ndarray] = None
    elbo: float = field(default=float("nan"))

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    @property
    def factors(self) -> List[int]:
        return [lj.shape[1] for lj in self.lam]

    @property
    def family(self) -> str:
        return "MtFA" if self.t else "MFA"

    def copy(self) -> "FactorState":
        def cp(a):
            return None if a is None else np.array(a, copy=True)

        def cpl(seq):
            return [np.array(a, copy=True) for a in seq]
        return replace(
            self, q=cp(self.q), alpha=cp(self.alpha), mu=cp(self.mu), s2mu=cp(self.s2mu),
            lam=cpl(self.lam), s2lam=cpl(self.s2lam), atau=cpl(self.atau), btau=cpl(self.btau),
            apsi=cp(self.apsi), bpsi=cp(self.bpsi), zmean=cpl(self.zmean), zcore=cpl(self.zcore),
            zscale=cp(self.zscale), nu=cp(self.nu), aw=cp(self.aw), bw=cp(self.bw))

    def expected_weights(self) -> np.ndarray:
        if not self.t:
            return np.ones_like(self.q)
        return self.aw / self.bw

    def main_parameters(self):
        """Quantities monitored for convergence: locations and loading means."""
        return self.mu, self.lam

    def remove_component(self, j: int) -> "FactorState":
        keep = [i for i in range(self.K) if i != j]
        s = self.copy()
        pick = lambda seq: [seq[i] for i in keep]
        return replace(
            s, q=_renormalize_rows(s.q[:, keep]), alpha=s.alpha[keep], mu=s.mu[keep],
            s2mu=s.s2mu[keep], lam=pick(s.lam), s2lam=pick(s.s2lam), atau=pick(s.atau),
            btau=pick(s.btau), apsi=s.apsi[keep], bpsi=s.bpsi[keep], zmean=pick(s.zmean),
            zcore=pick(s.zcore), zscale=s.zscale[:, keep],
            nu=None if s.nu is None else s.nu[keep],
            aw=None if s.aw is None else s.aw[:, keep],
            bw=None if s.bw is None else s.bw[:, keep], elbo=float("nan"))


# ---------------------------------------------------------------------------
# expectations


def expected_gram(lam, s2lam):
    """[Lambda' Lambda] = [Lambda]'[Lambda] + d diag(sigma^2_Lambda)."""
    d = lam.shape[0]
    return lam.T @ lam + d * np.diag(s2lam)


def _residual_energy(x, mu, s2mu, lam, s2lam, zmean, zcore, zscale):
    """c_ij = E||x_i - mu_j - Lambda_j z_ij||^2 under q."""
    d = x.shape[1]
    r = x - mu
    gram = expected_gram(lam, s2lam)
    c = (np.sum(r * r, axis=1) + d * s2mu
         - 2.0 * np.sum((r @ lam) * zmean, axis=1)
         + np.sum((zmean @ gram) * zmean, axis=1)
         + zscale * float(np.sum(gram * zcore)))
    return c


def _zz_trace(zmean, zcore, zscale):
    return np.sum(zmean * zmean, axis=1) + zscale * float(np.trace(zcore))


def _logdet_spd(a):
    if a.shape[0] == 0:
        return 0.0
    sign, val = np.linalg.slogdet(a)
    if sign <= 0:
        raise NumericError("factor-score covariance lost positive definiteness")
    return float(val)


def _local_terms(s: FactorState, x: np.ndarray, j: int, elogpi_j: float):
    """log rho_ij: expected complete-data log density plus the entropies of
    q(z_ij) and q(w_ij), all at the current state."""
    n, d = x.shape
    k = s.lam[j].shape[1]
    epsi = s.apsi[j] / s.bpsi[j]
    elogpsi = digamma(s.apsi[j]) - math.log(s.bpsi[j])
    c = _residual_energy(x, s.mu[j], s.s2mu[j], s.lam[j], s.s2lam[j],
                         s.zmean[j], s.zcore[j], s.zscale[:, j])
    zz = _zz_trace(s.zmean[j], s.zcore[j], s.zscale[:, j])
    h_z = (0.5 * k * (1.0 + LOG_2PI) + 0.5 * _logdet_spd(s.zcore[j])
           + 0.5 * k * np.log(s.zscale[:, j]))
    if s.t:
        aw, bw = s.aw[:, j], s.bw[:, j]
        ew = aw / bw
        psi_a = per_value(digamma, aw)
        elogw = psi_a - np.log(bw)
        nu = s.nu[j]
        prior_w = (0.5 * nu * math.log(0.5 * nu) - log_gamma(0.5 * nu)
                   + (0.5 * nu - 1.0) * elogw - 0.5 * nu * ew)
        h_w = _gamma_entropy(aw, bw, psi_a)
    else:
        ew, elogw, prior_w, h_w = 1.0, 0.0, 0.0, 0.0
    lik_x = 0.5 * d * elogw + 0.5 * d * elogpsi - 0.5 * d * LOG_2PI - 0.5 * ew * epsi * c
    lik_z = 0.5 * k * elogw - 0.5 * k * LOG_2PI - 0.5 * ew * zz
    return elogpi_j + lik_x + lik_z + prior_w + h_w + h_z


def _update_scores(s: FactorState, x: np.ndarray, j: int) -> None:
    """q(z_ij) = N(mu_x, Sigma_x), Sigma_x = [w]^-1 (I + [psi][Lambda'Lambda])^-1."""
    k = s.lam[j].shape[1]
    epsi = s.apsi[j] / s.bpsi[j]
    ew = s.expected_weights()[:, j]
    gram = expected_gram(s.lam[j], s.s2lam[j])
    core = np.linalg.inv(np.eye(k) + epsi * gram) if k else np.zeros((0, 0))
    core = 0.5 * (core + core.T)
    s.zcore[j] = core
    s.zscale[:, j] = 1.0 / ew
    s.zmean[j] = epsi * ((x - s.mu[j]) @ s.lam[j]) @ core


def _weight_rate_extra(s: FactorState, x: np.ndarray, j: int) -> np.ndarray:
    """b_w without the nu/2 part: [psi] c_ij / 2 + E[z'z] / 2."""
    epsi = s.apsi[j] / s.bpsi[j]
    c = _residual_energy(x, s.mu[j], s.s2mu[j], s.lam[j], s.s2lam[j],
                         s.zmean[j], s.zcore[j], s.zscale[:, j])
    return 0.5 * epsi * c + 0.5 * _zz_trace(s.zmean[j], s.zcore[j], s.zscale[:, j])


def _update_weights(s: FactorState, x: np.ndarray, j: int) -> None:
    if not s.t:
        return
    d = x.shape[1]
    k = s.lam[j].shape[1]
    s.aw[:, j] = 0.5 * s.nu[j] + 0.5 * k + 0.5 * d
    s.bw[:, j] = 0.5 * s.nu[j] + _weight_rate_extra(s, x, j)


def _update_globals(s: FactorState, x: np.ndarray, j: int, priors: Priors) -> None:
    n, d = x.shape
    k = s.lam[j].shape[1]
    qw = s.q[:, j] * s.expected_weights()[:, j]
    sum_qw = float(qw.sum())
    epsi = s.apsi[j] / s.bpsi[j]

    # q(mu_j)
    prec = priors.kappa0 + epsi * sum_qw
    s.s2mu[j] = 1.0 / prec
    s.mu[j] = epsi * (qw @ (x - s.zmean[j] @ s.lam[j].T)) / prec

    # q(Lambda_jl), one column at a time
    if k:
        zm = s.zmean[j]
        szz = s.zcore[j] * float(qw @ s.zscale[:, j]) + (zm * qw[:, None]).T @ zm
        szx = (zm * qw[:, None]).T @ (x - s.mu[j])
        lam = s.lam[j]
        etau = s.atau[j] / s.btau[j]
        for l in range(k):
            s2 = 1.0 / (etau[l] + epsi * szz[l, l])
            cross = lam @ szz[l] - lam[:, l] * szz[l, l]
            lam[:, l] = s2 * epsi * (szx[l] - cross)
            s.s2lam[j][l] = s2
        # q(tau_jl)
        s.atau[j] = np.full(k, priors.a + 0.5 * d)
        s.btau[j] = priors.b + 0.5 * (np.sum(lam * lam, axis=0) + d * s.s2lam[j])

    # q(psi_j)
    c = _residual_energy(x, s.mu[j], s.s2mu[j], s.lam[j], s.s2lam[j],
                         s.zmean[j], s.zcore[j], s.zscale[:, j])
    s.apsi[j] = priors.a + 0.5 * d * float(s.q[:, j].sum())
    s.bpsi[j] = priors.b + 0.5 * float(qw @ c)


def init_factor_state(x: np.ndarray, q0: np.ndarray, priors: Priors, *, t: bool,
                      factors=None, nu_init: float = 10.0) -> FactorState:
    """Moment-based start from hard or soft responsibilities ``q0``.

    Loadings come from the leading eigenvectors of each component's
    weighted covariance; the noise precision from the remaining spectrum.
    """
    n, d = x.shape
    K = q0.shape[1]
    if factors is None:
        factors = [initial_factor_count(d)] * K
    q0 = np.array(q0, dtype=float)
    mu = np.zeros((K, d))
    s2mu = np.ones(K)
    lam, s2lam, atau, btau = [], [], [], []
    apsi = np.empty(K)
    bpsi = np.empty(K)
    for j in range(K):
        k = int(min(factors[j], d - 1)) if d > 1 else 0
        wj = q0[:, j]
        nj = float(wj.sum())
        m = wj @ x / nj if nj > 0 else x.mean(axis=0)
        r = x - m
        cov = (r * wj[:, None]).T @ r / nj if nj > 1 else np.eye(d)
        cov = 0.5 * (cov + cov.T) + 1e-6 * np.eye(d)
        evals, evecs = np.linalg.eigh(cov)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        noise = float(np.mean(evals[k:])) if k < d else float(evals[-1])
        noise = max(noise, 1e-3)
        L = evecs[:, :k] * np.sqrt(np.maximum(evals[:k] - noise, 1e-3))
        psi = 1.0 / noise
        mu[j] = m
        s2mu[j] = 1.0 / (priors.kappa0 + psi * nj)
        lam.append(L)
        s2lam.append(np.full(k, 1.0 / (1.0 + psi * nj)))
        atau.append(np.full(k, priors.a + 0.5 * d))
        btau.append(priors.b + 0.5 * (np.sum(L * L, axis=0) + d * s2lam[-1]))
        apsi[j] = priors.a + 0.5 * d * nj
        bpsi[j] = apsi[j] / psi
    s = FactorState(
        t=t, q=q0, alpha=priors.alpha0 + q0.sum(axis=0), mu=mu, s2mu=s2mu,
        lam=lam, s2lam=s2lam, atau=atau, btau=btau, apsi=apsi, bpsi=bpsi,
        zmean=[np.zeros((n, L.shape[1])) for L in lam],
        zcore=[np.eye(L.shape[1]) for L in lam], zscale=np.ones((n, K)),
    )
    if t:
        nu = float(min(max(nu_init, 1.0), priors.lambda0))
        s.nu = np.full(K, nu)
        ks = np.array([L.shape[1] for L in lam], dtype=float)
        s.aw = np.broadcast_to(0.5 * nu + 0.5 * ks + 0.5 * d, (n, K)).copy()
        s.bw = s.aw.copy()
    for j in range(K):
        _update_scores(s, x, j)
    s.elbo = elbo_mtfa(s, x, priors)
    return s


def vb_sweep_mtfa(state: FactorState, x: np.ndarray, priors: Priors, *,
                  fit_dof: bool = True, with_elbo: bool = True) -> FactorState:
    """One coordinate-ascent sweep over every factor of the posterior.

    Order: q(z), q(w), q(delta), q(pi), q(mu), q(Lambda), q(tau), q(psi),
    then the integer dof (t family) followed by a refresh of q(w).
    """
    s = state.copy()
    n, d = x.shape
    elogpi = _elogpi(s.alpha)
    log_rho = np.empty((n, s.K))
    for j in range(s.K):
        _update_scores(s, x, j)
        _update_weights(s, x, j)
        log_rho[:, j] = _local_terms(s, x, j, elogpi[j])
    s.q = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))
    s.alpha = priors.alpha0 + s.q.sum(axis=0)
    for j in range(s.K):
        _update_globals(s, x, j, priors)
    if s.t:
        for j in range(s.K):
            k = s.lam[j].shape[1]
            if fit_dof:
                s.nu[j] = float(optimize_dof_general(
                    s.q[:, j], 0.5 * k + 0.5 * d, _weight_rate_extra(s, x, j), priors.lambda0))
            _update_weights(s, x, j)
    s.elbo = elbo_mtfa(s, x, priors) if with_elbo else float("nan")
    return s


def _gamma_expected_log_prior(a0, b0, a, b):
    # E_q[log Gamma(theta | a0, b0)] with q = Gamma(a, b)
    return a0 * math.log(b0) - log_gamma(a0) + (a0 - 1.0) * (digamma(a) - np.log(b)) - b0 * a / b


def elbo_mtfa(state: FactorState, x: np.ndarray, priors: Priors) -> float:
    """Evidence lower bound for the MFA / MtFA state."""
    n, d = x.shape
    s = state
    K = s.K
    elogpi = _elogpi(s.alpha)
    log_rho = np.column_stack([_local_terms(s, x, j, elogpi[j]) for j in range(K)])
    local = float(np.sum(s.q * log_rho) - np.sum(xlogy(s.q, s.q)))

    alpha0 = np.full(K, priors.alpha0)
    alpha = s.alpha
    total = local + float(log_gamma(alpha0.sum()) - np.sum(log_gamma(alpha0))
                          - log_gamma(alpha.sum()) + np.sum(log_gamma(alpha))
                          + np.sum((alpha0 - alpha) * elogpi))
    kappa0 = priors.kappa0
    for j in range(K):
        total += (0.5 * d * math.log(kappa0 * s.s2mu[j])
                  - 0.5 * kappa0 * (float(s.mu[j] @ s.mu[j]) + d * s.s2mu[j]) + 0.5 * d)
        k = s.lam[j].shape[1]
        if k:
            at, bt = s.atau[j], s.btau[j]
            etau = at / bt
            elogtau = digamma(at) - np.log(bt)
            sq = np.sum(s.lam[j] ** 2, axis=0) + d * s.s2lam[j]
            total += float(np.sum(0.5 * d * elogtau - 0.5 * etau * sq
                                  + 0.5 * d + 0.5 * d * np.log(s.s2lam[j])))
            total += float(np.sum(_gamma_expected_log_prior(priors.a, priors.b, at, bt)
                                  + _gamma_entropy(at, bt)))
        total += float(_gamma_expected_log_prior(priors.a, priors.b, s.apsi[j], s.bpsi[j])
                       + _gamma_entropy(s.apsi[j], s.bpsi[j]))
    if s.t:
        total -= K * math.log(priors.lambda0)
    if not math.isfinite(total):
        raise NumericError("evidence lower bound is not finite")
    return total


def prune_factors(state: FactorState, priors: Priors):
    """Drop loading columns whose posterior mean of 1/tau is below epsilon.

    Returns ``(new_state, n_removed)``. The posterior mean of 1/tau is
    ``b_tau / (a_tau - 1)`` and is only defined for ``a_tau > 1``.
    """
    s = state.copy()
    removed = 0
    for j in range(s.K):
        k = s.lam[j].shape[1]
        if not k:
            continue
        at, bt = s.atau[j], s.btau[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_mean = np.where(at > 1.0, bt / (at - 1.0), np.inf)
        keep = inv_mean >= priors.epsilon
        if keep.all():
            continue
        removed += int((~keep).sum())
        s.lam[j] = s.lam[j][:, keep]
        s.s2lam[j] = s.s2lam[j][keep]
        s.atau[j] = at[keep]
        s.btau[j] = bt[keep]
        s.zmean[j] = s.zmean[j][:, keep]
        s.zcore[j] = s.zcore[j][np.ix_(keep, keep)]
        if s.t:
            s.aw[:, j] = 0.5 * s.nu[j] + 0.5 * int(keep.sum()) + 0.5 * s.d
    if removed:
        s.elbo = float("nan")
    return s, removed
