"""Variational Bayes for mixtures of normals and of t with full scale matrices.

Model (per component j, observation i)::

    x_i | delta_i = j, w_ij  ~  N(mu_j, (w_ij T_j)^-1)
    w_ij                     ~  Gamma(nu_j / 2, nu_j / 2)        (t only)
    T_j ~ Wishart(tau0, Sigma0^-1),   mu_j | T_j ~ N(0, (kappa0 T_j)^-1)
    pi  ~ Dirichlet(alpha0)

The normal-mixture engine is the same code with ``w_ij = 1`` and no
q(w) block or degrees-of-freedom step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, xlogy

from ..errors import NumericError
from ..numerics import LOG_2PI, cholesky, digamma, log_gamma, log_multigamma
from .priors import Priors


@dataclass
class FullState:
    """Variational posterior for the MN / Mt families.

    ``aw``/``bw`` hold the gamma posteriors of the latent scale weights
    (t family only); ``sigma`` is the Wishart inverse-scale ``Sigma_j`` so
    that ``E[T_j] = tau_j Sigma_j^-1``.
    """

    t: bool
    q: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
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
    def family(self) -> str:
        return "Mt" if self.t else "MN"

    def copy(self) -> "FullState":
        def cp(a):
            return None if a is None else np.array(a, copy=True)
        return replace(self, q=cp(self.q), alpha=cp(self.alpha), kappa=cp(self.kappa),
                       mu=cp(self.mu), tau=cp(self.tau), sigma=cp(self.sigma),
                       nu=cp(self.nu), aw=cp(self.aw), bw=cp(self.bw))

    def expected_weights(self) -> np.ndarray:
        if not self.t:
            return np.ones_like(self.q)
        return self.aw / self.bw

    def main_parameters(self):
        """Quantities monitored for convergence: locations and E[T]^-1."""
        return self.mu, self.sigma / self.tau[:, None, None]

    def remove_component(self, j: int) -> "FullState":
        keep = np.arange(self.K) != j
        q = self.q[:, keep]
        q = _renormalize_rows(q)
        return FullState(
            t=self.t, q=q, alpha=self.alpha[keep], kappa=self.kappa[keep],
            mu=self.mu[keep], tau=self.tau[keep], sigma=self.sigma[keep],
            nu=None if self.nu is None else self.nu[keep],
            aw=None if self.aw is None else self.aw[:, keep],
            bw=None if self.bw is None else self.bw[:, keep],
        )


def _renormalize_rows(q):
    s = q.sum(axis=1, keepdims=True)
    out = np.where(s > 1e-300, q / np.where(s > 1e-300, s, 1.0), 1.0 / q.shape[1])
    return out


# ---------------------------------------------------------------------------
# expectations


def wishart_expected_logdet(tau, sigma):
    """[log|T|] = sum_h Psi((tau + 1 - h)/2) + d log 2 - log|Sigma|."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    sigma = np.asarray(sigma, dtype=float).reshape(tau.shape[0], *np.shape(sigma)[-2:])
    d = sigma.shape[-1]
    h = np.arange(1, d + 1)
    psi = digamma(0.5 * (tau[:, None] + 1.0 - h[None, :])).reshape(tau.shape[0], d)
    _, logdet = np.linalg.slogdet(sigma)
    return psi.sum(axis=1) + d * math.log(2.0) - logdet


def expected_weight(nu, d, z):
    """[w_ij] = (nu/2 + d/2) / (nu/2 + z_ij/2)."""
    return (0.5 * nu + 0.5 * d) / (0.5 * nu + 0.5 * z)


def _chol_all(sigma):
    out = np.empty_like(sigma)
    for j in range(sigma.shape[0]):
        out[j] = cholesky(sigma[j], jitter=True)
    return out


def expected_mahalanobis(state: FullState, x: np.ndarray, chol=None) -> np.ndarray:
    """z_ij = tau_j (x_i - mu_j)' Sigma_j^-1 (x_i - mu_j) + d / kappa_j."""
    if chol is None:
        chol = _chol_all(state.sigma)
    n, d = x.shape
    z = np.empty((n, state.K))
    for j in range(state.K):
        r = (x - state.mu[j]).T
        y = solve_triangular(chol[j], r, lower=True, check_finite=False)
        z[:, j] = state.tau[j] * np.sum(y * y, axis=0) + d / state.kappa[j]
    return z


def _elogdet_from_chol(tau, chol):
    d = chol.shape[-1]
    h = np.arange(1, d + 1)
    psi = digamma(0.5 * (tau[:, None] + 1.0 - h[None, :])).reshape(tau.shape[0], d)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return psi.sum(axis=1) + d * math.log(2.0) - logdet, logdet


def _elogpi(alpha):
    return digamma(alpha) - digamma(np.sum(alpha))


def per_value(fn, a):
    """``fn`` applied elementwise through the distinct values of ``a``.

    Gamma shapes of the weight posteriors are constant within a component,
    so this turns n*K special-function calls into K.
    """
    a = np.asarray(a, dtype=float)
    vals, inv = np.unique(a, return_inverse=True)
    return np.asarray(fn(vals)).reshape(-1)[inv].reshape(a.shape)


def _gamma_entropy(a, b, digamma_a=None):
    """Entropy of Gamma(a, rate b)."""
    if digamma_a is None:
        digamma_a = digamma(a)
    return a - np.log(b) + per_value(log_gamma, a) + (1.0 - a) * digamma_a


def _log_rho(state: FullState, x, z, elogT, elogpi):
    d = x.shape[1]
    base = elogpi[None, :] + 0.5 * elogT[None, :] - 0.5 * d * LOG_2PI
    if not state.t:
        return base - 0.5 * z
    nu = state.nu[None, :]
    aw, bw = state.aw, state.bw
    ew = aw / bw
    psi_a = per_value(digamma, aw)
    elogw = psi_a - np.log(bw)
    lik = 0.5 * d * elogw - 0.5 * ew * z
    prior_w = (0.5 * nu * np.log(0.5 * nu) - log_gamma(0.5 * nu)
               + (0.5 * nu - 1.0) * elogw - 0.5 * nu * ew)
    return base + lik + prior_w + _gamma_entropy(aw, bw, psi_a)


# ---------------------------------------------------------------------------
# coordinate updates


def update_weights_posterior(state: FullState, z: np.ndarray) -> None:
    """q(w_ij) = Gamma(nu_j/2 + d/2, nu_j/2 + z_ij/2), in place."""
    if not state.t:
        return
    d = state.d
    nu = state.nu[None, :]
    state.aw = np.broadcast_to(0.5 * nu + 0.5 * d, z.shape).copy()
    state.bw = 0.5 * nu + 0.5 * z


def update_normal_wishart(state: FullState, x: np.ndarray, priors: Priors) -> None:
    """Conjugate Normal-Wishart update for every component, in place."""
    n, d = x.shape
    tau0 = priors.wishart_dof(d)
    sigma0 = priors.scale_matrix(d)
    kappa0 = priors.kappa0
    qw = state.q * state.expected_weights()
    nw = qw.sum(axis=0)
    state.kappa = kappa0 + nw
    state.mu = (qw.T @ x) / state.kappa[:, None]
    state.tau = tau0 + state.q.sum(axis=0)
    sigma = np.empty((state.K, d, d))
    for j in range(state.K):
        r = x - state.mu[j]
        s = sigma0 + kappa0 * np.outer(state.mu[j], state.mu[j]) + (r * qw[:, j, None]).T @ r
        sigma[j] = 0.5 * (s + s.T)
    state.sigma = sigma


def dof_objective(q_col, shape_extra, rate_extra, nu):
    """Sum_i q_i [nu/2 log(nu/2) - (nu/2 + A) log(nu/2 + B_i)
    + log G(nu/2 + A) - log G(nu/2)] for each candidate ``nu``.

    For the t mixture ``A = d/2`` and ``B_i = z_ij/2``; for the t-factor
    mixture ``A = k_j/2 + d/2`` and ``B_i`` is ``b_w`` without its nu/2 part.
    """
    h = 0.5 * np.atleast_1d(np.asarray(nu, dtype=float))
    q_col = np.asarray(q_col, dtype=float)
    B = np.asarray(rate_extra, dtype=float)
    A = float(shape_extra)
    mass = float(q_col.sum())
    per_obs = np.log(h[:, None] + B[None, :]) @ q_col
    return mass * (h * np.log(h) + log_gamma(h + A) - log_gamma(h)) - (h + A) * per_obs


def optimize_dof_general(q_col, shape_extra, rate_extra, lambda0: int) -> int:
    grid = np.arange(1, int(lambda0) + 1, dtype=float)
    vals = dof_objective(q_col, shape_extra, rate_extra, grid)
    return int(grid[int(np.argmax(vals))])  # argmax returns the first (smallest) maximizer


def optimize_dof(q_col, z, d: int, lambda0: int) -> int:
    """Integer degrees of freedom in 1..lambda0 maximizing the bound term."""
    return optimize_dof_general(q_col, 0.5 * d, 0.5 * np.asarray(z, dtype=float), lambda0)


# ---------------------------------------------------------------------------
# initialisation, sweep, bound


def init_full_state(x: np.ndarray, q0: np.ndarray, priors: Priors, *, t: bool,
                    nu_init: float = 10.0) -> FullState:
    n, d = x.shape
    K = q0.shape[1]
    state = FullState(
        t=t, q=np.array(q0, dtype=float), alpha=priors.alpha0 + q0.sum(axis=0),
        kappa=np.ones(K), mu=np.zeros((K, d)), tau=np.full(K, float(d)),
        sigma=np.broadcast_to(np.eye(d), (K, d, d)).copy(),
    )
    if t:
        nu = float(min(max(nu_init, 1.0), priors.lambda0))
        state.nu = np.full(K, nu)
        state.aw = np.full((n, K), 0.5 * nu + 0.5 * d)
        state.bw = state.aw.copy()  # E[w] = 1 to start
    update_normal_wishart(state, x, priors)
    state.alpha = priors.alpha0 + state.q.sum(axis=0)
    if t:
        update_weights_posterior(state, expected_mahalanobis(state, x))
    state.elbo = elbo_mt(state, x, priors)
    return state


def vb_sweep_mt(state: FullState, x: np.ndarray, priors: Priors, *,
                fit_dof: bool = True, with_elbo: bool = True) -> FullState:
    """One coordinate-ascent sweep: q(w), q(delta), q(pi), q(mu, T), nu.

    Returns a new state; the input is not modified.
    """
    s = state.copy()
    chol = _chol_all(s.sigma)
    z = expected_mahalanobis(s, x, chol)
    elogT, _ = _elogdet_from_chol(s.tau, chol)
    update_weights_posterior(s, z)
    log_rho = _log_rho(s, x, z, elogT, _elogpi(s.alpha))
    s.q = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))
    s.alpha = priors.alpha0 + s.q.sum(axis=0)
    update_normal_wishart(s, x, priors)
    if s.t:
        z = expected_mahalanobis(s, x)
        if fit_dof:
            s.nu = np.array([float(optimize_dof(s.q[:, j], z[:, j], s.d, priors.lambda0))
                             for j in range(s.K)])
        update_weights_posterior(s, z)
    s.elbo = elbo_mt(s, x, priors) if with_elbo else float("nan")
    return s


def elbo_mt(state: FullState, x: np.ndarray, priors: Priors) -> float:
    """Evidence lower bound of the current state (MN or Mt).

    Sum of E_q[log p] - E_q[log q] over the assignment/weight block, the
    Dirichlet block and the Normal-Wishart block, plus the uniform
    log-prior -log(lambda0) of each component's dof in the t family.
    """
    n, d = x.shape
    K = state.K
    chol = _chol_all(state.sigma)
    z = expected_mahalanobis(state, x, chol)
    elogT, logdet_sigma = _elogdet_from_chol(state.tau, chol)
    elogpi = _elogpi(state.alpha)
    log_rho = _log_rho(state, x, z, elogT, elogpi)
    q = state.q
    local = float(np.sum(q * log_rho) - np.sum(xlogy(q, q)))

    alpha0 = np.full(K, priors.alpha0)
    alpha = state.alpha
    dirichlet = (log_gamma(alpha0.sum()) - np.sum(log_gamma(alpha0))
                 - log_gamma(alpha.sum()) + np.sum(log_gamma(alpha))
                 + np.sum((alpha0 - alpha) * elogpi))

    tau0 = priors.wishart_dof(d)
    sigma0 = priors.scale_matrix(d)
    logdet_sigma0 = float(np.linalg.slogdet(sigma0)[1])
    kappa0 = priors.kappa0
    nw = 0.0
    for j in range(K):
        tau, kappa, mu = state.tau[j], state.kappa[j], state.mu[j]
        y = solve_triangular(chol[j], mu, lower=True, check_finite=False)
        quad = tau * float(y @ y) + d / kappa
        nw += 0.5 * d * math.log(kappa0 / kappa) - 0.5 * kappa0 * quad + 0.5 * d
        # trace(Sigma0 E[T]) = tau * trace(Sigma0 Sigma^-1)
        inv_l = solve_triangular(chol[j], np.eye(d), lower=True, check_finite=False)
        tr = tau * float(np.sum(inv_l * (inv_l @ sigma0)))
        e_log_p = (0.5 * tau0 * logdet_sigma0 - 0.5 * tau0 * d * math.log(2.0)
                   - log_multigamma(0.5 * tau0, d)
                   + 0.5 * (tau0 - d - 1.0) * elogT[j] - 0.5 * tr)
        e_log_q = (0.5 * tau * logdet_sigma[j] - 0.5 * tau * d * math.log(2.0)
                   - log_multigamma(0.5 * tau, d)
                   + 0.5 * (tau - d - 1.0) * elogT[j] - 0.5 * tau * d)
        nw += e_log_p - e_log_q

    dof_prior = -K * math.log(priors.lambda0) if state.t else 0.0
    value = local + float(dirichlet) + nw + dof_prior
    if not math.isfinite(value):
        raise NumericError("evidence lower bound is not finite")
    return value
